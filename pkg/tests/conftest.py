import csv
from pathlib import Path

import pytest
import torch

from nullbus.config import ModelConfig
from nullbus.data import load_sample, synth_pool

torch.set_num_threads(max(1, torch.get_num_threads()))

# Reference pool composition: (name, size, benign, malignant, has metadata).
# BUSI's class split (431 + 209 = 640) disagrees with its size (630), so the
# distribution columns total 2767 while the sizes total 2757.
REFERENCE_POOL = (("BLU", 252, 154, 98, True), ("BUSI", 630, 431, 209, False), ("BUSBRA", 1875, 1268, 607, True))


def write_fixture_manifest(path: Path, name: str, benign: int, malignant: int, prompted: bool) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "image_path", "mask_path", "class_label", "global_prompt", "local_prompt", "source"])
        for i in range(benign + malignant):
            label = "benign" if i < benign else "malignant"
            g = f"{label} lesion" if prompted else ""
            l = "hypoechoic mass" if prompted else ""
            w.writerow([f"{name}_{i:04d}", f"img/{name}_{i}.png", f"mask/{name}_{i}.png", label, g, l, name])
    return path


@pytest.fixture(scope="session")
def reference_manifests(tmp_path_factory):
    """Row counts follow the Size column; malignant counts follow Distribution, benign fills the rest."""
    root = tmp_path_factory.mktemp("reference")
    return [write_fixture_manifest(root / f"{n}.csv", n, size - m, m, meta) for n, size, b, m, meta in REFERENCE_POOL]


@pytest.fixture(scope="session")
def reference_class_manifests(tmp_path_factory):
    """Class counts follow the Distribution column."""
    root = tmp_path_factory.mktemp("reference_classes")
    return [write_fixture_manifest(root / f"{n}.csv", n, b, m, meta) for n, size, b, m, meta in REFERENCE_POOL]


@pytest.fixture(scope="session")
def small_pool(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return synth_pool(20, seed=7, prompt_fraction=0.5, out_dir=root)


@pytest.fixture(scope="session")
def small_samples(small_pool):
    return [load_sample(r, 96) for r in small_pool.records]


@pytest.fixture
def desk_config():
    return ModelConfig()


def randomize_modulation(model, scale=0.5, seed=0):
    """Give every zero-initialized modulation head nonzero last-layer weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if (".gamma.2." in name or ".beta.2." in name) and p.requires_grad:
                p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


# -- acceptance reporting ---------------------------------------------------

_acceptance_lines = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    status = "PASS" if report.passed else "FAIL"
    _acceptance_lines.append(f"[{status}] {report.nodeid.split('::', 1)[1]}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
