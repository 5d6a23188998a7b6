import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mvp.data import DatasetManifest, SyntheticSpec, synth_images  # noqa: E402
from mvp.vit import ViTConfig, init_backbone  # noqa: E402

# Lines collected by test_acceptance.py, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_cfg():
    return ViTConfig(image_height=8, image_width=8, patch_height=4, patch_width=4,
                     embed_dim=8, num_layers=2, num_heads=2)


@pytest.fixture
def toy_weights(toy_cfg):
    return init_backbone(toy_cfg, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def synth_source():
    imgs, labs = synth_images(SyntheticSpec(n_classes=8, samples_per_class=20, seed=0))
    return DatasetManifest("synthetic-source", [f"c{i}" for i in range(8)], imgs, labs)


@pytest.fixture(scope="session")
def synth_target():
    imgs, labs = synth_images(SyntheticSpec(n_classes=8, samples_per_class=20, seed=100))
    return DatasetManifest("synthetic-target", [f"c{i}" for i in range(8)], imgs, labs)
