import numpy as np
import pytest
import torch

from crosscoherence.datasets.synthetic import SyntheticConfig, generate_synthetic
from crosscoherence.encoders.pointnet import EncoderConfig, SetAbstractionConfig
from crosscoherence.geometry import ColoredPointCloud


def tiny_encoder_config(n_points=64, widths=8):
    return EncoderConfig(
        n_points=n_points,
        stages=(SetAbstractionConfig(16, 0.4, 8, (widths, widths)),
                SetAbstractionConfig(8, 0.8, 8, (widths, widths))),
        global_widths=(widths, widths),
    )


def random_cloud(rng, n=64, shape_id=None):
    pts = rng.normal(size=(n, 3))
    pts /= np.abs(pts).max()
    return ColoredPointCloud(pts, rng.random((n, 3)), shape_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 chairs + 24 tables with 256 points each."""
    out = tmp_path_factory.mktemp("synthetic")
    manifest = generate_synthetic(SyntheticConfig(n_chairs=24, n_tables=24, n_points=256, seed=3), out)
    return manifest


def tiny_model(texts, n_points=64, widths=8, d_model=8, dtype=torch.float32, freeze_encoder=True,
               shape_positions=False):
    """Small CrossCoherence model with a builtin text encoder over ``texts``."""
    from crosscoherence.attention import AttentionConfig
    from crosscoherence.encoders.pointnet import PointNetEncoder
    from crosscoherence.encoders.text import BuiltinTextEncoder, Vocabulary
    from crosscoherence.metric import CrossCoherence, ScorerConfig

    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        enc = PointNetEncoder(tiny_encoder_config(n_points, widths))
        text = BuiltinTextEncoder(Vocabulary.build(texts), d_text=d_model, heads=2, max_len=16)
        cfg = ScorerConfig(AttentionConfig(d_model=d_model, heads=2), head_widths=(d_model, d_model),
                           freeze_encoder=freeze_encoder, shape_positions=shape_positions)
        return CrossCoherence(enc, text, cfg)
    finally:
        torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when != "call" and status != "error":
                continue
            props = dict(rep.user_properties)
            if "criterion" not in props:
                continue
            lines.append((props["criterion"], "PASS" if status == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {verdict}  {detail}")
