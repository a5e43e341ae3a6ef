import numpy as np
import pytest
import torch
from torch import nn

from rankcount.encoders import EncoderConfig
from rankcount.ranking import RankDecoder, RankModel


class MeanIntensityEncoder(nn.Module):
    """1-dim feature: mean pixel value times ``scale``."""

    def __init__(self, scale=255.0):
        super().__init__()
        self.scale = scale
        # one parameter so digest checks have something to hash
        self.anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return (x.mean(dim=(1, 2, 3)) * self.scale).unsqueeze(1) + 0.0 * self.anchor


def mean_intensity_model(size=(8, 8), scale=255.0) -> RankModel:
    cfg = EncoderConfig(architecture="toy_cnn", feature_dim=1, input_size=size)
    return RankModel(MeanIntensityEncoder(scale), RankDecoder(np.ones(1)), cfg)


def constant_images(levels, size=(8, 8)) -> np.ndarray:
    """(N, H, W, 3) images whose every pixel equals ``levels[i] / 255``."""
    v = (np.asarray(levels, dtype=np.float32) / 255.0)[:, None, None, None]
    return np.broadcast_to(v, (len(levels),) + tuple(size) + (3,)).copy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fake_generator(source, prompt):
    """Stand-in external generator: darkens the source, or renders a flat
    image for text-only prompts."""
    from rankcount.synth import RenderedImage

    if source is None:
        return RenderedImage(np.full((32, 32, 3), 0.5, dtype=np.float32), f"gen{prompt.seed}")
    return RenderedImage(source.pixels * 0.5, f"{source.source_id}_gen")


# acceptance results, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
