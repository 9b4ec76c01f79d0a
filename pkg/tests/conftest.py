import numpy as np
import pytest
import torch

from csd import arch, embedding


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return arch.build_backbone(16, 2, 2, seed=0)


@pytest.fixture(scope="session")
def toy_phi():
    return embedding.toy_extractor()


@pytest.fixture(scope="session")
def toy_phi64():
    return embedding.toy_extractor(dtype=torch.float64)


def conv_params(c_in, c_out, k=3):
    return c_out * c_in * k * k + c_out


def edsr_param_oracle(width, n_blocks, scale, r=1.0):
    """Per-layer arithmetic, independent of the module tree."""
    import math

    c = max(1, math.ceil(r * width - 1e-9))
    stages = [2, 2] if scale == 4 else [scale]
    total = conv_params(3, c)  # head
    total += n_blocks * 2 * conv_params(c, c)
    total += conv_params(c, c)  # conv after the body
    total += sum(conv_params(c, c * f * f) for f in stages)
    total += conv_params(c, 3)  # output conv
    return total
