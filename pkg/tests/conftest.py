import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lepcnn.fixedpoint import FpParams  # noqa: E402
from lepcnn.model import NetworkSpec, random_params  # noqa: E402
from lepcnn.tensor import ConvSpec, FcSpec, PoolSpec, ReluSpec  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = Path(__file__).parent / "golden"

# wide enough for several un-rescaled layers of small integers
TOY_FP = FpParams(gamma=48, lam=180, scale_exponent=0, weight_bits=4)


def toy_net(fp=TOY_FP):
    return NetworkSpec((8, 8, 2), [
        ConvSpec(8, 2, 3, 4, 1, 1), ReluSpec(), PoolSpec("max", 2, 2),
        ConvSpec(4, 4, 2, 3, 2, 0), ReluSpec(),
        FcSpec(12, 5),
    ], fp)


@pytest.fixture
def toy():
    net = toy_net()
    params = random_params(net, np.random.default_rng(11))
    return net, params


@pytest.fixture
def toy_input():
    rng = np.random.default_rng(12)
    return rng.integers(-100, 101, size=(8, 8, 2)).astype(object)
