import os
from pathlib import Path

import pytest

from fedsparse.nn import Conv2D, Dense, Flatten, MaxPool2D, NetworkTopology, ReLU

# Small topologies for gradient checks; every one exercises a different layer mix.
SMALL_TOPOLOGIES = {
    "dense": NetworkTopology((6,), (Dense(6, 5), ReLU(), Dense(5, 3))),
    "deep-dense": NetworkTopology((4,), (Dense(4, 6), ReLU(), Dense(6, 5), ReLU(), Dense(5, 3))),
    "conv": NetworkTopology(
        (2, 6, 6),
        (Conv2D(2, 3, 3, padding=1), ReLU(), MaxPool2D(2), Flatten(), Dense(27, 4)),
    ),
    "conv-stride": NetworkTopology(
        (1, 7, 7),
        (Conv2D(1, 2, 3, stride=2), ReLU(), Conv2D(2, 3, 2), Flatten(), Dense(12, 3)),
    ),
}


@pytest.fixture(params=sorted(SMALL_TOPOLOGIES))
def small_topology(request):
    return SMALL_TOPOLOGIES[request.param]


DATA_DIR = Path(__file__).parent / "data" / "mnist10k"
IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find_idx(d: Path) -> list[Path] | None:
    found = []
    for name in IDX_NAMES:
        hit = next((c for c in (d / name, d / (name + ".gz")) if c.exists()), None)
        if hit is None:
            return None
        found.append(hit)
    return found


@pytest.fixture(scope="session")
def mnist_idx():
    """MNIST IDX paths: full MNIST from $FEDSPARSE_MNIST_DIR if set, else the vendored 9k/1k subset."""
    env = os.environ.get("FEDSPARSE_MNIST_DIR")
    if env:
        paths = _find_idx(Path(env))
        if paths is None:
            pytest.fail(f"FEDSPARSE_MNIST_DIR={env} lacks one of {', '.join(IDX_NAMES)}")
        return {"paths": paths, "full": True}
    paths = _find_idx(DATA_DIR)
    if paths is None:
        pytest.fail(f"vendored MNIST subset missing from {DATA_DIR}")
    return {"paths": paths, "full": False}
