import numpy as np
import pytest

from pathscan.features import SyntheticFeatureProvider
from pathscan.synth import ReaderProfile, gen_wsi, simulate_reader
from pathscan.trajectory import SimplifyParams, simplify


def make_corpus(
    n_wsis: int,
    n_readers: int,
    n_samples: int = 120,
    seed: int = 11,
    grid: int = 24,
    drill_bias: float = 0.7,
    dim: int = 16,
    base_grid: int = 8,
):
    """Seeded grade maps, simplified scanpaths, and a feature provider."""
    profile = ReaderProfile(drill_bias=drill_bias)
    maps = {}
    scanpaths = []
    for w in range(n_wsis):
        wsi_id = f"wsi_{w:03d}"
        gm = gen_wsi(seed + 1000 * w, grid, grid)
        maps[wsi_id] = gm
        for r in range(n_readers):
            traj = simulate_reader(
                gm, profile, seed + 1000 * w + r + 1, n_samples,
                wsi_id=wsi_id, reader_id=f"reader_{r:02d}",
            )
            scanpaths.append(simplify(traj, SimplifyParams(wsi_width=gm.width_px)))
    provider = SyntheticFeatureProvider(maps, dim=dim, base_grid=base_grid, seed=seed)
    return maps, scanpaths, provider


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(n_wsis=2, n_readers=2, n_samples=80, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
