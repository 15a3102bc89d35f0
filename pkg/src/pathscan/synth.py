"""Synthetic WSI grade maps and simulated reader trajectories.

Everything here is seed-deterministic plumbing that lets the training,
inference and metric pipelines run end-to-end without real slides.  The
default reader profile is shaped so that corpus-level magnification
statistics show the expected pattern: zooming in dominates at low
magnifications, zooming out at high ones, with 10X the most-used level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .trajectory import MAG_FACTORS, MagLevel, RawTrajectory, ViewportSample

# grade codes in the grid array
BACKGROUND, BENIGN, G3, G4, G5 = range(5)
GRADE_NAMES = ("Background", "Benign", "G3", "G4", "G5")
GRADE_CHARS = ".B345"


@dataclass
class GradeMap:
    grid: np.ndarray  # (H_g, W_g) int8 codes 0..4
    cell_size: float  # level-0 pixels per cell side

    def __post_init__(self):
        h, w = self.grid.shape
        if h < 8 or w < 8:
            raise InvalidConfigError("grade map must be at least 8x8 cells")

    @property
    def height_px(self) -> float:
        return self.grid.shape[0] * self.cell_size

    @property
    def width_px(self) -> float:
        return self.grid.shape[1] * self.cell_size

    def label_at(self, x: float, y: float) -> int:
        r = min(int(y // self.cell_size), self.grid.shape[0] - 1)
        c = min(int(x // self.cell_size), self.grid.shape[1] - 1)
        if x < 0 or y < 0 or x >= self.width_px or y >= self.height_px:
            raise InvalidInputError(f"coordinate outside WSI: ({x}, {y})")
        return int(self.grid[r, c])

    def to_text(self) -> str:
        return "\n".join("".join(GRADE_CHARS[v] for v in row) for row in self.grid)

    @classmethod
    def from_text(cls, text: str, cell_size: float) -> "GradeMap":
        rows = [line for line in text.splitlines() if line]
        grid = np.array(
            [[GRADE_CHARS.index(ch) for ch in row] for row in rows], dtype=np.int8
        )
        return cls(grid, cell_size)


DEFAULT_GRADE_MIX = {"Benign": 0.5, "G3": 0.2, "G4": 0.2, "G5": 0.1}

# rows: current level 1X..40X, cols: (decrease, stay, increase)
DEFAULT_TRANSITION_PRIOR = np.array(
    [
        [0.00, 0.55, 0.45],  # 1X: can only stay or zoom in
        [0.10, 0.55, 0.35],
        [0.10, 0.55, 0.35],
        [0.20, 0.65, 0.15],  # 10X: stickiest level
        [0.25, 0.65, 0.10],
        [0.40, 0.60, 0.00],  # 40X: can only stay or zoom out
    ]
)


@dataclass
class ReaderProfile:
    explore_fraction: float = 0.3
    drill_bias: float = 0.7
    mag_transition_prior: np.ndarray = field(
        default_factory=lambda: DEFAULT_TRANSITION_PRIOR.copy()
    )
    noise_sigma: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.mag_transition_prior, dtype=float)
        if p.shape != (6, 3):
            raise InvalidConfigError("mag_transition_prior must be 6x3")
        if not np.allclose(p.sum(axis=1), 1.0):
            raise InvalidConfigError("mag_transition_prior rows must sum to 1")
        if p[0, 0] != 0.0 or p[5, 2] != 0.0:
            raise InvalidConfigError("impossible boundary moves must have weight 0")
        self.mag_transition_prior = p


def gen_wsi(
    seed: int,
    h_g: int = 32,
    w_g: int = 32,
    grade_mix: dict[str, float] | None = None,
    tissue_fraction: float = 0.45,
    cell_size: float = 256.0,
) -> GradeMap:
    """Generate a blob-based grade map, deterministic per seed.

    Each requested grade gets one connected region grown by a seeded
    random walk; the one-cell border stays Background.
    """
    if h_g < 8 or w_g < 8:
        raise InvalidConfigError("grade map dimensions must be >= 8")
    mix = dict(DEFAULT_GRADE_MIX if grade_mix is None else grade_mix)
    total = sum(mix.values())
    if total <= 0 or any(v < 0 for v in mix.values()):
        raise InvalidConfigError(f"infeasible grade mix: {mix}")
    for name in mix:
        if name not in GRADE_NAMES[1:]:
            raise InvalidConfigError(f"unknown grade label: {name}")

    rng = np.random.default_rng(seed)
    grid = np.zeros((h_g, w_g), dtype=np.int8)
    interior = (h_g - 2) * (w_g - 2)
    n_tissue = int(round(interior * tissue_fraction))

    targets: list[tuple[int, int]] = []  # (code, cell count)
    for name, weight in mix.items():
        if weight == 0:
            continue
        code = GRADE_NAMES.index(name)
        targets.append((code, max(1, int(round(n_tissue * weight / total)))))

    for code, count in targets:
        _grow_blob(grid, rng, code, count)
    return GradeMap(grid, cell_size)


def _grow_blob(grid: np.ndarray, rng: np.random.Generator, code: int, count: int):
    h, w = grid.shape
    empty = np.argwhere(grid[1 : h - 1, 1 : w - 1] == BACKGROUND) + 1
    if len(empty) == 0:
        raise InvalidConfigError("grade map is full; lower tissue_fraction")
    r, c = empty[rng.integers(len(empty))]
    grid[r, c] = code
    placed = 1
    attempts = 0
    while placed < count and attempts < count * 200:
        attempts += 1
        dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[rng.integers(4)]
        nr, nc = r + dr, c + dc
        if 1 <= nr < h - 1 and 1 <= nc < w - 1:
            if grid[nr, nc] == BACKGROUND:
                grid[nr, nc] = code
                placed += 1
            if grid[nr, nc] == code:
                r, c = nr, nc  # keep walking inside own region: stays connected


def simulate_reader(
    wsi: GradeMap,
    profile: ReaderProfile,
    seed: int,
    n_samples: int,
    wsi_id: str = "wsi",
    reader_id: str = "reader",
    expertise: str = "specialist",
) -> RawTrajectory:
    """Simulate a dense viewport trajectory over a grade map.

    The first sample fits the WSI in the viewport (1X, center).  Each
    subsequent step draws a magnification move from the per-level prior
    (so consecutive levels never differ by more than one index) and a
    location from the tissue cells, weighted toward higher grades by
    ``drill_bias``.
    """
    if n_samples < 10:
        raise InvalidInputError("n_samples must be >= 10")
    rng = np.random.default_rng(seed)

    tissue = np.argwhere(wsi.grid != BACKGROUND)
    if len(tissue) == 0:
        raise InvalidInputError("grade map has no tissue cells")
    grades = wsi.grid[tissue[:, 0], tissue[:, 1]].astype(float)
    # boost 0 for Benign, 2/3/4 for G3/G4/G5; drill_bias=0 is uniform
    boost = np.where(grades == BENIGN, 0.0, grades)
    weights = 1.0 + profile.drill_bias * boost
    weights = weights / weights.sum()

    samples = [
        ViewportSample(
            x=wsi.width_px / 2.0,
            y=wsi.height_px / 2.0,
            mag=MagLevel(0),
            t=_duration(rng),
        )
    ]
    level = 0
    for _ in range(n_samples - 1):
        move = rng.choice(3, p=profile.mag_transition_prior[level])
        level = min(5, max(0, level + (move - 1)))
        k = rng.choice(len(tissue), p=weights)
        r, c = tissue[k]
        x = (c + rng.random()) * wsi.cell_size
        y = (r + rng.random()) * wsi.cell_size
        if profile.noise_sigma > 0:
            x += rng.normal(0, profile.noise_sigma)
            y += rng.normal(0, profile.noise_sigma)
        x = float(np.clip(x, 0, wsi.width_px - 1e-6))
        y = float(np.clip(y, 0, wsi.height_px - 1e-6))
        samples.append(ViewportSample(x, y, MagLevel(level), _duration(rng)))
    return RawTrajectory(wsi_id, reader_id, expertise, samples)


def _duration(rng: np.random.Generator, mean_ms: float = 150.0, cap_ms: float = 2000.0) -> float:
    return float(min(rng.exponential(mean_ms), cap_ms))
