"""Synthetic paired-stain generator used as a ground-truth oracle.

Each patch contains non-overlapping Gaussian-bump nuclei on the Hoechst
channel. An exact subset of nuclei receives a CD3 marker spot slightly
offset from the nucleus center, and an exact subset of those receives a
collocated CD8 spot, so the true positive sets are known by construction.
All randomness derives from (seed, patch index), making every triplet
bitwise reproducible in isolation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataio import PairedDataset
from .errors import PlacementFailure
from .evaluate import mir
from .masks import MaskSet
from .preprocess import Patch
from .seeding import derive_seed

# Gaussian widths relative to the nucleus radius. The marker spot is wide
# and bright enough that the per-nucleus mean clears the default 0.3
# positivity threshold with a wide margin, while spillover into neighbors
# (kept >= clearance away) stays far below it.
_NUCLEUS_SIGMA_RATIO = 0.55
_MARKER_SIGMA_RATIO = 0.6


@dataclass(frozen=True)
class SynthParams:
    """Geometry, intensity and seeding knobs for synthetic triplets."""

    patch_side: int = 64
    n_cells: tuple[int, int] = (2, 6)
    cd3_fraction: float = 0.5
    cd8_fraction: float = 0.5
    nucleus_radius: float = 4.5
    radius_jitter: float = 1.0
    nucleus_amplitude: float = 0.9
    marker_amplitude: float = 0.95
    marker_offset: float = 2.0
    clearance: float = 5.0
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        side = self.patch_side
        if side < 8 or (side & (side - 1)) != 0:
            raise ValueError(f"patch_side must be a power of two >= 8, got {side}")
        lo, hi = self.cell_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid n_cells range {self.n_cells!r}")
        for name in ("cd3_fraction", "cd8_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.nucleus_radius <= 0:
            raise ValueError("nucleus_radius must be > 0")
        if not 0.0 <= self.radius_jitter < self.nucleus_radius:
            raise ValueError("radius_jitter must lie in [0, nucleus_radius)")
        for name in ("nucleus_amplitude", "marker_amplitude"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.marker_offset < 0 or self.clearance < 0 or self.noise_sigma < 0:
            raise ValueError("marker_offset, clearance and noise_sigma must be >= 0")

    @property
    def cell_range(self) -> tuple[int, int]:
        if isinstance(self.n_cells, int):
            return (self.n_cells, self.n_cells)
        lo, hi = self.n_cells
        return (int(lo), int(hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_cells"] = list(self.cell_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = dict(d)
        if "n_cells" in d:
            d["n_cells"] = tuple(d["n_cells"])
        return cls(**d)


@dataclass(frozen=True)
class Triplet:
    index: int
    hoechst: Patch
    cd3: Patch
    cd8: Patch
    truth: MaskSet


def _place_cells(params: SynthParams, n: int, rng: np.random.Generator):
    """Rejection-samples cell centers and radii with pairwise clearance."""
    margin = params.nucleus_radius + params.radius_jitter + 2.0
    side = params.patch_side
    if n > 0 and 2 * margin >= side:
        raise PlacementFailure(
            f"patch side {side} too small for nuclei of radius "
            f"{params.nucleus_radius}")
    separation = 2.0 * (params.nucleus_radius + params.radius_jitter) + params.clearance
    centers: list[np.ndarray] = []
    radii: list[float] = []
    max_tries = 300 * max(n, 1)
    tries = 0
    while len(centers) < n:
        tries += 1
        if tries > max_tries:
            raise PlacementFailure(
                f"placed {len(centers)} of {n} cells after {max_tries} tries; "
                "reduce n_cells or enlarge the patch")
        c = rng.uniform(margin, side - margin, size=2)
        if all(float(np.hypot(*(c - other))) >= separation for other in centers):
            centers.append(c)
            radii.append(params.nucleus_radius +
                         float(rng.uniform(-params.radius_jitter,
                                           params.radius_jitter)))
    return centers, radii


def _exact_subset(rng: np.random.Generator, pool: np.ndarray, fraction: float) -> np.ndarray:
    count = int(round(fraction * len(pool)))
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(pool, size=count, replace=False))


def generate_triplet(params: SynthParams, index: int = 0) -> Triplet:
    """Builds one aligned (hoechst, cd3, cd8, truth) tuple.

    Deterministic in (params, index): the RNG stream is derived from both,
    so patches can be regenerated individually in any order.
    """
    rng = np.random.default_rng((params.seed, int(index)))
    lo, hi = params.cell_range
    n = int(rng.integers(lo, hi + 1))
    centers, radii = _place_cells(params, n, rng)

    side = params.patch_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    hoechst = np.zeros((side, side), dtype=np.float64)
    cd3_img = np.zeros_like(hoechst)
    cd8_img = np.zeros_like(hoechst)
    labels = np.zeros((side, side), dtype=np.int32)

    spot_centers = []
    for k, (c, r) in enumerate(zip(centers, radii), start=1):
        d2 = (xx - c[1]) ** 2 + (yy - c[0]) ** 2
        sigma_n = _NUCLEUS_SIGMA_RATIO * r
        hoechst += params.nucleus_amplitude * np.exp(-d2 / (2.0 * sigma_n ** 2))
        labels[d2 <= r * r] = k
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        spot_centers.append(c + params.marker_offset *
                            np.array([math.sin(angle), math.cos(angle)]))

    all_labels = np.arange(1, n + 1)
    cd3_labels = _exact_subset(rng, all_labels, params.cd3_fraction)
    cd8_labels = _exact_subset(rng, cd3_labels, params.cd8_fraction)
    for k in cd3_labels:
        c = spot_centers[k - 1]
        sigma_m = _MARKER_SIGMA_RATIO * radii[k - 1]
        spot = params.marker_amplitude * np.exp(
            -((xx - c[1]) ** 2 + (yy - c[0]) ** 2) / (2.0 * sigma_m ** 2))
        cd3_img += spot
        if k in cd8_labels:
            cd8_img += spot

    if params.noise_sigma > 0:
        for img in (hoechst, cd3_img, cd8_img):
            img += rng.normal(0.0, params.noise_sigma, size=img.shape)
    hoechst = np.clip(hoechst, 0.0, 1.0).astype(np.float32)
    cd3_img = np.clip(cd3_img, 0.0, 1.0).astype(np.float32)
    cd8_img = np.clip(cd8_img, 0.0, 1.0).astype(np.float32)

    truth = MaskSet(nuclei=labels,
                    cd3_positive=frozenset(int(v) for v in cd3_labels),
                    cd8_positive=frozenset(int(v) for v in cd8_labels))
    make = lambda px: Patch(pixels=px, range_tag="unit", slide_id="synth",
                            grid_xy=(int(index), 0))
    return Triplet(index=int(index), hoechst=make(hoechst), cd3=make(cd3_img),
                   cd8=make(cd8_img), truth=truth)


def generate_dataset(params: SynthParams, n_patches: int, n_slides: int = 10,
                     train_slides: int = 8) -> PairedDataset:
    """Generates a paired dataset grouped into pseudo-slides.

    Patch i goes to pseudo-slide i mod n_slides; a seeded permutation
    assigns whole slides to train or test so the split never leaks a slide
    across sides. Generation is per-patch deterministic and independent of
    the split.
    """
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    if n_slides < 2:
        raise ValueError("need at least 2 pseudo-slides to form a split")
    if not 1 <= train_slides < n_slides:
        raise ValueError("train_slides must leave at least one test slide")
    if n_patches < n_slides:
        raise ValueError(
            f"{n_patches} patches cannot populate {n_slides} pseudo-slides; "
            "every slide needs at least one patch")

    split_rng = np.random.default_rng(derive_seed(params.seed, "split"))
    order = split_rng.permutation(n_slides)
    train_set = set(int(s) for s in order[:train_slides])

    triplets = [generate_triplet(params, i) for i in range(n_patches)]
    dataset = PairedDataset(
        hoechst=np.stack([t.hoechst.pixels for t in triplets]),
        cd3=np.stack([t.cd3.pixels for t in triplets]),
        cd8=np.stack([t.cd8.pixels for t in triplets]),
        nuclei=np.stack([t.truth.nuclei for t in triplets]),
        cd3_pos=[tuple(sorted(t.truth.cd3_positive)) for t in triplets],
        cd8_pos=[tuple(sorted(t.truth.cd8_positive)) for t in triplets],
        slide_ids=[f"synth-{i % n_slides:03d}" for i in range(n_patches)],
        splits=["train" if i % n_slides in train_set else "test"
                for i in range(n_patches)],
        meta={"params": params.to_dict(), "n_slides": n_slides,
              "train_slides": train_slides},
    )

    # Contrast sanity check: real CD3 signal must sit above background on
    # every generated batch, otherwise the oracle is useless as a target.
    ratios = []
    for i in range(len(dataset)):
        mask = dataset.maskset(i).cd3_mask()
        if mask.any() and not mask.all():
            ratios.append(mir(dataset.cd3[i], mask))
    if ratios:
        mean_mir = float(np.mean(ratios))
        if params.marker_amplitude > params.noise_sigma and mean_mir <= 1.0:
            raise RuntimeError(
                f"synthetic contrast check failed: mean real CD3 ratio "
                f"{mean_mir:.3f} <= 1")
        dataset.meta["mean_real_cd3_mir"] = mean_mir
    return dataset
