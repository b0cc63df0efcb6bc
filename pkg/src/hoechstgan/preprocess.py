"""Intensity normalization, patch extraction and dataset statistics.

Raw fluorescence slides are mapped into the unit interval by a Gaussian
intensity model fitted per slide (or per cohort): f(x) = min(1, max(0,
(x - mu) / (3 * sigma))). Patches cut from normalized slides carry a range
tag so downstream code can verify what space the pixels live in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import DegenerateSamples, EmptyDataset, SlideTooSmall

if TYPE_CHECKING:
    from .masks import MaskSet

RANGE_TAGS = ("raw", "unit", "signed")

# Tolerance for verifying pixel values against their declared range. Model
# outputs and clipped arrays sit exactly inside their bounds; the slack only
# absorbs float32 round-trips.
_RANGE_TOL = 1e-5


@dataclass(frozen=True)
class IntensityModel:
    """Gaussian fit of foreground intensities: mean, std and sample count."""

    mu: float
    sigma: float
    sample_count: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu) or not math.isfinite(self.sigma):
            raise ValueError("intensity model parameters must be finite")
        if self.mu < 0:
            raise ValueError("mu must be >= 0 for physical intensity data")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.sample_count < 2:
            raise ValueError("sample_count must be >= 2")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityModel":
        return cls(mu=float(d["mu"]), sigma=float(d["sigma"]),
                   sample_count=int(d["sample_count"]))


class StreamingMoments:
    """Accumulates count/sum/sum-of-squares so tiles can be fitted in
    parallel and merged associatively."""

    def __init__(self) -> None:
        self.count = 0
        self.total = 0.0
        self.total_sq = 0.0

    def update(self, samples: np.ndarray) -> "StreamingMoments":
        x = np.asarray(samples, dtype=np.float64).ravel()
        self.count += x.size
        self.total += float(x.sum())
        self.total_sq += float(np.square(x).sum())
        return self

    def merge(self, other: "StreamingMoments") -> "StreamingMoments":
        self.count += other.count
        self.total += other.total
        self.total_sq += other.total_sq
        return self

    def finalize(self) -> IntensityModel:
        if self.count < 2:
            raise DegenerateSamples(
                f"need at least 2 samples to fit, got {self.count}")
        mu = self.total / self.count
        var = max(self.total_sq / self.count - mu * mu, 0.0)
        sigma = math.sqrt(var)
        if sigma == 0.0:
            raise DegenerateSamples("all samples identical, sigma would be 0")
        return IntensityModel(mu=mu, sigma=sigma, sample_count=self.count)


def fit_intensity_model(samples: Iterable[float] | np.ndarray) -> IntensityModel:
    """Maximum-likelihood Gaussian fit (mean and population std).

    Raises DegenerateSamples for fewer than two samples or zero variance.
    """
    x = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples,
                   dtype=np.float64).ravel()
    return StreamingMoments().update(x).finalize()


def fit_slide_model(slide: np.ndarray, foreground_floor: float = 0.0) -> IntensityModel:
    """Fits the intensity model on foreground pixels of one raw slide.

    Foreground means strictly above ``foreground_floor`` (default 0, i.e.
    any recorded signal); background zeros would otherwise dominate mu.
    """
    arr = np.asarray(slide, dtype=np.float64)
    return fit_intensity_model(arr[arr > foreground_floor])


def normalize_intensity(x, model: IntensityModel):
    """Applies f(x) = min(1, max(0, (x - mu) / (3 sigma))) elementwise.

    Total on finite inputs; scalars map to scalars, arrays to arrays of the
    same shape.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.clip((arr - model.mu) / (3.0 * model.sigma), 0.0, 1.0)
    if np.isscalar(x) or out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Patch:
    """Square, power-of-two sized single-channel image tile.

    ``range_tag`` declares the value range: "raw" (non-negative counts),
    "unit" ([0, 1]) or "signed" ([-1, 1], the network input range).
    """

    pixels: np.ndarray
    range_tag: str = "unit"
    slide_id: str = ""
    grid_xy: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "grid_xy", tuple(int(v) for v in self.grid_xy))
        if px.ndim != 2:
            raise ValueError(f"patch pixels must be 2-D, got ndim={px.ndim}")
        h, w = px.shape
        if h != w:
            raise ValueError(f"patch must be square, got {h}x{w}")
        if h < 1 or (h & (h - 1)) != 0:
            raise ValueError(f"patch side must be a power of two, got {h}")
        if self.range_tag not in RANGE_TAGS:
            raise ValueError(f"unknown range_tag {self.range_tag!r}")
        if not np.all(np.isfinite(px)):
            raise ValueError("patch pixels must be finite")
        lo, hi = float(px.min()), float(px.max())
        if self.range_tag == "raw" and lo < -_RANGE_TOL:
            raise ValueError("raw patches must be non-negative")
        if self.range_tag == "unit" and (lo < -_RANGE_TOL or hi > 1 + _RANGE_TOL):
            raise ValueError("unit patches must lie in [0, 1]")
        if self.range_tag == "signed" and (lo < -1 - _RANGE_TOL or hi > 1 + _RANGE_TOL):
            raise ValueError("signed patches must lie in [-1, 1]")

    @property
    def side(self) -> int:
        return int(self.pixels.shape[0])

    def to_signed(self) -> "Patch":
        """Rescales a unit patch to [-1, 1]."""
        if self.range_tag == "signed":
            return self
        if self.range_tag != "unit":
            raise ValueError("only unit patches can be rescaled to signed")
        return replace(self, pixels=self.pixels * 2.0 - 1.0, range_tag="signed")

    def to_unit(self) -> "Patch":
        """Rescales a signed patch back to [0, 1]."""
        if self.range_tag == "unit":
            return self
        if self.range_tag != "signed":
            raise ValueError("only signed patches can be rescaled to unit")
        return replace(self, pixels=(self.pixels + 1.0) * 0.5, range_tag="unit")


def normalize_patch(patch: Patch, model: IntensityModel) -> Patch:
    """Normalizes a raw patch into the unit range, keeping its metadata."""
    if patch.range_tag != "raw":
        raise ValueError(f"expected a raw patch, got range_tag={patch.range_tag!r}")
    px = normalize_intensity(patch.pixels, model).astype(np.float32)
    return replace(patch, pixels=px, range_tag="unit")


def extract_patches(
    slide: np.ndarray,
    patch_side: int,
    model: IntensityModel | None = None,
    emptiness_threshold: float = 0.01,
    intensity_floor: float = 0.05,
    slide_id: str = "slide",
) -> list[Patch]:
    """Cuts a slide into a non-overlapping grid of unit-range patches.

    When ``model`` is given the slide is treated as raw and normalized
    first; otherwise it must already be in the unit range. A patch is kept
    when at least ``emptiness_threshold`` of its pixels exceed
    ``intensity_floor``; with a threshold of 0 everything is kept.
    Raises SlideTooSmall when no complete patch fits.
    """
    arr = np.asarray(slide, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"slide must be 2-D, got ndim={arr.ndim}")
    if patch_side < 1 or (patch_side & (patch_side - 1)) != 0:
        raise ValueError(f"patch_side must be a power of two, got {patch_side}")
    h, w = arr.shape
    if h < patch_side or w < patch_side:
        raise SlideTooSmall(
            f"slide {h}x{w} smaller than patch side {patch_side}")
    if not 0.0 <= emptiness_threshold <= 1.0:
        raise ValueError("emptiness_threshold must lie in [0, 1]")
    if model is not None:
        arr = normalize_intensity(arr, model)
    elif arr.min() < 0 or arr.max() > 1:
        raise ValueError("slide values outside [0, 1]; pass an intensity model")

    out: list[Patch] = []
    for gy in range(h // patch_side):
        for gx in range(w // patch_side):
            tile = arr[gy * patch_side:(gy + 1) * patch_side,
                       gx * patch_side:(gx + 1) * patch_side]
            occupied = float(np.mean(tile > intensity_floor))
            if occupied >= emptiness_threshold:
                out.append(Patch(pixels=tile.astype(np.float32),
                                 range_tag="unit", slide_id=slide_id,
                                 grid_xy=(gx, gy)))
    return out


@dataclass(frozen=True)
class StainStats:
    """Per-stain cohort statistics over a set of patches."""

    total_cells: int
    cells_per_patch: float
    presence_percent: float
    area_coverage_percent: float


@dataclass(frozen=True)
class DatasetStats:
    patch_count: int
    per_stain: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "patch_count": self.patch_count,
            "per_stain": {k: vars(v) for k, v in self.per_stain.items()},
        }


def compute_dataset_stats(masksets: Sequence["MaskSet"]) -> DatasetStats:
    """Counts cells, presence rate and area coverage per stain.

    The nuclear channel counts every labeled nucleus; the marker channels
    count nuclei classified positive. Presence is the share of patches with
    at least one cell; area coverage is the pixel share of cell regions.
    """
    if len(masksets) == 0:
        raise EmptyDataset("no mask sets to summarize")
    totals = {"hoechst": 0, "cd3": 0, "cd8": 0}
    present = {"hoechst": 0, "cd3": 0, "cd8": 0}
    area = {"hoechst": 0, "cd3": 0, "cd8": 0}
    pixel_total = 0
    for ms in masksets:
        pixel_total += ms.nuclei.size
        counts = {
            "hoechst": ms.label_count,
            "cd3": len(ms.cd3_positive or ()),
            "cd8": len(ms.cd8_positive or ()),
        }
        for stain, n in counts.items():
            totals[stain] += n
            present[stain] += 1 if n > 0 else 0
        area["hoechst"] += int(np.count_nonzero(ms.nuclei))
        area["cd3"] += int(np.count_nonzero(ms.cd3_mask()))
        area["cd8"] += int(np.count_nonzero(ms.cd8_mask()))
    n = len(masksets)
    per_stain = {
        stain: StainStats(
            total_cells=totals[stain],
            cells_per_patch=totals[stain] / n,
            presence_percent=100.0 * present[stain] / n,
            area_coverage_percent=100.0 * area[stain] / pixel_total,
        )
        for stain in ("hoechst", "cd3", "cd8")
    }
    return DatasetStats(patch_count=n, per_stain=per_stain)
