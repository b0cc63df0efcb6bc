"""Nucleus masks and per-cell marker positivity.

A MaskSet binds a labeled nucleus image to the sets of labels classified
positive for each marker. The containment chain (cd8 positives inside cd3
positives inside the label set) is enforced by construction, never by
trusting the caller.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidLabels, MissingPrerequisite, ShapeMismatch
from .preprocess import Patch


@dataclass(frozen=True)
class MaskSet:
    """Labeled nuclei plus optional marker-positive label sets.

    ``nuclei`` holds 0 for background and contiguous labels 1..K for cells.
    ``None`` positives mean the channel has not been classified yet, which
    is distinct from an empty set.
    """

    nuclei: np.ndarray
    cd3_positive: frozenset[int] | None = None
    cd8_positive: frozenset[int] | None = None

    def __post_init__(self) -> None:
        lab = np.asarray(self.nuclei)
        if lab.ndim != 2:
            raise InvalidLabels(f"label image must be 2-D, got ndim={lab.ndim}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise InvalidLabels(f"label image must be integer, got {lab.dtype}")
        lab = lab.astype(np.int32)
        if lab.size and lab.min() < 0:
            raise InvalidLabels("label image contains negative values")
        distinct = np.unique(lab)
        distinct = distinct[distinct > 0]
        k = int(distinct.size)
        if k and int(distinct[-1]) != k:
            raise InvalidLabels(
                f"labels must be contiguous 1..K, found max {int(distinct[-1])} "
                f"with {k} distinct labels")
        object.__setattr__(self, "nuclei", lab)
        valid = frozenset(range(1, k + 1))
        cd3 = self.cd3_positive
        if cd3 is not None:
            cd3 = frozenset(int(v) for v in cd3) & valid
        cd8 = self.cd8_positive
        if cd8 is not None:
            cd8 = frozenset(int(v) for v in cd8) & (cd3 if cd3 is not None else frozenset())
        object.__setattr__(self, "cd3_positive", cd3)
        object.__setattr__(self, "cd8_positive", cd8)

    @property
    def label_count(self) -> int:
        return int(self.nuclei.max()) if self.nuclei.size else 0

    @property
    def labels(self) -> frozenset[int]:
        return frozenset(range(1, self.label_count + 1))

    def nuclei_mask(self) -> np.ndarray:
        return self.nuclei > 0

    def region_mask(self, labels) -> np.ndarray:
        """Boolean union of the regions carrying the given labels."""
        wanted = frozenset(int(v) for v in labels)
        if not wanted:
            return np.zeros(self.nuclei.shape, dtype=bool)
        return np.isin(self.nuclei, sorted(wanted))

    def cd3_mask(self) -> np.ndarray:
        return self.region_mask(self.cd3_positive or ())

    def cd8_mask(self) -> np.ndarray:
        return self.region_mask(self.cd8_positive or ())


def ingest_nucleus_mask(labeled_image: np.ndarray) -> MaskSet:
    """Wraps an externally produced labeled nucleus image into a MaskSet.

    Labels are remapped to contiguous 1..K preserving order; negative or
    non-integer label images are rejected.
    """
    lab = np.asarray(labeled_image)
    if lab.ndim != 2:
        raise InvalidLabels(f"label image must be 2-D, got ndim={lab.ndim}")
    if not np.issubdtype(lab.dtype, np.integer):
        if np.issubdtype(lab.dtype, np.floating) and np.all(lab == np.round(lab)):
            lab = lab.astype(np.int64)
        else:
            raise InvalidLabels(f"label image must be integer, got {lab.dtype}")
    if lab.size and lab.min() < 0:
        raise InvalidLabels("label image contains negative values")
    distinct = np.unique(lab)
    distinct = distinct[distinct > 0]
    remap = np.zeros(int(distinct[-1]) + 1 if distinct.size else 1, dtype=np.int32)
    remap[distinct] = np.arange(1, distinct.size + 1, dtype=np.int32)
    return MaskSet(nuclei=remap[lab])


def _as_unit_array(image, what: str) -> np.ndarray:
    if isinstance(image, Patch):
        if image.range_tag != "unit":
            raise ValueError(f"{what} must be unit range, got {image.range_tag!r}")
        return image.pixels
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-D")
    return arr


def label_blobs(hoechst_patch, intensity_floor: float = 0.05,
                min_area: int = 10) -> MaskSet:
    """Fallback nucleus detector: 4-connected components above a floor.

    Components smaller than ``min_area`` pixels are dropped; surviving
    blobs are relabeled contiguously. Output is translation equivariant up
    to label order.
    """
    img = _as_unit_array(hoechst_patch, "hoechst patch")
    binary = img > intensity_floor
    four_conn = ndimage.generate_binary_structure(2, 1)
    lab, k = ndimage.label(binary, structure=four_conn)
    if k:
        sizes = np.bincount(lab.ravel(), minlength=k + 1)
        keep = sizes >= min_area
        keep[0] = False
        remap = np.zeros(k + 1, dtype=np.int32)
        remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
        lab = remap[lab]
    return MaskSet(nuclei=lab.astype(np.int32))


def classify_positive(maskset: MaskSet, channel_patch, target: str,
                      threshold: float = 0.3) -> MaskSet:
    """Marks nuclei whose mean marker intensity reaches ``threshold``.

    ``target`` selects which positive set to fill ("cd3" or "cd8"); CD8
    classification requires CD3 positives to exist first so the containment
    chain stays meaningful. Returns a new MaskSet.
    """
    if target not in ("cd3", "cd8"):
        raise ValueError(f"target must be 'cd3' or 'cd8', got {target!r}")
    channel = _as_unit_array(channel_patch, "marker channel")
    if channel.shape != maskset.nuclei.shape:
        raise ShapeMismatch(
            f"channel shape {channel.shape} != mask shape {maskset.nuclei.shape}")
    if target == "cd8" and maskset.cd3_positive is None:
        raise MissingPrerequisite("classify cd3 before cd8")
    k = maskset.label_count
    if k == 0:
        positive: frozenset[int] = frozenset()
    else:
        means = ndimage.mean(channel, labels=maskset.nuclei,
                             index=np.arange(1, k + 1))
        positive = frozenset(int(i) for i in np.flatnonzero(
            np.asarray(means) >= threshold) + 1)
    if target == "cd3":
        return replace(maskset, cd3_positive=positive)
    return replace(maskset, cd8_positive=positive)
