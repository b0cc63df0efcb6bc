"""Persistence for slides, masks, patch sets and paired datasets."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyDataset, InvalidLabels
from .masks import MaskSet
from .preprocess import IntensityModel, Patch

_DATASET_VERSION = 1


def load_slide(path) -> np.ndarray:
    """Reads a single-channel slide image (16-bit grayscale or .npy)."""
    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p)
    else:
        with Image.open(p) as img:
            arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected single-channel slide, got shape {arr.shape}")
    return arr.astype(np.float64)


def save_slide(path, arr: np.ndarray) -> None:
    """Writes a slide as .npy or 16-bit grayscale PNG/TIFF."""
    p = Path(path)
    arr = np.asarray(arr)
    if p.suffix == ".npy":
        np.save(p, arr)
        return
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("slide values outside the 16-bit range")
    Image.fromarray(arr.astype(np.uint16)).save(p)


def load_labeled_mask(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        lab = np.load(p)
    else:
        with Image.open(p) as img:
            lab = np.asarray(img)
    if not np.issubdtype(np.asarray(lab).dtype, np.integer):
        raise InvalidLabels(f"mask file {p} is not integer-typed")
    return lab.astype(np.int32)


def save_labeled_mask(path, labels: np.ndarray) -> None:
    p = Path(path)
    lab = np.asarray(labels)
    if p.suffix == ".npy":
        np.save(p, lab.astype(np.int32))
        return
    if lab.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("too many labels for a 16-bit mask image")
    Image.fromarray(lab.astype(np.uint16)).save(p)


def save_intensity_model(model: IntensityModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_intensity_model(path) -> IntensityModel:
    return IntensityModel.from_dict(json.loads(Path(path).read_text()))


def save_patches(patches: list[Patch], out_dir) -> Path:
    """Persists extracted patches as one array file plus a manifest."""
    if not patches:
        raise EmptyDataset("no patches to save")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "patches.npz",
                        pixels=np.stack([p.pixels for p in patches]))
    manifest = {
        "version": _DATASET_VERSION,
        "entries": [
            {"slide_id": p.slide_id, "grid_xy": list(p.grid_xy),
             "range_tag": p.range_tag}
            for p in patches
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_patches(in_dir) -> list[Patch]:
    src = Path(in_dir)
    pixels = np.load(src / "patches.npz")["pixels"]
    manifest = json.loads((src / "manifest.json").read_text())
    return [
        Patch(pixels=pixels[i], range_tag=e["range_tag"],
              slide_id=e["slide_id"], grid_xy=tuple(e["grid_xy"]))
        for i, e in enumerate(manifest["entries"])
    ]


@dataclass
class PairedDataset:
    """Aligned Hoechst/CD3/CD8 patches with ground-truth masks and a
    pseudo-slide train/test split.

    Pixel arrays are float32 in the unit range with shape [N, H, W]; the
    nucleus label array is int32. Marker-positive labels are stored per
    patch as tuples.
    """

    hoechst: np.ndarray
    cd3: np.ndarray
    cd8: np.ndarray
    nuclei: np.ndarray
    cd3_pos: list[tuple[int, ...]]
    cd8_pos: list[tuple[int, ...]]
    slide_ids: list[str]
    splits: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.hoechst)
        for name in ("cd3", "cd8", "nuclei"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} array length disagrees with hoechst")
        for name in ("cd3_pos", "cd8_pos", "slide_ids", "splits"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length disagrees with patch count")

    def __len__(self) -> int:
        return len(self.hoechst)

    @property
    def patch_side(self) -> int:
        return int(self.hoechst.shape[1])

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        return np.asarray([i for i, s in enumerate(self.splits) if s == split])

    def maskset(self, i: int) -> MaskSet:
        return MaskSet(nuclei=self.nuclei[i],
                       cd3_positive=frozenset(self.cd3_pos[i]),
                       cd8_positive=frozenset(self.cd8_pos[i]))

    def masksets(self, split: str | None = None) -> list[MaskSet]:
        return [self.maskset(i) for i in self.indices(split)]

    def patch(self, i: int, channel: str) -> Patch:
        if channel not in ("hoechst", "cd3", "cd8"):
            raise ValueError(f"unknown channel {channel!r}")
        return Patch(pixels=getattr(self, channel)[i], range_tag="unit",
                     slide_id=self.slide_ids[i], grid_xy=(i, 0))

    def _manifest(self) -> dict:
        return {
            "version": _DATASET_VERSION,
            "cd3_pos": [sorted(t) for t in self.cd3_pos],
            "cd8_pos": [sorted(t) for t in self.cd8_pos],
            "slide_ids": list(self.slide_ids),
            "splits": list(self.splits),
            "meta": self.meta,
        }

    def fingerprint(self) -> str:
        """Content hash covering pixels, masks and the manifest."""
        h = hashlib.sha256()
        for arr in (self.hoechst, self.cd3, self.cd8, self.nuclei):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(self._manifest(), sort_keys=True).encode("utf-8"))
        return h.hexdigest()

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out / "arrays.npz", hoechst=self.hoechst,
                            cd3=self.cd3, cd8=self.cd8, nuclei=self.nuclei)
        (out / "manifest.json").write_text(
            json.dumps(self._manifest(), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, in_dir) -> "PairedDataset":
        src = Path(in_dir)
        arrays = np.load(src / "arrays.npz")
        manifest = json.loads((src / "manifest.json").read_text())
        return cls(
            hoechst=arrays["hoechst"], cd3=arrays["cd3"], cd8=arrays["cd8"],
            nuclei=arrays["nuclei"],
            cd3_pos=[tuple(t) for t in manifest["cd3_pos"]],
            cd8_pos=[tuple(t) for t in manifest["cd8_pos"]],
            slide_ids=list(manifest["slide_ids"]),
            splits=list(manifest["splits"]),
            meta=manifest.get("meta", {}),
        )


def write_run_manifest(path, command: str, params: dict,
                       outputs: list[str] | None = None,
                       fingerprints: dict | None = None) -> None:
    """Records what a CLI invocation did: command, parameters, outputs."""
    body = {
        "command": command,
        "params": params,
        "outputs": outputs or [],
        "fingerprints": fingerprints or {},
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
