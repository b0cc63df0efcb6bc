"""Mask intensity ratio evaluation, encoder-input ablation and figures.

The mask intensity ratio (MIR) of an image against a cell mask is the mean
intensity inside the mask over the mean outside. Relative MIR divides the
generated image's ratio by the real image's, so 1.0 means the fake
concentrates signal in positive cells exactly as strongly as the real
stain. Patches whose masks make the ratio meaningless are excluded from
aggregation and counted per reason rather than silently dropped.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (AllExcluded, DegenerateReal, EmptyDataset, EmptyMask,
                     FullMask, NotMutual, ShapeMismatch)
from .masks import MaskSet
from .seeding import derive_seed

ABLATION_MODES = ("generated", "matched_real", "shuffled_real", "gaussian_noise")


def _check_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask).astype(bool)
    if image.shape != mask.shape:
        raise ShapeMismatch(
            f"image shape {image.shape} != mask shape {mask.shape}")
    n_in = int(mask.sum())
    if n_in == 0:
        raise EmptyMask("mask selects no pixels")
    if n_in == mask.size:
        raise FullMask("mask selects every pixel, no outside region")
    return mask


def mir(image: np.ndarray, mask: np.ndarray, eps: float = 1e-6) -> float:
    """Mean intensity inside the mask over mean outside, floored at eps."""
    image = np.asarray(image, dtype=np.float64)
    mask = _check_mask(image, mask)
    inside = float(image[mask].mean())
    outside = float(image[~mask].mean())
    return inside / max(outside, eps)


def mir_rel(fake: np.ndarray, real: np.ndarray, mask: np.ndarray,
            eps: float = 1e-6) -> float:
    """MIR of the generated image relative to the real one."""
    real_ratio = mir(real, mask, eps)
    if real_ratio == 0.0:
        raise DegenerateReal("real image has no signal inside the mask")
    return mir(fake, mask, eps) / real_ratio


@dataclass(frozen=True)
class MirRecord:
    """Per-patch, per-stain scoring outcome; ``excluded`` names the reason
    a record is withheld from aggregation, or None when usable."""

    patch_index: int
    stain: str
    split: str
    mir_fake: float | None = None
    mir_real: float | None = None
    mir_rel: float | None = None
    excluded: str | None = None

    def to_dict(self) -> dict:
        return dict(patch_index=self.patch_index, stain=self.stain,
                    split=self.split, mir_fake=self.mir_fake,
                    mir_real=self.mir_real, mir_rel=self.mir_rel,
                    excluded=self.excluded)


def score_pair(fake: np.ndarray, real: np.ndarray, mask: np.ndarray, *,
               patch_index: int, stain: str, split: str = "test",
               eps: float = 1e-6) -> MirRecord:
    """Scores one fake/real pair, downgrading degenerate cases to
    exclusions instead of raising."""
    base = dict(patch_index=int(patch_index), stain=stain, split=split)
    try:
        checked = _check_mask(np.asarray(real), mask)
    except EmptyMask:
        return MirRecord(excluded="empty_mask", **base)
    except FullMask:
        return MirRecord(excluded="full_mask", **base)
    fake = np.asarray(fake, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if fake.shape != real.shape:
        raise ShapeMismatch(f"fake shape {fake.shape} != real shape {real.shape}")
    out_real = float(real[~checked].mean())
    out_fake = float(fake[~checked].mean())
    ratio_real = float(real[checked].mean()) / max(out_real, eps)
    ratio_fake = float(fake[checked].mean()) / max(out_fake, eps)
    excluded = None
    rel = None
    if out_real < eps or out_fake < eps:
        excluded = "degenerate_denominator"
    elif ratio_real == 0.0:
        excluded = "degenerate_real"
    else:
        rel = ratio_fake / ratio_real
    return MirRecord(mir_fake=ratio_fake, mir_real=ratio_real, mir_rel=rel,
                     excluded=excluded, **base)


@dataclass(frozen=True)
class GroupStats:
    stain: str
    split: str
    count: int
    used: int
    excluded: dict
    mean_rel: float
    std_rel: float
    mean_fake: float
    mean_real: float

    def to_dict(self) -> dict:
        return dict(stain=self.stain, split=self.split, count=self.count,
                    used=self.used, excluded=dict(self.excluded),
                    mean_rel=self.mean_rel, std_rel=self.std_rel,
                    mean_fake=self.mean_fake, mean_real=self.mean_real)


@dataclass
class MirReport:
    records: list[MirRecord]
    groups: dict[str, GroupStats]
    meta: dict = field(default_factory=dict)

    def group(self, stain: str, split: str = "test") -> GroupStats:
        return self.groups[f"{stain}/{split}"]

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "groups": {k: g.to_dict() for k, g in self.groups.items()},
            "records": [r.to_dict() for r in self.records],
        }


def aggregate_mir(records: list[MirRecord], meta: dict | None = None) -> MirReport:
    """Groups records by (stain, split); mean and population std of the
    relative ratio over usable records. A group whose records were all
    excluded raises AllExcluded."""
    if not records:
        raise EmptyDataset("no records to aggregate")
    by_group: dict[tuple, list[MirRecord]] = defaultdict(list)
    for r in records:
        by_group[(r.stain, r.split)].append(r)
    groups: dict[str, GroupStats] = {}
    for (stain, split), recs in sorted(by_group.items()):
        usable = [r for r in recs if r.excluded is None]
        reasons = Counter(r.excluded for r in recs if r.excluded is not None)
        if not usable:
            raise AllExcluded(
                f"all {len(recs)} records excluded for {stain}/{split}: "
                f"{dict(reasons)}")
        rel = np.asarray([r.mir_rel for r in usable], dtype=np.float64)
        groups[f"{stain}/{split}"] = GroupStats(
            stain=stain, split=split, count=len(recs), used=len(usable),
            excluded=dict(reasons),
            mean_rel=float(rel.mean()), std_rel=float(rel.std(ddof=0)),
            mean_fake=float(np.mean([r.mir_fake for r in usable])),
            mean_real=float(np.mean([r.mir_real for r in usable])))
    return MirReport(records=list(records), groups=groups, meta=meta or {})


def _unit_to_signed_tensor(arr: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return x.unsqueeze(1) * 2.0 - 1.0


def _signed_to_unit(t: torch.Tensor) -> np.ndarray:
    return (((t + 1.0) * 0.5).clamp(0.0, 1.0).squeeze(1)
            .detach().cpu().numpy().astype(np.float64))


def evaluate_model(assembly, dataset, split: str = "test", seed: int = 0,
                   batch_size: int = 16, eps: float = 1e-6) -> MirReport:
    """Runs inference over a dataset split and aggregates MIR records for
    both stains. Deterministic for a given seed: the test-time dropout
    stream is reseeded before the pass."""
    indices = dataset.indices(split)
    if len(indices) == 0:
        raise EmptyDataset(f"dataset has no {split!r} patches")
    assembly.eval()
    assembly.seed_noise(derive_seed(seed, "eval"))
    records: list[MirRecord] = []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            x = _unit_to_signed_tensor(dataset.hoechst[chunk])
            y1, y2 = assembly.predict(x)
            fake_cd3 = _signed_to_unit(y1)
            fake_cd8 = _signed_to_unit(y2)
            for j, i in enumerate(chunk):
                ms = dataset.maskset(int(i))
                records.append(score_pair(
                    fake_cd3[j], dataset.cd3[i], ms.cd3_mask(),
                    patch_index=int(i), stain="cd3", split=split, eps=eps))
                records.append(score_pair(
                    fake_cd8[j], dataset.cd8[i], ms.cd8_mask(),
                    patch_index=int(i), stain="cd8", split=split, eps=eps))
    return aggregate_mir(records, meta={"split": split, "seed": seed})


def _resolve_mutual_generator(model):
    gen = model.generators[0] if hasattr(model, "generators") else model
    if not getattr(gen, "mutual", False):
        raise NotMutual("ablation needs a generator with a second-stain encoder")
    return gen


def ablate_encoder_input(model, dataset, mode: str, seed: int = 0,
                         split: str = "test", batch_size: int = 16,
                         eps: float = 1e-6) -> MirReport:
    """Replaces the second encoder's input and scores the second stain.

    Modes: "generated" (the model's own first-stain output),
    "matched_real" (the paired real first stain), "shuffled_real" (a real
    first stain from a permuted patch), "gaussian_noise" (unit-variance
    noise clipped to the signed range).
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")
    gen = _resolve_mutual_generator(model)
    indices = dataset.indices(split)
    if len(indices) == 0:
        raise EmptyDataset(f"dataset has no {split!r} patches")
    gen.eval()
    gen.seed_noise(derive_seed(seed, "ablation-noise"))
    rng = np.random.default_rng(derive_seed(seed, f"ablation-{mode}"))
    shuffled = rng.permutation(len(indices))
    side = dataset.patch_side
    records: list[MirRecord] = []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            x = _unit_to_signed_tensor(dataset.hoechst[chunk])
            feats1 = gen.encode(x)
            if mode == "generated":
                e2_in = gen.decode_primary(feats1)
            elif mode == "matched_real":
                e2_in = _unit_to_signed_tensor(dataset.cd3[chunk])
            elif mode == "shuffled_real":
                partners = indices[shuffled[start:start + len(chunk)]]
                e2_in = _unit_to_signed_tensor(dataset.cd3[partners])
            else:
                noise = rng.standard_normal((len(chunk), side, side))
                e2_in = torch.from_numpy(
                    np.clip(noise, -1.0, 1.0).astype(np.float32)).unsqueeze(1)
            fake_cd8 = _signed_to_unit(gen.decode_secondary(feats1, e2_in))
            for j, i in enumerate(chunk):
                ms = dataset.maskset(int(i))
                records.append(score_pair(
                    fake_cd8[j], dataset.cd8[i], ms.cd8_mask(),
                    patch_index=int(i), stain="cd8", split=split, eps=eps))
    return aggregate_mir(records, meta={"mode": mode, "split": split,
                                        "seed": seed})


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def mask_overlay(maskset: MaskSet) -> np.ndarray:
    """RGB rendering: plain nuclei white, CD3 positives blue, CD8
    positives red, background black."""
    rgb = np.zeros(maskset.nuclei.shape + (3,), dtype=np.float64)
    rgb[maskset.nuclei_mask()] = (1.0, 1.0, 1.0)
    rgb[maskset.cd3_mask()] = (0.25, 0.45, 1.0)
    rgb[maskset.cd8_mask()] = (1.0, 0.25, 0.25)
    return rgb


@dataclass
class GridSample:
    """One row of the qualitative result grid (all images unit range)."""

    hoechst: np.ndarray
    maskset: MaskSet
    real_cd3: np.ndarray
    fake_cd3: np.ndarray
    real_cd8: np.ndarray
    fake_cd8: np.ndarray
    mir_rel_cd3: float | None = None
    mir_rel_cd8: float | None = None


def build_grid_samples(assembly, dataset, indices=None, n: int = 4,
                       split: str = "test", seed: int = 0) -> list[GridSample]:
    """Predicts a handful of patches and packages them for render_grid."""
    pool = dataset.indices(split)
    if len(pool) == 0:
        raise EmptyDataset(f"dataset has no {split!r} patches")
    if indices is None:
        picks = pool[np.linspace(0, len(pool) - 1, min(n, len(pool)),
                                 dtype=int)]
    else:
        picks = np.asarray(indices, dtype=int)
    assembly.eval()
    assembly.seed_noise(derive_seed(seed, "eval"))
    samples = []
    with torch.no_grad():
        x = _unit_to_signed_tensor(dataset.hoechst[picks])
        y1, y2 = assembly.predict(x)
    fake_cd3 = _signed_to_unit(y1)
    fake_cd8 = _signed_to_unit(y2)
    for j, i in enumerate(picks):
        ms = dataset.maskset(int(i))
        rec3 = score_pair(fake_cd3[j], dataset.cd3[i], ms.cd3_mask(),
                          patch_index=int(i), stain="cd3", split=split)
        rec8 = score_pair(fake_cd8[j], dataset.cd8[i], ms.cd8_mask(),
                          patch_index=int(i), stain="cd8", split=split)
        samples.append(GridSample(
            hoechst=dataset.hoechst[i], maskset=ms,
            real_cd3=dataset.cd3[i], fake_cd3=fake_cd3[j],
            real_cd8=dataset.cd8[i], fake_cd8=fake_cd8[j],
            mir_rel_cd3=rec3.mir_rel, mir_rel_cd8=rec8.mir_rel))
    return samples


def render_grid(samples: list[GridSample], path, title: str | None = None):
    """Writes the qualitative grid: source, masks, real and generated
    stains, annotated with per-patch relative MIR."""
    if not samples:
        raise EmptyDataset("no samples to render")
    plt = _pyplot()
    cols = ("Hoechst", "cell masks", "real CD3", "generated CD3",
            "real CD8", "generated CD8")
    fig, axes = plt.subplots(len(samples), len(cols),
                             figsize=(2.2 * len(cols), 2.4 * len(samples)),
                             squeeze=False)
    for r, s in enumerate(samples):
        panels = (s.hoechst, mask_overlay(s.maskset), s.real_cd3, s.fake_cd3,
                  s.real_cd8, s.fake_cd8)
        notes = {3: (s.mir_rel_cd3, "CD3"), 5: (s.mir_rel_cd8, "CD8")}
        for c, img in enumerate(panels):
            ax = axes[r][c]
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(img)
            ax.set_xticks(())
            ax.set_yticks(())
            if r == 0:
                ax.set_title(cols[c], fontsize=9)
            if c in notes:
                value, stain = notes[c]
                text = (f"rel MIR {value:.2f}" if value is not None
                        else f"no {stain}+ cells")
                ax.set_xlabel(text, fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_intensity_histogram(samples, model, path, bins: int = 100):
    """Histogram of raw intensities with the fitted density overlaid and
    the normalization anchors (mu, mu + 3 sigma) marked."""
    from .errors import DegenerateSamples
    from scipy import stats
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise DegenerateSamples("no samples to plot")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(x, bins=bins, color="#777777", alpha=0.7)
    ax.set_xlabel("raw intensity")
    ax.set_ylabel("pixel count")
    grid = np.linspace(x.min(), max(x.max(), model.mu + 4 * model.sigma), 400)
    twin = ax.twinx()
    twin.plot(grid, stats.norm.pdf(grid, model.mu, model.sigma), color="black")
    twin.set_ylabel("fitted density")
    for anchor, name in ((model.mu, "mu"), (model.mu + 3 * model.sigma,
                                            "mu + 3 sigma")):
        ax.axvline(anchor, color="red", linestyle="--", linewidth=1)
        ax.text(anchor, ax.get_ylim()[1] * 0.95, name, color="red",
                fontsize=8, rotation=90, va="top", ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
