"""Command-line interface.

Exit codes: 0 on success, 1 for runtime failures, 2 for usage or
configuration errors, 3 for degenerate input data (for example fitting an
intensity model on a constant slide). Every command that writes results
drops a run_manifest.json next to them recording what produced what.
"""
from __future__ import annotations

import functools
import json
from pathlib import Path

import click
import numpy as np

from . import dataio, evaluate, preprocess
from .config import resolve_train_config
from .errors import (AllExcluded, DegenerateReal, DegenerateSamples,
                     EmptyDataset, EmptyMask, FullMask, HoechstganError,
                     ModeMismatch, ResumeMismatch, SpecMismatch,
                     UnknownVariant)
from .masks import classify_positive, label_blobs
from .model import normalize_variant
from .synthdata import SynthParams, generate_dataset
from .train import TrainConfig, train_loop

_DEGENERATE = (DegenerateSamples, EmptyDataset, AllExcluded, DegenerateReal,
               EmptyMask, FullMask)
_USAGE = (UnknownVariant, SpecMismatch, ModeMismatch, ResumeMismatch,
          ValueError)


class _Failure(click.ClickException):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.exit_code = code


def _mapped_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _DEGENERATE as e:
            raise _Failure(f"{type(e).__name__}: {e}", 3)
        except _USAGE as e:
            raise _Failure(f"{type(e).__name__}: {e}", 2)
        except HoechstganError as e:
            raise _Failure(f"{type(e).__name__}: {e}", 1)
    return wrapper


@click.group()
def main() -> None:
    """Virtual staining tools: preprocessing, synthetic data, training and
    mask-intensity-ratio evaluation."""


@main.command("fit-norm")
@click.argument("slides", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Where to write the fitted intensity model (JSON).")
@click.option("--foreground-floor", default=0.0, show_default=True,
              help="Only pixels strictly above this raw value are fitted.")
@click.option("--histogram", type=click.Path(dir_okay=False), default=None,
              help="Optional path for a histogram figure with the fit.")
@_mapped_errors
def fit_norm(slides, out, foreground_floor, histogram) -> None:
    """Fit the Gaussian intensity model on one or more raw slides."""
    moments = preprocess.StreamingMoments()
    sample_pool = []
    for path in slides:
        arr = dataio.load_slide(path)
        fg = arr[arr > foreground_floor]
        moments.update(fg)
        if histogram:
            sample_pool.append(fg.ravel())
    model = moments.finalize()
    dataio.save_intensity_model(model, out)
    if histogram:
        evaluate.plot_intensity_histogram(np.concatenate(sample_pool), model,
                                          histogram)
    dataio.write_run_manifest(
        Path(out).with_suffix(".manifest.json"), "fit-norm",
        {"slides": list(slides), "foreground_floor": foreground_floor},
        outputs=[str(out)] + ([histogram] if histogram else []))
    click.echo(f"fitted mu={model.mu:.4f} sigma={model.sigma:.4f} "
               f"on {model.sample_count} pixels -> {out}")


@main.command("extract")
@click.argument("slide", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Fitted intensity model JSON.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--patch-side", default=256, show_default=True)
@click.option("--emptiness-threshold", default=0.01, show_default=True,
              help="Minimum fraction of pixels above the intensity floor.")
@click.option("--intensity-floor", default=0.05, show_default=True)
@click.option("--slide-id", default=None)
@_mapped_errors
def extract(slide, model_path, out, patch_side, emptiness_threshold,
            intensity_floor, slide_id) -> None:
    """Normalize a slide and cut it into non-empty patches."""
    model = dataio.load_intensity_model(model_path)
    arr = dataio.load_slide(slide)
    patches = preprocess.extract_patches(
        arr, patch_side, model=model,
        emptiness_threshold=emptiness_threshold,
        intensity_floor=intensity_floor,
        slide_id=slide_id or Path(slide).stem)
    if not patches:
        raise EmptyDataset("every patch fell below the emptiness threshold")
    dataio.save_patches(patches, out)
    dataio.write_run_manifest(
        Path(out) / "run_manifest.json", "extract",
        {"slide": slide, "patch_side": patch_side,
         "emptiness_threshold": emptiness_threshold,
         "intensity_floor": intensity_floor},
        outputs=[str(Path(out) / "patches.npz")])
    click.echo(f"kept {len(patches)} patches of side {patch_side} -> {out}")


@main.command("synth")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-patches", default=200, show_default=True)
@click.option("--n-slides", default=10, show_default=True)
@click.option("--train-slides", default=8, show_default=True)
@click.option("--patch-side", default=64, show_default=True)
@click.option("--cells", nargs=2, type=int, default=(2, 6), show_default=True,
              help="Min and max nuclei per patch.")
@click.option("--cd3-fraction", default=0.5, show_default=True)
@click.option("--cd8-fraction", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_mapped_errors
def synth(out, n_patches, n_slides, train_slides, patch_side, cells,
          cd3_fraction, cd8_fraction, seed) -> None:
    """Generate a synthetic paired-stain dataset with known ground truth."""
    params = SynthParams(patch_side=patch_side, n_cells=tuple(cells),
                         cd3_fraction=cd3_fraction, cd8_fraction=cd8_fraction,
                         seed=seed)
    dataset = generate_dataset(params, n_patches, n_slides=n_slides,
                               train_slides=train_slides)
    dataset.save(out)
    dataio.write_run_manifest(
        Path(out) / "run_manifest.json", "synth",
        {"params": params.to_dict(), "n_patches": n_patches,
         "n_slides": n_slides, "train_slides": train_slides},
        outputs=[str(Path(out) / "arrays.npz")],
        fingerprints={"dataset": dataset.fingerprint()})
    n_train = len(dataset.indices("train"))
    click.echo(f"generated {len(dataset)} patches ({n_train} train, "
               f"{len(dataset) - n_train} test) -> {out}")


@main.command("stats")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--split", default=None,
              type=click.Choice(["train", "test"]),
              help="Restrict to one split; default covers everything.")
@_mapped_errors
def stats(dataset_dir, split) -> None:
    """Summarize cell counts, presence and area coverage per stain."""
    dataset = dataio.PairedDataset.load(dataset_dir)
    result = preprocess.compute_dataset_stats(dataset.masksets(split))
    click.echo(json.dumps(result.to_dict(), indent=2))


def _variant_from_flags(mutual, compositing, joint_discriminator,
                        regression):
    """Maps the feature flags onto a canonical variant name, or None when no
    flag was given."""
    if not (mutual or compositing or joint_discriminator or regression):
        return None
    if regression:
        if joint_discriminator:
            raise ValueError("--regression drops the discriminators and "
                             "cannot be combined with --joint-discriminator")
        return "regression-mc"
    if compositing and not mutual:
        raise ValueError("--compositing blends generated CD3 into the "
                         "second-stain encoder and requires --mutual")
    letters = "".join(letter for on, letter in ((mutual, "m"),
                                                (compositing, "c"),
                                                (joint_discriminator, "d"))
                      if on)
    return normalize_variant(letters)


@main.command("train")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_file", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML file with training fields.")
@click.option("--variant", default=None,
              help="Model variant (MCD, MC, MD, M, D, pix2pix, regression-mc).")
@click.option("--mutual", is_flag=True,
              help="Feed the second-stain encoder with generated CD3 (M).")
@click.option("--compositing", is_flag=True,
              help="Ramp from real to generated CD3 during training (C); "
                   "requires --mutual.")
@click.option("--joint-discriminator", is_flag=True,
              help="Score both stains with one discriminator (D).")
@click.option("--regression", is_flag=True,
              help="Train the mutual+compositing generator with L1 only.")
@click.option("--depth", type=int, default=None)
@click.option("--epochs", "total_epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", "base_lr", type=float, default=None)
@click.option("--lambda-l1", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", "resume_from", default=None,
              type=click.Path(exists=True, dir_okay=False))
@_mapped_errors
def train_cmd(dataset_dir, out, config_file, variant, mutual, compositing,
              joint_discriminator, regression, depth, total_epochs,
              batch_size, base_lr, lambda_l1, seed, resume_from) -> None:
    """Train a variant on a paired dataset.

    The variant comes either from --variant (or a config file) or from the
    feature flags --mutual/--compositing/--joint-discriminator/--regression;
    mixing the two spellings is allowed only when they agree.
    """
    flag_variant = _variant_from_flags(mutual, compositing,
                                       joint_discriminator, regression)
    if flag_variant is not None:
        if variant is not None and normalize_variant(variant) != flag_variant:
            raise ValueError(
                f"--variant {variant} conflicts with feature flags naming "
                f"{flag_variant}")
        variant = flag_variant
    config = resolve_train_config(config_file, {
        "variant": variant, "depth": depth, "total_epochs": total_epochs,
        "batch_size": batch_size, "base_lr": base_lr, "lambda_l1": lambda_l1,
        "seed": seed,
    })
    dataset = dataio.PairedDataset.load(dataset_dir)
    echo_progress = lambda done, total: click.echo(
        f"epoch {done}/{total} complete")
    result = train_loop(dataset, config, out, resume_from=resume_from,
                        progress=echo_progress)
    dataio.write_run_manifest(
        Path(out) / "run_manifest.json", "train",
        {"dataset": dataset_dir, "config": config.to_dict(),
         "resume_from": resume_from},
        outputs=[str(p) for p in result.checkpoints],
        fingerprints={"dataset": dataset.fingerprint()})
    if result.final_val:
        click.echo("final validation L1: "
                   f"cd3={result.final_val['l1_cd3']:.4f} "
                   f"cd8={result.final_val['l1_cd8']:.4f}")
    click.echo(f"final checkpoint: {result.final_checkpoint}")


def _load_assembly(checkpoint_path):
    from .train import load_checkpoint, restore_state, build_assembly, \
        build_optimizers
    import torch
    payload = torch.load(Path(checkpoint_path), map_location="cpu",
                         weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    payload = load_checkpoint(checkpoint_path, config)
    assembly = build_assembly(config)
    opt_g, opt_d = build_optimizers(assembly, config)
    restore_state(payload, assembly, opt_g, opt_d)
    assembly.eval()
    return assembly, config


@main.command("eval")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "test"]))
@click.option("--seed", default=0, show_default=True)
@_mapped_errors
def eval_cmd(dataset_dir, checkpoint, out, split, seed) -> None:
    """Score a trained model with relative mask intensity ratios."""
    dataset = dataio.PairedDataset.load(dataset_dir)
    assembly, _ = _load_assembly(checkpoint)
    report = evaluate.evaluate_model(assembly, dataset, split=split, seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    dataio.write_run_manifest(
        Path(out).with_suffix(".manifest.json"), "eval",
        {"dataset": dataset_dir, "checkpoint": checkpoint, "split": split,
         "seed": seed},
        outputs=[str(out)],
        fingerprints={"dataset": dataset.fingerprint()})
    for key, group in report.groups.items():
        click.echo(f"{key}: rel MIR {group.mean_rel:.3f} +/- "
                   f"{group.std_rel:.3f} over {group.used}/{group.count} "
                   f"patches")


@main.command("ablate")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--modes", default=",".join(evaluate.ABLATION_MODES),
              show_default=True, help="Comma-separated ablation modes.")
@click.option("--split", default="test", show_default=True)
@click.option("--seed", default=0, show_default=True)
@_mapped_errors
def ablate(dataset_dir, checkpoint, out, modes, split, seed) -> None:
    """Swap the second encoder's input source and compare CD8 quality."""
    dataset = dataio.PairedDataset.load(dataset_dir)
    assembly, _ = _load_assembly(checkpoint)
    results = {}
    for mode in [m.strip() for m in modes.split(",") if m.strip()]:
        report = evaluate.ablate_encoder_input(assembly, dataset, mode,
                                               seed=seed, split=split)
        group = report.group("cd8", split)
        results[mode] = report.to_dict()
        click.echo(f"{mode}: rel MIR {group.mean_rel:.3f} +/- "
                   f"{group.std_rel:.3f}")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(results, indent=2) + "\n")
    dataio.write_run_manifest(
        Path(out).with_suffix(".manifest.json"), "ablate",
        {"dataset": dataset_dir, "checkpoint": checkpoint, "modes": modes,
         "split": split, "seed": seed},
        outputs=[str(out)])


@main.command("render")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--n", default=4, show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--seed", default=0, show_default=True)
@_mapped_errors
def render(dataset_dir, checkpoint, out, n, split, seed) -> None:
    """Write a qualitative grid of real versus generated stains."""
    dataset = dataio.PairedDataset.load(dataset_dir)
    assembly, _ = _load_assembly(checkpoint)
    samples = evaluate.build_grid_samples(assembly, dataset, n=n, split=split,
                                          seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    evaluate.render_grid(samples, out)
    click.echo(f"wrote {len(samples)}-row grid -> {out}")


@main.command("segment")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Paired dataset whose hoechst channel gets re-segmented.")
@click.option("--intensity-floor", default=0.05, show_default=True)
@click.option("--min-area", default=10, show_default=True)
@click.option("--threshold", default=0.3, show_default=True,
              help="Per-nucleus mean marker intensity for positivity.")
@_mapped_errors
def segment(dataset_dir, intensity_floor, min_area, threshold) -> None:
    """Detect nuclei by blob labeling and classify marker positivity,
    reporting agreement with the stored masks."""
    dataset = dataio.PairedDataset.load(dataset_dir)
    agree_cd3 = agree_cd8 = 0
    for i in range(len(dataset)):
        ms = label_blobs(dataset.patch(i, "hoechst"),
                         intensity_floor=intensity_floor, min_area=min_area)
        ms = classify_positive(ms, dataset.patch(i, "cd3"), "cd3",
                               threshold=threshold)
        ms = classify_positive(ms, dataset.patch(i, "cd8"), "cd8",
                               threshold=threshold)
        truth = dataset.maskset(i)
        agree_cd3 += int(len(ms.cd3_positive) == len(truth.cd3_positive))
        agree_cd8 += int(len(ms.cd8_positive) == len(truth.cd8_positive))
    n = len(dataset)
    click.echo(f"cd3 count agreement: {agree_cd3}/{n}")
    click.echo(f"cd8 count agreement: {agree_cd8}/{n}")


if __name__ == "__main__":
    main()
