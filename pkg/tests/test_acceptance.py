"""End-to-end acceptance suite pinning the package's quantitative
guarantees: full-scale parameter totals, discriminator geometry, schedule
anchors, metric exactness, gradient correctness, mask invariants and
desk-scale training behavior.

Tests 09 and 10 share one desk-scale training run (full-width depth-6
model, 2,000 patches, 10 epochs) that takes on the order of two hours on
a single CPU core; everything else finishes in minutes.
"""
import gc
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from hoechstgan.evaluate import (ABLATION_MODES, ablate_encoder_input,
                                 evaluate_model, mir, mir_rel)
from hoechstgan.masks import MaskSet
from hoechstgan.model import (DiscriminatorSpec, GeneratorSpec,
                              StainGenerator, build_variant, receptive_field)
from hoechstgan.preprocess import (IntensityModel, fit_intensity_model,
                                   normalize_intensity)
from hoechstgan.seeding import derive_seed
from hoechstgan.synthdata import SynthParams, generate_dataset
from hoechstgan.train import (TrainConfig, build_assembly, build_optimizers,
                              learning_rate, train_loop, train_step,
                              validation_l1)

# Reference totals for the full-scale (depth 8, default width) builds.
PARAM_TARGETS = {
    "hoechstgan-mcd": 216_183_747,
    "hoechstgan-md": 216_183_747,
    "hoechstgan-mc": 218_947_332,
    "hoechstgan-m": 218_947_332,
    "hoechstgan-d": 92_045_635,
    "pix2pix": 114_344_836,
    "regression-mc": 213_406_914,
}

DESK_SEED = 417
DESK_PARAMS = SynthParams(patch_side=64, cd3_fraction=0.75,
                          cd8_fraction=0.75, seed=DESK_SEED)
DESK_CONFIG = TrainConfig(variant="mcd", depth=6, batch_size=16,
                          total_epochs=10, seed=DESK_SEED,
                          keep_checkpoints=6)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Trains the desk-scale model once; consumed by tests 09 and 10."""
    t0 = time.time()
    dataset = generate_dataset(DESK_PARAMS, 2000, n_slides=10,
                               train_slides=8)
    gen_elapsed = time.time() - t0
    out = tmp_path_factory.mktemp("desk") / "run"
    t0 = time.time()
    result = train_loop(dataset, DESK_CONFIG, out)
    train_elapsed = time.time() - t0
    print(f"\ndesk dataset: 2000 patches in {gen_elapsed:.0f}s, "
          f"mean real CD3 ratio {dataset.meta['mean_real_cd3_mir']:.2f}")
    print(f"desk training: 10 epochs in {train_elapsed / 60:.1f} min")
    return SimpleNamespace(dataset=dataset, config=DESK_CONFIG,
                           result=result, out=out,
                           train_minutes=train_elapsed / 60)


def test_01_full_scale_parameter_totals():
    counts = {}
    for name, target in PARAM_TARGETS.items():
        assembly = build_variant(name)
        counts[name] = assembly.count_parameters()
        residual = counts[name] - target
        print(f"{name}: counted {counts[name]:,} target {target:,} "
              f"residual {residual:+,} ({residual / target:+.4%})")
        if residual != 0:
            for gi, gen in enumerate(assembly.generators):
                for pname, p in gen.named_parameters():
                    print(f"  generator[{gi}].{pname}  "
                          f"{tuple(p.shape)}  {p.numel():,}")
            for di, disc in enumerate(assembly.discriminators):
                for pname, p in disc.named_parameters():
                    print(f"  discriminator[{di}].{pname}  "
                          f"{tuple(p.shape)}  {p.numel():,}")
        assert abs(residual) <= 0.02 * target, (
            f"{name}: {counts[name]:,} deviates more than 2% from "
            f"{target:,}")
        del assembly
        gc.collect()
    assert counts["hoechstgan-md"] == counts["hoechstgan-mcd"]
    assert counts["hoechstgan-m"] == counts["hoechstgan-mc"]


def test_02_discriminator_receptive_field():
    assert receptive_field(DiscriminatorSpec()) == 70


def test_03_intensity_normalization_anchors_and_fit():
    model = IntensityModel(mu=2.0, sigma=0.5, sample_count=100)
    assert normalize_intensity(2.0, model) == 0.0
    assert normalize_intensity(2.0 + 3 * 0.5, model) == 1.0
    assert normalize_intensity(2.0 + 1.5 * 0.5, model) == 0.5

    samples = np.random.default_rng(123).normal(2.0, 0.5, 10 ** 6)
    fit = fit_intensity_model(samples)
    assert abs(fit.mu - 2.0) / 2.0 < 0.01
    assert abs(fit.sigma - 0.5) / 0.5 < 0.01


def test_04_compositing_schedule():
    for total_epochs in (30, 10):
        schedule = TrainConfig(total_epochs=total_epochs).schedule
        scale = total_epochs / 30.0
        assert schedule.beta(schedule.start_epoch) <= 0.01
        assert schedule.beta(10.0 * scale) == pytest.approx(0.5, abs=1e-9)
        assert schedule.beta(schedule.end_epoch) >= 0.99
        grid = np.linspace(0.0, total_epochs, total_epochs * 1000 + 1)
        values = np.array([schedule.beta(t) for t in grid])
        assert np.all(np.diff(values) >= 0.0)


def test_05_learning_rate_schedule():
    cfg = TrainConfig(total_epochs=30)
    assert learning_rate(cfg, 0.0) == 2e-4
    assert learning_rate(cfg, 20.0) == 2e-4
    assert learning_rate(cfg, 25.0) == 1e-4
    assert learning_rate(cfg, 30.0) == 0.0
    assert abs(learning_rate(cfg, 20.0 + 1e-9) - 2e-4) < 1e-12
    assert abs(learning_rate(cfg, 20.0 - 1e-9) - 2e-4) < 1e-12


def _mir_oracle(image, mask, eps=1e-6):
    inside = [float(v) for v, m in zip(image.ravel(), mask.ravel()) if m]
    outside = [float(v) for v, m in zip(image.ravel(), mask.ravel()) if not m]
    return (sum(inside) / len(inside)) / max(sum(outside) / len(outside), eps)


def test_06_mask_intensity_ratio():
    image = np.full((8, 8), 0.25)
    mask = np.zeros((8, 8), dtype=bool)
    mask[:2, :4] = True
    image[mask] = 1.0
    assert mir(image, mask) == 4.0

    constant = np.full((8, 8), 0.375)
    assert mir(constant, mask) == 1.0
    assert mir_rel(image, image, mask) == 1.0

    rng = np.random.default_rng(5)
    for _ in range(100):
        img = rng.uniform(0.05, 1.0, (16, 16))
        other = rng.uniform(0.05, 1.0, (16, 16))
        m = rng.uniform(size=(16, 16)) < rng.uniform(0.2, 0.8)
        if not m.any():
            m[0, 0] = True
        if m.all():
            m[0, 0] = False
        assert mir(img, m) == pytest.approx(_mir_oracle(img, m), abs=1e-9)
        assert mir_rel(img, other, m) == pytest.approx(
            _mir_oracle(img, m) / _mir_oracle(other, m), abs=1e-9)
        for c in (0.5, 2.0):
            assert mir(c * img, m) == mir(img, m)


def _subnetwork_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def test_07_generator_shapes_and_gradients():
    spec = GeneratorSpec(depth=6, mutual=True)
    torch.manual_seed(11)
    gen = StainGenerator(spec)
    gen.seed_noise(77)
    x32 = torch.rand(2, 1, 64, 64) * 2 - 1
    with torch.no_grad():
        y1, y2 = gen(x32)
    for y in (y1, y2):
        assert y.shape == x32.shape
        assert float(y.max()) < 1.0 and float(y.min()) > -1.0

    # Nonzero e1 gradient from each task loss alone.
    for pick in (0, 1):
        gen.zero_grad(set_to_none=True)
        gen.seed_noise(77)
        outs = gen(x32)
        outs[pick].abs().mean().backward()
        e1_norm = sum(float(p.grad.abs().sum()) for p in gen.e1.parameters()
                      if p.grad is not None)
        assert e1_norm > 0.0, f"e1 untouched by task loss {pick}"

    # Finite differences need a smooth objective, so the check uses squared
    # error through the exact same forward paths; dropout is reseeded
    # before every evaluation so each pass draws identical masks.
    gen = gen.double().eval()
    make = torch.Generator().manual_seed(99)
    x = (torch.rand(1, 1, 64, 64, generator=make, dtype=torch.float64)
         * 2 - 1)
    t1 = torch.rand(1, 1, 64, 64, generator=make, dtype=torch.float64) - 0.5
    t2 = torch.rand(1, 1, 64, 64, generator=make, dtype=torch.float64) - 0.5

    def objective():
        gen.seed_noise(7)
        y1, y2 = gen(x)
        return ((y1 - t1) ** 2).mean() + ((y2 - t2) ** 2).mean()

    gen.zero_grad(set_to_none=True)
    objective().backward()
    grads = {name: p.grad.detach().clone()
             for name, p in gen.named_parameters() if p.grad is not None}

    probes: dict[str, list] = {"e1": [], "e2": [], "d1": [], "d2": []}
    for name, g in grads.items():
        sub = _subnetwork_of(name)
        flat = g.flatten().abs()
        idx = int(flat.argmax())
        probes[sub].append((float(flat[idx]), name, idx))
    for sub in probes:
        assert len(probes[sub]) >= 5, f"{sub} has too few parameter tensors"
        probes[sub] = sorted(probes[sub], reverse=True)[:5]

    params = dict(gen.named_parameters())
    with torch.no_grad():
        for sub, chosen in probes.items():
            for _, name, idx in chosen:
                p = params[name]
                flat = p.data.flatten()
                orig = float(flat[idx])
                h = 1e-5 * max(1.0, abs(orig))
                flat[idx] = orig + h
                plus = float(objective())
                flat[idx] = orig - h
                minus = float(objective())
                flat[idx] = orig
                fd = (plus - minus) / (2 * h)
                analytic = float(grads[name].flatten()[idx])
                rel = abs(fd - analytic) / max(abs(analytic), 1e-12)
                assert rel < 1e-3, (
                    f"{name}[{idx}]: analytic {analytic:.6e} vs finite "
                    f"difference {fd:.6e} (rel. err. {rel:.2e})")


def test_08_cd8_containment_over_fuzzed_masksets():
    rng = np.random.default_rng(88)
    injected = 0
    for _ in range(1000):
        k = int(rng.integers(0, 7))
        nuclei = np.zeros(576, dtype=np.int32)
        for label in range(1, k + 1):
            nuclei[(label - 1) * 10:label * 10] = label
        nuclei = nuclei.reshape(24, 24)
        valid = set(range(1, k + 1))

        bogus = {k + 1, k + 3, 99}
        cd3_pool = list(valid | (bogus if rng.random() < 0.5 else set()))
        cd3 = (None if rng.random() < 0.2 else frozenset(
            v for v in cd3_pool if rng.random() < 0.6))
        cd8_pool = list(valid | bogus)
        cd8 = frozenset(v for v in cd8_pool if rng.random() < 0.5)

        reference_cd3 = (cd3 or frozenset()) & frozenset(valid)
        if not cd8 <= reference_cd3:
            injected += 1
        ms = MaskSet(nuclei, cd3_positive=cd3, cd8_positive=cd8)
        cd3_after = ms.cd3_positive or frozenset()
        assert ms.cd8_positive <= cd3_after
        assert ms.cd8_positive <= ms.labels
    assert injected > 200, "fuzz produced too few violating candidates"


def test_09_desk_scale_training(desk_run, tmp_path_factory):
    dataset, config, result = (desk_run.dataset, desk_run.config,
                               desk_run.result)

    steps = [r for r in result.history if r["event"] == "step"]
    assert len(steps) == 10 * 100
    for record in steps:
        for key, value in record.items():
            if key != "event":
                assert math.isfinite(value), f"non-finite {key} in {record}"

    vals = [r for r in result.history if r["event"] == "val"]
    assert vals[0]["epoch"] == 0 and vals[-1]["epoch"] == 10
    for stain in ("l1_cd3", "l1_cd8"):
        start, end = vals[0][stain], vals[-1][stain]
        print(f"validation {stain}: {start:.4f} -> {end:.4f} "
              f"({end / start:.1%} of start)")
        assert end <= 0.5 * start, (
            f"{stain} fell only to {end / start:.1%} of its untrained value")

    # Untrained baseline: rebuild the exact epoch-0 model.
    torch.manual_seed(derive_seed(config.seed, "init"))
    untrained = build_assembly(config)
    untrained.seed_noise(derive_seed(config.seed, "dropout"))
    untrained.eval()
    replica_val = validation_l1(
        untrained, dataset, "test",
        noise_seed=derive_seed(config.seed, "val-0"),
        batch_size=config.val_batch_size)
    assert replica_val["l1_cd3"] == vals[0]["l1_cd3"]
    assert replica_val["l1_cd8"] == vals[0]["l1_cd8"]
    base_report = evaluate_model(untrained, dataset, split="test", seed=0)
    del untrained
    gc.collect()

    trained_report = evaluate_model(result.assembly, dataset, split="test",
                                    seed=0)
    for stain in ("cd3", "cd8"):
        base = base_report.group(stain, "test").mean_rel
        trained = trained_report.group(stain, "test").mean_rel
        print(f"relative ratio {stain}: untrained {base:.3f} "
              f"-> trained {trained:.3f} ({trained / base:.1f}x)")
        assert trained >= 2.0 * base, (
            f"{stain}: trained {trained:.3f} < 2x untrained {base:.3f}")

    # Resume equivalence: restart from the mid-run checkpoint and land on
    # bitwise identical weights and validation losses.
    ckpt5 = desk_run.out / "checkpoint_epoch_005.pt"
    assert ckpt5.exists()
    resumed_out = tmp_path_factory.mktemp("desk") / "resumed"
    resumed = train_loop(dataset, config, resumed_out, resume_from=ckpt5)
    assert resumed.final_val == result.final_val
    for a, b in zip(result.assembly.modules(), resumed.assembly.modules()):
        for (name, pa), (_, pb) in zip(a.state_dict().items(),
                                       b.state_dict().items()):
            assert torch.equal(pa, pb), f"resume diverged at {name}"
    print(f"desk training wall time: {desk_run.train_minutes:.1f} min")


def test_10_ablation_ordering(desk_run):
    groups = {}
    for mode in ABLATION_MODES:
        first = ablate_encoder_input(desk_run.result.assembly,
                                     desk_run.dataset, mode, seed=7)
        second = ablate_encoder_input(desk_run.result.assembly,
                                      desk_run.dataset, mode, seed=7)
        assert first.to_dict() == second.to_dict(), f"{mode} not deterministic"
        groups[mode] = first.group("cd8", "test")

    print(f"\n{'mode':<16} {'mean_rel':>9} {'std_rel':>9} {'used':>9}")
    for mode, g in groups.items():
        print(f"{mode:<16} {g.mean_rel:>9.3f} {g.std_rel:>9.3f} "
              f"{g.used:>4}/{g.count}")
    assert (groups["gaussian_noise"].mean_rel
            <= groups["generated"].mean_rel), (
        "noise-fed second stain outperformed the generated input")


JOINT_TERMS = {"d_real", "d_fake", "d_total", "g_adv_joint",
               "l1_cd3", "l1_cd8", "g_total"}
SEPARATE_TERMS = {"d1_real", "d1_fake", "d2_real", "d2_fake", "d_total",
                  "g_adv_cd3", "g_adv_cd8", "l1_cd3", "l1_cd8", "g_total"}
REGRESSION_TERMS = {"l1_cd3", "l1_cd8", "g_total"}


def _single_step(variant: str, lambda_l1: float):
    config = TrainConfig(variant=variant, depth=5,
                         encoder_filters=(8, 16, 16, 16, 16), batch_size=4,
                         total_epochs=2, seed=3, lambda_l1=lambda_l1)
    torch.manual_seed(101)
    assembly = build_assembly(config)
    assembly.seed_noise(55)
    opt_g, opt_d = build_optimizers(assembly, config)
    rng = np.random.default_rng(9)
    batch = {key: torch.from_numpy(
        rng.uniform(size=(4, 1, 32, 32)).astype(np.float32)) * 2 - 1
        for key in ("hoechst", "cd3", "cd8")}
    report = train_step(assembly, batch, config, 0.0, opt_g, opt_d)
    return assembly.discriminator_mode, report


def test_11_variant_loss_terms():
    for variant in sorted(PARAM_TARGETS):
        mode, heavy = _single_step(variant, 100.0)
        _, light = _single_step(variant, 0.0)

        expected = {"joint": JOINT_TERMS, "separate": SEPARATE_TERMS,
                    None: REGRESSION_TERMS}[mode]
        assert set(heavy.losses) == expected, variant
        assert set(light.losses) == expected, variant

        # The adversarial and reconstruction terms must not depend on the
        # L1 weight; only the combined objective may.
        for term in expected - {"g_total"}:
            assert heavy.losses[term] == light.losses[term], (variant, term)
        l1_sum = heavy.losses["l1_cd3"] + heavy.losses["l1_cd8"]
        assert (heavy.losses["g_total"] - light.losses["g_total"]
                == pytest.approx(100.0 * l1_sum, rel=1e-5)), variant
        if mode is None:
            assert heavy.losses["g_total"] == pytest.approx(
                100.0 * l1_sum, rel=1e-6)
            assert light.losses["g_total"] == 0.0
