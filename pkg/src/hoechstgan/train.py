"""Training: compositing curriculum, adversarial and L1 losses, the
optimization loop and bit-compatible checkpointing.

During the curriculum the second encoder's input blends the generated
first stain into the real one: beta 0 feeds pure real, beta 1 pure
generated, with a logistic ramp between the start and end epochs. Epoch
time is fractional and advances per batch, so the blend moves within an
epoch too. Checkpoints carry optimizer and RNG state; resuming from one
reproduces the uninterrupted run bitwise.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (EmptyDataset, ModeMismatch, NonFiniteLoss,
                     ResumeMismatch, ShapeMismatch)
from .model import (GeneratorSpec, VariantAssembly, build_variant,
                    normalize_variant)
from .seeding import derive_seed

_CHECKPOINT_VERSION = 1

# Logistic steepness putting the unclamped blend at 1% and 99% exactly at
# the window edges (2 epochs from the midpoint at reference scale): log(99)/2.
DEFAULT_STEEPNESS = math.log(99.0) / 2.0

# Reference-scale schedule anchors, kept as fractions of the 30-epoch run so
# shorter runs preserve the shape of the curriculum and the decay.
_BASE_TOTAL = 30.0
_BASE_COMPOSITE = (8.0, 10.0, 12.0)
_BASE_DECAY_START = 20.0


@dataclass(frozen=True)
class FractionalEpoch:
    """Continuous training time: epoch plus fraction of the batch grid."""

    epoch: int
    batch: int = 0
    batches_per_epoch: int = 1

    def __post_init__(self) -> None:
        if self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be >= 1")
        if not 0 <= self.batch < self.batches_per_epoch:
            raise ValueError("batch index outside [0, batches_per_epoch)")
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")

    @property
    def value(self) -> float:
        return self.epoch + self.batch / self.batches_per_epoch

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class CompositeSchedule:
    """Logistic blend schedule hard-clamped at the window edges: exactly 0
    up to the start epoch, exactly 1 from the end epoch, the logistic
    strictly in between (about 1% just inside the window at default
    steepness, 0.5 at the midpoint)."""

    start_epoch: float = 8.0
    mid_epoch: float = 10.0
    end_epoch: float = 12.0
    steepness: float = DEFAULT_STEEPNESS

    def __post_init__(self) -> None:
        if not self.start_epoch < self.mid_epoch < self.end_epoch:
            raise ValueError("schedule epochs must satisfy start < mid < end")
        if self.steepness <= 0:
            raise ValueError("steepness must be > 0")

    def beta(self, t) -> float:
        t = float(t)
        if t <= self.start_epoch:
            return 0.0
        if t >= self.end_epoch:
            return 1.0
        return 1.0 / (1.0 + math.exp(-self.steepness * (t - self.mid_epoch)))

    @classmethod
    def for_total_epochs(cls, total_epochs: float,
                         steepness: float = DEFAULT_STEEPNESS) -> "CompositeSchedule":
        """Compresses the anchors proportionally. Steepness scales
        inversely so the blend curve keeps its shape in normalized time:
        the underlying logistic is at 1% and 99% where the edge clamps
        take over."""
        f = float(total_epochs) / _BASE_TOTAL
        s, m, e = (v * f for v in _BASE_COMPOSITE)
        return cls(start_epoch=s, mid_epoch=m, end_epoch=e,
                   steepness=steepness / f)


def beta(schedule: CompositeSchedule, t) -> float:
    return schedule.beta(t)


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run.

    Schedule fields left as None derive from ``total_epochs`` preserving
    the reference fractions (compositing ramp 8/10/12 of 30, decay from
    20 of 30). The root seed feeds named substreams for data order, weight
    init, dropout noise and validation.
    """

    variant: str = "hoechstgan-mcd"
    depth: int = 8
    encoder_filters: tuple[int, ...] | None = None
    batch_size: int = 64
    total_epochs: int = 30
    base_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_l1: float = 100.0
    decay_start_epoch: float | None = None
    composite_start: float | None = None
    composite_mid: float | None = None
    composite_end: float | None = None
    composite_steepness: float = DEFAULT_STEEPNESS
    backprop_through_cd3: bool = True
    seed: int = 0
    bce_eps: float = 1e-7
    val_batch_size: int = 16
    keep_checkpoints: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.encoder_filters is not None:
            object.__setattr__(self, "encoder_filters",
                               tuple(int(f) for f in self.encoder_filters))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.keep_checkpoints < 1:
            raise ValueError("keep_checkpoints must be >= 1")
        ds = self.resolved_decay_start
        if self.total_epochs > 0 and not 0 <= ds <= self.total_epochs:
            raise ValueError("decay_start_epoch must lie in [0, total_epochs]")
        self.schedule  # validates ordering

    @property
    def resolved_decay_start(self) -> float:
        if self.decay_start_epoch is not None:
            return float(self.decay_start_epoch)
        return _BASE_DECAY_START / _BASE_TOTAL * self.total_epochs

    @property
    def schedule(self) -> CompositeSchedule:
        explicit = (self.composite_start, self.composite_mid, self.composite_end)
        if all(v is None for v in explicit):
            if self.total_epochs == 0:
                return CompositeSchedule(steepness=self.composite_steepness)
            return CompositeSchedule.for_total_epochs(
                self.total_epochs, steepness=self.composite_steepness)
        if any(v is None for v in explicit):
            raise ValueError(
                "composite_start/mid/end must be given together or not at all")
        return CompositeSchedule(start_epoch=self.composite_start,
                                 mid_epoch=self.composite_mid,
                                 end_epoch=self.composite_end,
                                 steepness=self.composite_steepness)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


def learning_rate(config: TrainConfig, t) -> float:
    """Constant base rate, then linear decay to zero at total_epochs."""
    t = float(t)
    ds = config.resolved_decay_start
    total = float(config.total_epochs)
    if t <= ds or total <= ds:
        return config.base_lr
    return config.base_lr * max(0.0, (total - t) / (total - ds))


def composite(fake, real, beta_value: float):
    """Convex blend of generated and real first stain; 0 returns the real
    input unchanged, 1 the generated one."""
    if not 0.0 <= beta_value <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta_value}")
    if tuple(fake.shape) != tuple(real.shape):
        raise ShapeMismatch(
            f"fake shape {tuple(fake.shape)} != real shape {tuple(real.shape)}")
    if beta_value == 0.0:
        return real
    if beta_value == 1.0:
        return fake
    return fake * beta_value + real * (1.0 - beta_value)


def _clamped_bce(logits: torch.Tensor, target_real: bool,
                 eps: float = 1e-7) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(eps, 1.0 - eps)
    return -(torch.log(p) if target_real else torch.log1p(-p)).mean()


@dataclass
class CganLoss:
    """Adversarial objective split into its expectation terms.

    ``discriminator`` and ``generator`` are the scalars to optimize;
    ``d_terms``/``g_terms`` carry every named expectation separately.
    """

    discriminator: torch.Tensor
    generator: torch.Tensor
    d_terms: dict
    g_terms: dict

    @property
    def terms(self) -> dict:
        return {**self.d_terms, **self.g_terms}


def cgan_loss_separate(*, real_cd3_logits, fake_cd3_logits, real_cd8_logits,
                       fake_cd8_logits, fake_cd3_logits_g=None,
                       fake_cd8_logits_g=None, eps: float = 1e-7) -> CganLoss:
    """Per-stain adversarial objective: four discriminator expectation
    terms (real/fake per stain) and two non-saturating generator terms.

    The ``_g`` logits are the non-detached fake scores for the generator
    side; they default to the discriminator-side ones.
    """
    if fake_cd3_logits_g is None:
        fake_cd3_logits_g = fake_cd3_logits
    if fake_cd8_logits_g is None:
        fake_cd8_logits_g = fake_cd8_logits
    d_terms = {
        "d1_real": _clamped_bce(real_cd3_logits, True, eps),
        "d1_fake": _clamped_bce(fake_cd3_logits, False, eps),
        "d2_real": _clamped_bce(real_cd8_logits, True, eps),
        "d2_fake": _clamped_bce(fake_cd8_logits, False, eps),
    }
    g_terms = {
        "g_adv_cd3": _clamped_bce(fake_cd3_logits_g, True, eps),
        "g_adv_cd8": _clamped_bce(fake_cd8_logits_g, True, eps),
    }
    return CganLoss(discriminator=sum(d_terms.values()),
                    generator=sum(g_terms.values()),
                    d_terms=d_terms, g_terms=g_terms)


def cgan_loss_joint(*, real_logits, fake_logits, fake_logits_g=None,
                    eps: float = 1e-7) -> CganLoss:
    """Joint adversarial objective over both stains at once: two
    discriminator expectation terms and one generator term."""
    if fake_logits_g is None:
        fake_logits_g = fake_logits
    d_terms = {
        "d_real": _clamped_bce(real_logits, True, eps),
        "d_fake": _clamped_bce(fake_logits, False, eps),
    }
    g_terms = {"g_adv_joint": _clamped_bce(fake_logits_g, True, eps)}
    return CganLoss(discriminator=sum(d_terms.values()),
                    generator=sum(g_terms.values()),
                    d_terms=d_terms, g_terms=g_terms)


def cgan_loss(mode: str, **scores) -> CganLoss:
    """Dispatches on discriminator mode; raises ModeMismatch for a mode
    with no adversarial objective or an unknown one."""
    if mode == "separate":
        return cgan_loss_separate(**scores)
    if mode == "joint":
        return cgan_loss_joint(**scores)
    raise ModeMismatch(f"no adversarial loss for mode {mode!r}")


def l1_loss(fake, real):
    if tuple(fake.shape) != tuple(real.shape):
        raise ShapeMismatch(
            f"fake shape {tuple(fake.shape)} != real shape {tuple(real.shape)}")
    if isinstance(fake, torch.Tensor):
        return (fake - real).abs().mean()
    return float(np.abs(np.asarray(fake) - np.asarray(real)).mean())


def total_generator_objective(adv_term, l1_cd3, l1_cd8, lambda_l1: float):
    """Full generator objective: adversarial term plus weighted L1 for
    both stains. ``adv_term`` may be None for pure regression."""
    if lambda_l1 < 0:
        raise ValueError("lambda_l1 must be >= 0")
    reconstruction = lambda_l1 * (l1_cd3 + l1_cd8)
    if adv_term is None:
        return reconstruction
    return adv_term + reconstruction


@dataclass
class StepReport:
    """Scalar diagnostics from one optimization step."""

    t: float
    beta: float
    lr: float
    losses: dict


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def _check_finite(scalars: dict, t: float) -> None:
    bad = {k: v for k, v in scalars.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLoss(f"non-finite losses at t={t:.4f}: {bad}")


def _batch_tensors(batch) -> tuple:
    x, y1, y2 = (batch[k] for k in ("hoechst", "cd3", "cd8"))
    if not (x.shape == y1.shape == y2.shape):
        raise ShapeMismatch(
            f"channel shapes disagree: {tuple(x.shape)}, {tuple(y1.shape)}, "
            f"{tuple(y2.shape)}")
    return x, y1, y2


def _generator_forward(assembly: VariantAssembly, x, y1_real, beta_value,
                       backprop_through_cd3: bool):
    """Runs the generator side, honoring compositing and detach policy."""
    if assembly.paired:
        return assembly.generators[0](x), assembly.generators[1](x)
    gen = assembly.generators[0]
    feats1 = gen.encode(x)
    y1_fake = gen.decode_primary(feats1)
    if assembly.mutual:
        if assembly.compositing:
            e2_in = composite(y1_fake, y1_real, beta_value)
        else:
            e2_in = y1_fake
        if not backprop_through_cd3:
            e2_in = e2_in.detach()
        y2_fake = gen.decode_secondary(feats1, e2_in)
    else:
        y2_fake = gen.d2([feats1])
    return y1_fake, y2_fake


def train_step(assembly: VariantAssembly, batch, config: TrainConfig, t,
               opt_g, opt_d=None) -> StepReport:
    """One discriminator update (when adversarial) then one generator
    update on a single batch. Sets the scheduled learning rate on both
    optimizers and reports every loss term as a float."""
    t_value = float(t)
    beta_value = config.schedule.beta(t_value) if assembly.compositing else 1.0
    lr = learning_rate(config, t_value)
    for opt in (opt_g, opt_d):
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = lr

    x, y1_real, y2_real = _batch_tensors(batch)
    y1_fake, y2_fake = _generator_forward(assembly, x, y1_real, beta_value,
                                          config.backprop_through_cd3)
    scalars: dict = {}
    adv_for_g = None

    if assembly.adversarial:
        if opt_d is None:
            raise ModeMismatch("adversarial variant requires a discriminator "
                               "optimizer")
        mode = assembly.discriminator_mode
        if mode == "separate":
            d1, d2 = assembly.discriminators
            d_loss = cgan_loss(
                mode,
                real_cd3_logits=d1(torch.cat([x, y1_real], dim=1)),
                fake_cd3_logits=d1(torch.cat([x, y1_fake.detach()], dim=1)),
                real_cd8_logits=d2(torch.cat([x, y2_real], dim=1)),
                fake_cd8_logits=d2(torch.cat([x, y2_fake.detach()], dim=1)),
                eps=config.bce_eps)
        else:
            d = assembly.discriminators[0]
            d_loss = cgan_loss(
                mode,
                real_logits=d(torch.cat([x, y1_real, y2_real], dim=1)),
                fake_logits=d(torch.cat([x, y1_fake.detach(),
                                         y2_fake.detach()], dim=1)),
                eps=config.bce_eps)
        scalars.update({k: _scalar(v) for k, v in d_loss.d_terms.items()})
        scalars["d_total"] = _scalar(d_loss.discriminator)
        _check_finite(scalars, t_value)
        opt_d.zero_grad(set_to_none=True)
        d_loss.discriminator.backward()
        opt_d.step()

        # Generator scores go through the just-updated discriminator.
        if mode == "separate":
            d1, d2 = assembly.discriminators
            g_terms = {
                "g_adv_cd3": _clamped_bce(d1(torch.cat([x, y1_fake], dim=1)),
                                          True, config.bce_eps),
                "g_adv_cd8": _clamped_bce(d2(torch.cat([x, y2_fake], dim=1)),
                                          True, config.bce_eps),
            }
        else:
            d = assembly.discriminators[0]
            g_terms = {
                "g_adv_joint": _clamped_bce(
                    d(torch.cat([x, y1_fake, y2_fake], dim=1)), True,
                    config.bce_eps),
            }
        adv_for_g = sum(g_terms.values())
        scalars.update({k: _scalar(v) for k, v in g_terms.items()})

    l1_cd3 = l1_loss(y1_fake, y1_real)
    l1_cd8 = l1_loss(y2_fake, y2_real)
    g_total = total_generator_objective(adv_for_g, l1_cd3, l1_cd8,
                                        config.lambda_l1)
    scalars["l1_cd3"] = _scalar(l1_cd3)
    scalars["l1_cd8"] = _scalar(l1_cd8)
    scalars["g_total"] = _scalar(g_total)
    _check_finite(scalars, t_value)
    opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    opt_g.step()

    return StepReport(t=t_value, beta=beta_value, lr=lr, losses=scalars)


def build_assembly(config: TrainConfig) -> VariantAssembly:
    spec = GeneratorSpec(depth=config.depth,
                         encoder_filters=config.encoder_filters)
    return build_variant(config.variant, gen_spec=spec)


def build_optimizers(assembly: VariantAssembly, config: TrainConfig):
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(assembly.generator_parameters(),
                             lr=config.base_lr, betas=betas)
    opt_d = None
    if assembly.adversarial:
        opt_d = torch.optim.Adam(assembly.discriminator_parameters(),
                                 lr=config.base_lr, betas=betas)
    return opt_g, opt_d


@contextmanager
def _noise_scope(assembly, seed: int):
    """Temporarily reseeds dropout so evaluation passes never disturb the
    training noise stream."""
    stashed = [g.noise_rng for g in assembly.generators]
    assembly.seed_noise(seed)
    try:
        yield
    finally:
        for g, rng in zip(assembly.generators, stashed):
            g.noise_rng = rng


def validation_l1(assembly: VariantAssembly, dataset, split: str = "test",
                  noise_seed: int = 0, batch_size: int = 16) -> dict | None:
    """Mean absolute error of both stains over a split, inference path,
    signed range. None when the split is empty."""
    indices = dataset.indices(split)
    if len(indices) == 0:
        return None
    was_training = assembly.generators[0].training
    assembly.eval()
    sums = {"cd3": 0.0, "cd8": 0.0}
    count = 0
    with _noise_scope(assembly, noise_seed), torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            x = torch.from_numpy(dataset.hoechst[chunk]).unsqueeze(1) * 2 - 1
            y1r = torch.from_numpy(dataset.cd3[chunk]).unsqueeze(1) * 2 - 1
            y2r = torch.from_numpy(dataset.cd8[chunk]).unsqueeze(1) * 2 - 1
            y1f, y2f = assembly.predict(x)
            sums["cd3"] += float((y1f - y1r).abs().sum())
            sums["cd8"] += float((y2f - y2r).abs().sum())
            count += x.numel()
    if was_training:
        assembly.train()
    return {"l1_cd3": sums["cd3"] / count, "l1_cd8": sums["cd8"] / count}


def save_checkpoint(path, assembly: VariantAssembly, opt_g, opt_d,
                    config: TrainConfig, epoch: int,
                    fractional_epoch: float) -> Path:
    """Atomically writes the full training state for bit-compatible resume."""
    payload = {
        "version": _CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "variant": assembly.name,
        "epoch": int(epoch),
        "fractional_epoch": float(fractional_epoch),
        "generators": [g.state_dict() for g in assembly.generators],
        "discriminators": [d.state_dict() for d in assembly.discriminators],
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict() if opt_d is not None else None,
        "noise_rng": [g.noise_rng.get_state() if g.noise_rng is not None
                      else None for g in assembly.generators],
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config: TrainConfig) -> dict:
    """Loads a checkpoint, refusing configurations that differ from the
    one that produced it."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("config_hash") != config_hash(config):
        theirs = payload.get("config", {})
        ours = config.to_dict()
        diff = sorted(k for k in set(theirs) | set(ours)
                      if theirs.get(k) != ours.get(k))
        raise ResumeMismatch(
            f"checkpoint config differs from requested config in: {diff}")
    return payload


def restore_state(payload: dict, assembly: VariantAssembly, opt_g, opt_d) -> None:
    for g, sd in zip(assembly.generators, payload["generators"]):
        g.load_state_dict(sd)
    for d, sd in zip(assembly.discriminators, payload["discriminators"]):
        d.load_state_dict(sd)
    opt_g.load_state_dict(payload["opt_g"])
    if opt_d is not None and payload["opt_d"] is not None:
        opt_d.load_state_dict(payload["opt_d"])
    for g, state in zip(assembly.generators, payload["noise_rng"]):
        if state is not None:
            gen = torch.Generator()
            gen.set_state(state)
            g.noise_rng = gen
    torch.set_rng_state(payload["torch_rng"])


@dataclass
class TrainResult:
    assembly: VariantAssembly
    config: TrainConfig
    checkpoints: list
    final_checkpoint: Path | None
    metrics_path: Path
    final_val: dict | None
    history: list = field(default_factory=list)


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def train_loop(dataset, config: TrainConfig, out_dir, resume_from=None,
               stop_after_epoch: int | None = None,
               progress=None) -> TrainResult:
    """Trains a variant on a paired dataset.

    Per-epoch batch order comes from an epoch-indexed RNG, so it does not
    depend on how many epochs ran in this process; combined with restored
    optimizer, weight and noise state this makes resumed runs bitwise
    equal to uninterrupted ones. Checkpoints are written each epoch and
    pruned to the newest ``config.keep_checkpoints``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise EmptyDataset("dataset has no training patches")
    if stop_after_epoch is not None and not 0 < stop_after_epoch <= config.total_epochs:
        raise ValueError("stop_after_epoch must lie in (0, total_epochs]")

    torch.manual_seed(derive_seed(config.seed, "init"))
    assembly = build_assembly(config)
    assembly.seed_noise(derive_seed(config.seed, "dropout"))
    opt_g, opt_d = build_optimizers(assembly, config)

    metrics_path = out / "metrics.jsonl"
    start_epoch = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, config)
        restore_state(payload, assembly, opt_g, opt_d)
        start_epoch = int(payload["epoch"])
    else:
        metrics_path.write_text("")

    data_seed = derive_seed(config.seed, "data")
    batch_size = config.batch_size
    bpe = max(1, math.ceil(len(train_idx) / batch_size))
    history: list[dict] = []

    def log(record: dict) -> None:
        history.append(record)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def validate(epoch: int) -> dict | None:
        val = validation_l1(assembly, dataset, "test",
                            noise_seed=derive_seed(config.seed, f"val-{epoch}"),
                            batch_size=config.val_batch_size)
        if val is not None:
            log({"event": "val", "epoch": epoch, **val})
        return val

    checkpoints: list[Path] = []

    def checkpoint(epoch: int) -> Path:
        path = save_checkpoint(out / f"checkpoint_epoch_{epoch:03d}.pt",
                               assembly, opt_g, opt_d, config, epoch,
                               float(epoch))
        checkpoints.append(path)
        while len(checkpoints) > config.keep_checkpoints:
            old = checkpoints.pop(0)
            old.unlink(missing_ok=True)
        return path

    final_val = None
    if start_epoch == 0:
        final_val = validate(0)
    if config.total_epochs == 0:
        path = checkpoint(0)
        return TrainResult(assembly=assembly, config=config,
                           checkpoints=checkpoints, final_checkpoint=path,
                           metrics_path=metrics_path, final_val=final_val,
                           history=history)

    last_epoch = (stop_after_epoch if stop_after_epoch is not None
                  else config.total_epochs)
    assembly.train()
    for epoch in range(start_epoch, last_epoch):
        order_rng = np.random.default_rng((data_seed, epoch))
        order = train_idx[order_rng.permutation(len(train_idx))]
        for b in range(bpe):
            sel = order[b * batch_size:(b + 1) * batch_size]
            t = FractionalEpoch(epoch, b, bpe)
            batch = {
                "hoechst": torch.from_numpy(dataset.hoechst[sel]).unsqueeze(1) * 2 - 1,
                "cd3": torch.from_numpy(dataset.cd3[sel]).unsqueeze(1) * 2 - 1,
                "cd8": torch.from_numpy(dataset.cd8[sel]).unsqueeze(1) * 2 - 1,
            }
            report = train_step(assembly, batch, config, t, opt_g, opt_d)
            log({"event": "step", "epoch": epoch, "batch": b, "t": report.t,
                 "beta": report.beta, "lr": report.lr, **report.losses})
        assembly.eval()
        final_val = validate(epoch + 1)
        checkpoint(epoch + 1)
        assembly.train()
        if progress is not None:
            progress(epoch + 1, last_epoch)

    assembly.eval()
    return TrainResult(assembly=assembly, config=config,
                       checkpoints=checkpoints,
                       final_checkpoint=checkpoints[-1] if checkpoints else None,
                       metrics_path=metrics_path, final_val=final_val,
                       history=history)
