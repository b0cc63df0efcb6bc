"""Network architectures: shared-encoder dual-decoder generator and
patch discriminators, plus named model variants.

The generator is a U-Net pair with one source encoder (e1) over the
nuclear channel and, in mutual mode, a second encoder (e2) over the first
predicted stain. Decoder d1 reads e1 alone; d2 reads the channel-wise
concatenation of both latent codes and of both encoders' skip features at
every stage. All downsampling and upsampling convolutions use 4x4 kernels
with stride 2, so a network of depth n consumes patches of side 2**n.

Dropout in the first decoder blocks stays active at train and test time;
it is the generator's only noise source.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .errors import NotMutual, ShapeMismatch, SpecMismatch, UnknownVariant

_DEFAULT_DEPTH = 8


def default_encoder_filters(depth: int) -> tuple[int, ...]:
    """Filter widths 64, 128, 256 then 512 repeated to the bottleneck."""
    base = (64, 128, 256)
    if depth <= len(base):
        return base[:depth]
    return base + (512,) * (depth - len(base))


@dataclass(frozen=True)
class GeneratorSpec:
    """Structural description of the dual-decoder generator.

    ``d1_filters`` and ``d2_filters`` list the feature width entering each
    decoder block before skip concatenation; they are fully determined by
    the encoder (reversed order, doubled for d2 when mutual) and validated
    against it.
    """

    depth: int = _DEFAULT_DEPTH
    encoder_filters: tuple[int, ...] | None = None
    d1_filters: tuple[int, ...] | None = None
    d2_filters: tuple[int, ...] | None = None
    dropout_blocks: int = 4
    dropout_rate: float = 0.5
    mutual: bool = True
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self) -> None:
        if self.depth < 3:
            raise SpecMismatch(f"depth must be >= 3, got {self.depth}")
        enc = self.encoder_filters
        enc = default_encoder_filters(self.depth) if enc is None else tuple(enc)
        if len(enc) != self.depth:
            raise SpecMismatch(
                f"encoder_filters has {len(enc)} entries for depth {self.depth}")
        if any(f < 1 for f in enc):
            raise SpecMismatch("encoder filter widths must be positive")
        d1 = tuple(reversed(enc))
        if self.d1_filters is not None and tuple(self.d1_filters) != d1:
            raise SpecMismatch(
                "d1_filters must mirror the encoder in reverse order")
        d2 = tuple(2 * w for w in d1) if self.mutual else d1
        if self.d2_filters is not None and tuple(self.d2_filters) != d2:
            raise SpecMismatch(
                "d2_filters must be the doubled mirror when mutual, else equal d1")
        if not 0 <= self.dropout_blocks <= self.depth - 1:
            raise SpecMismatch(
                f"dropout_blocks must lie in [0, {self.depth - 1}]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecMismatch("dropout_rate must lie in [0, 1)")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecMismatch("channel counts must be positive")
        object.__setattr__(self, "encoder_filters", enc)
        object.__setattr__(self, "d1_filters", d1)
        object.__setattr__(self, "d2_filters", d2)

    @property
    def input_side(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Patch discriminator layout: stride-2 stages, one stride-1 stage,
    then a 1-channel scoring convolution."""

    mode: str = "separate"
    filters: tuple[int, ...] = (64, 128, 256, 512)
    leaky_slope: float = 0.2
    source_channels: int = 1
    stain_channels: int = 1

    def __post_init__(self) -> None:
        if self.mode not in ("separate", "joint"):
            raise SpecMismatch(
                f"mode must be 'separate' or 'joint', got {self.mode!r}")
        if len(self.filters) < 2 or any(f < 1 for f in self.filters):
            raise SpecMismatch("filters must be >= 2 positive widths")
        if self.source_channels < 1 or self.stain_channels < 1:
            raise SpecMismatch("channel counts must be positive")

    @property
    def in_channels(self) -> int:
        stains = 1 if self.mode == "separate" else 2
        return self.source_channels + stains * self.stain_channels

    @property
    def strides(self) -> tuple[int, ...]:
        return (2,) * (len(self.filters) - 1) + (1,)


def receptive_field_chain(layers) -> int:
    """Receptive field of a stack of (kernel, stride) convolutions."""
    rf, jump = 1, 1
    for kernel, stride in layers:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Input pixels seen by one output score of the discriminator."""
    layers = [(4, s) for s in spec.strides] + [(4, 1)]
    return receptive_field_chain(layers)


class AlwaysDropout(nn.Module):
    """Inverted dropout that stays active in eval mode.

    Noise comes from the provided torch.Generator factory when set, else
    the global RNG; either way the layer never switches itself off, test
    time sampling being part of the model's behavior.
    """

    def __init__(self, p: float, rng_provider=None) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self._rng_provider = rng_provider

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 0.0:
            return x
        gen = self._rng_provider() if self._rng_provider is not None else None
        keep = torch.rand(x.shape, generator=gen, device=x.device,
                          dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)

    def extra_repr(self) -> str:
        return f"p={self.p}"


class UnetEncoder(nn.Module):
    """Downsampling tower returning features from every stage."""

    def __init__(self, in_channels: int, filters: tuple[int, ...]) -> None:
        super().__init__()
        blocks = []
        prev = in_channels
        last = len(filters) - 1
        for i, width in enumerate(filters):
            layers: list[nn.Module] = [
                nn.Conv2d(prev, width, kernel_size=4, stride=2, padding=1,
                          bias=False)]
            if 0 < i < last:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU(inplace=True))
            blocks.append(nn.Sequential(*layers))
            prev = width
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats


class UnetDecoder(nn.Module):
    """Upsampling tower consuming skip features from one or two encoders.

    Stage widths give the feature count entering each block; blocks after
    the first also receive the matching encoder stage from every source.
    The final block maps straight to the output channels through tanh.
    """

    def __init__(self, stage_widths: tuple[int, ...],
                 encoder_filters: tuple[int, ...], n_sources: int,
                 out_channels: int, dropout_blocks: int, dropout_rate: float,
                 rng_provider=None) -> None:
        super().__init__()
        depth = len(encoder_filters)
        if len(stage_widths) != depth:
            raise SpecMismatch("decoder stage count must equal encoder depth")
        if stage_widths[0] != n_sources * encoder_filters[-1]:
            raise SpecMismatch(
                "first decoder stage width must match the fused latent width")
        self.n_sources = n_sources
        blocks = []
        for i in range(depth):
            in_ch = stage_widths[i]
            if i > 0:
                in_ch += n_sources * encoder_filters[depth - 1 - i]
            if i < depth - 1:
                layers: list[nn.Module] = [
                    nn.ConvTranspose2d(in_ch, stage_widths[i + 1],
                                       kernel_size=4, stride=2, padding=1,
                                       bias=False),
                    nn.BatchNorm2d(stage_widths[i + 1])]
                if i < dropout_blocks:
                    layers.append(AlwaysDropout(dropout_rate, rng_provider))
                layers.append(nn.LeakyReLU(0.2, inplace=True))
            else:
                layers = [nn.ConvTranspose2d(in_ch, out_channels,
                                             kernel_size=4, stride=2,
                                             padding=1, bias=True),
                          nn.Tanh()]
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, feature_lists: list[list[torch.Tensor]]) -> torch.Tensor:
        if len(feature_lists) != self.n_sources:
            raise ShapeMismatch(
                f"decoder wired for {self.n_sources} encoders, "
                f"got {len(feature_lists)}")
        depth = len(self.blocks)
        h = torch.cat([fl[-1] for fl in feature_lists], dim=1)
        for i, block in enumerate(self.blocks):
            if i > 0:
                skips = [fl[depth - 1 - i] for fl in feature_lists]
                h = torch.cat([h] + skips, dim=1)
            h = block(h)
        return h


def init_weights(module: nn.Module) -> None:
    """Gaussian init: convolutions N(0, 0.02), norm scales N(1, 0.02)."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class StainGenerator(nn.Module):
    """Dual-decoder generator over one source channel.

    forward_g1 produces the first stain from e1 alone; forward_g2 encodes a
    provided first-stain image with e2 and fuses both paths into the second
    stain. In non-mutual mode e2 is absent and d2 reads e1 only.
    """

    def __init__(self, spec: GeneratorSpec) -> None:
        super().__init__()
        self.spec = spec
        self.noise_rng: torch.Generator | None = None
        provider = lambda: self.noise_rng
        self.e1 = UnetEncoder(spec.in_channels, spec.encoder_filters)
        self.e2 = (UnetEncoder(spec.out_channels, spec.encoder_filters)
                   if spec.mutual else None)
        self.d1 = UnetDecoder(spec.d1_filters, spec.encoder_filters, 1,
                              spec.out_channels, spec.dropout_blocks,
                              spec.dropout_rate, provider)
        self.d2 = UnetDecoder(spec.d2_filters, spec.encoder_filters,
                              2 if spec.mutual else 1, spec.out_channels,
                              spec.dropout_blocks, spec.dropout_rate, provider)
        self.apply(init_weights)

    @property
    def mutual(self) -> bool:
        return self.spec.mutual

    def seed_noise(self, seed: int) -> None:
        gen = torch.Generator()
        gen.manual_seed(int(seed))
        self.noise_rng = gen

    def _check_input(self, x: torch.Tensor, channels: int, what: str) -> None:
        side = self.spec.input_side
        if x.dim() != 4 or x.shape[1] != channels:
            raise ShapeMismatch(
                f"{what} must be [N, {channels}, H, W], got {tuple(x.shape)}")
        if x.shape[2] != side or x.shape[3] != side:
            raise ShapeMismatch(
                f"{what} must be {side}x{side} for depth {self.spec.depth}, "
                f"got {tuple(x.shape[2:])}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(x, self.spec.in_channels, "source input")
        return self.e1(x)

    def decode_primary(self, feats1: list[torch.Tensor]) -> torch.Tensor:
        return self.d1([feats1])

    def decode_secondary(self, feats1: list[torch.Tensor],
                         cd3_input: torch.Tensor) -> torch.Tensor:
        if not self.mutual:
            raise NotMutual("this generator has no second-stain encoder")
        self._check_input(cd3_input, self.spec.out_channels, "first-stain input")
        return self.d2([feats1, self.e2(cd3_input)])

    def forward_g1(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_primary(self.encode(x))

    def forward_g2(self, x: torch.Tensor, cd3_input: torch.Tensor) -> torch.Tensor:
        return self.decode_secondary(self.encode(x), cd3_input)

    def forward(self, x: torch.Tensor,
                e2_input: torch.Tensor | None = None):
        """Full pass returning both stains.

        When mutual and no explicit e2 input is given, the freshly decoded
        first stain feeds e2 (the inference path).
        """
        feats1 = self.encode(x)
        y1 = self.decode_primary(feats1)
        if self.mutual:
            y2 = self.decode_secondary(feats1, e2_input if e2_input is not None
                                       else y1)
        else:
            y2 = self.d2([feats1])
        return y1, y2

    @torch.no_grad()
    def predict(self, x: torch.Tensor):
        return self.forward(x)


class SingleStainGenerator(nn.Module):
    """Plain one-encoder one-decoder U-Net for the independent-pair variant."""

    def __init__(self, spec: GeneratorSpec) -> None:
        super().__init__()
        self.spec = spec
        self.noise_rng: torch.Generator | None = None
        provider = lambda: self.noise_rng
        self.encoder = UnetEncoder(spec.in_channels, spec.encoder_filters)
        self.decoder = UnetDecoder(tuple(reversed(spec.encoder_filters)),
                                   spec.encoder_filters, 1, spec.out_channels,
                                   spec.dropout_blocks, spec.dropout_rate,
                                   provider)
        self.apply(init_weights)

    def seed_noise(self, seed: int) -> None:
        gen = torch.Generator()
        gen.manual_seed(int(seed))
        self.noise_rng = gen

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        side = self.spec.input_side
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(
                f"input must be [N, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}")
        if x.shape[2] != side or x.shape[3] != side:
            raise ShapeMismatch(
                f"input must be {side}x{side}, got {tuple(x.shape[2:])}")
        return self.decoder([self.encoder(x)])


class PatchDiscriminator(nn.Module):
    """Convolutional critic emitting a grid of patch logits."""

    def __init__(self, spec: DiscriminatorSpec) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        prev = spec.in_channels
        for i, (width, stride) in enumerate(zip(spec.filters, spec.strides)):
            # No normalization on the first block, per convention.
            use_bn = i > 0
            layers.append(nn.Conv2d(prev, width, kernel_size=4, stride=stride,
                                    padding=1, bias=not use_bn))
            if use_bn:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.LeakyReLU(spec.leaky_slope, inplace=True))
            prev = width
        layers.append(nn.Conv2d(prev, 1, kernel_size=4, stride=1, padding=1,
                                bias=True))
        self.net = nn.Sequential(*layers)
        self.spec = spec
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(
                f"discriminator expects [N, {self.spec.in_channels}, H, W], "
                f"got {tuple(x.shape)}")
        return self.net(x)


_VARIANTS = {
    "hoechstgan-mcd": dict(mutual=True, compositing=True, mode="joint"),
    "hoechstgan-mc": dict(mutual=True, compositing=True, mode="separate"),
    "hoechstgan-md": dict(mutual=True, compositing=False, mode="joint"),
    "hoechstgan-m": dict(mutual=True, compositing=False, mode="separate"),
    "hoechstgan-d": dict(mutual=False, compositing=False, mode="joint"),
    "pix2pix": dict(mutual=False, compositing=False, mode="separate"),
    "regression-mc": dict(mutual=True, compositing=True, mode=None),
}

_ALIASES = {"regression": "regression-mc", "pix2pix-pair": "pix2pix"}


def normalize_variant(name: str) -> str:
    """Maps user spellings (MCD, hoechstgan-mc, Regression-MC) to canonical
    variant keys; raises UnknownVariant otherwise."""
    key = name.strip().lower().replace("_", "-")
    if key in ("mcd", "mc", "md", "m", "d"):
        key = f"hoechstgan-{key}"
    key = _ALIASES.get(key, key)
    if key not in _VARIANTS:
        raise UnknownVariant(
            f"unknown variant {name!r}; expected one of "
            f"{sorted(_VARIANTS) + ['MCD', 'MC', 'MD', 'M', 'D']}")
    return key


@dataclass
class VariantAssembly:
    """A named model variant: its generators, discriminators and wiring."""

    name: str
    generators: list[nn.Module]
    discriminators: list[nn.Module]
    discriminator_mode: str | None
    compositing: bool
    mutual: bool
    gen_spec: GeneratorSpec = field(repr=False, default=None)

    @property
    def paired(self) -> bool:
        return len(self.generators) == 2

    @property
    def adversarial(self) -> bool:
        return len(self.discriminators) > 0

    def modules(self) -> list[nn.Module]:
        return list(self.generators) + list(self.discriminators)

    def generator_parameters(self):
        for g in self.generators:
            yield from g.parameters()

    def discriminator_parameters(self):
        for d in self.discriminators:
            yield from d.parameters()

    def count_parameters(self) -> int:
        return sum(p.numel() for m in self.modules() for p in m.parameters())

    def seed_noise(self, seed: int) -> None:
        for i, g in enumerate(self.generators):
            g.seed_noise(int(seed) + i)

    def train(self) -> None:
        for m in self.modules():
            m.train()

    def eval(self) -> None:
        for m in self.modules():
            m.eval()

    @torch.no_grad()
    def predict(self, x: torch.Tensor):
        """Inference pass producing (first stain, second stain)."""
        if self.paired:
            return self.generators[0](x), self.generators[1](x)
        return self.generators[0](x)


def build_variant(name: str, gen_spec: GeneratorSpec | None = None,
                  disc_filters: tuple[int, ...] = (64, 128, 256, 512)) -> VariantAssembly:
    """Instantiates a model variant at the given generator scale."""
    key = normalize_variant(name)
    flags = _VARIANTS[key]
    base = gen_spec if gen_spec is not None else GeneratorSpec()
    spec = replace(base, mutual=flags["mutual"], d1_filters=None, d2_filters=None)
    if key == "pix2pix":
        generators: list[nn.Module] = [SingleStainGenerator(spec),
                                       SingleStainGenerator(spec)]
    else:
        generators = [StainGenerator(spec)]
    mode = flags["mode"]
    if mode is None:
        discriminators: list[nn.Module] = []
    else:
        dspec = DiscriminatorSpec(mode=mode, filters=tuple(disc_filters),
                                  source_channels=spec.in_channels,
                                  stain_channels=spec.out_channels)
        discriminators = ([PatchDiscriminator(dspec)] if mode == "joint"
                          else [PatchDiscriminator(dspec),
                                PatchDiscriminator(dspec)])
    return VariantAssembly(name=key, generators=generators,
                           discriminators=discriminators,
                           discriminator_mode=mode,
                           compositing=flags["compositing"],
                           mutual=flags["mutual"], gen_spec=spec)


def count_parameters(variant, gen_spec: GeneratorSpec | None = None) -> int:
    """Total trainable parameters of a variant (built at full scale when
    given a name) or of an existing assembly."""
    if isinstance(variant, VariantAssembly):
        return variant.count_parameters()
    assembly = build_variant(variant, gen_spec=gen_spec)
    return assembly.count_parameters()
