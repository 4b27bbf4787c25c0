"""The DeepCap segmentation network, its configuration and checkpoints.

Layer stack for the default configuration (grid sides in cells)::

    input 3x256x256
    primary      conv k5/s4 -> 32 ch, 1x1 conv -> 64 ch = (4 maps, 16 dim) @ 64
    down1        caps conv (4,16)        @64,  caps conv s2 -> @32    skip @64
    down2        caps conv (8,32)        @32,  caps conv s2 -> @16    skip @32
    down3        caps conv (8,32)        @16,  caps conv s2 -> @8     skip @16
    up1..up3     upsample to skip widths, concat skip on the map axis, two caps convs
    extra1..2    upsample 64 -> 128 -> 256 (no skip)
    head         two caps convs ending in (2 maps, 1 dim) = 2 channels @256
    output       Gaussian blur (k3, sigma 2), softmax over the channel axis

Parameters are registered in exactly that order; the checkpoint payload
follows it.
"""
from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
from torch import nn

from . import capsules
from .errors import CheckpointError, ConfigError, DimensionError
from .numerics import conv_out_side, gaussian_blur, softmax_axis

MAGIC = b"DCAP"
VERSION = 1
INIT_GAIN = 2.5
STEM_GAIN = 1.0


def _widths_to_text(widths) -> str:
    return ",".join(f"{m}x{d}" for m, d in widths)


def _widths_from_text(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    out = []
    for token in text.split(","):
        try:
            m, d = token.strip().lower().split("x")
            out.append((int(m), int(d)))
        except ValueError:
            raise ConfigError(f"bad capsule width {token!r}; expected MxD") from None
    return tuple(out)


@dataclass(frozen=True)
class ModelConfig:
    name: str = "deepcap-default"
    input_channels: int = 3
    input_side: int = 256
    stem_kernel: int = 5
    stem_stride: int = 4
    stem_channels: int = 32
    primary_maps: int = 4
    primary_dim: int = 16
    down: tuple = ((4, 16), (8, 32), (8, 32))
    up: tuple = ((8, 32), (4, 16), (4, 16))
    up_convs: int = 2
    extra_up: tuple = ((2, 16), (2, 8))
    head: tuple = ((1, 8), (2, 1))
    kernel: int = 3
    upsample: str = "transposed"
    routing_iterations: int = 3
    blur: bool = True
    blur_kernel: int = 3
    blur_sigma: float = 2.0

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _WIDTH_KEYS:
                value = _widths_to_text(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        """Parse ``key = value`` lines; unspecified keys come from ``base``."""
        values = asdict(base or cls())
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, types[key], value)
        for key in _WIDTH_KEYS:
            values[key] = tuple(tuple(w) for w in values[key])
        return cls(**values)

    def with_variant(self, variant: str) -> "ModelConfig":
        from .preprocess import VARIANT_CHANNELS
        return replace(self, input_channels=VARIANT_CHANNELS[variant])


_WIDTH_KEYS = ("down", "up", "extra_up", "head")


def _parse_value(key, typ, value):
    if key in _WIDTH_KEYS:
        return _widths_from_text(value)
    try:
        if typ in ("bool", bool):
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


DEFAULT_CONFIG = ModelConfig()

# ~300K parameters; used for desk-scale training runs.
REDUCED_CONFIG = ModelConfig(
    name="deepcap-reduced",
    stem_channels=16,
    primary_maps=2, primary_dim=8,
    down=((2, 8), (4, 16), (4, 16)),
    up=((4, 16), (4, 8), (2, 8)),
    up_convs=1,
    extra_up=((1, 8), (1, 8)),
    head=((1, 4), (2, 1)),
)

NAMED_CONFIGS = {DEFAULT_CONFIG.name: DEFAULT_CONFIG, REDUCED_CONFIG.name: REDUCED_CONFIG}


@dataclass
class LayerSpec:
    name: str
    kind: str          # "caps", "pool", "upsample"
    m_in: int
    d_in: int
    m_out: int
    d_out: int
    side_in: int
    side_out: int
    stride: int = 1
    skip: str | None = None   # name of the layer whose output is concatenated after this one


def layer_plan(cfg: ModelConfig) -> list[LayerSpec]:
    """Validate the spatial chain and list the capsule layers in order."""
    k = cfg.kernel
    if k % 2 == 0 or cfg.stem_kernel % 2 == 0 or cfg.blur_kernel % 2 == 0:
        raise ConfigError("all kernel sides must be odd")
    if not 1 <= cfg.input_channels <= 3:
        raise ConfigError(f"input_channels must be 1-3, got {cfg.input_channels}")
    if cfg.upsample not in capsules.UPSAMPLE_MODES:
        raise ConfigError(f"upsample must be one of {capsules.UPSAMPLE_MODES}, got {cfg.upsample!r}")
    if cfg.routing_iterations < 1 or cfg.up_convs < 1:
        raise ConfigError("routing_iterations and up_convs must be >= 1")
    if len(cfg.up) != len(cfg.down):
        raise ConfigError(f"{len(cfg.down)} down stages need as many up stages, got {len(cfg.up)}")
    if not cfg.head or cfg.head[-1] != (2, 1):
        raise ConfigError("the last head layer must produce 2 maps of dimension 1")
    widths = [w for group in (cfg.down, cfg.up, cfg.extra_up, cfg.head) for w in group]
    if any(m < 1 or d < 1 for m, d in widths) or cfg.primary_maps < 1 or cfg.primary_dim < 1:
        raise ConfigError("capsule widths must be positive")

    side = conv_out_side(cfg.input_side, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel // 2)
    if side < 1:
        raise ConfigError("stage 'primary': input too small for the stem convolution")
    m, d = cfg.primary_maps, cfg.primary_dim
    plan: list[LayerSpec] = []
    skips = []
    for i, (m2, d2) in enumerate(cfg.down, 1):
        if side % 2:
            raise ConfigError(f"stage 'down{i}': grid side {side} is odd and cannot be halved and restored")
        plan.append(LayerSpec(f"down{i}.conv", "caps", m, d, m2, d2, side, side))
        skips.append((f"down{i}.conv", m2, d2, side))
        plan.append(LayerSpec(f"down{i}.pool", "pool", m2, d2, m2, d2, side, side // 2, stride=2))
        m, d, side = m2, d2, side // 2
    for j, (m2, d2) in enumerate(cfg.up, 1):
        src, ms, ds, skip_side = skips[-j]
        if side * 2 != skip_side:
            raise ConfigError(f"stage 'up{j}': upsampled side {side * 2} does not match skip side {skip_side}")
        plan.append(LayerSpec(f"up{j}.upsample", "upsample", m, d, ms, ds, side, side * 2, skip=src))
        m, d, side = 2 * ms, ds, side * 2
        for t in range(1, cfg.up_convs + 1):
            plan.append(LayerSpec(f"up{j}.conv{t}", "caps", m, d, m2, d2, side, side))
            m, d = m2, d2
    for j, (m2, d2) in enumerate(cfg.extra_up, 1):
        plan.append(LayerSpec(f"extra{j}.upsample", "upsample", m, d, m2, d2, side, side * 2))
        m, d, side = m2, d2, side * 2
    for j, (m2, d2) in enumerate(cfg.head, 1):
        plan.append(LayerSpec(f"head{j}.conv", "caps", m, d, m2, d2, side, side))
        m, d = m2, d2
    if side != cfg.input_side:
        raise ConfigError(f"stage 'head': output side {side} does not return to input side {cfg.input_side}")
    return plan


def stem_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    caps_ch = cfg.primary_maps * cfg.primary_dim
    first = cfg.stem_channels or caps_ch
    shapes = [("stem.weight", (first, cfg.input_channels, cfg.stem_kernel, cfg.stem_kernel)),
              ("stem.bias", (first,))]
    if cfg.stem_channels:
        shapes += [("expand.weight", (caps_ch, cfg.stem_channels, 1, 1)), ("expand.bias", (caps_ch,))]
    return shapes


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    k = cfg.kernel
    shapes = stem_shapes(cfg)
    for spec in layer_plan(cfg):
        shapes.append((spec.name + ".weight", (spec.m_in, k, k, spec.m_out, spec.d_out, spec.d_in)))
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in parameter_shapes(cfg))


def prediction_volume(cfg: ModelConfig) -> int:
    """Prediction-vector elements materialised per image (a cost proxy)."""
    k = cfg.kernel
    total = 0
    for spec in layer_plan(cfg):
        children = spec.m_in * k * k
        if spec.kind == "upsample" and cfg.upsample == "transposed":
            children = spec.m_in * k * k / 4
        total += int(children * spec.m_out * spec.d_out * spec.side_out ** 2)
    return total


class DeepCap(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.plan = layer_plan(config)
        self.fused = True
        self.params = nn.ParameterDict()
        for name, shape in parameter_shapes(config):
            self.params[name.replace(".", "__")] = nn.Parameter(torch.zeros(shape))

    def param(self, name: str) -> torch.Tensor:
        return self.params[name.replace(".", "__")]

    def named_weights(self):
        for key, p in self.params.items():
            yield key.replace("__", "."), p

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())

    @property
    def dtype(self) -> torch.dtype:
        return self.param("stem.weight").dtype

    def primary(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expand = cfg.stem_channels > 0
        return capsules.primary_capsules(
            x, self.param("stem.weight"), self.param("stem.bias"),
            cfg.primary_maps, cfg.primary_dim, cfg.stem_stride, cfg.stem_kernel // 2,
            self.param("expand.weight") if expand else None,
            self.param("expand.bias") if expand else None)

    def _layer(self, spec: LayerSpec, u: torch.Tensor) -> torch.Tensor:
        w = self.param(spec.name + ".weight")
        it = self.config.routing_iterations
        if spec.kind == "upsample":
            return capsules.upsample_capsule(u, w, self.config.upsample, it, fused=self.fused)
        return capsules.conv_capsule(u, w, spec.stride, self.config.kernel // 2, it, fused=self.fused)

    def grids(self, x: torch.Tensor) -> dict:
        """Every intermediate capsule grid, keyed by layer name."""
        x = self._check_input(x)
        out = {"primary": self.primary(x)}
        u = out["primary"]
        for spec in self.plan:
            u = self._layer(spec, u)
            if spec.skip is not None:
                skip = out[spec.skip]
                merged = torch.cat([u, skip], dim=1)
                assert merged.shape[1] == u.shape[1] + skip.shape[1]
                u = merged
            out[spec.name] = u
        return out

    def logits(self, x: torch.Tensor, blur: bool | None = None) -> torch.Tensor:
        """Two-channel head output before the softmax, ``(B, 2, S, S)``."""
        u = self.grids(x)[self.plan[-1].name]
        z = u[:, :, 0]
        if self.config.blur if blur is None else blur:
            z = gaussian_blur(z, self.config.blur_kernel, self.config.blur_sigma)
        return z

    def forward(self, x: torch.Tensor, blur: bool | None = None) -> torch.Tensor:
        squeeze = x.dim() == 3
        probs = softmax_axis(self.logits(x, blur), dim=1)
        return probs[0] if squeeze else probs

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        cfg = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.input_channels, cfg.input_side, cfg.input_side):
            raise DimensionError(
                f"expected input (B, {cfg.input_channels}, {cfg.input_side}, {cfg.input_side}), "
                f"got {tuple(x.shape)}")
        return x.to(self.dtype)


def build_model(config: ModelConfig = DEFAULT_CONFIG, seed: int = 0) -> DeepCap:
    """Materialise parameters with seeded fan-in-scaled uniform initialisation.

    Capsule transformation weights are scaled so that, for independent
    children, a parent's pre-squash norm is about ``INIT_GAIN`` times a
    child's norm before routing sharpens the weights.
    """
    model = DeepCap(config)
    rng = np.random.default_rng(seed)
    k = config.kernel
    specs = {s.name: s for s in model.plan}
    for name, p in model.named_weights():
        shape = tuple(p.shape)
        if name.endswith(".bias"):
            values = np.zeros(shape)
        elif name.startswith(("stem.", "expand.")):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = STEM_GAIN * math.sqrt(3.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            spec = specs[name[: -len(".weight")]]
            children = spec.m_in * k * k
            if spec.kind == "upsample" and config.upsample == "transposed":
                children /= 4
            std = INIT_GAIN * spec.m_out / math.sqrt(children * spec.d_out)
            bound = std * math.sqrt(3.0)
            values = rng.uniform(-bound, bound, size=shape)
        with torch.no_grad():
            p.copy_(torch.from_numpy(values.astype(np.float32)))
    return model


def param_count(model: DeepCap) -> int:
    return model.parameter_count


# --- inference helpers -----------------------------------------------------

def infer_probs(model: DeepCap, x: torch.Tensor, chunk: int = 4) -> torch.Tensor:
    """Forward pass without autograd, ``chunk`` images at a time."""
    if x.dim() == 3:
        return infer_probs(model, x.unsqueeze(0), chunk)[0]
    with torch.no_grad():
        parts = [model(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
    return torch.cat(parts, dim=0)


def predict(model: DeepCap, x: torch.Tensor, chunk: int = 4) -> torch.Tensor:
    """Binary lumen masks; a 0.5/0.5 tie is background."""
    probs = infer_probs(model, x, chunk)
    return (probs[..., 1, :, :] > probs[..., 0, :, :]).to(torch.uint8)


# --- checkpoints -----------------------------------------------------------

def checkpoint_header(model: DeepCap, meta: dict | None = None) -> bytes:
    text = model.config.to_text()
    for key, value in (meta or {}).items():
        text += f"meta.{key} = {value}\n"
    return text.encode("utf-8")


def save_checkpoint(model: DeepCap, path, meta: dict | None = None) -> int:
    """Write ``model`` to ``path``; returns the file size in bytes."""
    header = checkpoint_header(model, meta)
    payload = b"".join(
        p.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        for _, p in model.named_weights())
    blob = MAGIC + struct.pack("<II", VERSION, len(header)) + header + payload
    blob += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


def split_header(text: str) -> tuple[str, dict]:
    config_lines, meta = [], {}
    for line in text.splitlines():
        if line.startswith("meta."):
            key, _, value = line[5:].partition("=")
            meta[key.strip()] = value.strip()
        else:
            config_lines.append(line)
    return "\n".join(config_lines), meta


def load_checkpoint(path, with_meta: bool = False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: corrupt payload (truncated header)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + hlen:
        raise CheckpointError(f"{path}: corrupt payload (truncated header)")
    try:
        config_text, meta = split_header(blob[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_text(config_text)
        shapes = parameter_shapes(config)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt payload (bad header: {exc})") from None
    n = sum(math.prod(s) for _, s in shapes)
    expected = 12 + hlen + 4 * n + 4
    if len(blob) != expected:
        raise CheckpointError(f"{path}: corrupt payload ({len(blob)} bytes, expected {expected})")
    payload = blob[12 + hlen:12 + hlen + 4 * n]
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: corrupt payload (CRC mismatch)")
    model = DeepCap(config)
    flat = np.frombuffer(payload, dtype="<f4")
    offset = 0
    with torch.no_grad():
        for _, p in model.named_weights():
            size = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + size].astype(np.float32).reshape(p.shape)))
            offset += size
    return (model, meta) if with_meta else model


def disk_size(path) -> int:
    return os.path.getsize(path)


def expected_checkpoint_size(model: DeepCap, meta: dict | None = None) -> int:
    return 4 + 4 + 4 + len(checkpoint_header(model, meta)) + 4 * model.parameter_count + 4


def config_from_arg(value: str) -> ModelConfig:
    """A named configuration or a path to a key-value config file."""
    if value in NAMED_CONFIGS:
        return NAMED_CONFIGS[value]
    try:
        with open(value, encoding="utf-8") as fh:
            return ModelConfig.from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {value!r}: {exc}") from None
