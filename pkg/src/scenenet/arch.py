"""ResNet-family network construction.

``build`` turns an :class:`ArchSpec` into a :class:`Network`: a stem, four
stages of residual blocks, global average pooling and a linear classifier.
Depth 18 uses basic blocks, 50/101 use bottlenecks.  Width scaling
multiplies every internal channel count; the downsample kind selects how
stage-transition blocks halve resolution.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .modules import (
    BatchNorm2d,
    Conv2d,
    DownsampleConv,
    GlobalAvgPool,
    Linear,
    MaxPool,
    Module,
    ReLU,
    Residual,
    Sequential,
)
from .tensor import DimensionError, ValidationError, load_tensor, save_tensor

BLOCK_COUNTS = {18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
BASE_WIDTHS = (64, 128, 256, 512)
WIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0)
STEMS = ("imagenet", "small")


class ConfigError(ValidationError):
    """Raised for invalid architecture specs or config files."""


class DownsampleKind(enum.Enum):
    Strided = "strided"
    DilatedPool = "dilated"
    AvgPoolConv = "avg"
    MaxPoolConv = "max"

    @classmethod
    def parse(cls, text) -> "DownsampleKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "").replace("_", "")
        aliases = {"dp": cls.DilatedPool, "avg": cls.AvgPoolConv, "ave": cls.AvgPoolConv, "max": cls.MaxPoolConv}
        for kind in cls:
            if key in (kind.name.lower(), kind.value):
                return kind
        if key in aliases:
            return aliases[key]
        raise ConfigError(f"downsample: unknown kind {text!r}; supported: {', '.join(k.name for k in cls)}")


@dataclass(frozen=True)
class ArchSpec:
    depth: int = 50
    width_factor: float = 1.0
    num_classes: int = 1000
    downsample: DownsampleKind = DownsampleKind.Strided
    input_size: tuple[int, int] = (224, 224)
    stem: str = "imagenet"
    name: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.depth not in BLOCK_COUNTS:
            raise ConfigError(f"depth: unsupported preset {self.depth}; supported: {sorted(BLOCK_COUNTS)}")
        if float(self.width_factor) not in WIDTH_FACTORS:
            raise ConfigError(f"width_factor: unsupported value {self.width_factor}; supported: {list(WIDTH_FACTORS)}")
        if int(self.num_classes) < 1:
            raise ConfigError(f"classes: must be a positive integer, got {self.num_classes}")
        if self.stem not in STEMS:
            raise ConfigError(f"stem: unknown variant {self.stem!r}; supported: {list(STEMS)}")
        object.__setattr__(self, "downsample", DownsampleKind.parse(self.downsample))
        object.__setattr__(self, "width_factor", float(self.width_factor))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    @property
    def bottleneck(self) -> bool:
        return self.depth != 18

    @property
    def expansion(self) -> int:
        return 4 if self.bottleneck else 1

    def scaled(self, channels: int) -> int:
        value = Fraction(channels) * Fraction(self.width_factor)
        if value.denominator != 1 or value < 1:
            raise ConfigError(f"width_factor {self.width_factor} gives non-integer width for {channels} channels")
        return int(value)

    @property
    def stage_widths(self) -> list[int]:
        return [self.scaled(b) * self.expansion for b in BASE_WIDTHS]

    @property
    def block_counts(self) -> tuple[int, ...]:
        return BLOCK_COUNTS[self.depth]

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        wf = f"{self.width_factor:g}"
        suffix = "" if self.downsample is DownsampleKind.Strided else f"-{self.downsample.name}"
        return f"resnet{self.depth}x{wf}{suffix}"


# -- config files ---------------------------------------------------------------

_CONFIG_KEYS = ("depth", "width_factor", "classes", "downsample", "input_size", "stem", "name")


def _parse_size(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace("x", ",").replace("X", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(text)
    return int(parts[0]), int(parts[1])


def parse_config(text: str) -> ArchSpec:
    """Parse ``key = value`` lines (``#`` starts a comment) into an ArchSpec."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key; expected one of {', '.join(_CONFIG_KEYS)}")
        raw[key] = value
    kwargs = {}
    converters = {
        "depth": ("depth", int),
        "width_factor": ("width_factor", float),
        "classes": ("num_classes", int),
        "downsample": ("downsample", DownsampleKind.parse),
        "input_size": ("input_size", _parse_size),
        "stem": ("stem", str),
        "name": ("name", str),
    }
    for key, value in raw.items():
        attr, conv = converters[key]
        try:
            kwargs[attr] = conv(value)
        except ConfigError:
            raise
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: invalid value {value!r}") from None
    return ArchSpec(**kwargs)


def format_config(spec: ArchSpec) -> str:
    lines = [
        f"depth = {spec.depth}",
        f"width_factor = {spec.width_factor:g}",
        f"classes = {spec.num_classes}",
        f"downsample = {spec.downsample.name}",
        f"input_size = {spec.input_size[0]}x{spec.input_size[1]}",
        f"stem = {spec.stem}",
    ]
    if spec.name:
        lines.append(f"name = {spec.name}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ArchSpec:
    return parse_config(Path(path).read_text())


def save_config(spec: ArchSpec, path) -> None:
    Path(path).write_text(format_config(spec))


# -- network ---------------------------------------------------------------------

class Network(Module):
    kind = "network"

    def __init__(self, spec: ArchSpec, body: Sequential, dtype):
        super().__init__()
        self.spec = spec
        self.body = body
        self.dtype = np.dtype(dtype)
        # per-channel (mean, std) applied to [0, 1] images before forward; set by training
        self.norm: Optional[tuple[np.ndarray, np.ndarray]] = None
        for path, module in self.named_modules():
            module.path = path

    def children(self):
        return self.body.children()

    @property
    def divisor(self) -> int:
        return 32 if self.spec.stem == "imagenet" else 8

    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[1] != 3:
            raise DimensionError(f"network input must be (n, 3, h, w), got {tuple(shape)}")
        if shape[2] % self.divisor or shape[3] % self.divisor:
            raise DimensionError(
                f"input spatial dims {shape[2]}x{shape[3]} must be divisible by {self.divisor}"
            )

    def forward(self, x, train=False):
        self.check_input(x.shape)
        return self.body.forward(np.asarray(x, dtype=self.dtype), train)

    def backward(self, grad):
        return self.body.backward(grad)

    def output_shape(self, in_shape):
        return self.body.output_shape(in_shape)

    def trace(self, in_shape=None, prefix=""):
        if in_shape is None:
            in_shape = (1, 3, *self.spec.input_size)
        self.check_input(in_shape)
        return self.body.trace(tuple(in_shape), prefix)

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def grad_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_params())
        state.update(self.named_buffers())
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        current = self.state_dict()
        missing = set(current) - set(state)
        if missing:
            raise ValidationError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for key, arr in current.items():
            src = np.asarray(state[key])
            if src.shape != arr.shape:
                raise ValidationError(f"{key}: shape {src.shape} does not match network {arr.shape}")
            arr[...] = src

    def first_nonfinite(self, x, train=True) -> Optional[str]:
        """Replay a forward pass and name the first layer whose output is not finite.

        Batch-norm running statistics are restored afterwards.
        """
        saved = {k: v.copy() for k, v in self.named_buffers()}
        for name, value in self.named_params():
            if not np.all(np.isfinite(value)):
                return f"{name} (parameter)"
        found: list[str] = []
        Sequential._probe = found
        try:
            with np.errstate(all="ignore"):
                self.forward(x, train)
        finally:
            Sequential._probe = None
            for k, v in self.named_buffers():
                v[...] = saved[k]
        return found[0] if found else None


def _downsample_conv(spec, in_c, out_c, k, rng, dtype, pool_first=False):
    mode = spec.downsample.value
    return DownsampleConv(in_c, out_c, k, mode=mode, pool_first=pool_first, rng=rng, dtype=dtype)


def _conv_or_down(spec, in_c, out_c, k, stride, rng, dtype, pool_first=False):
    if stride == 2:
        return _downsample_conv(spec, in_c, out_c, k, rng, dtype, pool_first)
    return Conv2d(in_c, out_c, k, stride=1, rng=rng, dtype=dtype)


def _block(spec, in_c, inner, stride, rng, dtype) -> Residual:
    out_c = inner * spec.expansion
    if spec.bottleneck:
        main = Sequential(
            ("conv1", Conv2d(in_c, inner, 1, rng=rng, dtype=dtype)),
            ("bn1", BatchNorm2d(inner, dtype)),
            ("relu1", ReLU()),
            ("conv2", _conv_or_down(spec, inner, inner, 3, stride, rng, dtype)),
            ("bn2", BatchNorm2d(inner, dtype)),
            ("relu2", ReLU()),
            ("conv3", Conv2d(inner, out_c, 1, rng=rng, dtype=dtype)),
            ("bn3", BatchNorm2d(out_c, dtype)),
        )
    else:
        main = Sequential(
            ("conv1", _conv_or_down(spec, in_c, inner, 3, stride, rng, dtype)),
            ("bn1", BatchNorm2d(inner, dtype)),
            ("relu1", ReLU()),
            ("conv2", Conv2d(inner, inner, 3, rng=rng, dtype=dtype)),
            ("bn2", BatchNorm2d(inner, dtype)),
        )
    shortcut = None
    if stride != 1 or in_c != out_c:
        shortcut = Sequential(
            ("0", _conv_or_down(spec, in_c, out_c, 1, stride, rng, dtype, pool_first=True)),
            ("1", BatchNorm2d(out_c, dtype)),
        )
    return Residual(main, shortcut)


def build(spec: ArchSpec, seed: int = 0, dtype=np.float32, init: bool = True) -> Network:
    """Construct a randomly initialised network; identical seeds give identical weights.

    With ``init=False`` every parameter is zero-filled, which is much cheaper
    when only shapes and costs are needed.
    """
    rng = np.random.default_rng(seed) if init else None
    stem_c = spec.scaled(64)
    if spec.stem == "imagenet":
        layers = [
            ("conv1", Conv2d(3, stem_c, 7, stride=2, padding=3, rng=rng, dtype=dtype)),
            ("bn1", BatchNorm2d(stem_c, dtype)),
            ("relu", ReLU()),
            ("maxpool", MaxPool(3, 2, 1)),
        ]
    else:
        layers = [
            ("conv1", Conv2d(3, stem_c, 3, stride=1, padding=1, rng=rng, dtype=dtype)),
            ("bn1", BatchNorm2d(stem_c, dtype)),
            ("relu", ReLU()),
        ]
    in_c = stem_c
    for stage, (count, base) in enumerate(zip(spec.block_counts, BASE_WIDTHS)):
        inner = spec.scaled(base)
        blocks = []
        for i in range(count):
            stride = 2 if (stage > 0 and i == 0) else 1
            blocks.append((str(i), _block(spec, in_c, inner, stride, rng, dtype)))
            in_c = inner * spec.expansion
        layers.append((f"layer{stage + 1}", Sequential(*blocks)))
    layers.append(("avgpool", GlobalAvgPool()))
    layers.append(("fc", Linear(in_c, spec.num_classes, rng=rng, dtype=dtype)))
    return Network(spec, Sequential(*layers), dtype)


def deep_narrow(num_classes: int = 365, with_dp: bool = False, seed: int = 0, dtype=np.float32,
                init: bool = True, **spec_kwargs) -> Network:
    """ResNet-101 layout at half width, optionally with dilated-pooling downsampling."""
    kind = DownsampleKind.DilatedPool if with_dp else DownsampleKind.Strided
    spec = ArchSpec(101, 0.5, num_classes, kind, **spec_kwargs)
    return build(spec, seed=seed, dtype=dtype, init=init)


def forward(net: Network, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    return net.forward(batch, train=(mode == "train"))


def weighted_layers(net: Network, include_projections: bool = False) -> list[str]:
    """Paths of convolution and linear layers in forward order."""
    out = []
    for path, module in net.named_modules():
        if isinstance(module, (Conv2d, Linear)):
            if not include_projections and ".downsample." in f"{path}.":
                continue
            out.append(path)
    return out


# -- checkpoints -------------------------------------------------------------------

MANIFEST = "manifest.txt"


def _as_tensor4(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (4 - a.ndim))


def save_checkpoint(net: Network, directory, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.txt`` plus one TNSR file per named tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# scenenet checkpoint", format_config(net.spec).rstrip("\n"), f"dtype = {net.dtype.name}"]
    if net.norm is not None:
        lines.append("norm_mean = " + ",".join(repr(float(v)) for v in net.norm[0]))
        lines.append("norm_std = " + ",".join(repr(float(v)) for v in net.norm[1]))
    for key, value in sorted((extra or {}).items()):
        lines.append(f"meta.{key} = {value}")
    for name, arr in net.state_dict().items():
        fname = f"{name}.tnsr"
        save_tensor(directory / fname, _as_tensor4(np.ascontiguousarray(arr)))
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {shape} {fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> tuple[ArchSpec, str, dict, list[tuple[str, tuple, str]]]:
    """Parse a manifest into ``(spec, dtype, meta, tensors)``; ``meta`` includes ``norm`` if recorded."""
    text = (Path(directory) / MANIFEST).read_text()
    config, meta, tensors = [], {}, []
    dtype = "float32"
    norm = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("norm_"):
            key, value = line.split("=", 1)
            norm[key.strip()] = np.array([float(v) for v in value.split(",")])
        elif line.startswith("tensor "):
            _, name, shape, fname = line.split()
            tensors.append((name, tuple(int(d) for d in shape.split(",")), fname))
        elif line.startswith("meta."):
            key, value = line[5:].split("=", 1)
            meta[key.strip()] = value.strip()
        elif line.startswith("dtype"):
            dtype = line.split("=", 1)[1].strip()
        else:
            config.append(line)
    if norm:
        meta["norm"] = (norm["norm_mean"], norm["norm_std"])
    return parse_config("\n".join(config)), dtype, meta, tensors


def load_checkpoint(directory) -> tuple[Network, dict]:
    """Rebuild the network recorded in a checkpoint directory and load its tensors."""
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise ValidationError(f"{directory}: no {MANIFEST} found")
    spec, dtype, meta, tensors = read_manifest(directory)
    net = build(spec, dtype=np.dtype(dtype), init=False)
    state = {name: load_tensor(directory / fname).reshape(shape) for name, shape, fname in tensors}
    net.load_state(state)
    net.norm = meta.pop("norm", None)
    return net, meta


def checkpoint_digest(directory) -> str:
    """SHA-256 over the manifest and the tensor files it lists (other files are ignored)."""
    directory = Path(directory)
    h = hashlib.sha256()
    h.update((directory / MANIFEST).read_bytes())
    for _, _, fname in read_manifest(directory)[3]:
        h.update(fname.encode())
        h.update((directory / fname).read_bytes())
    return h.hexdigest()
