"""Flat ``key = value`` run configuration shared by every subcommand.

Lines starting with ``#`` or ``;`` are comments.  Unknown keys, repeated
keys and unparsable values are rejected before any work starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .attention import MaskSpec, format_radius, parse_radius


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "off") else float(text)


def _key(default, doc, parse=None, fmt=None):
    return field(default=default, metadata={"doc": doc, "parse": parse, "fmt": fmt})


def _fmt_seq(v) -> str:
    return ",".join(str(x) for x in v)


@dataclass(frozen=True)
class RunConfig:
    # general
    seed: int = _key(0, "master seed for data, weights and shuffling")
    threads: int = _key(1, "worker threads for batch gradients; 1 is the deterministic mode")
    out: str = _key("out", "output directory")
    # synthetic data
    num_classes: int = _key(8, "motion directions (4 or 8)")
    T: int = _key(8, "frames per clip")
    H: int = _key(16, "frame height")
    W: int = _key(16, "frame width")
    object_size: int = _key(4, "side of the moving square")
    speed: int = _key(1, "pixels moved per frame")
    noise: float = _key(0.1, "uniform background noise amplitude")
    n_train: int = _key(500, "training clips")
    n_test: int = _key(200, "test clips")
    # model
    stem_channels: int = _key(4, "stem output channels")
    stem_kernel: int = _key(3, "spatial extent of the stem kernel")
    stem_time: int = _key(1, "temporal extent the 2D stem kernel is inflated to")
    stem_stride: int = _key(2, "spatial subsampling after the stem")
    bottleneck: int = _key(0, "attention/relation bottleneck C' (0 = channels // 2)")
    delta_t: str = _key("1/2", "mask radius over time: inf, an integer, or a fraction of T")
    delta_h: str = _key("3/7", "mask radius over height")
    delta_w: str = _key("3/7", "mask radius over width")
    receptive: tuple = _key((2, 2, 2), "relation receptive radii t0,h0,w0", _ints, _fmt_seq)
    output: tuple = _key((1, 1, 1), "relation output radii t1,h1,w1", _ints, _fmt_seq)
    normalize_relations: bool = _key(True, "softmax-normalise relation vectors", _bool)
    residual_init: str = _key("random", "initial block output weights: random or zero")
    variants: tuple = _key(
        ("none", "nonlocal", "mask_nonlocal", "relation"), "experiment variants in table order", _words, _fmt_seq
    )
    dtype: str = _key("float32", "training precision: float32 or float64")
    # optimiser
    lr: float = _key(0.5, "learning rate")
    momentum: float = _key(0.9, "heavy-ball momentum")
    epochs: int = _key(12, "training epochs")
    batch_size: int = _key(10, "clips per SGD step")
    lr_decay: float = _key(0.1, "learning-rate multiplier at each decay epoch")
    decay_epochs: tuple = _key((8, 11), "epochs at which the learning rate decays", _ints, _fmt_seq)
    clip_norm: float | None = _key(1.0, "global gradient-norm clip (none disables)", _opt_float)
    # verification
    grad_eps: float = _key(1e-6, "central-difference step")
    grad_threshold: float = _key(1e-5, "gradcheck pass threshold (max relative error)")
    grad_seeds: int = _key(20, "seeded instances per gradcheck target")
    oracle_instances: int = _key(100, "seeded instances per oracle target")
    oracle_max_extent: int = _key(4, "largest T, H or W drawn by the oracle sweep (at most 6)")
    oracle_max_channels: int = _key(8, "largest channel count drawn by the oracle sweep")
    oracle_threshold: float = _key(1e-12, "oracle pass threshold (max abs difference)")
    # benchmark
    bench_T: int = _key(16, "benchmark frames")
    bench_H: int = _key(28, "benchmark height")
    bench_W: int = _key(28, "benchmark width")
    bench_channels: int = _key(16, "benchmark input channels")
    bench_bottleneck: int = _key(8, "benchmark bottleneck C'")
    bench_repeats: int = _key(5, "timed runs per setting (median reported)")
    # fusion and inflation
    fuse_weights: tuple = _key((), "per-table fusion weights (empty = uniform)", _floats, _fmt_seq)
    labels: str = _key("", "optional id,label CSV for fusion")
    inflate_t: int = _key(3, "temporal extent for the inflate subcommand")

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.residual_init not in ("random", "zero"):
            raise ConfigError(f"residual_init must be random or zero, got {self.residual_init!r}")
        for name in ("receptive", "output"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs three radii")
        if not 1 <= self.oracle_max_extent <= 6:
            raise ConfigError("oracle_max_extent must lie in 1..6")
        try:
            self.mask_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def mask_spec(self) -> MaskSpec:
        return MaskSpec.parse(self.delta_t, self.delta_h, self.delta_w)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_keys() -> list[str]:
    return list(_FIELDS)


def _parse_value(name: str, text: str):
    f = _FIELDS[name]
    parse = f.metadata["parse"]
    try:
        if parse is not None:
            return parse(text)
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
        if name.startswith("delta_"):
            return format_radius(parse_radius(text))
        return text.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r} ({e})") from None


def format_value(name: str, value) -> str:
    fmt = _FIELDS[name].metadata["fmt"]
    if fmt is not None:
        return fmt(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "none" if value is None else str(value)


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, text)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    # A dummy section lets configparser handle comments, whitespace and
    # duplicate detection for a sectionless file.
    cp = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    if len(cp.sections()) != 1:
        raise ConfigError(f"{source}: sections are not supported")
    return dict(cp["run"])


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    values: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values.update(parse_overrides(parse_config_text(f.read(), str(path))))
    if overrides:
        values.update(parse_overrides(overrides))
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(k, getattr(cfg, k))}\n" for k in _FIELDS)


def describe_keys() -> str:
    """One line per key: name, default and meaning (used in ``--help``)."""
    default = RunConfig()
    width = max(len(k) for k in _FIELDS)
    lines = ["config keys (key = default: meaning):"]
    for k, f in _FIELDS.items():
        lines.append(f"  {k:<{width}} = {format_value(k, getattr(default, k))}: {f.metadata['doc']}")
    return "\n".join(lines)
