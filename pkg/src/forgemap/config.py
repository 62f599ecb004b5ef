"""Sectioned key=value configuration with strict validation and hashing.

Files look like::

    [data]
    image_size = 32
    # comments start with '#' or ';'

    [diffusion]
    T = 50

Unknown keys are rejected, duplicates are an error naming both lines, and
every run embeds the hash of the fully resolved (defaulted) configuration in
its outputs so artifacts can be traced back to settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigError

_PLACEMENTS = ("encoder-all", "final-stage-only", "decoder")
_RULES = ("paper-eq4", "ddpm-ancestral")
_FUSION_MODES = ("gating", "addition", "hadamard", "concat")
_SCHEDULES = ("cosine", "constant")
_KIND_NAMES = ("photometric-shift", "local-blur", "patch-swap", "warp-blend")
ABLATION_KINDS = ("fusion", "steps", "seed", "strategy", "conditioning",
                  "gt-fusion", "regression-vs-diffusion")


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    describe: str = ""


def _int(lo=None, hi=None):
    return lambda v: (lo is None or v >= lo) and (hi is None or v <= hi)


def _float(lo=None, hi=None, lo_open=False):
    def ok(v):
        if lo is not None and (v <= lo if lo_open else v < lo):
            return False
        return hi is None or v <= hi
    return ok


def _enum(*options):
    return lambda v: v in options


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _train_fields(epochs, lr, lr_min, schedule):
    return {
        "epochs": Field(int, epochs, _int(1)),
        "batch": Field(int, 32, _int(1)),
        "lr": Field(float, lr, _float(0, lo_open=True)),
        "lr_min": Field(float, lr_min, _float(0)),
        "weight_decay": Field(float, 1e-4, _float(0)),
        "schedule": Field(str, schedule, _enum(*_SCHEDULES)),
    }


def _schema() -> dict[str, Field]:
    s: dict[str, dict[str, Field]] = {
        "data": {
            "image_size": Field(int, 32, _int(16, 128)),
            "group_size": Field(int, 4, _int(1)),
            "train_real": Field(int, 400, _int(0)),
            "train_fake": Field(int, 400, _int(0)),
            "test_real": Field(int, 100, _int(0)),
            "test_fake": Field(int, 100, _int(0)),
            "train_kinds": Field(_str_list, ("photometric-shift", "local-blur", "warp-blend"),
                                 lambda v: all(k in _KIND_NAMES for k in v)),
            "test_kinds": Field(_str_list, ("patch-swap",),
                                lambda v: all(k in _KIND_NAMES for k in v)),
            "mask_feather": Field(float, 2.0, _float(0.5, 8.0)),
            "jitter": Field(float, 0.03, _float(0, 0.2)),
            "noise": Field(float, 0.008, _float(0, 0.1)),
            "shift_min": Field(float, 0.08, _float(0, 1)),
            "shift_max": Field(float, 0.30, _float(0, 1)),
            "contrast_min": Field(float, 0.85, _float(0.1, 2)),
            "contrast_max": Field(float, 1.15, _float(0.1, 2)),
            "blur_min": Field(int, 1, _int(0, 8)),
            "blur_max": Field(int, 3, _int(0, 8)),
            "swap_min": Field(int, 4, _int(0, 64)),
            "swap_max": Field(int, 10, _int(0, 64)),
            "warp_min": Field(float, 0.8, _float(0, 16)),
            "warp_max": Field(float, 2.5, _float(0, 16)),
        },
        "detector": {
            "channels": Field(_int_list, (16, 32, 64, 128),
                              lambda v: len(v) == 4 and all(c >= 1 for c in v)),
        },
        "unet": {
            "channels": Field(_int_list, (16, 16, 32, 64, 32, 16, 16),
                              lambda v: len(v) == 7 and all(c >= 1 for c in v)),
            "time_dim": Field(int, 32, lambda v: v >= 4 and v % 2 == 0),
            "placement": Field(str, "encoder-all", _enum(*_PLACEMENTS)),
        },
        "diffusion": {
            "T": Field(int, 50, _int(2)),
            "beta_start": Field(float, 0.02, _float(0, 1, lo_open=True)),
            "beta_end": Field(float, 0.4, _float(0, 1, lo_open=True)),
            "rule": Field(str, "paper-eq4", _enum(*_RULES)),
        },
        "fusion": {
            "mode": Field(str, "gating", _enum(*_FUSION_MODES)),
        },
        "train.stage0": _train_fields(10, 1e-3, 1e-5, "cosine"),
        "train.stage1": _train_fields(30, 1e-4, 1e-6, "cosine"),
        "train.stage2": {
            **_train_fields(5, 5e-5, 5e-5, "constant"),
            "use_gt_maps": Field(_bool, False),
            "resample_maps": Field(_bool, False),
            "sample_batch": Field(int, 64, _int(1)),
        },
        "train.regression": _train_fields(30, 1e-4, 1e-6, "cosine"),
        "train.single": {
            **_train_fields(30, 1e-4, 1e-6, "cosine"),
            "ce_weight": Field(float, 1.0, _float(0)),
        },
        "eval": {
            "group_average": Field(_bool, True),
            "sample_batch": Field(int, 64, _int(1)),
        },
        "ablate": {
            "steps": Field(_int_list, (10, 25, 50), lambda v: len(v) >= 1),
            "seeds": Field(int, 5, _int(1)),
        },
    }
    return {f"{sec}.{key}": fld for sec, fields in s.items() for key, fld in fields.items()}


SCHEMA = _schema()


class Config:
    """Resolved configuration: every schema key has a value."""

    def __init__(self, values: dict[str, Any]):
        self._values = values

    def get(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def with_overrides(self, **overrides) -> "Config":
        """New Config with dotted keys replaced (values already typed)."""
        values = dict(self._values)
        for key, val in overrides.items():
            key = key.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            if not SCHEMA[key].check(val):
                raise ConfigError(f"value {val!r} out of range for {key}")
            values[key] = val
        return Config(values)

    def canonical(self) -> str:
        lines = []
        for key in sorted(self._values):
            lines.append(f"{key}={_canon_value(self._values[key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]


def _canon_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def default_config() -> Config:
    return Config({key: fld.default for key, fld in SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> Config:
    values = {key: fld.default for key, fld in SCHEMA.items()}
    seen: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        name, _, rhs = line.partition("=")
        key = f"{section}.{name.strip()}"
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"{source}: duplicate key {key!r} (lines {seen[key]} and {lineno})")
        seen[key] = lineno
        fld = SCHEMA[key]
        try:
            value = fld.parse(rhs.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: cannot parse {key}: {exc}") from exc
        if not fld.check(value):
            raise ConfigError(f"{source}:{lineno}: value {value!r} out of range for {key}")
        values[key] = value
    cfg = Config(values)
    _cross_validate(cfg, source)
    return cfg


def _cross_validate(cfg: Config, source: str) -> None:
    pairs = (("data.shift_min", "data.shift_max"),
             ("data.contrast_min", "data.contrast_max"),
             ("data.blur_min", "data.blur_max"),
             ("data.swap_min", "data.swap_max"),
             ("data.warp_min", "data.warp_max"))
    for lo, hi in pairs:
        if cfg.get(lo) > cfg.get(hi):
            raise ConfigError(f"{source}: {lo} > {hi}")
    if cfg.get("diffusion.beta_start") > cfg.get("diffusion.beta_end"):
        raise ConfigError(f"{source}: diffusion.beta_start > diffusion.beta_end")
    if cfg.get("data.image_size") % 16:
        raise ConfigError(f"{source}: data.image_size must be a multiple of 16")


def load_config(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))
