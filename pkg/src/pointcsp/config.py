"""Training configuration: schema, flat ``section.key = value`` files, validation, lock files."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class DataConfig:
    num_classes: int = 6
    objects_per_scene: int = 4
    points_per_object: int = 1200
    noise_sigma: float = 0.005
    num_scenes: int = 16
    corpus_seed: int = 0


@dataclass
class AugmentConfig:
    n: int = 2
    m: int = 8
    target_points: int = 256


@dataclass
class ModelConfig:
    c_in: int = 3
    local_k: list[int] = field(default_factory=lambda: [8, 24])
    channels: int = 32
    feat_dim: int = 32
    state_dim: int = 32
    proto_dim: int = 64
    ssm_variant: str = "static"
    nonlinearity: str = "gated_tanh"
    shuffle: bool = True
    dtype: str = "float64"


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    gamma: float = 0.996
    exclude_same_view: bool = False


@dataclass
class GeoConfig:
    alpha: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    samples: int = 64


@dataclass
class PretrainConfig:
    batch_size: int = 4
    steps: int = 500
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    lambda_geo: float = 0.1
    csp_enabled: bool = True
    checkpoint_every: int = 0


@dataclass
class FinetuneConfig:
    batch_size: int = 4
    steps: int = 200
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    gamma: float = 0.999
    lambda_spd: float = 0.5
    lambda_geo: float = 0.1
    spd_enabled: bool = True
    checkpoint_every: int = 0


@dataclass
class OptimConfig:
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EvalConfig:
    test_scenes: int = 4
    knn_k: int = 5
    probe_steps: int = 300
    probe_lr: float = 0.05
    points_per_class: int = 32


@dataclass
class TrainingConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    geo: GeoConfig = field(default_factory=GeoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **flat) -> "TrainingConfig":
        """Copy with overrides given as flat keys, e.g. ``replace(**{"pretrain.steps": 10})``."""
        values = dict(flat_items(self))
        for key, value in flat.items():
            if key not in values:
                raise ConfigError([ConfigIssue(0, 0, f"unknown key {key!r}")])
            values[key] = value
        return from_flat(values)


@dataclass
class ConfigIssue:
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}, column {self.column}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, issues: list[ConfigIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues) if issues else "invalid config")


SECTIONS = [f.name for f in dataclasses.fields(TrainingConfig) if f.name != "seed"]


def _section_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainingConfig)
    return {name: hints[name] for name in SECTIONS}


def schema() -> dict[str, object]:
    """Flat key -> annotated type."""
    out: dict[str, object] = {"seed": int}
    for sec, cls in _section_types().items():
        for name, tp in typing.get_type_hints(cls).items():
            out[f"{sec}.{name}"] = tp
    return out


def flat_items(cfg: TrainingConfig):
    yield "seed", cfg.seed
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            yield f"{sec}.{f.name}", getattr(obj, f.name)


def from_flat(values: dict[str, object]) -> TrainingConfig:
    cfg = TrainingConfig(seed=int(values.get("seed", 0)))
    for key, value in values.items():
        if key == "seed":
            continue
        sec, name = key.split(".", 1)
        setattr(getattr(cfg, sec), name, value)
    issues = check(cfg)
    if issues:
        raise ConfigError(issues)
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_value(text: str, tp):
    text = text.strip()
    if tp is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
    if tp is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
    if tp is str:
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
            return text[1:-1]
        return text
    if typing.get_origin(tp) is list:
        (inner,) = typing.get_args(tp)
        parts = [p for p in text.strip("[]").split(",") if p.strip()]
        return [_parse_value(p, inner) for p in parts]
    raise TypeError(f"unsupported config type {tp}")


def dumps(cfg: TrainingConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flat_items(cfg))


def config_hash(cfg: TrainingConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()


def architecture_hash(cfg: TrainingConfig) -> str:
    """Hash over the fields that fix parameter names and shapes."""
    text = "".join(f"{k} = {_format(v)}\n" for k, v in flat_items(cfg)
                   if k.startswith("model.") and k not in ("model.shuffle",))
    return hashlib.sha256(text.encode()).hexdigest()


def parse(text: str, overrides: dict[str, str] | None = None) -> TrainingConfig:
    """Parse a config document; ``overrides`` (flat key -> raw text) win over file keys."""
    types = schema()
    values = dict(flat_items(TrainingConfig()))
    issues: list[ConfigIssue] = []
    seen: dict[str, int] = {}
    entries: list[tuple[int, int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            issues.append(ConfigIssue(lineno, 1, "expected 'key = value'"))
            continue
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        col = len(key_part) - len(key_part.lstrip()) + 1
        vcol = len(key_part) + 2 + (len(value_part) - len(value_part.lstrip()))
        if key not in types:
            issues.append(ConfigIssue(lineno, col, f"unknown key {key!r}"))
            continue
        if key in seen:
            issues.append(ConfigIssue(lineno, col, f"duplicate key {key!r} (first on line {seen[key]})"))
            continue
        seen[key] = lineno
        entries.append((lineno, vcol, key, value_part))
    for key, raw_value in (overrides or {}).items():
        if key not in types:
            issues.append(ConfigIssue(0, 0, f"unknown key {key!r}"))
            continue
        entries.append((0, 0, key, raw_value))
    lines_of: dict[str, tuple[int, int]] = {}
    for lineno, col, key, raw_value in entries:
        try:
            values[key] = _parse_value(raw_value, types[key])
            lines_of[key] = (lineno, col)
        except ValueError as exc:
            issues.append(ConfigIssue(lineno, col, f"{key}: {exc}"))
    if issues:
        raise ConfigError(sorted(issues, key=lambda i: (i.line, i.column)))
    cfg = TrainingConfig(seed=values["seed"])
    for key, value in values.items():
        if key != "seed":
            sec, name = key.split(".", 1)
            setattr(getattr(cfg, sec), name, value)
    bad = check(cfg)
    for issue in bad:
        issue.line, issue.column = lines_of.get(issue.message.split(":", 1)[0], (0, 0))
    if bad:
        raise ConfigError(sorted(bad, key=lambda i: (i.line == 0, i.line, i.column)))
    return cfg


def load(path, overrides: dict[str, str] | None = None) -> TrainingConfig:
    return parse(Path(path).read_text(), overrides)


def validate_config(path) -> TrainingConfig:
    """Load and check a config file; raises ``ConfigError`` listing every issue."""
    return load(path)


def check(cfg: TrainingConfig) -> list[ConfigIssue]:
    """Range checks. Messages start with the offending flat key."""
    out: list[ConfigIssue] = []

    def need(ok: bool, key: str, msg: str):
        if not ok:
            out.append(ConfigIssue(0, 0, f"{key}: {msg}"))

    d, a, mo, di, g = cfg.data, cfg.aug, cfg.model, cfg.distill, cfg.geo
    need(d.num_classes >= 1, "data.num_classes", "must be >= 1")
    need(d.objects_per_scene >= 1, "data.objects_per_scene", "must be >= 1")
    need(d.points_per_object >= 1, "data.points_per_object", "must be >= 1")
    need(d.noise_sigma >= 0, "data.noise_sigma", "must be >= 0")
    need(d.num_scenes >= 2, "data.num_scenes", "must be >= 2")
    need(a.n >= 1, "aug.n", "must be >= 1")
    need(a.m >= 0, "aug.m", "must be >= 0")
    need(a.target_points >= 1, "aug.target_points", "must be >= 1")
    need(mo.c_in == 3, "model.c_in", "only xyz input (3 channels) is supported")
    need(all(k >= 2 for k in mo.local_k), "model.local_k", "neighborhood sizes must be >= 2")
    for key in ("channels", "feat_dim", "state_dim", "proto_dim"):
        need(getattr(mo, key) >= 1, f"model.{key}", "must be >= 1")
    need(mo.channels % 2 == 0, "model.channels", "must be even (decoder halves it)")
    need(mo.ssm_variant in ("static", "gated"), "model.ssm_variant", "must be 'static' or 'gated'")
    need(mo.nonlinearity in ("gated_tanh", "tanh", "identity"), "model.nonlinearity",
         "must be gated_tanh, tanh or identity")
    need(mo.dtype in ("float64", "float32"), "model.dtype", "must be float64 or float32")
    need(di.tau_s > 0, "distill.tau_s", "must be > 0")
    need(di.tau_t > 0, "distill.tau_t", "must be > 0")
    need(0 <= di.center_momentum < 1, "distill.center_momentum", "must lie in [0,1)")
    need(0 <= di.gamma < 1, "distill.gamma", "γ ∈ [0,1) required")
    need(len(g.alpha) == 3, "geo.alpha", "needs one weight per backbone stage (3)")
    need(all(x >= 0 for x in g.alpha), "geo.alpha", "weights must be >= 0")
    need(1 <= g.samples <= a.target_points, "geo.samples", "must lie in [1, aug.target_points]")
    for sec in ("pretrain", "finetune"):
        s = getattr(cfg, sec)
        need(s.batch_size >= 1, f"{sec}.batch_size", "must be >= 1")
        need(s.steps >= 0, f"{sec}.steps", "must be >= 0")
        need(0 <= s.lr_min <= s.lr_max, f"{sec}.lr_min", "need 0 <= lr_min <= lr_max")
        need(0 <= s.warmup_frac < 1, f"{sec}.warmup_frac", "must lie in [0,1)")
        need(s.lambda_geo >= 0, f"{sec}.lambda_geo", "must be >= 0")
        need(s.checkpoint_every >= 0, f"{sec}.checkpoint_every", "must be >= 0")
    need(0 <= cfg.finetune.gamma <= 1, "finetune.gamma", "must lie in [0,1]")
    need(cfg.finetune.lambda_spd >= 0, "finetune.lambda_spd", "must be >= 0")
    o = cfg.optim
    need(0 <= o.beta1 < 1, "optim.beta1", "must lie in [0,1)")
    need(0 <= o.beta2 < 1, "optim.beta2", "must lie in [0,1)")
    need(o.eps > 0, "optim.eps", "must be > 0")
    need(o.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    e = cfg.eval
    need(1 <= e.test_scenes < d.num_scenes, "eval.test_scenes", "must lie in [1, data.num_scenes)")
    need(e.knn_k >= 1, "eval.knn_k", "must be >= 1")
    need(e.probe_steps >= 1, "eval.probe_steps", "must be >= 1")
    need(e.probe_lr > 0, "eval.probe_lr", "must be > 0")
    need(e.points_per_class >= 1, "eval.points_per_class", "must be >= 1")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    return out
