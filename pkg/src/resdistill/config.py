"""Flat ``section.key = value`` experiment configuration.

Every key has a type and a default; unknown keys, malformed values and
cross-field violations are reported with the key and line number. ``dump``
writes every key (defaults expanded) and parses back to an equal config.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import nn
from .data import SyntheticParams
from .distill import REGIMES, LadderSettings, RegimeConfig, TrainConfig
from .evaluation import EvalSettings


class ConfigError(ValueError):
    pass


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return s


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _list(item):
    def parse(s):
        s = s.strip().strip("[]")
        return tuple(item(p.strip()) for p in s.split(",") if p.strip())
    return parse


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: object


SCHEMA: dict[str, Key] = {
    "model.channels": Key(_list(_int), (16, 32, 64, 128)),
    "model.kernels": Key(_list(_int), (3,)),
    "model.strides": Key(_list(_int), (2,)),
    "model.paddings": Key(_list(_int), ()),
    "model.embed_dim": Key(_int, 64),
    "model.in_channels": Key(_int, 1),
    "model.norm_momentum": Key(_float, 0.9),
    "model.norm_epsilon": Key(_float, 1e-5),

    "data.source": Key(_choice("synthetic", "manifest"), "synthetic"),
    "data.manifest": Key(_str, ""),
    "data.eval_manifest": Key(_str, ""),
    "data.num_ids": Key(_int, 50),
    "data.per_id": Key(_int, 40),
    "data.base_res": Key(_int, 64),
    "data.seed": Key(_int, 1000),
    "data.eval_num_ids": Key(_int, 200),
    "data.eval_per_id": Key(_int, 10),
    "data.eval_seed": Key(_int, 2000),
    "data.components": Key(_int, SyntheticParams.components),
    "data.max_frequency": Key(_float, SyntheticParams.max_frequency),
    "data.warp_amplitude": Key(_float, SyntheticParams.warp_amplitude),
    "data.warp_frequency": Key(_float, SyntheticParams.warp_frequency),
    "data.brightness_jitter": Key(_float, SyntheticParams.brightness_jitter),
    "data.contrast_jitter": Key(_float, SyntheticParams.contrast_jitter),
    "data.noise_std": Key(_float, SyntheticParams.noise_std),
    "data.identity_amplitude": Key(_float, SyntheticParams.identity_amplitude),

    "train.epochs": Key(_int, TrainConfig.epochs),
    "train.batch_size": Key(_int, TrainConfig.batch_size),
    "train.learning_rate": Key(_float, TrainConfig.learning_rate),
    "train.momentum": Key(_float, TrainConfig.momentum),
    "train.weight_decay": Key(_float, TrainConfig.weight_decay),
    "train.seed": Key(_int, TrainConfig.seed),
    "train.teacher_resolution": Key(_int, TrainConfig.teacher_resolution),
    "train.student_resolution": Key(_int, TrainConfig.student_resolution),
    "train.cls_kind": Key(_choice("softmax", "arcface"), TrainConfig.cls_kind),
    "train.arc_scale": Key(_float, TrainConfig.arc_scale),
    "train.arc_margin": Key(_float, TrainConfig.arc_margin),
    "train.feature_point": Key(_choice("embedding", "pooled"), TrainConfig.feature_point),
    "train.lr_milestones": Key(_list(_float), TrainConfig.lr_milestones),
    "train.alpha": Key(_float, 0.1),
    "train.regime": Key(_choice(*REGIMES), "kd_kt"),

    "ladder.resolutions": Key(_list(_int), (64, 32)),
    "ladder.regimes": Key(_list(_choice(*REGIMES)), REGIMES),
    "ladder.teacher_epochs": Key(_int, LadderSettings.teacher_epochs),
    "ladder.epochs_scratch": Key(_int, 8),
    "ladder.epochs_kd": Key(_int, 8),
    "ladder.epochs_kt": Key(_int, 8),
    "ladder.epochs_kd_kt": Key(_int, 8),
    "ladder.num_seeds": Key(_int, 1),
    "ladder.jobs": Key(_int, 1),

    "eval.far_targets": Key(_list(_float), EvalSettings.far_targets),
    "eval.tar_far_targets": Key(_list(_float), EvalSettings.tar_far_targets),
    "eval.fpir_targets": Key(_list(_float), EvalSettings.fpir_targets),
    "eval.ranks": Key(_list(_int), EvalSettings.ranks),
    "eval.fusion": Key(_choice("average", "detector_score"), EvalSettings.fusion),
    "eval.flip": Key(_bool, EvalSettings.flip),
    "eval.num_gallery_ids": Key(_int, EvalSettings.num_gallery_ids),
    "eval.unknown_fraction": Key(_float, EvalSettings.unknown_fraction),
    "eval.template_size": Key(_int, EvalSettings.template_size),
    "eval.split_seed": Key(_int, EvalSettings.split_seed),

    "output.dir": Key(_str, "out"),
    "output.timing": Key(_bool, False),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: v.default for k, v in SCHEMA.items()})
    lines: dict = field(default_factory=dict, compare=False, repr=False)
    source: str = field(default="<defaults>", compare=False, repr=False)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    # -- typed views ---------------------------------------------------------

    def model_config(self) -> nn.ModelConfig:
        m = self.section("model")
        return nn.ModelConfig.from_lists(
            m["channels"], list(m["kernels"]), list(m["strides"]),
            list(m["paddings"]) if m["paddings"] else None,
            embed_dim=m["embed_dim"], in_channels=m["in_channels"],
            norm_momentum=m["norm_momentum"], norm_epsilon=m["norm_epsilon"])

    def synthetic_params(self) -> SyntheticParams:
        d = self.section("data")
        return SyntheticParams(**{k: d[k] for k in SyntheticParams.__dataclass_fields__})

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(**{k: t[k] for k in TrainConfig.__dataclass_fields__})

    def regime(self) -> RegimeConfig:
        return RegimeConfig.of(self["train.regime"], self["train.alpha"])

    def seeds(self) -> tuple:
        return tuple(self["train.seed"] + i for i in range(self["ladder.num_seeds"]))

    def ladder_settings(self) -> LadderSettings:
        lad = self.section("ladder")
        return LadderSettings(
            resolutions=lad["resolutions"], regimes=lad["regimes"],
            teacher_epochs=lad["teacher_epochs"],
            student_epochs={r: lad[f"epochs_{r}"] for r in REGIMES},
            alpha=self["train.alpha"], seeds=self.seeds(), jobs=lad["jobs"])

    def eval_settings(self) -> EvalSettings:
        e = self.section("eval")
        return EvalSettings(**{k: e[k] for k in EvalSettings.__dataclass_fields__})

    # -- validation ------------------------------------------------------------

    def _fail(self, key: str, msg: str):
        where = f"{self.source}:{self.lines[key]}: " if key in self.lines else ""
        raise ConfigError(f"{where}{key}: {msg}")

    def validate(self) -> "ExperimentConfig":
        """Cross-field checks; raises :class:`ConfigError` naming the key."""
        try:
            mc = self.model_config()
        except ValueError as e:
            self._fail("model.channels", str(e))
        for key in ("train.epochs", "ladder.teacher_epochs", "ladder.num_seeds", "ladder.jobs",
                    "data.num_ids", "data.per_id", "data.eval_num_ids", "data.eval_per_id",
                    "eval.template_size", "data.components"):
            if self[key] < 1:
                self._fail(key, f"must be >= 1, got {self[key]}")
        for r in REGIMES:
            if self[f"ladder.epochs_{r}"] < 0:
                self._fail(f"ladder.epochs_{r}", "must be >= 0")
        if self["train.alpha"] < 0:
            self._fail("train.alpha", f"must be >= 0, got {self['train.alpha']}")
        if self["train.batch_size"] < 2:
            self._fail("train.batch_size", "must be >= 2 for batch statistics")
        if self["train.learning_rate"] < 0:
            self._fail("train.learning_rate", "must be >= 0")
        if self["train.weight_decay"] < 0:
            self._fail("train.weight_decay", "must be >= 0")
        if not 0.0 <= self["train.momentum"] < 1.0:
            self._fail("train.momentum", "must lie in [0, 1)")
        try:
            self.regime()
        except ValueError as e:
            self._fail("train.alpha", str(e))
        res = list(self["ladder.resolutions"])
        if not res:
            self._fail("ladder.resolutions", "needs at least one resolution")
        if res != sorted(res, reverse=True) or len(set(res)) != len(res):
            self._fail("ladder.resolutions", f"must be strictly descending, got {res}")
        for r in res:
            if r < mc.min_resolution:
                self._fail("ladder.resolutions",
                           f"resolution {r} is below min_resolution={mc.min_resolution}")
        if not self["ladder.regimes"]:
            self._fail("ladder.regimes", "needs at least one regime")
        t_res, s_res = self["train.teacher_resolution"], self["train.student_resolution"]
        if s_res > t_res:
            self._fail("train.student_resolution", f"{s_res} exceeds teacher resolution {t_res}")
        if s_res < mc.min_resolution:
            self._fail("train.student_resolution",
                       f"{s_res} is below min_resolution={mc.min_resolution}")
        if self["data.source"] == "synthetic":
            base = self["data.base_res"]
            if base < max(res + [t_res]):
                self._fail("data.base_res", f"{base} is below the largest requested resolution")
        elif not self["data.manifest"]:
            self._fail("data.manifest", "required when data.source = manifest")
        if any(not 0.0 < m <= 1.0 for m in self["train.lr_milestones"]):
            self._fail("train.lr_milestones", "milestones are epoch fractions in (0, 1]")
        if self["train.arc_scale"] <= 0:
            self._fail("train.arc_scale", "must be > 0")
        if not 0.0 <= self["train.arc_margin"] < 1.5707963267948966:
            self._fail("train.arc_margin", "must lie in [0, pi/2)")
        if not 0.0 <= self["eval.unknown_fraction"] < 1.0:
            self._fail("eval.unknown_fraction", "must lie in [0, 1)")
        if self["eval.num_gallery_ids"] < 1:
            self._fail("eval.num_gallery_ids", "must be >= 1")
        for key in ("eval.far_targets", "eval.tar_far_targets", "eval.fpir_targets"):
            if any(not 0.0 <= f <= 1.0 for f in self[key]):
                self._fail(key, "targets must lie in [0, 1]")
        if any(k < 1 for k in self["eval.ranks"]):
            self._fail("eval.ranks", "ranks must be >= 1")
        return self

    # -- serialization -----------------------------------------------------------

    def dump(self) -> str:
        out, section = [], None
        for key in SCHEMA:
            sec = key.split(".", 1)[0]
            if sec != section:
                if section is not None:
                    out.append("")
                out.append(f"# {sec}")
                section = sec
            out.append(f"{key} = {_format(self.values[key])}")
        return "\n".join(out) + "\n"

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = v
        return ExperimentConfig(values, dict(self.lines), self.source).validate()


def parse_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cfg = ExperimentConfig(source=source)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: {key}: unknown key")
        if key in cfg.lines:
            raise ConfigError(f"{source}:{lineno}: {key}: already set on line {cfg.lines[key]}")
        try:
            cfg.values[key] = SCHEMA[key].parse(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: {key}: {e}") from None
        cfg.lines[key] = lineno
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_text(path.read_text(), str(path))


def default_config() -> ExperimentConfig:
    return ExperimentConfig().validate()
