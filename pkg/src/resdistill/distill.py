"""Teacher training and the four student regimes.

=========  =======  ==================
regime     alpha    student init
=========  =======  ==================
scratch    0        random
kd         > 0      random
kt         0        copy of teacher
kd_kt      > 0      copy of teacher
=========  =======  ==================
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import losses, nn
from .data import Dataset, PairedDataset, downsample, make_pairs
from .evaluation import evaluate
from .tensor import Graph, NonFiniteError, Tensor

log = logging.getLogger(__name__)

REGIMES = ("scratch", "kd", "kt", "kd_kt")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class RegimeConfig:
    kind: str
    alpha: float
    student_init: str

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"unknown regime {self.kind!r}; expected one of {REGIMES}")
        if self.student_init not in ("random", "from_teacher"):
            raise ValueError(f"student_init must be 'random' or 'from_teacher', got {self.student_init!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        wants_kd = self.kind in ("kd", "kd_kt")
        wants_kt = self.kind in ("kt", "kd_kt")
        if wants_kd != (self.alpha > 0):
            raise ValueError(f"regime {self.kind!r} requires alpha {'> 0' if wants_kd else '= 0'}, got {self.alpha}")
        if wants_kt != (self.student_init == "from_teacher"):
            raise ValueError(f"regime {self.kind!r} requires student_init="
                             f"{'from_teacher' if wants_kt else 'random'}, got {self.student_init!r}")

    @classmethod
    def of(cls, kind: str, alpha: float = 0.1) -> "RegimeConfig":
        return cls(kind, alpha if kind in ("kd", "kd_kt") else 0.0,
                   "from_teacher" if kind in ("kt", "kd_kt") else "random")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    teacher_resolution: int = 64
    student_resolution: int = 32
    cls_kind: str = "arcface"
    arc_scale: float = 16.0
    arc_margin: float = 0.3
    feature_point: str = "embedding"
    lr_milestones: tuple = (0.6, 0.85)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs a batch)")
        if self.student_resolution > self.teacher_resolution:
            raise ValueError(f"student_resolution {self.student_resolution} exceeds "
                             f"teacher_resolution {self.teacher_resolution}")
        if self.cls_kind not in ("softmax", "arcface"):
            raise ValueError(f"cls_kind must be softmax or arcface, got {self.cls_kind!r}")
        if self.feature_point not in ("embedding", "pooled"):
            raise ValueError(f"feature_point must be embedding or pooled, got {self.feature_point!r}")

    def check_model(self, config: nn.ModelConfig) -> None:
        for name in ("teacher_resolution", "student_resolution"):
            r = getattr(self, name)
            if r < config.min_resolution:
                raise ValueError(f"{name}={r} is below the model's min_resolution={config.min_resolution}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for m in self.lr_milestones:
            if epoch >= int(round(m * self.epochs)):
                lr *= 0.1
        return lr


@dataclass
class EpochRecord:
    epoch: int
    classification: float
    feature_match: float
    total: float
    accuracy: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_csv(self, timing: bool = True) -> str:
        """CSV log; with ``timing=False`` the seconds column is ``NA`` so the file is reproducible."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "L_CS", "L_feat", "total", "acc", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.classification), repr(r.feature_match), repr(r.total),
                        repr(r.accuracy), f"{r.seconds:.3f}" if timing else "NA"])
        return buf.getvalue()


class SGD:
    """Momentum SGD; weight decay on conv/projection/classifier weights only."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads, lr: float) -> None:
        for k, p in self.params.items():
            g = grads.get(p, zeros=True)
            if self.weight_decay and (k.endswith("weight") or k == "W"):
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def fit(params: nn.ParameterSet, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
        alpha: float = 0.0, teacher_features: Optional[np.ndarray] = None,
        epochs: Optional[int] = None) -> TrainLog:
    """Train ``params`` in place on (images, labels).

    With ``alpha > 0`` the loss adds ``alpha * feature_match`` against the
    rows of ``teacher_features`` (one constant row per image). With
    ``alpha == 0`` teacher features are never touched.
    """
    epochs = cfg.epochs if epochs is None else epochs
    cfg = replace(cfg, epochs=epochs)
    labels = np.asarray(labels, dtype=np.int64)
    if alpha > 0 and (teacher_features is None or len(teacher_features) != len(images)):
        raise ValueError("alpha > 0 needs one teacher feature row per training image")
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    opt = SGD(params.trainable(), cfg.momentum, cfg.weight_decay)
    trainlog = TrainLog()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        sums = np.zeros(3)
        correct = 0
        seen = 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            graph = Graph()
            try:
                with graph.recording():
                    pooled, emb = nn.forward_features(params, images[idx], "train")
                    feats = None
                    if alpha > 0:
                        feats = Tensor._wrap(teacher_features[idx])
                    lb = losses.combined_student_loss(
                        emb, params.W, labels[idx], alpha,
                        student_feat=pooled if cfg.feature_point == "pooled" else emb,
                        teacher_feat=feats, cls_kind=cfg.cls_kind,
                        arc_scale=cfg.arc_scale, arc_margin=cfg.arc_margin)
            except (NonFiniteError, losses.ZeroNormError) as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            if not np.isfinite(lb.total):
                raise TrainingDivergedError(epoch)
            grads = graph.backward(lb.tensor)
            opt.step(grads, lr)
            k = len(idx)
            sums += k * np.array([lb.classification, lb.feature_match, lb.total])
            scores = losses.class_scores(emb.data, params.W.data, cfg.cls_kind)
            correct += int((scores.argmax(axis=1) == labels[idx]).sum())
            seen += k
        m = sums / max(seen, 1)
        rec = EpochRecord(epoch, m[0], m[1], m[2], correct / max(seen, 1), time.perf_counter() - t0)
        trainlog.records.append(rec)
        log.info("epoch %d lr=%.4g loss=%.4f acc=%.3f (%.1fs)", epoch, lr, rec.total, rec.accuracy, rec.seconds)
    return trainlog


def train_teacher(model_config: nn.ModelConfig, dataset: Dataset, cfg: TrainConfig,
                  epochs: Optional[int] = None):
    """Train a teacher at ``cfg.teacher_resolution``; returns (params, log)."""
    cfg.check_model(model_config)
    images = downsample(dataset.images, cfg.teacher_resolution)
    params = nn.build(model_config, dataset.num_classes, seed=_derive(cfg.seed, 1))
    trainlog = fit(params, images, dataset.labels, cfg, epochs=epochs)
    return params, trainlog


def _derive(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def init_student(regime: RegimeConfig, model_config: nn.ModelConfig, teacher: nn.ParameterSet,
                 seed: int) -> nn.ParameterSet:
    if teacher.config != model_config:
        raise ValueError("student and teacher must share one architecture (model configs differ)")
    if regime.student_init == "from_teacher":
        return nn.copy_parameters(teacher)
    return nn.build(model_config, teacher.num_classes, seed)


def teacher_features(teacher: nn.ParameterSet, x_t: np.ndarray, feature_point: str = "embedding",
                     batch_size: int = 128) -> np.ndarray:
    """Eval-mode teacher features, computed once per image."""
    out = []
    for s in range(0, len(x_t), batch_size):
        pooled, emb = nn.forward_features(teacher, x_t[s:s + batch_size], "eval")
        out.append((pooled if feature_point == "pooled" else emb).data)
    return np.concatenate(out)


def train_student(regime: RegimeConfig, teacher: nn.ParameterSet, student: nn.ParameterSet,
                  pairs: PairedDataset, cfg: TrainConfig, epochs: Optional[int] = None):
    """Train ``student`` in place on x_s; the teacher is only read (and only if alpha > 0)."""
    if pairs.x_s.shape[-1] != cfg.student_resolution:
        raise ValueError(f"paired data is at student resolution {pairs.x_s.shape[-1]}, "
                         f"config says {cfg.student_resolution}")
    if pairs.x_t.shape[-1] != cfg.teacher_resolution:
        raise ValueError(f"paired data is at teacher resolution {pairs.x_t.shape[-1]}, "
                         f"config says {cfg.teacher_resolution}")
    feats = None
    if regime.alpha > 0:
        feats = teacher_features(teacher, pairs.x_t, cfg.feature_point)
    trainlog = fit(student, pairs.x_s, pairs.labels, cfg, regime.alpha, feats, epochs)
    return student, trainlog


# -- resolution ladder ---------------------------------------------------------

@dataclass
class LadderSettings:
    resolutions: tuple = (64, 32)
    regimes: tuple = REGIMES
    teacher_epochs: int = 12
    student_epochs: dict = field(default_factory=dict)  # regime -> epochs
    alpha: float = 0.1
    seeds: tuple = (0,)
    jobs: int = 1

    def epochs_for(self, regime: str, default: int) -> int:
        return self.student_epochs.get(regime, default)


@dataclass
class LadderCell:
    seed: int
    resolution: int
    regime: str
    params: nn.ParameterSet
    log: TrainLog
    report: object = None


def run_ladder(model_config: nn.ModelConfig, dataset: Dataset, eval_set: Dataset,
               settings: LadderSettings, cfg: TrainConfig, eval_settings, student_epochs: int = 8,
               on_cell=None) -> list[LadderCell]:
    """Teacher at ``resolutions[0]``, then every (lower resolution, regime) student.

    Returns cells in deterministic order: per seed, the teacher first, then
    resolutions descending, regimes in the given order.
    """
    res = list(settings.resolutions)
    if res != sorted(res, reverse=True) or len(set(res)) != len(res):
        raise ValueError(f"resolutions must be strictly descending, got {res}")
    for r in res:
        model_config.check_resolution(r)
    cells: list[LadderCell] = []
    for seed in settings.seeds:
        tcfg = replace(cfg, seed=seed, teacher_resolution=res[0], student_resolution=res[0])
        teacher, tlog = train_teacher(model_config, dataset, tcfg, settings.teacher_epochs)
        tcell = LadderCell(seed, res[0], "teacher", teacher, tlog)
        tcell.report = evaluate(teacher, downsample(eval_set.images, res[0]), eval_set.manifest,
                                res[0], "teacher", eval_settings)
        cells.append(tcell)
        if on_cell:
            on_cell(tcell)
        jobs = []
        for r in res[1:]:
            pairs = make_pairs(dataset, res[0], r)
            eval_images = downsample(eval_set.images, r)
            for kind in settings.regimes:
                jobs.append((r, kind, pairs, eval_images))

        def run(job):
            r, kind, pairs, eval_images = job
            regime = RegimeConfig.of(kind, settings.alpha)
            scfg = replace(cfg, seed=seed, teacher_resolution=res[0], student_resolution=r)
            student = init_student(regime, model_config, teacher, _derive(seed, 2))
            student, slog = train_student(regime, teacher, student, pairs, scfg,
                                          settings.epochs_for(kind, student_epochs))
            cell = LadderCell(seed, r, kind, student, slog)
            cell.report = evaluate(student, eval_images, eval_set.manifest, r, kind, eval_settings)
            return cell

        if settings.jobs > 1:
            with ThreadPoolExecutor(settings.jobs) as pool:
                done = list(pool.map(run, jobs))
        else:
            done = [run(j) for j in jobs]
        for cell in done:
            cells.append(cell)
            if on_cell:
                on_cell(cell)
    return cells
