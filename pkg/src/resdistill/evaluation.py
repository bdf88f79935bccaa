"""Embedding extraction, template fusion and biometric metrics.

Threshold rule used everywhere: a comparison is accepted when its score is
``>= tau``. For a false-rate target ``f`` the operating threshold ``tau`` is
the smallest observed score (genuine or impostor, plus ``+inf``) whose
empirical false rate is ``<= f``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import horizontal_flip, split_open_set


# -- embeddings & templates ----------------------------------------------------

def extract_embeddings(params: nn.ParameterSet, images: np.ndarray, flip_augment: bool = False,
                       batch_size: int = 128) -> np.ndarray:
    """Eval-mode, L2-normalized embeddings (N, D); flip averages e(x) and e(flip x)."""
    out = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        e = nn.forward_embed(params, x, "eval").data
        if flip_augment:
            e = (e + nn.forward_embed(params, horizontal_flip(x), "eval").data) / 2.0
        out.append(e)
    emb = np.concatenate(out) if out else np.zeros((0, params.config.embed_dim))
    return normalize_rows(emb)


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


@dataclass
class Template:
    subject_id: int
    vector: np.ndarray
    source_count: int


def build_template(embeddings, media_ids=None, detector_scores=None, weighting: str = "average",
                   subject_id: int = -1) -> Template:
    """Two-stage pooling: mean within each media, then (weighted) mean across media."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = len(emb)
    if n == 0:
        raise ValueError("build_template needs at least one embedding")
    media = np.arange(n) if media_ids is None else np.asarray(media_ids)
    order = list(dict.fromkeys(media.tolist()))
    per_media = np.stack([emb[media == m].mean(axis=0) for m in order])
    if weighting == "average":
        pooled = per_media.mean(axis=0)
    elif weighting == "detector_score":
        if detector_scores is None:
            raise ValueError("detector_score weighting requires detector scores")
        scores = np.asarray(detector_scores, dtype=np.float64)
        w = np.array([scores[media == m].mean() for m in order])
        if w.sum() <= 0:
            raise ValueError("detector_score weighting: all detector scores are zero")
        pooled = (w / w.sum()) @ per_media
    else:
        raise ValueError(f"unknown template weighting {weighting!r}")
    norm = np.linalg.norm(pooled)
    # vectors already of unit length pass through untouched, so a template
    # carried by one media reproduces that media's vector bit for bit
    vec = pooled / norm if norm > 0 and abs(norm - 1.0) > 4 * np.finfo(float).eps else pooled
    return Template(subject_id, vec, n)


def cosine_similarity(a: Template, b: Template) -> float:
    return float(np.clip(np.dot(a.vector, b.vector), -1.0, 1.0))


# -- operating points ----------------------------------------------------------

@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.imposter = np.asarray(self.imposter, dtype=np.float64).ravel()
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.imposter).all()):
            raise ValueError("scores must be finite")


@dataclass
class OperatingPoint:
    target_rate: float
    threshold: float
    achieved_metric: float
    false_rate: float = 0.0
    achievable: bool = True


def _threshold_for(candidates: np.ndarray, false_counts: np.ndarray, n_false: int, target: float):
    """First (smallest) candidate whose false rate is within ``target``."""
    ok = np.flatnonzero(false_counts / n_false <= target)
    if len(ok) == 0:
        return math.inf, 0
    i = ok[0]
    return float(candidates[i]), int(false_counts[i])


def _candidates(*score_arrays) -> np.ndarray:
    return np.append(np.unique(np.concatenate(score_arrays)), math.inf)


def _count_at_or_above(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return len(sorted_scores) - np.searchsorted(sorted_scores, thresholds, side="left")


def tar_at_far(scores: ScoreSet, far_targets: Sequence[float]) -> list[OperatingPoint]:
    """1:1 verification true-accept rate at each false-accept target."""
    gen, imp = scores.genuine, scores.imposter
    if len(gen) == 0 or len(imp) == 0:
        raise ValueError("tar_at_far needs non-empty genuine and imposter scores")
    cand = _candidates(gen, imp)
    imp_counts = _count_at_or_above(np.sort(imp), cand)
    gen_sorted = np.sort(gen)
    points = []
    for f in far_targets:
        tau, fc = _threshold_for(cand, imp_counts, len(imp), f)
        tar = _count_at_or_above(gen_sorted, np.array([tau]))[0] / len(gen)
        points.append(OperatingPoint(f, tau, float(tar), fc / len(imp), f * len(imp) >= 1.0))
    return points


def verification_curve(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, TAR) at every candidate threshold, FAR descending."""
    cand = _candidates(scores.genuine, scores.imposter)
    far = _count_at_or_above(np.sort(scores.imposter), cand) / len(scores.imposter)
    tar = _count_at_or_above(np.sort(scores.genuine), cand) / len(scores.genuine)
    return far, tar


@dataclass
class OpenSetResult:
    points: list
    cmc: np.ndarray  # cmc[k-1] = rank-k identification rate
    curve: tuple = field(default=(np.zeros(0), np.zeros(0)), repr=False)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def best_matches(scores: np.ndarray):
    """Per-probe argmax (lowest gallery index on ties) and its score."""
    idx = np.argmax(scores, axis=1)
    return idx, scores[np.arange(len(scores)), idx]


def cmc_curve(known_scores: np.ndarray, true_index: np.ndarray) -> np.ndarray:
    """Rank-k rates for k = 1..gallery size; ties rank lower indices first."""
    n, g = known_scores.shape
    if n == 0:
        return np.zeros(g)
    true_index = np.asarray(true_index)
    s_true = known_scores[np.arange(n), true_index]
    cols = np.arange(g)[None, :]
    ahead = (known_scores > s_true[:, None]) | ((known_scores == s_true[:, None]) & (cols < true_index[:, None]))
    ranks = ahead.sum(axis=1) + 1
    return np.array([(ranks <= k).mean() for k in range(1, g + 1)])


def open_set_from_scores(known_scores: np.ndarray, true_index: np.ndarray,
                         unknown_scores: np.ndarray, targets: Sequence[float]) -> OpenSetResult:
    """Open-set identification from probe-by-gallery score matrices.

    The detection rate at ``tau`` counts known probes whose top match is the
    correct gallery entry with score ``>= tau``; the false rate counts unknown
    probes whose top score is ``>= tau``. This is DIR@FAR or TPIR@FPIR
    depending on how the targets are named.
    """
    known_scores = np.atleast_2d(np.asarray(known_scores, dtype=np.float64))
    unknown_scores = np.asarray(unknown_scores, dtype=np.float64)
    true_index = np.asarray(true_index, dtype=np.int64)
    cmc = cmc_curve(known_scores, true_index)
    points = []
    curve = (np.zeros(0), np.zeros(0))
    if len(targets):
        if unknown_scores.size == 0:
            raise ValueError("open-set rates need unknown probes; use the CMC (closed-set) metrics instead")
        k_idx, k_best = best_matches(known_scores)
        _, u_best = best_matches(np.atleast_2d(unknown_scores))
        correct = np.sort(k_best[k_idx == true_index])
        cand = _candidates(k_best, u_best)
        u_counts = _count_at_or_above(np.sort(u_best), cand)
        n_known = len(k_best)
        for f in targets:
            tau, fc = _threshold_for(cand, u_counts, len(u_best), f)
            rate = _count_at_or_above(correct, np.array([tau]))[0] / n_known if n_known else 0.0
            points.append(OperatingPoint(f, tau, float(rate), fc / len(u_best), f * len(u_best) >= 1.0))
        det = _count_at_or_above(correct, cand) / max(n_known, 1)
        curve = (u_counts / len(u_best), det)
    return OpenSetResult(points, cmc, curve)


def open_set_identify(gallery: Sequence[Template], known_probes: Sequence[Template],
                      unknown_probes: Sequence[Template], targets: Sequence[float]) -> OpenSetResult:
    g = np.stack([t.vector for t in gallery])
    gid = [t.subject_id for t in gallery]
    if len(set(gid)) != len(gid):
        raise ValueError("gallery subject ids must be unique")
    pos = {s: i for i, s in enumerate(gid)}
    kp = np.stack([t.vector for t in known_probes]) if known_probes else np.zeros((0, g.shape[1]))
    up = np.stack([t.vector for t in unknown_probes]) if unknown_probes else np.zeros((0, g.shape[1]))
    true_index = np.array([pos[t.subject_id] for t in known_probes], dtype=np.int64)
    return open_set_from_scores(kp @ g.T, true_index, up @ g.T, targets)


# -- metric rows & CSV ---------------------------------------------------------

METRIC_HEADER = ["protocol", "resolution", "regime", "target", "threshold", "value"]
REGIME_ORDER = ["teacher", "scratch", "kd", "kt", "kd_kt"]


@dataclass
class MetricRow:
    protocol: str
    resolution: int
    regime: str
    target: float
    threshold: float
    value: float  # percent
    achievable: bool = True


def rows_from_points(protocol: str, resolution: int, regime: str, points) -> list[MetricRow]:
    return [MetricRow(protocol, resolution, regime, p.target_rate, p.threshold,
                      100.0 * p.achieved_metric, p.achievable) for p in points]


def sort_rows(rows: Sequence[MetricRow]) -> list[MetricRow]:
    def key(r):
        reg = REGIME_ORDER.index(r.regime) if r.regime in REGIME_ORDER else len(REGIME_ORDER)
        return (r.protocol, -r.resolution, reg, r.regime, r.target)

    return sorted(rows, key=key)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for r in sort_rows(rows):
        value = f"{r.value:.2f}" if r.achievable else "NA"
        w.writerow([r.protocol, r.resolution, r.regime, _fmt_float(r.target),
                    _fmt_float(r.threshold), value])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list[MetricRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != METRIC_HEADER:
        raise ValueError(f"unexpected metric CSV header {header}")
    rows = []
    for rec in reader:
        proto, res, regime, target, thr, value = rec
        na = value == "NA"
        rows.append(MetricRow(proto, int(res), regime, float(target), float(thr),
                              math.nan if na else float(value), not na))
    return rows


def curve_csv(header: Sequence[str], xs, ys) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for x, y in zip(xs, ys):
        w.writerow([x if isinstance(x, (int, np.integer)) else _fmt_float(x), _fmt_float(y)])
    return buf.getvalue()


# -- protocols over an evaluation dataset -------------------------------------

@dataclass
class EvalSettings:
    far_targets: tuple = (0.01,)
    tar_far_targets: tuple = (0.1, 0.01, 0.001)
    fpir_targets: tuple = (0.001, 0.01, 0.1)
    ranks: tuple = (1, 5)
    fusion: str = "average"
    flip: bool = False
    num_gallery_ids: int = 100
    unknown_fraction: float = 0.5
    template_size: int = 1
    split_seed: int = 0


@dataclass
class MetricReport:
    resolution: int
    regime: str
    dir_points: list
    tpir_points: list
    tar_points: list
    cmc: np.ndarray
    det_curve: tuple = field(repr=False, default=None)
    openset_curve: tuple = field(repr=False, default=None)
    ranks: tuple = (1, 5)

    def dir_at(self, far: float) -> float:
        for p in self.dir_points:
            if p.target_rate == far:
                return p.achieved_metric
        raise KeyError(far)

    def rows(self) -> list[MetricRow]:
        out = rows_from_points("open_set_dir", self.resolution, self.regime, self.dir_points)
        out += rows_from_points("open_set_tpir", self.resolution, self.regime, self.tpir_points)
        out += rows_from_points("verification_tar", self.resolution, self.regime, self.tar_points)
        out += [MetricRow("cmc_rank", self.resolution, self.regime, float(k), math.nan,
                          100.0 * float(self.cmc[min(k, len(self.cmc)) - 1]))
                for k in self.ranks]
        return out


def verification_templates(embeddings, labels, media_ids, scores, template_size: int,
                           weighting: str) -> list[Template]:
    """Consecutive groups of ``template_size`` images per identity become templates."""
    templates = []
    labels = np.asarray(labels)
    for ident in np.unique(labels):
        members = np.flatnonzero(labels == ident)
        for start in range(0, len(members), template_size):
            grp = members[start:start + template_size]
            templates.append(build_template(embeddings[grp], media_ids[grp], scores[grp], weighting,
                                            subject_id=int(ident)))
    return templates


def pair_scores(templates: Sequence[Template]) -> ScoreSet:
    v = np.stack([t.vector for t in templates])
    ids = np.array([t.subject_id for t in templates])
    s = v @ v.T
    iu = np.triu_indices(len(templates), k=1)
    same = ids[iu[0]] == ids[iu[1]]
    return ScoreSet(s[iu][same], s[iu][~same])


def evaluate(params: nn.ParameterSet, images: np.ndarray, manifest, resolution: int, regime: str,
             settings: EvalSettings) -> MetricReport:
    """Run open-set and verification protocols on an evaluation set.

    ``images`` must already be at the network's evaluation resolution.
    """
    emb = extract_embeddings(params, images, settings.flip)
    labels = manifest.labels()
    media = manifest.media_ids()
    det = manifest.detector_scores()

    def tmpl(i):
        return build_template(emb[[i]], media[[i]], det[[i]], settings.fusion, int(labels[i]))

    split = split_open_set(manifest, settings.num_gallery_ids, settings.unknown_fraction,
                           settings.split_seed)
    gallery = [tmpl(i) for i in split.gallery]
    known = [tmpl(i) for i in split.known_probes]
    unknown = [tmpl(i) for i in split.unknown_probes]
    dir_res = open_set_identify(gallery, known, unknown, settings.far_targets)
    tpir_res = open_set_identify(gallery, known, unknown, settings.fpir_targets)
    templates = verification_templates(emb, labels, media, det, settings.template_size, settings.fusion)
    scores = pair_scores(templates)
    return MetricReport(resolution, regime, dir_res.points, tpir_res.points,
                        tar_at_far(scores, settings.tar_far_targets), dir_res.cmc,
                        verification_curve(scores), tpir_res.curve, tuple(settings.ranks))
