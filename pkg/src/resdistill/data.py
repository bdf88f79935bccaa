"""Labeled image supply.

Images are float64 arrays of shape (C, R, R) with values in [0, 1]. A
:class:`Dataset` stacks them to (N, C, R, R) alongside a
:class:`DatasetManifest` describing identity, media grouping and detector
score per image.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

MANIFEST_HEADER = ["path", "identity", "media_id", "detector_score"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_path: str
    identity_label: int
    media_id: int
    detector_score: float = 1.0


@dataclass
class DatasetManifest:
    records: list

    def __post_init__(self):
        labels = {r.identity_label for r in self.records}
        if labels and labels != set(range(len(labels))):
            missing = sorted(set(range(max(labels) + 1)) - labels)
            raise ManifestError(f"identity labels are not contiguous from 0 (missing {missing[:5]})")
        for r in self.records:
            if not 0.0 <= r.detector_score <= 1.0:
                raise ManifestError(f"{r.image_path}: detector_score {r.detector_score} outside [0, 1]")

    @property
    def num_identities(self) -> int:
        return len({r.identity_label for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.identity_label for r in self.records], dtype=np.int64)

    def media_ids(self) -> np.ndarray:
        return np.array([r.media_id for r in self.records], dtype=np.int64)

    def detector_scores(self) -> np.ndarray:
        return np.array([r.detector_score for r in self.records], dtype=np.float64)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, R, R)
    manifest: DatasetManifest

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels()

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return self.manifest.num_identities

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        # labels of a subset need not be contiguous, so skip manifest validation
        m = DatasetManifest.__new__(DatasetManifest)
        m.records = [self.manifest.records[i] for i in idx]
        return Dataset(self.images[idx], m)


@dataclass
class SyntheticParams:
    """Knobs of the procedural identity generator (see :func:`generate_synthetic`)."""

    components: int = 10
    max_frequency: float = 12.0
    warp_amplitude: float = 0.02
    warp_frequency: float = 1.5
    brightness_jitter: float = 0.05
    contrast_jitter: float = 0.05
    noise_std: float = 0.02
    identity_amplitude: float = 0.22


def _prototype(rng, p: SyntheticParams):
    freqs = rng.uniform(-p.max_frequency, p.max_frequency, size=(p.components, 2))
    phases = rng.uniform(0, 2 * np.pi, size=p.components)
    amps = rng.uniform(0.5, 1.0, size=p.components) / np.sqrt(p.components)
    return freqs, phases, amps


def _render(freqs, phases, amps, u, v):
    # u, v: sample coordinates in [0, 1); pattern is a sum of plane waves
    arg = 2 * np.pi * (freqs[:, 0, None, None] * u + freqs[:, 1, None, None] * v) + phases[:, None, None]
    return (amps[:, None, None] * np.cos(arg)).sum(axis=0)


def generate_synthetic(num_ids: int, per_id: int, base_res: int = 64, channels: int = 1,
                       seed: int = 0, params: SyntheticParams | None = None) -> Dataset:
    """Procedural identities: smooth prototype + per-sample warp, lighting and noise.

    Each identity is a sum of random low-frequency plane waves per channel.
    A sample evaluates its prototype at smoothly warped coordinates, applies
    a random gain/offset and adds white noise; values are clipped to [0, 1].
    Detector scores fall with the sample's nuisance strength.
    """
    if num_ids < 2 or per_id < 2:
        raise ValueError("generate_synthetic needs num_ids >= 2 and per_id >= 2")
    p = params or SyntheticParams()
    rng = np.random.default_rng(seed)
    grid = (np.arange(base_res) + 0.5) / base_res
    v, u = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((num_ids * per_id, channels, base_res, base_res))
    records = []
    k = 0
    for ident in range(num_ids):
        protos = [_prototype(rng, p) for _ in range(channels)]
        for s in range(per_id):
            wf = rng.normal(0, p.warp_frequency, size=(4, 2))
            wp = rng.uniform(0, 2 * np.pi, size=4)
            wa = rng.normal(0, p.warp_amplitude, size=4)
            du = wa[0] * np.sin(2 * np.pi * (wf[0, 0] * u + wf[0, 1] * v) + wp[0]) \
                + wa[1] * np.sin(2 * np.pi * (wf[1, 0] * u + wf[1, 1] * v) + wp[1])
            dv = wa[2] * np.sin(2 * np.pi * (wf[2, 0] * u + wf[2, 1] * v) + wp[2]) \
                + wa[3] * np.sin(2 * np.pi * (wf[3, 0] * u + wf[3, 1] * v) + wp[3])
            gain = 1.0 + rng.normal(0, p.contrast_jitter)
            offset = rng.normal(0, p.brightness_jitter)
            noise = rng.normal(0, p.noise_std, size=(channels, base_res, base_res))
            for ch, (f, ph, a) in enumerate(protos):
                pattern = _render(f, ph, a, u + du, v + dv)
                images[k, ch] = 0.5 + offset + gain * p.identity_amplitude * pattern + noise[ch]
            nuisance = np.sqrt((wa ** 2).sum()) / max(p.warp_amplitude, 1e-12) + abs(offset) / max(
                p.brightness_jitter, 1e-12)
            score = float(np.clip(1.0 / (1.0 + 0.25 * nuisance), 0.0, 1.0))
            records.append(Record(f"synthetic://{seed}/{k}", ident, k, score))
            k += 1
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, DatasetManifest(records))


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights with half-pixel-centered sampling."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = np.arange(dst)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def downsample(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of (..., R, R) images down to (..., target, target)."""
    image = np.asarray(image, dtype=np.float64)
    r = image.shape[-1]
    if image.shape[-2] != r:
        raise ValueError(f"downsample expects square images, got {image.shape[-2:]}")
    if target > r:
        raise ValueError(f"downsample target {target} exceeds source resolution {r}; upsampling is not supported")
    if target < 1:
        raise ValueError(f"downsample target must be >= 1, got {target}")
    if target == r:
        return image.copy()
    m = _bilinear_matrix(r, target)
    return np.matmul(np.matmul(m, image), m.T)


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    """Mirror (..., H, W) images over the vertical axis."""
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


@dataclass
class PairedDataset:
    """The same images at teacher (x_t) and student (x_s) resolution."""

    x_t: np.ndarray
    x_s: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        for i in range(len(self.labels)):
            yield ResolutionPair(self.x_t[i], self.x_s[i], int(self.labels[i]))


@dataclass(frozen=True)
class ResolutionPair:
    x_t: np.ndarray
    x_s: np.ndarray
    label: int


def make_pairs(dataset: Dataset, r_t: int, r_s: int) -> PairedDataset:
    if dataset.resolution < r_t:
        raise ValueError(f"dataset resolution {dataset.resolution} is below teacher resolution {r_t}")
    if r_s > r_t:
        raise ValueError(f"student resolution {r_s} exceeds teacher resolution {r_t}")
    x_t = downsample(dataset.images, r_t)
    x_s = x_t.copy() if r_s == r_t else downsample(dataset.images, r_s)
    return PairedDataset(x_t, x_s, dataset.labels)


@dataclass
class OpenSetSplit:
    gallery: list
    known_probes: list
    unknown_probes: list
    gallery_ids: list = field(default_factory=list)


def split_open_set(manifest: DatasetManifest, num_gallery_ids: int, unknown_fraction: float,
                   seed: int = 0) -> OpenSetSplit:
    """Single-gallery-image open-set split; returns record indices per role.

    ``num_gallery_ids`` identities are enrolled with one image each (their
    other images become known probes); ``round(unknown_fraction * num_ids)``
    further identities contribute all their images as unknown probes.
    """
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_id.setdefault(r.identity_label, []).append(i)
    ids = sorted(by_id)
    n_unknown = int(round(unknown_fraction * len(ids)))
    if not 0.0 <= unknown_fraction <= 1.0:
        raise ValueError(f"unknown_fraction must lie in [0, 1], got {unknown_fraction}")
    if num_gallery_ids < 1 or num_gallery_ids + n_unknown > len(ids):
        raise ValueError(f"cannot enroll {num_gallery_ids} and hold out {n_unknown} identities "
                         f"from {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    enrolled = sorted(order[:num_gallery_ids])
    unknown = sorted(order[num_gallery_ids:num_gallery_ids + n_unknown])
    gallery, known = [], []
    for ident in enrolled:
        members = by_id[ident]
        if len(members) < 2:
            raise ValueError(f"identity {ident} has {len(members)} image(s); need >= 2 to enroll")
        pick = members[int(rng.integers(len(members)))]
        gallery.append(pick)
        known.extend(m for m in members if m != pick)
    unknown_probes = [m for ident in unknown for m in by_id[ident]]
    return OpenSetSplit(gallery, known, unknown_probes, enrolled)


# -- files ---------------------------------------------------------------------

def load_manifest(path) -> DatasetManifest:
    """Read a ``path,identity,media_id,detector_score`` CSV (row order kept)."""
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        next_media = -1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            img, ident, media, score = (c.strip() for c in row)
            try:
                ident_i = int(ident)
                media_i = int(media) if media else next_media
                score_f = float(score) if score else 1.0
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if not media:
                next_media -= 1  # singleton media get unique negative ids
            if not img:
                raise ManifestError(f"{path}:{lineno}: empty image path")
            records.append(Record(os.path.join(base, img), ident_i, media_i, score_f))
    return DatasetManifest(records)


def _pnm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte follows maxval


def load_image(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit, as (C, H, W) float64 in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported image magic {magic!r} (need P5 or P6)")
    (w, h, maxval), pos = _pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    raw = buf[2 + pos:2 + pos + w * h * c]
    if len(raw) != w * h * c:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_pnm(path, image: np.ndarray) -> None:
    """Write a (C, H, W) [0, 1] image as P5 (C=1) or P6 (C=3)."""
    image = np.asarray(image)
    c, h, w = image.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    px = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + px.tobytes())


def load_dataset(path) -> Dataset:
    """Load every image of a manifest; all images must share one square size."""
    manifest = load_manifest(path)
    imgs = [load_image(r.image_path) for r in manifest.records]
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ValueError(f"{path}: images differ in shape {sorted(shapes)}")
    if imgs and imgs[0].shape[1] != imgs[0].shape[2]:
        raise ValueError(f"{path}: images must be square, got {imgs[0].shape[1:]}")
    return Dataset(np.stack(imgs) if imgs else np.zeros((0, 1, 1, 1)), manifest)
