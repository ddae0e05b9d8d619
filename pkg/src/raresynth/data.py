"""Labeled image datasets: procedural toy domains, directory ingestion, and
ratio-controlled training-set assembly.

Images are ``float32`` arrays of shape ``(H, W)`` in data space ``[0, 1]``.
Diffusion models work in ``[-1, 1]``; see :func:`raresynth.diffusion.to_model_space`.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, InvalidArgument
from .rng import derive_seed, numpy_rng

POSITIVE = "positive"
NEGATIVE = "negative"
REAL = "real"
SYNTHETIC = "synthetic"
DOMAINS = ("tilecrack", "lungspot")

MANIFEST_NAME = "manifest.csv"


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: np.ndarray
    label: str
    origin: str
    id: str

    def __post_init__(self):
        if self.label not in (POSITIVE, NEGATIVE):
            raise InvalidArgument(f"unknown label {self.label!r}")
        if self.origin not in (REAL, SYNTHETIC):
            raise InvalidArgument(f"unknown origin {self.origin!r}")
        if self.origin == SYNTHETIC and self.label != POSITIVE:
            raise InvalidArgument("synthetic samples must be labeled positive")

    @property
    def y(self) -> int:
        return 1 if self.label == POSITIVE else 0


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[LabeledSample, ...]
    domain: str = ""
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("sample ids must be unique within a dataset")
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise InvalidArgument(f"images have inconsistent shapes: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        """Stacked ``(N, H, W)`` float32 array."""
        if not self.samples:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([s.image for s in self.samples]).astype(np.float32, copy=False)

    def labels(self) -> np.ndarray:
        return np.array([s.y for s in self.samples], dtype=np.int64)

    def count(self, label: str | None = None, origin: str | None = None) -> int:
        return sum(
            1
            for s in self.samples
            if (label is None or s.label == label) and (origin is None or s.origin == origin)
        )

    def subset(self, indices: Iterable[int], note: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.samples[i] for i in indices),
            domain=self.domain,
            note=self.note if note is None else note,
        )

    def filter(self, label: str | None = None, origin: str | None = None) -> "Dataset":
        keep = [
            s
            for s in self.samples
            if (label is None or s.label == label) and (origin is None or s.origin == origin)
        ]
        return Dataset(tuple(keep), domain=self.domain, note=self.note)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples, domain=self.domain or other.domain, note=self.note)


# ---------------------------------------------------------------------------
# Procedural domains


@dataclass
class DomainParams:
    """Rendering parameters for both toy domains.

    ``tilecrack`` imitates a surface-defect inspection task: a mottled tile
    texture with pits, where positives carry a thin dark crack polyline.
    ``lungspot`` imitates a radiograph finding: two dark lung fields crossed by
    rib bands, where positives carry a faint bright blob inside a lung field.
    """

    image_size: int = 32
    noise_scale: float = 0.12
    smoothing: float = 1.0
    pit_count: int = 4
    pit_depth: float = 0.22
    scratch_count: int = 4
    scratch_length: tuple[float, float] = (6.0, 12.0)
    crack_segments: tuple[int, int] = (2, 3)
    crack_width: float = 0.8
    crack_depth: tuple[float, float] = (0.3, 0.45)
    crack_length: tuple[float, float] = (22.0, 28.0)
    blob_radius: tuple[float, float] = (2.5, 4.0)
    blob_intensity: tuple[float, float] = (0.5, 0.65)
    label_noise: float = 0.0

    def __post_init__(self):
        self.crack_segments = tuple(int(v) for v in self.crack_segments)
        for name in ("scratch_length", "crack_depth", "crack_length", "blob_radius", "blob_intensity"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.image_size < 8:
            raise InvalidArgument("image_size must be at least 8")
        if self.label_noise != 0.0:
            raise InvalidArgument("label noise is not supported; labels are exact")


def _texture(rng: np.random.Generator, p: DomainParams, base: float) -> np.ndarray:
    n = p.image_size
    noise = rng.normal(0.0, 1.0, size=(n, n))
    tex = ndimage.gaussian_filter(noise, sigma=p.smoothing, mode="wrap")
    tex = tex / (tex.std() + 1e-12) * p.noise_scale
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    return base + tex + gx * (xx - 0.5) + gy * (yy - 0.5)


def _segment_distance(yy, xx, p0, p1) -> np.ndarray:
    d = p1 - p0
    denom = float(d @ d) or 1e-12
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


_CRACK_ATTEMPTS = 16
_MIN_CRACK_PIXELS = 30


def _crack_profile(rng, p: DomainParams, yy, xx) -> np.ndarray:
    n = p.image_size
    length = rng.uniform(*p.crack_length)
    k = int(rng.integers(p.crack_segments[0], p.crack_segments[1] + 1))
    pt = n / 2 + rng.uniform(-n / 8, n / 8, size=2)
    heading = rng.uniform(0, 2 * math.pi)
    dist = np.full((n, n), np.inf)
    for _ in range(k):
        heading += rng.normal(0.0, 0.35)
        nxt = pt + (length / k) * np.array([math.sin(heading), math.cos(heading)])
        # bounce off the border rather than truncating the crack
        nxt = np.where(nxt < 1.0, 2.0 - nxt, nxt)
        nxt = np.where(nxt > n - 2.0, 2.0 * (n - 2.0) - nxt, nxt)
        dist = np.minimum(dist, _segment_distance(yy, xx, pt, nxt))
        pt = nxt
    # full depth within crack_width of the polyline, 1 px linear falloff
    return np.clip(p.crack_width + 1.0 - dist, 0.0, 1.0)


def _render_tilecrack(rng, p: DomainParams, positive: bool) -> tuple[np.ndarray, np.ndarray]:
    n = p.image_size
    img = _texture(rng, p, base=rng.uniform(0.5, 0.62))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    # pits: small dark spots present on every tile, they make the task non-trivial
    for _ in range(p.pit_count):
        cy, cx = rng.uniform(0, n, size=2)
        r = rng.uniform(0.6, 1.4)
        img -= p.pit_depth * rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    # straight scratches: dark like a crack but shorter and without bends
    for _ in range(p.scratch_count):
        p0 = rng.uniform(2.0, n - 3.0, size=2)
        ang = rng.uniform(0, 2 * math.pi)
        p1 = np.clip(p0 + rng.uniform(*p.scratch_length) * np.array([math.sin(ang), math.cos(ang)]), 1.0, n - 2.0)
        dist = _segment_distance(yy, xx, p0, p1)
        img -= rng.uniform(0.2, 0.4) * np.clip(p.crack_width + 0.5 - dist, 0.0, 1.0)
    mask = np.zeros((n, n), dtype=bool)
    # the crack uses its own stream so the texture matches the same-seed negative
    crack_rng = np.random.default_rng(rng.integers(0, 2**63))
    if positive:
        base = img
        # redraw the crack if clipping against pits/scratches left it too faint
        for _ in range(_CRACK_ATTEMPTS):
            profile = _crack_profile(crack_rng, p, yy, xx)
            depth = crack_rng.uniform(*p.crack_depth)
            img = base - depth * profile
            visible = np.abs(np.clip(img, 0, 1) - np.clip(base, 0, 1)) > 0.2
            if visible.sum() >= _MIN_CRACK_PIXELS:
                break
        mask = profile > 0.5
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def _render_lungspot(rng, p: DomainParams, positive: bool) -> tuple[np.ndarray, np.ndarray]:
    n = p.image_size
    img = _texture(rng, p, base=rng.uniform(0.6, 0.7))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / (n - 1)
    fields = []
    for cx in (0.3, 0.7):
        cx = cx + rng.uniform(-0.03, 0.03)
        cy = 0.5 + rng.uniform(-0.04, 0.04)
        rx, ry = rng.uniform(0.13, 0.17), rng.uniform(0.3, 0.36)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        img -= 0.18 * np.clip(1.0 - inside, 0.0, 1.0) ** 0.5
        fields.append((cx, cy, rx, ry))
    phase = rng.uniform(0, 2 * math.pi)
    img += 0.05 * np.sin(2 * math.pi * 5.0 * yy + phase)
    mask = np.zeros((n, n), dtype=bool)
    blob_rng = np.random.default_rng(rng.integers(0, 2**63))
    if positive:
        cx, cy, rx, ry = fields[int(blob_rng.integers(0, 2))]
        ang = blob_rng.uniform(0, 2 * math.pi)
        rad = blob_rng.uniform(0.0, 0.4)
        bx, by = cx + rad * rx * math.cos(ang), cy + rad * ry * math.sin(ang)
        r = blob_rng.uniform(*p.blob_radius) / (n - 1)
        amp = blob_rng.uniform(*p.blob_intensity)
        d2 = (xx - bx) ** 2 + (yy - by) ** 2
        img += amp * np.exp(-d2 / (2 * r * r))
        mask = d2 <= (0.75 * r) ** 2
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


_RENDERERS = {"tilecrack": _render_tilecrack, "lungspot": _render_lungspot}


def render_domain(domain: str, params: DomainParams, label: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one image and return ``(image, structure_mask)``.

    The mask marks the rare structure (crack core or blob disc); it is empty
    for negatives.
    """
    if domain not in _RENDERERS:
        raise InvalidArgument(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if label not in (POSITIVE, NEGATIVE):
        raise InvalidArgument(f"unknown label {label!r}")
    return _RENDERERS[domain](numpy_rng(seed), params, label == POSITIVE)


def gen_domain(domain: str, params: DomainParams, label: str, seed: int, id: str | None = None) -> LabeledSample:
    image, _ = render_domain(domain, params, label, seed)
    return LabeledSample(image, label, REAL, id or f"{domain}-{label}-s{seed}")


def _gen_many(domain, params, label, n, key, tag) -> list[LabeledSample]:
    return [
        gen_domain(domain, params, label, derive_seed(*key, tag, label, i), id=f"{domain}-{tag}-{label[:3]}-{i:05d}")
        for i in range(n)
    ]


def build_real_corpus(
    domain: str,
    params: DomainParams,
    n_neg: int,
    n_pos: int,
    n_pos_lora: int,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Real classification corpus plus a disjoint set of rare positives for adapter fitting."""
    if min(n_neg, n_pos, n_pos_lora) < 0:
        raise InvalidArgument("sample counts must be non-negative")
    real = _gen_many(domain, params, NEGATIVE, n_neg, (seed,), "real") + _gen_many(
        domain, params, POSITIVE, n_pos, (seed,), "real"
    )
    lora = _gen_many(domain, params, POSITIVE, n_pos_lora, (seed,), "lora")
    return (
        Dataset(tuple(real), domain=domain, note="real corpus"),
        Dataset(tuple(lora), domain=domain, note="adapter set"),
    )


def build_pretrain_corpus(domain: str, params: DomainParams, n: int, pos_fraction: float, seed: int) -> Dataset:
    """Generic corpus the base diffusion model is trained on (disjoint seed stream)."""
    n_pos = int(math.floor(n * pos_fraction))
    if n_pos < 1 or n - n_pos < 1:
        raise InvalidArgument("pretraining corpus needs both classes")
    samples = _gen_many(domain, params, NEGATIVE, n - n_pos, (seed,), "pre") + _gen_many(
        domain, params, POSITIVE, n_pos, (seed,), "pre"
    )
    return Dataset(tuple(samples), domain=domain, note="pretraining corpus")


def make_imbalanced_split(
    domain: str,
    params: DomainParams,
    n_neg: int = 1000,
    n_pos_train: int = 50,
    n_pos_lora: int = 50,
    test_fraction: float = 0.2,
    seed: int = 0,
    n_pos_available: int | None = None,
) -> tuple[Dataset, Dataset, Dataset]:
    """Return ``(train, lora_set, test)``.

    ``test`` takes ``floor(test_fraction * n)`` of each class from the real
    corpus; the adapter set is rendered from its own seed stream, so it is
    disjoint from both other splits. ``n_pos_available`` caps how many real
    positives may be rendered in total (for emulating a fixed real archive).
    """
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgument(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_pos_available is not None and n_pos_train + n_pos_lora > n_pos_available:
        raise InvalidArgument(
            f"requested {n_pos_train + n_pos_lora} positives but only {n_pos_available} are available"
        )
    real, lora = build_real_corpus(domain, params, n_neg, n_pos_train, n_pos_lora, seed)
    rng = numpy_rng(derive_seed(seed, "holdout"))
    test_idx: list[int] = []
    for label, n in ((NEGATIVE, n_neg), (POSITIVE, n_pos_train)):
        idx = np.array([i for i, s in enumerate(real) if s.label == label])
        rng.shuffle(idx)
        test_idx.extend(int(i) for i in idx[: int(math.floor(test_fraction * n))])
    test_set = set(test_idx)
    train = real.subset([i for i in range(len(real)) if i not in test_set], note="train")
    test = real.subset(sorted(test_set), note="test")
    return train, lora, test


# ---------------------------------------------------------------------------
# Directory ingestion / export


def _decode_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I;16N"):
            arr = np.asarray(im, dtype=np.uint16).astype(np.float64) / 65535.0
        elif im.mode == "I":
            arr = np.asarray(im, dtype=np.int64).astype(np.float64) / 65535.0
        elif im.mode == "F":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    im = Image.fromarray(arr.astype(np.float32), mode="F")
    out = im.resize((shape[1], shape[0]), resample=Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def load_image_dir(
    path: str | os.PathLike,
    labels_manifest: str | os.PathLike | None = None,
    image_size: int = 32,
    origin: str = REAL,
    domain: str = "",
) -> Dataset:
    """Load a ``path,label`` manifest (header required) into a dataset.

    Paths in the manifest are resolved relative to ``path``. Labels are 0/1.
    Images are converted to grayscale ``[0, 1]`` (16-bit inputs are divided by
    65535) and bilinearly resized to ``image_size`` square.
    """
    root = Path(path)
    manifest = Path(labels_manifest) if labels_manifest is not None else root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise FormatError(f"{manifest}: expected header 'path,label'")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise FormatError(f"{manifest}: row {row_no}: expected 2 fields")
            rel, raw_label = row[0].strip(), row[1].strip()
            if raw_label not in ("0", "1"):
                raise FormatError(f"{manifest}: row {row_no}: unparsable label {raw_label!r}")
            file = root / rel
            if not file.is_file():
                raise FileNotFoundError(f"image not found: {file}")
            img = _resize(_decode_gray(file), (image_size, image_size))
            label = POSITIVE if raw_label == "1" else NEGATIVE
            samples.append(LabeledSample(img, label, origin, rel))
    return Dataset(tuple(samples), domain=domain, note=str(root))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(ds: Dataset) -> Dataset:
    """Round images to the 8-bit grid used by the on-disk PNG format."""
    return Dataset(
        tuple(dataclasses.replace(s, image=(to_uint8(s.image).astype(np.float32) / 255.0)) for s in ds),
        domain=ds.domain,
        note=ds.note,
    )


def write_image_dir(ds: Dataset, path: str | os.PathLike) -> Path:
    """Write 8-bit PNGs plus ``manifest.csv``; the directory appears atomically."""
    from .io import atomic_dir

    with atomic_dir(path) as tmp:
        rows = []
        for s in ds:
            name = f"{s.id}.png"
            Image.fromarray(to_uint8(s.image), mode="L").save(tmp / name, optimize=False)
            rows.append((name, s.y))
        with open(tmp / MANIFEST_NAME, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label"])
            w.writerows(rows)
    return Path(path)


# ---------------------------------------------------------------------------
# Training-set assembly


def assemble_training_set(
    real_train: Dataset,
    pool: Dataset,
    ratio: float,
    mode: str = "mixed",
    seed: int = 0,
) -> Dataset:
    """Add ``floor(ratio * P)`` synthetic positives, P = real positives in ``real_train``.

    The pool is permuted once with ``seed`` and a prefix is taken, so for a
    fixed seed the selection at a smaller ratio is a prefix of the selection
    at any larger ratio. ``synth_only`` drops the real positives.
    """
    if ratio < 0 or not math.isfinite(ratio):
        raise InvalidArgument(f"ratio must be a finite non-negative number, got {ratio}")
    if mode not in ("mixed", "synth_only"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if any(s.origin != SYNTHETIC or s.label != POSITIVE for s in pool):
        raise InvalidArgument("pool must contain only synthetic positives")
    n_real_pos = real_train.count(label=POSITIVE, origin=REAL)
    need = int(math.floor(ratio * n_real_pos))
    if need > len(pool):
        raise InvalidArgument(f"pool too small: ratio {ratio:g} needs {need} synthetic samples, {len(pool)} available")
    if mode == "mixed" and need == 0:
        return real_train
    order = numpy_rng(seed).permutation(len(pool))
    chosen = tuple(pool[int(i)] for i in order[:need])
    base = real_train.samples
    if mode == "synth_only":
        base = tuple(s for s in base if not (s.label == POSITIVE and s.origin == REAL))
    return Dataset(base + chosen, domain=real_train.domain, note=f"{mode} x{ratio:g}")


__all__ = [
    "POSITIVE",
    "NEGATIVE",
    "REAL",
    "SYNTHETIC",
    "DOMAINS",
    "LabeledSample",
    "Dataset",
    "DomainParams",
    "render_domain",
    "gen_domain",
    "build_real_corpus",
    "build_pretrain_corpus",
    "make_imbalanced_split",
    "load_image_dir",
    "write_image_dir",
    "assemble_training_set",
    "quantize",
]
