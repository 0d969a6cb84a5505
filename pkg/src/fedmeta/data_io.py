"""Image ingestion (binary PGM), preprocessing, synthetic gratings, partitioning.

Manifest format: UTF-8 text, one record per line, tab separated::

    <path>\t<label>\t<modality>[\t<client id>]

Blank lines and lines starting with ``#`` are ignored.  Relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .episodes import LabeledDataset
from .rng import as_generator

VARIANCE_FLOOR = 1e-8


class PGMError(ValueError):
    pass


class PGMMagicError(PGMError):
    pass


class PGMHeaderError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


class ManifestError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise PGMMagicError(f"expected magic b'P5', got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None or not m.group(1).isdigit():
            raise PGMHeaderError("malformed width/height/maxval header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PGMHeaderError(f"invalid dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise PGMMaxvalError(f"unsupported maxval {maxval}; only 8-bit samples are read")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMHeaderError("missing whitespace after maxval")
    pos += 1
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PGMTruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 image")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def resize_bilinear(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to ``side x side`` with corner-aligned sampling.

    Output pixel i samples source coordinate i * (n - 1) / (side - 1); a
    one-pixel output samples the source centre.  Returns float64.
    """
    if side < 1:
        raise ValueError("target side must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError("expected a non-empty 2-D image")

    def coords(n):
        if side == 1:
            return np.array([(n - 1) / 2.0])
        return np.arange(side) * ((n - 1) / (side - 1))

    def weights(c, n):
        lo = np.clip(np.floor(c).astype(int), 0, max(n - 2, 0))
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, c - lo

    r0, r1, fr = weights(coords(img.shape[0]), img.shape[0])
    c0, c1, fc = weights(coords(img.shape[1]), img.shape[1])
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize(image: np.ndarray) -> np.ndarray:
    """Scale to [0, 1], standardize per image, flatten row-major."""
    x = np.asarray(image, dtype=np.float64).ravel() / 255.0
    centered = x - x.mean()
    return centered / math.sqrt(max(float(centered @ centered) / x.size, VARIANCE_FLOOR))


def normalize_dataset(images: np.ndarray) -> np.ndarray:
    """Dataset-level alternative: one mean/std over all pixels of all images."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1) / 255.0
    return (x - x.mean()) / math.sqrt(max(float(x.var()), VARIANCE_FLOOR))


# -- manifests -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    modality: str
    client: int | None = None


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    entries, seen = [], set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        cols = raw.split("\t")
        if len(cols) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
        file, label, modality = (c.strip() for c in cols[:3])
        if not label:
            raise ManifestError(f"{path}:{lineno}: empty label")
        client = None
        if len(cols) == 4 and cols[3].strip():
            try:
                client = int(cols[3])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: client id must be an integer") from None
        resolved = str(base / file) if not os.path.isabs(file) else file
        if resolved in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {file}")
        seen.add(resolved)
        entries.append(ManifestEntry(resolved, label, modality, client))
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    base = Path(path).parent.resolve()
    lines = ["# path\tlabel\tmodality\tclient"]
    for e in entries:
        p = Path(e.path)
        rel = os.path.relpath(p.resolve(), base) if p.is_absolute() else e.path
        cols = [rel, e.label, e.modality] + ([str(e.client)] if e.client is not None else [])
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest_dataset(path, resolution: int, normalization: str = "per-image") -> LabeledDataset:
    """Read every image in a manifest into a dataset.

    Labels are indexed in sorted order of their names.  Tags carry
    ``modality:<m>``, ``class:<label>`` and, when given, ``client:<id>``.
    """
    entries = read_manifest(path)
    if not entries:
        raise ManifestError(f"{path}: no entries")
    names = sorted({e.label for e in entries})
    index = {n: i for i, n in enumerate(names)}
    images = np.stack([resize_bilinear(load_pgm(e.path), resolution) for e in entries])
    if normalization == "per-image":
        rows = np.stack([normalize(img) for img in images])
    elif normalization == "dataset":
        rows = normalize_dataset(images)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    tags = []
    for e in entries:
        t = [f"modality:{e.modality}", f"class:{e.label}"]
        if e.client is not None:
            t.append(f"client:{e.client}")
        tags.append(tuple(t))
    return LabeledDataset(rows, [index[e.label] for e in entries], tuple(tags),
                          label_names=dict(enumerate(names)))


# -- synthetic gratings ----------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Sinusoidal gratings, one (frequency, orientation, phase) per class.

    ``noise`` and ``phase_jitter`` are in units of the grating amplitude and
    radians respectively.  Each modality rotates and rescales all gratings
    so the same classes look different across modalities.
    """

    num_classes: int = 2
    examples_per_class: int = 100
    resolution: int = 16
    amplitude: float = 60.0
    noise: float = 1.0
    phase_jitter: float = 0.0
    modalities: tuple[str, ...] = ("synthetic",)
    class_names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 4:
            raise ValueError("resolution must be at least 4")
        if self.num_classes < 1 or self.examples_per_class < 1:
            raise ValueError("num_classes and examples_per_class must be positive")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have one name per class")
        if not self.modalities:
            raise ValueError("need at least one modality")

    def names(self) -> tuple[str, ...]:
        return self.class_names or tuple(f"class{c}" for c in range(self.num_classes))


def grating_params(c: int, modality: int, num_classes: int) -> tuple[float, float, float]:
    """(cycles per image, orientation, phase) of class ``c``."""
    golden = (math.sqrt(5) - 1) / 2
    orientation = math.pi * ((c * golden) % 1.0) + modality * math.pi / 5
    cycles = (1.5 + (c % 3)) * (1.0 + 0.35 * modality)
    phase = 2 * math.pi * ((c * 0.37) % 1.0)
    return cycles, orientation, phase


def grating_template(c: int, modality: int, spec: SyntheticSpec, phase_offset: float = 0.0) -> np.ndarray:
    cycles, orientation, phase = grating_params(c, modality, spec.num_classes)
    r = spec.resolution
    yy, xx = np.mgrid[0:r, 0:r] / r
    proj = xx * math.cos(orientation) + yy * math.sin(orientation)
    return spec.amplitude * np.sin(2 * math.pi * cycles * proj + phase + phase_offset)


def synthetic_images(spec: SyntheticSpec):
    """Yield (uint8 image, class index, modality name) in a fixed order."""
    rng = as_generator(spec.seed)
    for m, modality in enumerate(spec.modalities):
        for c in range(spec.num_classes):
            for _ in range(spec.examples_per_class):
                jitter = rng.uniform(-spec.phase_jitter, spec.phase_jitter) if spec.phase_jitter else 0.0
                img = 127.5 + grating_template(c, m, spec, jitter)
                img = img + spec.noise * spec.amplitude * rng.standard_normal(img.shape)
                yield np.clip(np.rint(img), 0, 255).astype(np.uint8), c, modality


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    rows, labels, tags = [], [], []
    names = spec.names()
    for img, c, modality in synthetic_images(spec):
        rows.append(normalize(img))
        labels.append(c)
        tags.append((f"modality:{modality}", f"class:{names[c]}"))
    return LabeledDataset(np.stack(rows), labels, tuple(tags), label_names=dict(enumerate(names)))


def export_synthetic(spec: SyntheticSpec, manifest_path) -> list[ManifestEntry]:
    """Write the synthetic images as PGM files plus a manifest next to them."""
    manifest_path = Path(manifest_path)
    img_dir = manifest_path.parent / (manifest_path.stem + "_images")
    img_dir.mkdir(parents=True, exist_ok=True)
    names = spec.names()
    entries = []
    for i, (img, c, modality) in enumerate(synthetic_images(spec)):
        file = img_dir / f"{i:06d}.pgm"
        write_pgm(file, img)
        entries.append(ManifestEntry(str(file), names[c], modality))
    write_manifest(manifest_path, entries)
    return entries


# -- client partitioning ---------------------------------------------------


def largest_remainder(total: int, ratios) -> list[int]:
    """Integer shares of ``total`` proportional to ``ratios`` (Hamilton method).

    Ties in the remainder go to the lower index.
    """
    r = [Fraction(float(x)) for x in ratios]
    if not r or min(r) <= 0:
        raise ValueError("ratios must be positive")
    # exact rationals: float remainders can break genuine ties by an ulp
    s = sum(r)
    exact = [total * x / s for x in r]
    shares = [math.floor(e) for e in exact]
    order = sorted(range(len(r)), key=lambda i: (-(exact[i] - shares[i]), i))
    for i in order[: total - sum(shares)]:
        shares[i] += 1
    return shares


def partition_clients(dataset: LabeledDataset, ratios, seed) -> list[LabeledDataset]:
    """Split each class across clients by ``ratios``; disjoint and exhaustive."""
    rng = as_generator(seed)
    parts: list[list[int]] = [[] for _ in ratios]
    for c in dataset.classes():
        idx = rng.permutation(dataset.class_indices(c))
        start = 0
        for k, n in enumerate(largest_remainder(len(idx), ratios)):
            parts[k].extend(idx[start:start + n])
            start += n
    for k, p in enumerate(parts):
        if not p:
            raise ValueError(f"client {k} receives no examples")
    return [dataset.subset(np.sort(p)) for p in parts]
