"""Dataset ingestion (binary PPM directories, packed ``MVPD1`` files) and synthetic data.

Packed format: the 5 magic bytes ``MVPD1`` followed by records of
``<u32 class> <u16 H> <u16 W>`` and ``3*H*W`` pixel bytes, interleaved
row-major ``H x W x RGB`` exactly like a PPM raster. All integers are
little-endian.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mvp.episodes import MIN_WAY, InsufficientDataError

PACKED_MAGIC = b"MVPD1"
PACKED_SUFFIX = ".mvpd"
_RECORD = struct.Struct("<IHH")


class DecodeError(ValueError):
    pass


@dataclass
class DatasetManifest:
    """Class-per-directory dataset, loaded eagerly.

    ``images`` is ``(n, 3, H, W)`` uint8, ``labels`` indexes ``class_names``
    (sorted), and ``files`` gives the source path of each sample (the packed
    file plus ``#index`` for packed datasets).
    """

    root: str
    class_names: list[str]
    images: np.ndarray
    labels: np.ndarray
    files: list[str] = field(default_factory=list)
    fmt: str = "ppm"

    @property
    def classes(self) -> list[tuple[str, list[str]]]:
        return [(name, [self.files[i] for i in np.flatnonzero(self.labels == k)])
                for k, name in enumerate(self.class_names)]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dataset_id(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


# -- PPM ---------------------------------------------------------------------


def read_ppm(path) -> np.ndarray:
    """Binary P6 file -> ``(3, H, W)`` uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise DecodeError(f"{path}: not a binary PPM (P6) file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DecodeError(f"{path}: malformed PPM header") from None
    if not 0 < maxval < 256 or width < 1 or height < 1:
        raise DecodeError(f"{path}: unsupported PPM geometry/maxval")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + 3 * width * height]
    if len(raster) != 3 * width * height:
        raise DecodeError(f"{path}: truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.transpose(1, 2, 0).tobytes())


# -- packed ------------------------------------------------------------------


def write_packed(path, images: np.ndarray, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    parts = [PACKED_MAGIC]
    for img, lab in zip(images, labels):
        _, h, w = img.shape
        parts.append(_RECORD.pack(int(lab), h, w))
        parts.append(img.transpose(1, 2, 0).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_packed(path) -> tuple[list[np.ndarray], np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(PACKED_MAGIC):
        raise DecodeError(f"{path}: bad magic, expected {PACKED_MAGIC.decode()}")
    pos, images, labels = len(PACKED_MAGIC), [], []
    while pos < len(data):
        if pos + _RECORD.size > len(data):
            raise DecodeError(f"{path}: truncated record header at byte {pos}")
        cls, h, w = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        n = 3 * h * w
        if pos + n > len(data):
            raise DecodeError(f"{path}: truncated pixel data at byte {pos}")
        images.append(np.frombuffer(data, np.uint8, n, pos).reshape(h, w, 3).transpose(2, 0, 1).copy())
        labels.append(cls)
        pos += n
    return images, np.asarray(labels, dtype=np.int64)


# -- loading -----------------------------------------------------------------


def _stack(images: list[np.ndarray], where) -> np.ndarray:
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DecodeError(f"{where}: images differ in size {sorted(shapes)}")
    return np.stack(images) if images else np.zeros((0, 3, 1, 1), np.uint8)


def load_dataset(root, min_classes: int = MIN_WAY) -> DatasetManifest:
    """Load a packed file, or a directory holding one sub-directory of ``.ppm`` files per class.

    A directory that holds exactly one ``.mvpd`` file and no class folders is
    read as that packed file. Classes are ordered by sorted name.
    """
    root = Path(root)
    if root.is_file():
        return _load_packed(root, min_classes)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such dataset")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    packed = sorted(root.glob("*" + PACKED_SUFFIX))
    if not class_dirs and len(packed) == 1:
        return _load_packed(packed[0], min_classes)

    names, images, labels, files = [], [], [], []
    for k, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        for f in sorted(cdir.glob("*.ppm")):
            images.append(read_ppm(f))
            labels.append(k)
            files.append(str(f))
    manifest = DatasetManifest(str(root), names, _stack(images, root),
                               np.asarray(labels, dtype=np.int64), files, "ppm")
    _check_classes(manifest, min_classes)
    return manifest


def _load_packed(path: Path, min_classes: int) -> DatasetManifest:
    images, raw = read_packed(path)
    uniq = np.unique(raw)  # stable numeric order
    labels = np.searchsorted(uniq, raw)
    manifest = DatasetManifest(
        str(path), [f"class_{int(c):04d}" for c in uniq], _stack(images, path),
        labels.astype(np.int64), [f"{path}#{i}" for i in range(len(raw))], "packed")
    _check_classes(manifest, min_classes)
    return manifest


def _check_classes(manifest: DatasetManifest, min_classes: int) -> None:
    if manifest.num_classes < min_classes:
        raise InsufficientDataError(
            f"{manifest.root}: insufficient classes ({manifest.num_classes} < {min_classes})")


def split_dataset(manifest: DatasetManifest, class_indices, tag: str) -> DatasetManifest:
    """Sub-dataset restricted to some classes (labels renumbered in the given order)."""
    class_indices = list(class_indices)
    mask = np.isin(manifest.labels, class_indices)
    remap = {c: i for i, c in enumerate(class_indices)}
    labels = np.array([remap[int(c)] for c in manifest.labels[mask]], dtype=np.int64)
    return DatasetManifest(f"{manifest.root}[{tag}]", [manifest.class_names[c] for c in class_indices],
                           manifest.images[mask], labels,
                           [f for f, keep in zip(manifest.files, mask) if keep], manifest.fmt)


# -- synthetic ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class pattern: a coloured blob at a class-specific spot plus a class-specific grating.

    Each sample jitters the blob by up to one pixel and the contrast by
    +-10%, then adds Gaussian pixel noise with standard deviation ``noise``
    (in units of full intensity). Class signatures come from
    ``SeedSequence([seed, class])``, so another seed gives unseen classes.
    """

    n_classes: int = 8
    samples_per_class: int = 40
    image_size: int = 16
    noise: float = 0.1
    seed: int = 0


def _signature(spec: SyntheticSpec, cls: int) -> dict:
    rng = np.random.default_rng([spec.seed, cls])
    s = spec.image_size
    return {
        "color": rng.uniform(0.2, 1.0, size=3),
        "center": rng.uniform(0.2 * s, 0.8 * s, size=2),
        "radius": rng.uniform(0.12 * s, 0.25 * s),
        "freq": rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2),
        "grating_color": rng.uniform(0.0, 1.0, size=3),
    }


def _render(spec: SyntheticSpec, sig: dict, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy, cx = sig["center"] + rng.uniform(-1.0, 1.0, size=2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig["radius"] ** 2))
    fy, fx = sig["freq"]
    grating = 0.5 + 0.5 * np.cos(2 * np.pi * (fy * yy + fx * xx) / s)
    contrast = rng.uniform(0.9, 1.1)
    img = contrast * (0.6 * sig["color"][:, None, None] * blob
                      + 0.4 * sig["grating_color"][:, None, None] * grating)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def synth_images(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for c in range(spec.n_classes):
        sig = _signature(spec, c)
        rng = np.random.default_rng([spec.seed, c, 1])
        for _ in range(spec.samples_per_class):
            images.append(_render(spec, sig, rng))
            labels.append(c)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def synth_generate(spec: SyntheticSpec, out) -> DatasetManifest:
    """Write a packed synthetic dataset to ``out`` (a file, or a directory to hold ``synthetic.mvpd``)."""
    out = Path(out)
    if out.is_dir() or out.suffix != PACKED_SUFFIX:
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"synthetic{PACKED_SUFFIX}"
    images, labels = synth_images(spec)
    write_packed(out, images, labels)
    return load_dataset(out, min_classes=min(MIN_WAY, spec.n_classes))


def nearest_mean_accuracy(manifest: DatasetManifest, train_fraction: float = 0.5) -> float:
    """Pixel-space nearest-class-mean accuracy: the first part of each class is training data."""
    x = manifest.images.reshape(len(manifest), -1).astype(np.float64)
    train, test = [], []
    for k in range(manifest.num_classes):
        idx = np.flatnonzero(manifest.labels == k)
        cut = max(1, int(len(idx) * train_fraction))
        train.append(idx[:cut])
        test.append(idx[cut:])
    means = np.stack([x[t].mean(axis=0) for t in train])
    test_idx = np.concatenate(test)
    d2 = ((x[test_idx, None, :] - means[None]) ** 2).sum(axis=-1)
    return float((d2.argmin(axis=1) == manifest.labels[test_idx]).mean())


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> ``[0, 1]`` floats."""
    dtype = np.dtype(dtype)
    return np.asarray(images, dtype=dtype) / dtype.type(255.0)
