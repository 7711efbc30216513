"""Frame ingestion, normalization, augmentation and study-level splitting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

IMAGE_SHAPE = (60, 80)
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- records

@dataclass
class SampleRecord:
    study_id: str
    view_label: str
    clip_id: str | None = None
    frame_index: int = 0
    split: str | None = None
    path: str | None = None
    # (top, left, height, width) of the class-defining structures, phantoms only
    signal_box: tuple[int, int, int, int] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["signal_box"] = list(self.signal_box) if self.signal_box is not None else None
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        box = d.get("signal_box")
        return cls(study_id=str(d["study_id"]), view_label=d["view_label"], clip_id=d.get("clip_id"),
                   frame_index=int(d.get("frame_index", 0)), split=d.get("split"), path=d.get("path"),
                   signal_box=tuple(box) if box is not None else None)


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    classes: tuple[str, ...]
    training_mean: np.ndarray | None = None

    def labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[r.view_label] for r in self.records], dtype=np.int64)

    def split_of_study(self) -> dict[str, str | None]:
        out: dict[str, str | None] = {}
        for r in self.records:
            if out.setdefault(r.study_id, r.split) != r.split:
                raise DataError(f"study {r.study_id} spans splits {out[r.study_id]} and {r.split}")
        return out

    def counts(self) -> dict[str, int]:
        c = {s: 0 for s in SPLITS}
        for r in self.records:
            if r.split in c:
                c[r.split] += 1
        return c

    def check_clips(self) -> None:
        """Every clip belongs to exactly one study and one split."""
        seen: dict[str, tuple[str, str | None]] = {}
        for r in self.records:
            if r.clip_id is None:
                continue
            key = (r.study_id, r.split)
            if seen.setdefault(r.clip_id, key) != key:
                raise DataError(f"clip {r.clip_id} maps to both {seen[r.clip_id]} and {key}")

    def save(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"classes": list(self.classes)}) + "\n")
            for r in self.records:
                fh.write(r.to_json() + "\n")
        if self.training_mean is not None:
            write_float_image(path.with_name(path.stem + "_mean.f32"), self.training_mean)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if "classes" not in head:
            raise DataError(f"{path}: first line must carry the class list")
        records = [SampleRecord.from_json(line) for line in lines[1:] if line.strip()]
        mean_path = path.with_name(path.stem + "_mean.f32")
        mean = read_float_image(mean_path) if mean_path.exists() else None
        return cls(records, tuple(head["classes"]), mean)


@dataclass
class Dataset:
    """Images (N, 60, 80) float32 plus their manifest."""

    images: np.ndarray
    manifest: DatasetManifest

    def __post_init__(self):
        if len(self.images) != len(self.manifest.records):
            raise DataError(f"{len(self.images)} images but {len(self.manifest.records)} records")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def records(self) -> list[SampleRecord]:
        return self.manifest.records

    @property
    def classes(self) -> tuple[str, ...]:
        return self.manifest.classes

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels()

    @property
    def training_mean(self) -> np.ndarray | None:
        return self.manifest.training_mean

    def take(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        recs = [self.records[i] for i in idx]
        man = DatasetManifest(recs, self.classes, self.manifest.training_mean)
        return Dataset(self.images[idx], man)

    def split(self, name: str) -> "Dataset":
        return self.take([i for i, r in enumerate(self.records) if r.split == name])

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        recs = [replace(r, view_label=self.classes[int(k)]) for r, k in zip(self.records, labels)]
        return Dataset(self.images, DatasetManifest(recs, self.classes, self.manifest.training_mean))

    def raw_images(self) -> np.ndarray:
        """Images in the [0, 1] domain (undoing mean subtraction if applied)."""
        if self.training_mean is None:
            return self.images
        return self.images + self.training_mean


# ---------------------------------------------------------------- raster io

def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM (P5)."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos) if len(blob) - pos >= w * h else None
    if data is None:
        raise DataError(f"{path}: PGM pixel data truncated")
    return data.reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_raw(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Raw 8-bit grayscale; dimensions come from ``shape`` or a ``<path>.dims``
    sidecar holding "height width"."""
    path = Path(path)
    if shape is None:
        dims = Path(str(path) + ".dims")
        if not dims.exists():
            raise DataError(f"{path}: no dimensions given and no {dims.name} sidecar")
        shape = tuple(int(v) for v in dims.read_text().split()[:2])
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != shape[0] * shape[1]:
        raise DataError(f"{path}: {data.size} bytes does not match {shape[0]}x{shape[1]}")
    return data.reshape(shape)


def read_raster(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_raw(path)


def write_float_image(path, image: np.ndarray) -> None:
    """Little-endian float32, row-major, with a ``.dims`` sidecar."""
    image = np.asarray(image, dtype="<f4")
    Path(path).write_bytes(image.tobytes())
    Path(str(path) + ".dims").write_text(f"{image.shape[0]} {image.shape[1]}\n")


def read_float_image(path) -> np.ndarray:
    h, w = (int(v) for v in Path(str(path) + ".dims").read_text().split()[:2])
    data = np.fromfile(path, dtype="<f4")
    if data.size != h * w:
        raise DataError(f"{path}: {data.size} floats does not match {h}x{w}")
    return data.reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------- ingestion

def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling matrix: exact area averaging when shrinking,
    bilinear (half-pixel centres, clamped edges) when enlarging."""
    w = np.zeros((n_out, n_in))
    if n_in >= n_out:
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
                w[i, j] = min(hi, j + 1) - max(lo, j)
            w[i] /= scale
    else:
        for i in range(n_out):
            src = (i + 0.5) * n_in / n_out - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            j0 = int(math.floor(src))
            j1 = min(j0 + 1, n_in - 1)
            t = src - j0
            w[i, j0] += 1.0 - t
            w[i, j1] += t
    return w


def resample(image: np.ndarray, shape: tuple[int, int] = IMAGE_SHAPE) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return _axis_weights(img.shape[0], shape[0]) @ img @ _axis_weights(img.shape[1], shape[1]).T


def ingest_frame(raster: np.ndarray, mask: Iterable[tuple[int, int, int, int]] = (),
                 shape: tuple[int, int] = IMAGE_SHAPE) -> np.ndarray:
    """Anonymize, downsample and scale one 8-bit frame to a 60x80 image in [0, 1].

    ``mask`` rectangles are (top, left, height, width) and are zeroed before
    resampling.
    """
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise DataError(f"expected a non-empty 2-d grayscale raster, got shape {raster.shape}")
    frame = raster.astype(np.float64)
    h, w = frame.shape
    for rect in mask:
        top, left, rh, rw = (int(v) for v in rect)
        if top < 0 or left < 0 or rh < 0 or rw < 0 or top + rh > h or left + rw > w:
            raise DataError(f"mask rectangle {tuple(rect)} outside {h}x{w} raster")
        frame[top:top + rh, left:left + rw] = 0.0
    out = resample(frame, shape) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- normalization

def normalize(dataset: Dataset) -> Dataset:
    """Subtract the per-pixel training-split mean from every split."""
    splits = [r.split for r in dataset.records]
    if any(s is None for s in splits):
        raise DataError("normalize needs split assignments; run split_by_study first")
    raw = dataset.raw_images()
    train = np.array([s == "train" for s in splits])
    if not train.any():
        raise DataError("training split is empty")
    mean = raw[train].mean(axis=0, dtype=np.float64).astype(np.float32)
    man = DatasetManifest(list(dataset.records), dataset.classes, mean)
    return Dataset((raw - mean).astype(np.float32), man)



def renormalize(dataset: Dataset, mean: np.ndarray | None) -> Dataset:
    """Re-express ``dataset`` relative to another training mean (None: raw [0, 1]).

    Used to feed new studies to a model trained elsewhere."""
    raw = dataset.raw_images()
    man = DatasetManifest(list(dataset.records), dataset.classes, mean)
    return Dataset((raw - mean).astype(np.float32) if mean is not None else raw, man)

# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 10.0
    max_shift_fraction: float = 0.1
    max_zoom: float = 0.08
    max_shear: float = 0.03
    allow_flips: bool = True

    def __post_init__(self):
        for name in ("max_rotation_deg", "max_shift_fraction", "max_zoom", "max_shear"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_zoom >= 1:
            raise ValueError("max_zoom must be below 1")

    @classmethod
    def none(cls) -> "AugmentParams":
        return cls(0.0, 0.0, 0.0, 0.0, False)


@dataclass(frozen=True)
class AffineDraw:
    rotation_deg: float = 0.0
    shift_y: float = 0.0       # fraction of height
    shift_x: float = 0.0       # fraction of width
    zoom_y: float = 1.0
    zoom_x: float = 1.0
    shear: float = 0.0
    flip_h: bool = False
    flip_v: bool = False


def sample_affine(params: AugmentParams, rng: np.random.Generator) -> AffineDraw:
    u = rng.uniform(-1.0, 1.0, size=6)
    flips = rng.random(2) < 0.5
    return AffineDraw(
        rotation_deg=params.max_rotation_deg * u[0],
        shift_y=params.max_shift_fraction * u[1],
        shift_x=params.max_shift_fraction * u[2],
        zoom_y=1.0 + params.max_zoom * u[3],
        zoom_x=1.0 + params.max_zoom * u[4],
        shear=params.max_shear * u[5],
        flip_h=bool(params.allow_flips and flips[0]),
        flip_v=bool(params.allow_flips and flips[1]),
    )


def affine_matrix(draw: AffineDraw, shape: tuple[int, int]) -> np.ndarray:
    """3x3 homogeneous map from input (row, col) to output (row, col), about
    the image centre."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(draw.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    shear = np.array([[1, 0, 0], [draw.shear, 1, 0], [0, 0, 1.0]])
    zoom = np.diag([draw.zoom_y, draw.zoom_x, 1.0])
    flip = np.diag([-1.0 if draw.flip_v else 1.0, -1.0 if draw.flip_h else 1.0, 1.0])
    centre = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1.0]])
    back = np.array([[1, 0, cy + draw.shift_y * h], [0, 1, cx + draw.shift_x * w], [0, 0, 1.0]])
    return back @ rot @ shear @ zoom @ flip @ centre


def warp(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Bilinear resampling under an input->output affine map, zero fill."""
    inv = np.linalg.inv(forward)
    out = ndimage.affine_transform(np.asarray(image, dtype=np.float64), inv[:2, :2], offset=inv[:2, 2],
                                   order=1, mode="constant", cval=0.0, prefilter=False)
    return out.astype(np.float32)


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, shift, zoom, shear and flips applied as one warp."""
    draw = sample_affine(params, rng)
    return warp(image, affine_matrix(draw, np.shape(image)))


# ---------------------------------------------------------------- splitting

def split_by_study(manifest: DatasetManifest, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> DatasetManifest:
    """Assign whole studies to train/val/test so image counts track ``ratios``.

    Studies are visited largest first (random order among equal sizes) and each
    goes to the split furthest below its target.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    ratios = ratios / ratios.sum()
    sizes: dict[str, int] = {}
    for r in manifest.records:
        sizes[r.study_id] = sizes.get(r.study_id, 0) + 1
    studies = sorted(sizes)
    if len(studies) < 3:
        raise DataError(f"need at least 3 studies to split, got {len(studies)}")

    rng = np.random.default_rng(seed)
    order = [studies[i] for i in rng.permutation(len(studies))]
    order.sort(key=lambda s: -sizes[s])  # stable: ties keep the random order
    total = sum(sizes.values())
    target = ratios * total
    counts = np.zeros(3)
    members: list[list[str]] = [[], [], []]
    for s in order:
        k = int(np.argmax(target - counts))
        members[k].append(s)
        counts[k] += sizes[s]

    # a split with a non-zero target must not end up empty
    for k in range(3):
        if not members[k] and ratios[k] > 0:
            donor = max((j for j in range(3) if len(members[j]) > 1), key=lambda j: counts[j] - target[j])
            s = min(members[donor], key=lambda t: sizes[t])
            members[donor].remove(s)
            members[k].append(s)
            counts[donor] -= sizes[s]
            counts[k] += sizes[s]

    assignment = {s: SPLITS[k] for k in range(3) for s in members[k]}
    records = [replace(r, split=assignment[r.study_id]) for r in manifest.records]
    return DatasetManifest(records, manifest.classes, None)


def split_dataset(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    return Dataset(dataset.raw_images(), split_by_study(dataset.manifest, ratios, seed))


def leakage(manifest: DatasetManifest) -> int:
    """Number of studies that appear in more than one split."""
    seen: dict[str, set] = {}
    for r in manifest.records:
        seen.setdefault(r.study_id, set()).add(r.split)
    return sum(1 for v in seen.values() if len(v) > 1)


def load_dataset(manifest_path, root=None) -> Dataset:
    """Read a manifest and the rasters it points to (paths relative to ``root``,
    default the manifest's directory). Images are scaled to [0, 1] and, if the
    manifest carries a training mean, mean-subtracted."""
    manifest_path = Path(manifest_path)
    man = DatasetManifest.load(manifest_path)
    root = Path(root) if root is not None else manifest_path.parent
    images = np.empty((len(man.records),) + IMAGE_SHAPE, dtype=np.float32)
    for i, r in enumerate(man.records):
        if r.path is None:
            raise DataError(f"record {i} has no path")
        raster = read_raster(root / r.path)
        images[i] = ingest_frame(raster) if raster.shape != IMAGE_SHAPE else raster / np.float32(255.0)
    if man.training_mean is not None:
        images -= man.training_mean
    return Dataset(images, man)
