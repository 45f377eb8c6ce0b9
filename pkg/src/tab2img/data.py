"""Dataset ingestion: CSV tables, IDX image corpora, pools, and mappings.

Preprocessing follows a fixed recipe: columns with more than half of their
cells missing are dropped, the rest are median-imputed, categoricals are
integer-encoded in lexicographic order, and features are z-scored. The
split keeps the training statistics and reuses them on the test side.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FetchError, FormatError

MISSING_MARKERS = {"", "?"}

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

# class -> reference image source, in canonical order (10 garment classes,
# then the ten digits)
CANONICAL_SOURCES = [
    "FashionMNIST - T-shirt/Top",
    "FashionMNIST - Trouser",
    "FashionMNIST - Pullover",
    "FashionMNIST - Dress",
    "FashionMNIST - Coat",
    "FashionMNIST - Sandal",
    "FashionMNIST - Shirt",
    "FashionMNIST - Sneaker",
    "FashionMNIST - Bag",
    "FashionMNIST - Ankle boot",
    "MNIST - 0",
    "MNIST - 1",
    "MNIST - 2",
    "MNIST - 3",
    "MNIST - 4",
    "MNIST - 5",
    "MNIST - 6",
    "MNIST - 7",
    "MNIST - 8",
    "MNIST - 9",
]

MAX_CLASSES = 20


# ---------------------------------------------------------------------------
# raw tables


@dataclass
class RawTable:
    column_names: list[str]
    cells: list[list[str | None]]          # rows x features, None == missing
    target_name: str
    target: list[str | None]

    @property
    def n_rows(self) -> int:
        return len(self.cells)


def load_csv(path, target_column: str) -> RawTable:
    """Parse a comma-delimited file with a header row.

    Empty cells and "?" are treated as missing. Ragged rows are rejected
    with their 1-based row index.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise FormatError(f"{path}: target column {target_column!r} not in header {header}")
        t_idx = header.index(target_column)
        feature_names = [h for i, h in enumerate(header) if i != t_idx]

        cells: list[list[str | None]] = []
        target: list[str | None] = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            vals = [c.strip() for c in row]
            target.append(None if vals[t_idx] in MISSING_MARKERS else vals[t_idx])
            cells.append([None if v in MISSING_MARKERS else v
                          for i, v in enumerate(vals) if i != t_idx])
    return RawTable(feature_names, cells, target_column, target)


def balance_scale_table() -> RawTable:
    """The classic balance-scale data, rebuilt from its generating rule.

    All 625 combinations of four attributes in 1..5; the class is which
    side of the scale tips (left/right torque comparison, B on ties).
    """
    names = ["left-weight", "left-distance", "right-weight", "right-distance"]
    cells = []
    target = []
    for lw in range(1, 6):
        for ld in range(1, 6):
            for rw in range(1, 6):
                for rd in range(1, 6):
                    cells.append([str(lw), str(ld), str(rw), str(rd)])
                    left, right = lw * ld, rw * rd
                    target.append("L" if left > right else "R" if right > left else "B")
    return RawTable(names, cells, "class", target)


BUILTIN_TABLES = {"balance-scale": balance_scale_table}


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessReport:
    dropped_columns: dict[str, str]
    medians: dict[str, float]
    categorical_codes: dict[str, list[str]]
    mean: np.ndarray
    std: np.ndarray
    class_names: list[str]
    target_name: str
    n_rows_dropped_missing_target: int = 0


@dataclass
class TabularDataset:
    x: np.ndarray                      # (m, N) standardized features
    y: np.ndarray                      # (m,) labels in 0..n-1
    n_classes: int
    column_names: list[str]
    report: PreprocessReport
    imputed: np.ndarray = None         # pre-standardization values, same shape as x
    row_indices: np.ndarray = None     # positions in the source table

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]


def _try_float(value: str):
    try:
        v = float(value)
    except ValueError:
        return None
    return None if math.isnan(v) else v


def preprocess(raw: RawTable) -> TabularDataset:
    """Clean a raw table into a standardized numeric dataset."""
    keep_rows = [i for i, t in enumerate(raw.target) if t is not None]
    n_dropped_rows = raw.n_rows - len(keep_rows)
    if not keep_rows:
        raise DataError("no rows with a target value")

    classes = sorted({raw.target[i] for i in keep_rows},
                     key=_numeric_or_lex_key(raw.target))
    if len(classes) < 2:
        raise DataError(f"target has a single class {classes[0]!r}")
    class_to_label = {c: k for k, c in enumerate(classes)}
    y = np.array([class_to_label[raw.target[i]] for i in keep_rows], dtype=np.int64)

    dropped: dict[str, str] = {}
    medians: dict[str, float] = {}
    codes: dict[str, list[str]] = {}
    columns: list[np.ndarray] = []
    kept_names: list[str] = []

    m = len(keep_rows)
    for j, name in enumerate(raw.column_names):
        col = [raw.cells[i][j] for i in keep_rows]
        n_missing = sum(c is None for c in col)
        if n_missing > 0.5 * m:
            dropped[name] = "missing>50%"
            continue

        present = [c for c in col if c is not None]
        as_float = [_try_float(c) for c in present]
        if all(v is not None for v in as_float):
            values = {c: v for c, v in zip(present, as_float)}
        else:
            levels = sorted(set(present))
            codes[name] = levels
            values = {c: float(k) for k, c in enumerate(levels)}

        numeric = np.array([np.nan if c is None else values[c] for c in col])
        if n_missing:
            med = float(np.median(numeric[~np.isnan(numeric)]))
            medians[name] = med
            numeric[np.isnan(numeric)] = med
        if numeric.std() == 0.0:
            dropped[name] = "zero variance"
            continue
        columns.append(numeric)
        kept_names.append(name)

    if not columns:
        raise DataError("all feature columns were dropped")

    imputed = np.stack(columns, axis=1)
    mean = imputed.mean(axis=0)
    std = imputed.std(axis=0)
    report = PreprocessReport(
        dropped_columns=dropped, medians=medians, categorical_codes=codes,
        mean=mean, std=std, class_names=classes, target_name=raw.target_name,
        n_rows_dropped_missing_target=n_dropped_rows)
    return TabularDataset(
        x=(imputed - mean) / std, y=y, n_classes=len(classes),
        column_names=kept_names, report=report, imputed=imputed,
        row_indices=np.asarray(keep_rows, dtype=np.int64))


def _numeric_or_lex_key(values):
    present = [v for v in values if v is not None]
    if all(_try_float(v) is not None for v in present):
        return lambda s: (float(s), s)
    return lambda s: (0.0, s)


def split(ds: TabularDataset, ratio: float = 0.8, seed: int = 0):
    """Stratified row partition; test features reuse training statistics."""
    m = ds.n_rows
    if m < 5:
        raise DataError(f"need at least 5 rows to split, got {m}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")

    rng = np.random.default_rng(seed)
    class_counts = np.bincount(ds.y, minlength=ds.n_classes)
    if class_counts.min() < 2:
        warnings.warn("a class has fewer than 2 samples; falling back to a "
                      "non-stratified split", stacklevel=2)
        perm = rng.permutation(m)
        k = round(ratio * m)
        train_idx, test_idx = np.sort(perm[:k]), np.sort(perm[k:])
    else:
        # largest-remainder allocation so the train total is round(ratio*m)
        exact = ratio * class_counts
        base = np.floor(exact).astype(int)
        deficit = round(ratio * m) - int(base.sum())
        order = np.argsort(-(exact - base), kind="stable")
        for c in order:
            if deficit <= 0:
                break
            if base[c] < class_counts[c]:
                base[c] += 1
                deficit -= 1
        parts_train, parts_test = [], []
        for c in range(ds.n_classes):
            idx = np.flatnonzero(ds.y == c)
            perm = rng.permutation(idx.size)
            parts_train.append(idx[perm[:base[c]]])
            parts_test.append(idx[perm[base[c]:]])
        train_idx = np.sort(np.concatenate(parts_train))
        test_idx = np.sort(np.concatenate(parts_test))

    return (_restandardized_subset(ds, train_idx, None),
            _restandardized_subset(ds, test_idx, train_idx))


def _restandardized_subset(ds: TabularDataset, idx: np.ndarray,
                           stats_idx: np.ndarray | None) -> TabularDataset:
    stats_rows = ds.imputed[idx if stats_idx is None else stats_idx]
    mean = stats_rows.mean(axis=0)
    std = stats_rows.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    rep = ds.report
    report = PreprocessReport(
        dropped_columns=rep.dropped_columns, medians=rep.medians,
        categorical_codes=rep.categorical_codes, mean=mean, std=std,
        class_names=rep.class_names, target_name=rep.target_name,
        n_rows_dropped_missing_target=rep.n_rows_dropped_missing_target)
    return TabularDataset(
        x=(ds.imputed[idx] - mean) / std, y=ds.y[idx], n_classes=ds.n_classes,
        column_names=ds.column_names, report=report, imputed=ds.imputed[idx],
        row_indices=ds.row_indices[idx])


# ---------------------------------------------------------------------------
# IDX corpora


def load_idx(images_path, labels_path):
    """Read an IDX image/label file pair, scaling pixels to [0, 1]."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{images_path}: truncated header")
    magic, count, rows, cols = struct.unpack(">iiii", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic}, expected {IDX_IMAGES_MAGIC}")
    if rows != 28 or cols != 28:
        raise FormatError(f"{images_path}: expected 28x28 images, got {rows}x{cols}")
    if len(blob) - 16 != count * rows * cols:
        raise FormatError(f"{images_path}: payload is {len(blob) - 16} bytes, "
                          f"expected {count * rows * cols}")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(lblob) < 8:
        raise FormatError(f"{labels_path}: truncated header")
    lmagic, lcount = struct.unpack(">ii", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic {lmagic}, expected {IDX_LABELS_MAGIC}")
    if len(lblob) - 8 != lcount:
        raise FormatError(f"{labels_path}: payload is {len(lblob) - 8} bytes, "
                          f"expected {lcount}")
    if lcount != count:
        raise FormatError(f"image/label counts disagree: {count} vs {lcount}")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    return (images.astype(np.float32) / 255.0), labels


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Inverse of load_idx; images are float in [0, 1] or uint8."""
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, count))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# image pool + mapping


@dataclass
class ImagePool:
    classes: list[np.ndarray]          # per class: (k, 28, 28) in [0, 1]
    source_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def build_pool(n: int, fashion, mnist=None) -> ImagePool:
    """Class-indexed pool: classes 0..9 from the garment corpus in label
    order, classes 10..19 from the digit corpus.
    """
    if n > MAX_CLASSES:
        raise ConfigError(f"unsupported number of classes {n}: more than "
                          f"{MAX_CLASSES} classes is not supported")
    if n < 2:
        raise ConfigError(f"need at least 2 classes, got {n}")
    f_images, f_labels = fashion
    buckets: list[np.ndarray] = []
    for c in range(min(n, 10)):
        members = f_images[f_labels == c]
        if members.size == 0:
            raise DataError(f"garment corpus has no images for class {c}")
        buckets.append(members)
    if n > 10:
        if mnist is None:
            raise ConfigError(f"{n} classes need the digit corpus as well")
        m_images, m_labels = mnist
        for c in range(10, n):
            digit = c - 10
            members = m_images[m_labels == digit]
            if members.size == 0:
                raise DataError(f"digit corpus has no images for digit {digit}")
            buckets.append(members)
    return ImagePool(classes=buckets, source_names=CANONICAL_SOURCES[:n])


@dataclass
class MappingSchema:
    """Instance -> same-class image assignment.

    ``per-epoch`` draws a fresh assignment at every epoch; ``fixed``
    freezes the epoch-0 draw (the single-mapping ablation additionally
    collapses every class bucket to one image).
    """

    seed: int = 0
    policy: str = "per-epoch"
    single_image: bool = False
    _fixed_assignment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.policy not in ("fixed", "per-epoch"):
            raise ConfigError(f"unknown mapping policy {self.policy!r}")


def sample_mapping(ds: TabularDataset, pool: ImagePool, schema: MappingSchema,
                   epoch: int = 0) -> np.ndarray:
    """Per-instance index into the image bucket of the instance's class."""
    if ds.n_classes > pool.n_classes:
        raise DataError(f"pool covers {pool.n_classes} classes, dataset has {ds.n_classes}")
    for c in range(ds.n_classes):
        if pool.classes[c].shape[0] == 0:
            raise DataError(f"empty image bucket for class {c}")

    if schema.policy == "fixed" and schema._fixed_assignment is not None:
        return schema._fixed_assignment

    if schema.single_image:
        rng = np.random.default_rng(schema.seed)
        chosen = {c: int(rng.integers(pool.classes[c].shape[0]))
                  for c in range(ds.n_classes)}
        assignment = np.array([chosen[int(c)] for c in ds.y], dtype=np.int64)
    else:
        key = schema.seed if schema.policy == "fixed" else (schema.seed, epoch)
        rng = np.random.default_rng(key)
        sizes = np.array([pool.classes[int(c)].shape[0] for c in ds.y])
        assignment = rng.integers(0, sizes).astype(np.int64)

    if schema.policy == "fixed":
        schema._fixed_assignment = assignment
    return assignment


def gather_mapped_images(y: np.ndarray, assignment: np.ndarray, pool: ImagePool) -> np.ndarray:
    """(m, 28, 28) stack of each instance's assigned class image."""
    return np.stack([pool.classes[int(c)][int(k)] for c, k in zip(y, assignment)])


# ---------------------------------------------------------------------------
# synthetic stand-in corpora

# Real garment/digit corpora are not redistributable with the package; when
# the IDX files are absent we synthesize visually distinct per-class pattern
# corpora in the same format so every downstream path stays identical.


def _digit_pattern(digit: int) -> np.ndarray:
    segments = {  # 7-segment layout on a 28x28 canvas
        "top": (slice(3, 6), slice(7, 21)),
        "mid": (slice(13, 16), slice(7, 21)),
        "bot": (slice(23, 26), slice(7, 21)),
        "tl": (slice(4, 15), slice(5, 8)),
        "tr": (slice(4, 15), slice(20, 23)),
        "bl": (slice(14, 25), slice(5, 8)),
        "br": (slice(14, 25), slice(20, 23)),
    }
    lit = {
        0: ["top", "bot", "tl", "tr", "bl", "br"],
        1: ["tr", "br"],
        2: ["top", "mid", "bot", "tr", "bl"],
        3: ["top", "mid", "bot", "tr", "br"],
        4: ["mid", "tl", "tr", "br"],
        5: ["top", "mid", "bot", "tl", "br"],
        6: ["top", "mid", "bot", "tl", "bl", "br"],
        7: ["top", "tr", "br"],
        8: ["top", "mid", "bot", "tl", "tr", "bl", "br"],
        9: ["top", "mid", "bot", "tl", "tr", "br"],
    }
    canvas = np.zeros((28, 28), dtype=np.float32)
    for name in lit[digit]:
        canvas[segments[name]] = 1.0
    return canvas


def _garment_pattern(cls: int) -> np.ndarray:
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float32)
    cy, cx = 13.5, 13.5
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    patterns = [
        (r < 10).astype(np.float32),                                   # disc
        ((np.floor(xx / 4) % 2) == 0).astype(np.float32),              # vertical stripes
        ((np.floor(yy / 4) % 2) == 0).astype(np.float32),              # horizontal stripes
        ((np.floor((xx + yy) / 5) % 2) == 0).astype(np.float32),       # diagonals
        ((r > 6) & (r < 11)).astype(np.float32),                       # ring
        (((np.floor(xx / 5) + np.floor(yy / 5)) % 2) == 0).astype(np.float32),  # checker
        ((np.abs(xx - cx) < 3) | (np.abs(yy - cy) < 3)).astype(np.float32),     # cross
        (yy > xx).astype(np.float32),                                  # triangle
        ((np.abs(xx - yy) < 3) | (np.abs(xx + yy - 27) < 3)).astype(np.float32),  # X
        ((np.minimum(np.minimum(xx, 27 - xx), np.minimum(yy, 27 - yy)) < 4)
         ).astype(np.float32),                                         # frame
    ]
    return patterns[cls]


def _synthesize_corpus(kind: str, per_class: int, seed: int):
    rng = np.random.default_rng(seed)
    images = np.zeros((10 * per_class, 28, 28), dtype=np.float32)
    labels = np.zeros(10 * per_class, dtype=np.int64)
    for cls in range(10):
        base = _digit_pattern(cls) if kind == "digit" else _garment_pattern(cls)
        for k in range(per_class):
            i = cls * per_class + k
            dy, dx = rng.integers(-2, 3, size=2)
            img = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
            img = img * rng.uniform(0.75, 1.0) + rng.uniform(0.0, 0.08, size=(28, 28))
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = cls
    return images, labels


def ensure_corpora(root_dir, per_class: int = 256, seed: int = 20):
    """Load the garment + digit corpora, synthesizing stand-ins if absent.

    Layout: <root>/fashion/train-{images,labels}-idx{3,1}-ubyte and the
    same under <root>/mnist. Real corpus files dropped at these paths are
    picked up as-is.
    """
    out = {}
    for sub, kind in (("fashion", "garment"), ("mnist", "digit")):
        d = os.path.join(root_dir, sub)
        images_path = os.path.join(d, "train-images-idx3-ubyte")
        labels_path = os.path.join(d, "train-labels-idx1-ubyte")
        if not (os.path.exists(images_path) and os.path.exists(labels_path)):
            os.makedirs(d, exist_ok=True)
            images, labels = _synthesize_corpus(kind, per_class,
                                                seed + (0 if sub == "fashion" else 1))
            write_idx(images_path, labels_path, images, labels)
        out[sub] = load_idx(images_path, labels_path)
    return out["fashion"], out["mnist"]


# ---------------------------------------------------------------------------
# remote fetch

OPENML_BASE = "https://www.openml.org"

# OpenML dataset ids for the tables referenced by name elsewhere
NAMED_DATASET_IDS = {
    "balance-scale": 11,
    "cmc": 23,
    "splice": 46,
    "dna": 40670,
    "connect-4": 40668,
    "jungle-chess": 41027,
}


def fetch_openml(dataset_id: int, cache_dir, base_url: str = OPENML_BASE) -> str:
    """Download a dataset's CSV export, caching by id + checksum.

    A cache hit never touches the network; a checksum mismatch forces a
    refetch. Offline with no cache raises a FetchError that says so.
    """
    entry = os.path.join(cache_dir, str(dataset_id))
    data_path = os.path.join(entry, "data.csv")
    meta_path = os.path.join(entry, "meta.json")

    if os.path.exists(data_path) and os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        digest = _sha256_file(data_path)
        if digest == meta.get("sha256"):
            return data_path
        # fall through to refetch on corruption

    try:
        desc_url = f"{base_url}/api/v1/json/data/{dataset_id}"
        with urllib.request.urlopen(desc_url, timeout=30) as resp:
            desc = json.loads(resp.read().decode("utf-8"))
        info = desc["data_set_description"]
        file_id = info["file_id"]
        name = info.get("name", f"dataset-{dataset_id}")
        csv_url = f"{base_url}/data/v1/get_csv/{file_id}/{name}.csv"
        with urllib.request.urlopen(csv_url, timeout=120) as resp:
            payload = resp.read()
    except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
        if os.path.exists(data_path):
            raise FetchError(f"cached copy of dataset {dataset_id} failed its checksum "
                             f"and refetch failed: {exc}") from exc
        raise FetchError(f"cannot fetch dataset {dataset_id} (offline or server "
                         f"unavailable) and no cached copy exists: {exc}") from exc

    os.makedirs(entry, exist_ok=True)
    tmp_path = data_path + ".part"
    with open(tmp_path, "wb") as fh:
        fh.write(payload)
    os.replace(tmp_path, data_path)
    with open(meta_path, "w") as fh:
        json.dump({"dataset_id": dataset_id, "source_url": csv_url,
                   "sha256": hashlib.sha256(payload).hexdigest()}, fh)
    return data_path


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_cache_dir() -> str:
    env = os.environ.get("TAB2IMG_CACHE")
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "tab2img")
