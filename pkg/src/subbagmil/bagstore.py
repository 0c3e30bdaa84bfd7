"""Feature bags on disk, dataset manifests, splits and synthetic data."""

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError, FormatError, SplitError

MAGIC = b"MILB"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")


@dataclass
class FeatureBag:
    """One case: an ``N x d`` instance-feature matrix with its identity and label."""

    case_id: str
    patient_id: str
    label: int
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DomainError(f"bag {self.case_id!r} needs an N x d matrix with N >= 1")
        if not np.all(np.isfinite(self.features)):
            raise DomainError(f"bag {self.case_id!r} has non-finite features")

    @property
    def n_instances(self):
        return self.features.shape[0]


@dataclass
class BagRecord:
    case_id: str
    patient_id: str
    label: int
    path: str
    n_instances: int


@dataclass
class DatasetManifest:
    class_names: list
    dim: int
    bags: list
    generator_seed: int = None
    root: Path = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ConfigError("a dataset needs at least two classes")
        ids = [b.case_id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ConfigError("case ids are not unique")
        for b in self.bags:
            if not 0 <= b.label < len(self.class_names):
                raise ConfigError(f"case {b.case_id!r} has label {b.label} outside [0, {len(self.class_names)})")

    @property
    def n_classes(self):
        return len(self.class_names)

    def class_counts(self, case_ids=None):
        keep = None if case_ids is None else set(case_ids)
        counts = np.zeros(self.n_classes, dtype=np.int64)
        for b in self.bags:
            if keep is None or b.case_id in keep:
                counts[b.label] += 1
        return counts

    def record(self, case_id):
        for b in self.bags:
            if b.case_id == case_id:
                return b
        raise KeyError(case_id)

    def load_bag(self, record):
        path = Path(record.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        features = read_bag_features(path)
        if features.shape != (record.n_instances, self.dim):
            raise FormatError(
                f"bag {record.case_id!r} has shape {features.shape}, manifest says "
                f"({record.n_instances}, {self.dim})", path=path)
        return FeatureBag(record.case_id, record.patient_id, record.label, features)

    def load_bags(self, case_ids=None):
        if case_ids is None:
            return [self.load_bag(r) for r in self.bags]
        by_id = {r.case_id: r for r in self.bags}
        return [self.load_bag(by_id[c]) for c in case_ids]

    def to_json(self):
        return {
            "class_names": list(self.class_names),
            "dim": int(self.dim),
            "seed": self.generator_seed,
            "bags": [
                {"case_id": b.case_id, "patient_id": b.patient_id, "label": int(b.label),
                 "path": b.path, "n_instances": int(b.n_instances)}
                for b in self.bags
            ],
        }

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text())
            bags = [BagRecord(b["case_id"], b["patient_id"], int(b["label"]), b["path"],
                              int(b["n_instances"])) for b in raw["bags"]]
            return cls(list(raw["class_names"]), int(raw["dim"]), bags, raw.get("seed"),
                       root=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed manifest: {exc}", path=path) from exc

    def content_hash(self):
        """SHA-256 over the manifest and every bag file, in manifest order."""
        h = hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode())
        for r in self.bags:
            p = Path(r.path)
            if not p.is_absolute() and self.root is not None:
                p = self.root / p
            h.update(p.read_bytes())
        return h.hexdigest()


def encode_bag(features):
    x = np.asarray(features)
    if x.ndim != 2:
        raise DomainError("bag features must be 2-D")
    if not np.all(np.isfinite(x)):
        raise FormatError("refusing to write non-finite features")
    n, d = x.shape
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, 0, n, d) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_bag(data, path=None):
    """Parse the bytes of a bag file into a float64 ``N x d`` array."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data), path=path)
    magic, version, reserved, n, d = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    if reserved != 0:
        raise FormatError("reserved field is non-zero", offset=6, path=path)
    start = _HEADER.size
    end = start + 4 * n * d
    if len(data) != end + 4:
        raise FormatError(f"payload length {len(data) - start - 4} does not match N*d={n * d} floats",
                          offset=min(len(data), end), path=path)
    payload = data[start:end]
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(payload) != crc:
        raise FormatError("CRC32 mismatch", offset=end, path=path)
    x = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(x.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite value", offset=start + 4 * int(bad[0]), path=path)
    return x.astype(np.float64)


def write_bag(bag, path):
    features = bag.features if isinstance(bag, FeatureBag) else bag
    path = Path(path)
    path.write_bytes(encode_bag(features))
    return path


def read_bag_features(path):
    path = Path(path)
    return decode_bag(path.read_bytes(), path=path)


def read_bag(path, case_id, patient_id, label):
    """Read a bag file; identity and label live in the manifest, not the file."""
    return FeatureBag(case_id, patient_id, label, read_bag_features(path))


def largest_remainder(total, weights):
    """Apportion ``total`` integer units proportionally to ``weights``.

    Ties in the fractional remainders go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise DomainError("weights must be non-negative with a positive sum")
    quota = total * w / w.sum()
    base = np.floor(quota + 1e-9).astype(np.int64)
    rem = quota - base
    short = int(total - base.sum())
    order = sorted(range(len(w)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[:short]:
        base[i] += 1
    return base


def dataset_entropy(class_counts):
    """Class-proportion entropy in bits."""
    c = np.asarray(class_counts, dtype=np.float64)
    if np.any(c < 0):
        raise DomainError("counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise DomainError("entropy needs at least one positive count")
    p = c[c > 0] / total
    return float(-np.sum(p * np.log2(p)))


@dataclass
class SyntheticConfig:
    """Parameters of the seeded synthetic bag generator.

    Class 0 is the "normal" class with background-only instances. Every other
    class mixes ``ceil(salient_fraction * N)`` instances shifted by a
    class-specific unit-norm mean into a background of isotropic noise.
    """

    n_classes: int = 3
    ratio: tuple = (1.0, 1.0, 1.0)
    total_bags: int = 150
    dim: int = 32
    n_range: tuple = (16, 48)
    salient_fraction: float = 0.25
    background_scale: float = 1.0
    seed: int = 0
    class_names: tuple = None

    def __post_init__(self):
        self.ratio = tuple(float(r) for r in self.ratio)
        self.n_range = tuple(int(n) for n in self.n_range)
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.ratio) != self.n_classes:
            raise ConfigError(f"ratio has {len(self.ratio)} parts for {self.n_classes} classes")
        if any(not r > 0 for r in self.ratio):
            raise ConfigError("ratio entries must be positive")
        if self.total_bags < 1:
            raise ConfigError("total_bags must be positive")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        lo, hi = self.n_range
        if lo < 4 or hi < lo:
            raise ConfigError("n_range must satisfy 4 <= min <= max")
        if not 0 < self.salient_fraction <= 1:
            raise ConfigError("salient_fraction must lie in (0, 1]")
        if not self.background_scale > 0:
            raise ConfigError("background_scale must be positive")
        if self.class_names is None:
            self.class_names = ("normal",) + tuple(f"class{c}" for c in range(1, self.n_classes))
        elif len(self.class_names) != self.n_classes:
            raise ConfigError("class_names length must equal n_classes")

    def class_counts(self):
        return largest_remainder(self.total_bags, self.ratio)


def _class_means(rng, n_classes, dim):
    means = np.zeros((n_classes, dim))
    for c in range(1, n_classes):
        mu = rng.standard_normal(dim)
        means[c] = mu / np.linalg.norm(mu)
    return means


def synthesize_bags(cfg):
    """Generate the bags of ``cfg`` in memory (features rounded to float32)."""
    rng = np.random.default_rng(cfg.seed)
    means = _class_means(rng, cfg.n_classes, cfg.dim)
    counts = cfg.class_counts()
    labels = np.repeat(np.arange(cfg.n_classes), counts)
    rng.shuffle(labels)
    lo, hi = cfg.n_range
    width = len(str(len(labels) - 1))
    bags = []
    for i, label in enumerate(labels):
        n = int(rng.integers(lo, hi + 1))
        x = cfg.background_scale * rng.standard_normal((n, cfg.dim))
        if label > 0:
            n_sal = math.ceil(cfg.salient_fraction * n)
            if cfg.salient_fraction < 1:
                n_sal = min(n_sal, n - 1)
            salient = rng.permutation(n)[:n_sal]
            x[salient] += means[label]
        x = x.astype(np.float32).astype(np.float64)
        case = f"case{i:0{width}d}"
        bags.append(FeatureBag(case, f"patient{i:0{width}d}", int(label), x))
    return bags


def generate_synthetic(cfg, out_dir):
    """Write a synthetic dataset (bag files plus ``manifest.json``) to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for bag in synthesize_bags(cfg):
        rel = f"bags/{bag.case_id}.milb"
        write_bag(bag, out_dir / rel)
        records.append(BagRecord(bag.case_id, bag.patient_id, bag.label, rel, bag.n_instances))
    manifest = DatasetManifest(list(cfg.class_names), cfg.dim, records, cfg.seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


@dataclass
class SplitSpec:
    train: list
    val: list
    test: list
    seed: int

    def to_json(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        raw = json.loads(Path(path).read_text())
        return cls(raw["train"], raw["val"], raw["test"], raw["seed"])


def _apportion_split(counts, frac):
    total = int(round(frac * counts.sum() + 1e-9))
    alloc = largest_remainder(total, counts) if counts.sum() else np.zeros_like(counts)
    # keep every class represented when it has enough bags left for the other splits
    for c, n in enumerate(counts):
        if alloc[c] == 0 and n >= 2:
            alloc[c] = 1
    return alloc


def stratified_split(manifest, seed, test_frac=0.2, val_of_train=0.2):
    """Per-class proportional train/val/test split.

    Test takes ``test_frac`` of each class, validation ``val_of_train`` of what
    remains; both are apportioned with largest-remainder rounding.
    """
    counts = manifest.class_counts()
    for c, n in enumerate(counts):
        if n < 3:
            raise SplitError(f"class {manifest.class_names[c]!r} has {n} bags; need at least 3")
    rng = np.random.default_rng(seed)
    per_class = [[b.case_id for b in manifest.bags if b.label == c] for c in range(len(counts))]
    per_class = [[ids[i] for i in rng.permutation(len(ids))] for ids in per_class]
    n_test = _apportion_split(counts, test_frac)
    n_val = _apportion_split(counts - n_test, val_of_train)
    train, val, test = [], [], []
    for ids, t, v in zip(per_class, n_test, n_val):
        test += ids[:t]
        val += ids[t:t + v]
        train += ids[t + v:]
    return SplitSpec(train, val, test, seed)
