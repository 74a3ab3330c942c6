"""Synthetic conversion data with class imbalance and advertiser domain shift.

Features and labels are written to separate artifacts: a binary feature
file for the feature party and a ``sample_id,label`` CSV for the clean room.
"""
from __future__ import annotations

import csv
import hashlib
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

PRETRAIN = "pretrain"
_FEAT_MAGIC = b"CVRD"
_FEAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n: int = 100_000
    d: int = 32
    teacher_hidden: tuple[int, ...] = (64, 32)
    base_rate: float = 0.05
    domain_shift: float = 0.0
    domain: str = PRETRAIN  # "pretrain" or an advertiser / adapter id
    signal: float = 3.0  # std of the teacher logit before the offset
    stream: int = 0  # independent sample streams for the same domain (train / holdout)

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise DataError("n and d must be positive")
        if not 0 < self.base_rate < 0.5:
            raise DataError("base_rate must lie in (0, 0.5)")
        if self.domain_shift < 0:
            raise DataError("domain_shift must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "teacher_hidden" in d:
            d["teacher_hidden"] = tuple(d["teacher_hidden"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["teacher_hidden"] = list(self.teacher_hidden)
        return out


@dataclass
class Dataset:
    sample_ids: np.ndarray  # uint64
    X: np.ndarray  # float64, values exactly representable in float32
    labels: np.ndarray | None  # int8, None for a feature-only view
    domain: str = PRETRAIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint64)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.sample_ids.shape[0]:
            raise DataError("features must be n x d with one id per row")
        if np.unique(self.sample_ids).size != self.sample_ids.size:
            raise DataError("duplicate sample ids")
        if not np.all(np.isfinite(self.X)):
            raise DataError("non-finite features")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.sample_ids.shape or not np.all((self.labels == 0) | (self.labels == 1)):
                raise DataError("labels must be a binary vector with one entry per sample")
            self.labels = self.labels.astype(np.int8)

    def __len__(self) -> int:
        return self.sample_ids.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def base_rate(self) -> float:
        return float(self.labels.mean())

    def features_only(self) -> "Dataset":
        return Dataset(self.sample_ids, self.X, None, self.domain)

    def label_store(self) -> dict[int, int]:
        return dict(zip(self.sample_ids.tolist(), self.labels.tolist()))

    def subset(self, idx) -> "Dataset":
        lab = None if self.labels is None else self.labels[idx]
        return Dataset(self.sample_ids[idx], self.X[idx], lab, self.domain)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        idx = np.arange(len(self))
        return self.subset(idx[:n_first]), self.subset(idx[n_first:])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain.encode())
        h.update(self.sample_ids.astype("<u8").tobytes())
        h.update(self.X.astype("<f4").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype(np.uint8).tobytes())
        return h.hexdigest()


class Batch(NamedTuple):
    sample_ids: np.ndarray
    X: np.ndarray
    labels: np.ndarray | None


# -- generation -------------------------------------------------------------


def _sub_seed(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


def _teacher(cfg: GeneratorConfig, attempt: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng([cfg.seed, _sub_seed("teacher", attempt)])
    dims = [cfg.d, *cfg.teacher_hidden, 1]
    layers = [(rng.normal(0, np.sqrt(2.0 / a), (b, a)), rng.normal(0, 0.1, b)) for a, b in zip(dims, dims[1:])]
    if cfg.domain != PRETRAIN and cfg.domain_shift > 0:
        srng = np.random.default_rng([cfg.seed, _sub_seed("shift", cfg.domain, attempt)])
        layers = [
            (W + cfg.domain_shift * srng.normal(0, np.sqrt(2.0 / W.shape[1]), W.shape), bias)
            for W, bias in layers
        ]
    return layers


def _teacher_logit(layers, X: np.ndarray) -> np.ndarray:
    h = X
    for i, (W, bias) in enumerate(layers):
        h = h @ W.T + bias
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def teacher_logits(cfg: GeneratorConfig, X: np.ndarray, attempt: int = 0) -> np.ndarray:
    """Standardised teacher logit (before the base-rate offset) for domain ``cfg.domain``."""
    layers = _teacher(cfg, attempt)
    # standardise on a fixed reference sample so every domain shares one scale
    ref = np.random.default_rng([cfg.seed, _sub_seed("ref")]).standard_normal((4096, cfg.d))
    ref_t = _teacher_logit(_teacher(replace(cfg, domain=PRETRAIN), attempt), ref)
    sd = ref_t.std()
    if not np.isfinite(sd) or sd < 1e-12:
        raise DataError("degenerate teacher")
    return cfg.signal * (_teacher_logit(layers, X) - ref_t.mean()) / sd


def _bisect_offset(t: np.ndarray, u: np.ndarray, target: float, tol: float) -> float:
    def rate(off):
        return np.mean(u < 1.0 / (1.0 + np.exp(-(t + off))))

    lo, hi = -50.0, 50.0
    if not rate(lo) <= target <= rate(hi):
        raise DataError("cannot bracket target base rate")
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if rate(mid) < target else (lo, mid)
    if abs(rate(hi) - target) > tol:
        raise DataError("bisection did not reach target base rate")
    return hi


def generate(cfg: GeneratorConfig, tol: float = 0.005) -> Dataset:
    """Standard-normal features, Bernoulli labels from a frozen random teacher.

    The logit offset is bisected on the realised labels, so the achieved
    base rate is within ``tol`` of the target regardless of ``n``.
    """
    rng = np.random.default_rng([cfg.seed, _sub_seed("samples", cfg.domain, cfg.stream)])
    X = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32).astype(np.float64)
    u = rng.random(cfg.n)
    ids = _unique_ids(rng, cfg.n)
    last: Exception | None = None
    for attempt in range(5):
        try:
            t = teacher_logits(cfg, X, attempt)
            off = _bisect_offset(t, u, cfg.base_rate, tol)
        except DataError as e:
            last = e
            continue
        labels = (u < 1.0 / (1.0 + np.exp(-(t + off)))).astype(np.int8)
        return Dataset(ids, X, labels, cfg.domain, meta={"offset": off, "attempt": attempt, **cfg.to_dict()})
    raise DataError(f"generation failed after 5 attempts: {last}")


def teacher_probs(ds: Dataset) -> np.ndarray:
    """Ground-truth conversion probability for a generated dataset."""
    m = {k: v for k, v in ds.meta.items() if k in GeneratorConfig.__dataclass_fields__}
    cfg = GeneratorConfig.from_dict(m)
    t = teacher_logits(cfg, ds.X, ds.meta["attempt"])
    return 1.0 / (1.0 + np.exp(-(t + ds.meta["offset"])))


def _unique_ids(rng: np.random.Generator, n: int) -> np.ndarray:
    ids = rng.integers(1, 2**63, size=n, dtype=np.int64).astype(np.uint64)
    while np.unique(ids).size != n:
        ids = rng.integers(1, 2**63, size=n, dtype=np.int64).astype(np.uint64)
    return ids


# -- batching -----------------------------------------------------------------


def batch_indices(n: int, b: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    if b > n:
        raise DataError(f"batch size {b} exceeds dataset size {n}")
    if b < 1:
        raise DataError("batch size must be positive")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    n_full = n // b
    return [perm[i * b:(i + 1) * b] for i in range(n_full)]


def batches(ds: Dataset, b: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Shuffled full batches for one epoch; the trailing partial batch is dropped."""
    for idx in batch_indices(len(ds), b, seed, epoch):
        yield Batch(ds.sample_ids[idx], ds.X[idx], None if ds.labels is None else ds.labels[idx])


# -- file I/O -----------------------------------------------------------------


def save_features(ds: Dataset, path) -> None:
    raw = ds.domain.encode("utf-8")
    header = _FEAT_MAGIC + struct.pack("<BH", _FEAT_VERSION, len(raw)) + raw + struct.pack("<QI", len(ds), ds.d)
    Path(path).write_bytes(header + ds.sample_ids.astype("<u8").tobytes() + ds.X.astype("<f4").tobytes())


def load_features(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != _FEAT_MAGIC:
        raise DataError("bad magic: not a CVRD feature file")
    try:
        version, ln = struct.unpack_from("<BH", data, 4)
        if version != _FEAT_VERSION:
            raise DataError(f"unsupported feature file version {version}")
        pos = 7
        domain = data[pos:pos + ln].decode("utf-8")
        pos += ln
        n, d = struct.unpack_from("<QI", data, pos)
        pos += 12
    except struct.error as e:
        raise DataError(f"malformed feature file: {e}") from None
    if len(data) != pos + 8 * n + 4 * n * d:
        raise DataError("feature file length does not match its header")
    ids = np.frombuffer(data, dtype="<u8", count=n, offset=pos)
    X = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos + 8 * n).reshape(n, d)
    return Dataset(ids.astype(np.uint64), X.astype(np.float64), None, domain)


def save_labels(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        w.writerows(zip(ds.sample_ids.tolist(), ds.labels.tolist()))


def load_labels(path) -> dict[int, int]:
    store: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "label"]:
            raise DataError(f"label file header must be sample_id,label; got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"line {lineno}: expected 2 columns")
            try:
                sid, lab = int(row[0]), int(row[1])
            except ValueError:
                raise DataError(f"line {lineno}: non-integer field") from None
            if lab not in (0, 1):
                raise DataError(f"line {lineno}: label must be 0 or 1")
            if sid in store:
                raise DataError(f"line {lineno}: duplicate sample id {sid}")
            store[sid] = lab
    return store


def save(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.cvrd`` (features) and ``<path>.labels.csv``."""
    path = Path(path)
    feat, lab = path.with_suffix(".cvrd"), path.with_suffix(".labels.csv")
    save_features(ds, feat)
    if ds.labels is not None:
        save_labels(ds, lab)
    return feat, lab


def load(path) -> Dataset:
    path = Path(path)
    ds = load_features(path.with_suffix(".cvrd"))
    store = load_labels(path.with_suffix(".labels.csv"))
    try:
        labels = np.array([store[i] for i in ds.sample_ids.tolist()], dtype=np.int8)
    except KeyError as e:
        raise DataError(f"sample id {e} missing from label file") from None
    if len(store) != len(ds):
        raise DataError("label file and feature file disagree on sample count")
    return Dataset(ds.sample_ids, ds.X, labels, ds.domain)
