"""Datasets, group bookkeeping, standardization and the synthetic generator."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import multivariate_normal

from ._atomic import atomic_write_text
from .errors import (DataError, EmptyFile, FractionOutOfRange, MalformedRow,
                     UnknownLabelValue)

#: (a, y) cells in canonical order; used for every 4-vector indexed by cell.
CELLS = ((0, -1), (0, 1), (1, -1), (1, 1))


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """N samples of (features, sensitive attribute, label).

    ``sensitive`` takes values in {0, 1} and ``labels`` in {-1, +1}.
    Arrays are copied and made read-only on construction.
    """

    features: np.ndarray
    sensitive: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty N x d matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite entries")
        a = np.asarray(self.sensitive).ravel()
        y = np.asarray(self.labels).ravel()
        if a.shape[0] != x.shape[0] or y.shape[0] != x.shape[0]:
            raise DataError("features, sensitive and labels disagree on N")
        if not np.all(np.isin(a, (0, 1))):
            raise DataError("sensitive values must lie in {0, 1}")
        if not np.all(np.isin(y, (-1, 1))):
            raise DataError("labels must lie in {-1, +1}")
        object.__setattr__(self, "features", _frozen(x, float))
        object.__setattr__(self, "sensitive", _frozen(a, np.int64))
        object.__setattr__(self, "labels", _frozen(y, np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.sensitive[idx], self.labels[idx])

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.sensitive, self.labels)

    def fingerprint(self) -> str:
        """Short content hash, stable across runs and platforms."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.features, self.sensitive, self.labels):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class GroupIndex:
    """Index sets I_ay and empirical marginals p_ay for the four (a, y) cells."""

    index_sets: Mapping[tuple, np.ndarray]
    marginals: Mapping[tuple, float]

    def size(self, cell) -> int:
        return len(self.index_sets[cell])

    def p_vector(self) -> np.ndarray:
        return np.array([self.marginals[c] for c in CELLS])


def group_index(data: Dataset) -> GroupIndex:
    sets = {}
    margins = {}
    for a, y in CELLS:
        idx = np.flatnonzero((data.sensitive == a) & (data.labels == y))
        idx.setflags(write=False)
        sets[(a, y)] = idx
        margins[(a, y)] = len(idx) / data.n
    return GroupIndex(sets, margins)


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_number(text, line, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise MalformedRow(line, f"column {column!r}: {text!r} is not numeric") from None
    if not math.isfinite(value):
        raise MalformedRow(line, f"column {column!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema: Mapping[str, object] | None = None) -> Dataset:
    """Read a dataset from a header-first, comma-separated UTF-8 file.

    Parameters
    ----------
    path : path-like
        File to read.
    schema : mapping, optional
        Column mapping with keys ``features`` (list of column names),
        ``sensitive`` and ``label``. By default the label column is
        ``label``, the sensitive column is ``sensitive`` and every other
        column is a feature, in header order.

    Labels may use either the {-1, 1} or the {0, 1} alphabet; 0 is mapped
    to -1. Mixing both alphabets is rejected.
    """
    schema = dict(schema or {})
    label_col = schema.get("label", "label")
    sens_col = schema.get("sensitive", "sensitive")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyFile(f"{path}: no header row")
        header = [h.strip() for h in header]
        feat_cols = schema.get("features")
        if feat_cols is None:
            feat_cols = [h for h in header if h not in (label_col, sens_col)]
        missing = [c for c in [*feat_cols, sens_col, label_col] if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        fpos = [header.index(c) for c in feat_cols]
        spos = header.index(sens_col)
        lpos = header.index(label_col)

        rows, sens, raw_labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(row)}")
            rows.append([_parse_number(row[p], lineno, header[p]) for p in fpos])
            s = _parse_number(row[spos], lineno, sens_col)
            if s not in (0.0, 1.0):
                raise MalformedRow(lineno, f"sensitive value {row[spos]!r} not in {{0, 1}}")
            sens.append(int(s))
            text = row[lpos].strip()
            try:
                lab = float(text)
            except ValueError:
                raise UnknownLabelValue(text, lineno) from None
            if lab not in (-1.0, 0.0, 1.0):
                raise UnknownLabelValue(text, lineno)
            raw_labels.append((int(lab), lineno))
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    seen = {lab for lab, _ in raw_labels}
    if 0 in seen and -1 in seen:
        line = next(ln for lab, ln in raw_labels if lab == (-1 if raw_labels[0][0] == 0 else 0))
        raise UnknownLabelValue("mixed {0,1} and {-1,1} label alphabets", line)
    labels = [(-1 if lab == 0 else lab) for lab, _ in raw_labels]
    return Dataset(np.array(rows), np.array(sens), np.array(labels))


def save_csv(data: Dataset, path, label_alphabet: str = "pm1") -> None:
    """Write ``data`` using the ``f1..fd,sensitive,label`` layout."""
    if label_alphabet not in ("pm1", "01"):
        raise ValueError(f"label_alphabet must be 'pm1' or '01', got {label_alphabet!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j + 1}" for j in range(data.d)] + ["sensitive", "label"])
    for x, a, y in zip(data.features, data.sensitive, data.labels):
        lab = int(y) if label_alphabet == "pm1" else int(y > 0)
        w.writerow([repr(float(v)) for v in x] + [int(a), lab])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class ScalerParams:
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen(self.means, float))
        object.__setattr__(self, "stds", _frozen(self.stds, float))
        if np.any(self.stds <= 0):
            raise DataError("scaler stds must be positive")

    def transform(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.means.shape[0]:
            raise DataError(f"scaler expects {self.means.shape[0]} features, got {x.shape[-1]}")
        return (x - self.means) / self.stds

    def apply(self, data: Dataset) -> Dataset:
        return data.with_features(self.transform(data.features))

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj) -> "ScalerParams":
        return cls(np.asarray(obj["means"], float), np.asarray(obj["stds"], float))

    @classmethod
    def from_json(cls, text) -> "ScalerParams":
        return cls.from_dict(json.loads(text))

    @classmethod
    def identity(cls, d) -> "ScalerParams":
        return cls(np.zeros(d), np.ones(d))


def standardize(train: Dataset) -> tuple[Dataset, ScalerParams]:
    """Center and scale every feature column to mean 0, std 1 (population std).

    Zero-variance columns are centered and left unscaled (std recorded as 1).
    """
    if train.n < 2:
        raise DataError("standardize needs at least 2 samples")
    means = train.features.mean(axis=0)
    stds = train.features.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    params = ScalerParams(means, stds)
    return params.apply(train), params


# ---------------------------------------------------------------------------
# splitting


def split(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition.

    The train size is ``floor(N * train_fraction)``, capped at ``N - 1`` so
    the test set is never empty.
    """
    if not (0.0 < train_fraction < 1.0):
        raise FractionOutOfRange(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = min(int(math.floor(data.n * train_fraction + 1e-9)), data.n - 1)
    if n_train < 2:
        raise FractionOutOfRange(
            f"train_fraction {train_fraction} leaves {n_train} training samples out of {data.n}")
    perm = np.random.default_rng(seed).permutation(data.n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# synthetic generator

POS_MEAN = np.array([2.0, 2.0])
POS_COV = np.array([[5.0, 1.0], [1.0, 5.0]])
NEG_MEAN = np.array([-2.0, -2.0])
NEG_COV = np.array([[10.0, 1.0], [1.0, 3.0]])


def rotation_matrix(orthogonal: bool = False, angle: float = math.pi / 4) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if orthogonal:
        return np.array([[c, -s], [s, c]])
    # matrix as printed in the source experiment: [cos, sin; sin, cos]
    return np.array([[c, s], [s, c]])


def sensitive_probability(x, orthogonal_rotation: bool = False) -> np.ndarray:
    """P(A = 1 | x) used by :func:`gen_synthetic`."""
    xr = np.atleast_2d(x) @ rotation_matrix(orthogonal_rotation).T
    p1 = multivariate_normal(POS_MEAN, POS_COV).pdf(xr)
    p0 = multivariate_normal(NEG_MEAN, NEG_COV).pdf(xr)
    return np.atleast_1d(p1 / (p1 + p0))


def gen_synthetic(n: int, seed: int, orthogonal_rotation: bool = False) -> Dataset:
    """Draw ``n`` samples from the two-Gaussian fairness benchmark.

    Stream layout on ``numpy.random.Generator(PCG64(seed))``, consumed in
    this order: ``n`` uniforms for the labels (``y = +1`` iff ``u < 0.5``),
    an ``n x 2`` block of standard normals turned into features through the
    Cholesky factor of the class covariance, then ``n`` uniforms for the
    sensitive attribute (``a = 1`` iff ``u < P(A=1 | x)``).
    """
    if n < 4:
        raise DataError("gen_synthetic needs n >= 4")
    rng = np.random.Generator(np.random.PCG64(seed))
    y = np.where(rng.random(n) < 0.5, 1, -1)
    z = rng.standard_normal((n, 2))
    pos = POS_MEAN + z @ np.linalg.cholesky(POS_COV).T
    neg = NEG_MEAN + z @ np.linalg.cholesky(NEG_COV).T
    x = np.where((y == 1)[:, None], pos, neg)
    prob = sensitive_probability(x, orthogonal_rotation)
    a = (rng.random(n) < prob).astype(np.int64)
    return Dataset(x, a, y)
