"""Synthetic stand-in datasets, CSV ingestion, train/test splits and site partitions.

CSV schema: a header row; every column not named ``y``, ``time`` or ``event`` is
a float feature. Logistic files carry ``y`` in {0,1} (or {-1,+1}); survival
files carry ``time`` >= 0 and ``event`` in {0,1}. A partition file is a JSON
array with one ``[start, end)`` row range per site.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .models import Dataset, encode_labels, preprocess
from .rng import stream

TARGET_COLUMNS = ("y", "time", "event")


class DataError(ValueError):
    pass


def make_density(seed: int, n: int = 10_000, theta=(0.5, -0.5), variance: float = 0.1) -> Dataset:
    rng = stream(seed, "data", "density")
    X = rng.normal(np.asarray(theta), np.sqrt(variance), size=(n, len(theta)))
    return Dataset(X)


def make_logistic(seed: int, n: int = 4000, d: int = 184, signal: float = 4.0) -> Dataset:
    """Correlated Gaussian features with labels from a dense logistic model, no intercept."""
    rng = stream(seed, "data", "logistic")
    factors = rng.normal(size=(n, 12))
    load = rng.normal(size=(12, d)) * 0.6
    X = factors @ load + rng.normal(size=(n, d))
    beta = rng.normal(size=d)
    z = (X - X.mean(axis=0)) @ beta
    z *= signal / z.std()
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-z))).astype(np.int64)
    return Dataset(X, y=y)


def make_survival(seed: int, n: int = 7874, d: int = 7, spread: float = 1.5,
                  censor_scale: float = 4.0) -> Dataset:
    """Exponential event times with scale exp(beta^T z) on the preprocessed features z."""
    rng = stream(seed, "data", "survival")
    cov = 0.3 * np.ones((d, d)) + 0.7 * np.eye(d)
    X = rng.multivariate_normal(np.zeros(d), cov, size=n) * rng.uniform(0.5, 3.0, size=d) + rng.uniform(-5, 5, d)
    Z = preprocess(Dataset(X)).X
    beta = rng.normal(size=d)
    eta = Z @ beta
    eta *= spread / eta.std()
    eta -= np.median(eta)
    event_time = rng.exponential(np.exp(eta))
    censor_time = rng.exponential(censor_scale, size=n)
    time = np.minimum(event_time, censor_time)
    event = (event_time <= censor_time).astype(np.int64)
    return Dataset(X, time=time, event=event)


GENERATORS = {"density": make_density, "logistic": make_logistic, "survival": make_survival}


def synthetic(model: str, seed: int) -> Dataset:
    try:
        return GENERATORS[model](seed)
    except KeyError:
        raise DataError(f"no generator for model {model!r}") from None


def load_csv(path: str | Path, model: str) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, r)) for r in reader if r]
    table = np.array(rows, dtype=np.float64)
    cols = {name: i for i, name in enumerate(header)}
    feat = [i for name, i in cols.items() if name not in TARGET_COLUMNS]
    X = table[:, feat]
    if model == "logistic":
        if "y" not in cols:
            raise DataError("logistic CSV needs a 'y' column")
        return Dataset(X, y=encode_labels(table[:, cols["y"]].astype(np.int64)))
    if model == "survival":
        if "time" not in cols or "event" not in cols:
            raise DataError("survival CSV needs 'time' and 'event' columns")
        time = table[:, cols["time"]]
        if np.any(time < 0):
            raise DataError("negative survival times")
        return Dataset(X, time=time, event=table[:, cols["event"]].astype(np.int64))
    return Dataset(X)


def save_csv(data: Dataset, path: str | Path) -> None:
    names = [f"x{j}" for j in range(data.d)]
    cols = [data.X]
    if data.y is not None:
        names.append("y")
        cols.append(data.y[:, None])
    if data.time is not None:
        names += ["time", "event"]
        cols += [data.time[:, None], data.event[:, None]]
    table = np.hstack(cols)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(table.tolist())


def load_partition(path: str | Path, n: int) -> list[np.ndarray]:
    ranges = json.loads(Path(path).read_text())
    parts = []
    for item in ranges:
        start, end = int(item[0]), int(item[1])
        if not 0 <= start < end <= n:
            raise DataError(f"partition range {item} outside 0..{n}")
        parts.append(np.arange(start, end))
    return parts


def train_test_split(data: Dataset, seed: int, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    rng = stream(seed, "split")
    perm = rng.permutation(data.n)
    cut = int(round(train_fraction * data.n))
    return data.take(np.sort(perm[:cut])), data.take(np.sort(perm[cut:]))


def partition_rows(n: int, K: int, seed: int, ratio=None) -> list[np.ndarray]:
    """Shuffle rows and split them across K sites, equally or by ``ratio`` weights."""
    rng = stream(seed, "partition")
    perm = rng.permutation(n)
    weights = np.ones(K) if ratio is None else np.asarray(ratio, dtype=np.float64)
    if len(weights) != K:
        raise DataError(f"ratio has {len(weights)} entries for {K} sites")
    bounds = np.round(np.cumsum(weights) / weights.sum() * n).astype(int)
    starts = np.concatenate([[0], bounds[:-1]])
    return [np.sort(perm[s:e]) for s, e in zip(starts, bounds)]
