"""Corpus files, multivariate flattening, and Gaussian-process synthetic series."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from sundial.tokenizer import DataError


class ParseError(ValueError):
    pass


@dataclass
class SeriesRecord:
    id: str
    values: np.ndarray
    freq: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size == 0:
            raise DataError(f"series {self.id!r} is empty")
        bad = np.flatnonzero(~np.isfinite(self.values))
        if bad.size:
            raise DataError(f"series {self.id!r}: non-finite value at index {int(bad[0])}")

    def __len__(self) -> int:
        return self.values.size


def load_corpus(path) -> list[SeriesRecord]:
    """Read one JSON object per non-empty line."""
    records: list[SeriesRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, values = obj["id"], obj["values"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: malformed record ({e})") from e
            if not isinstance(rid, str) or not isinstance(values, list):
                raise ParseError(f"{path}:{lineno}: 'id' must be a string and 'values' a list")
            if rid in seen:
                raise ParseError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                records.append(SeriesRecord(rid, np.array(values, dtype=np.float64), obj.get("freq")))
            except (TypeError, ValueError) as e:
                if isinstance(e, DataError):
                    raise
                raise ParseError(f"{path}:{lineno}: non-numeric values ({e})") from e
    return records


def save_corpus(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"id": r.id, "values": [float(v) for v in r.values]}
            if r.freq is not None:
                obj["freq"] = r.freq
            fh.write(json.dumps(obj) + "\n")


def s3_flatten(matrix, base_id: str, freq: str | None = None) -> list[SeriesRecord]:
    """Split an M x T multivariate array into M univariate records ``base_id#m``."""
    if isinstance(matrix, np.ndarray):
        rows = list(matrix) if matrix.ndim == 2 else [matrix]
    else:
        rows = list(matrix)
    if not rows:
        raise DataError("need at least one variate")
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise DataError(f"ragged variates: lengths {sorted(lengths)}")
    return [SeriesRecord(f"{base_id}#{m}", np.asarray(r, dtype=np.float64), freq) for m, r in enumerate(rows)]


# -- KernelSynth ---------------------------------------------------------------

PERIODS = (4, 7, 12, 24, 30, 48, 52, 60, 96, 168, 336, 365)
KERNEL_FAMILIES = ("linear", "rbf", "periodic", "white")


@dataclass(frozen=True)
class Kernel:
    family: str
    params: dict = field(default_factory=dict)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        n = x.size
        d = x[:, None] - x[None, :]
        if self.family == "linear":
            u = x / max(n - 1, 1)
            c = self.params.get("offset", 0.0)
            return self.params.get("variance", 0.1) + np.outer(u - c, u - c)
        if self.family == "rbf":
            ell = self.params["length_scale"]
            return np.exp(-0.5 * (d / ell) ** 2)
        if self.family == "periodic":
            p = self.params["period"]
            ell = self.params.get("length_scale", 1.0)
            return np.exp(-2.0 * np.sin(np.pi * np.abs(d) / p) ** 2 / ell ** 2)
        if self.family == "white":
            return self.params.get("variance", 0.1) * np.eye(n)
        raise ValueError(f"unknown kernel family {self.family!r}")


def random_kernel(rng: np.random.Generator, length: int) -> Kernel:
    family = KERNEL_FAMILIES[rng.integers(len(KERNEL_FAMILIES))]
    if family == "linear":
        return Kernel("linear", {"offset": float(rng.uniform(0, 1)), "variance": float(rng.choice([0.0, 0.1, 1.0]))})
    if family == "rbf":
        return Kernel("rbf", {"length_scale": float(length * rng.choice([0.01, 0.03, 0.1, 0.3]))})
    if family == "periodic":
        periods = [p for p in PERIODS if p <= length // 3] or [max(2, length // 3)]
        return Kernel("periodic", {"period": float(rng.choice(periods)),
                                   "length_scale": float(rng.choice([0.5, 1.0, 2.0]))})
    return Kernel("white", {"variance": float(rng.choice([0.01, 0.1, 1.0]))})


def compose(kernels: list[Kernel], ops: list[str], x: np.ndarray) -> np.ndarray:
    cov = kernels[0].matrix(x)
    for k, op in zip(kernels[1:], ops):
        cov = cov + k.matrix(x) if op == "+" else cov * k.matrix(x)
    return cov


def kernel_synth(seed: int, length: int, max_kernels: int = 5, kernels: list[Kernel] | None = None,
                 ops: list[str] | None = None, series_id: str | None = None, max_retries: int = 10,
                 jitter: float = 1e-6) -> SeriesRecord:
    """Sample one path from a GP whose kernel is a random composition.

    Pass ``kernels`` (and optionally ``ops``) to fix the composition.
    The result is standardized to zero mean and unit variance.
    """
    if length < 16:
        raise ValueError(f"length must be >= 16, got {length}")
    if max_kernels < 1:
        raise ValueError(f"max_kernels must be >= 1, got {max_kernels}")
    rng = np.random.default_rng(seed)
    x = np.arange(length, dtype=np.float64)
    fixed = kernels is not None
    for _ in range(max_retries):
        if fixed:
            ks = list(kernels)
            os_ = list(ops) if ops is not None else ["+"] * (len(ks) - 1)
        else:
            n = int(rng.integers(1, max_kernels + 1))
            ks = [random_kernel(rng, length) for _ in range(n)]
            os_ = [str(rng.choice(["+", "*"])) for _ in range(n - 1)]
        cov = compose(ks, os_, x)
        cov[np.diag_indices(length)] += jitter
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            if fixed:
                break
            continue
        path = chol @ rng.standard_normal(length)
        sd = path.std()
        if not np.isfinite(sd) or sd < 1e-12:
            if fixed:
                break
            continue
        path = (path - path.mean()) / sd
        return SeriesRecord(series_id or f"synth-{seed}", path)
    raise DataError(f"could not draw a positive-definite kernel composition (seed {seed})")


def synth_corpus(seed: int, count: int, length: int, max_kernels: int = 5) -> list[SeriesRecord]:
    """``count`` KernelSynth series; series i uses seed ``seed * 1_000_003 + i``."""
    return [kernel_synth(seed * 1_000_003 + i, length, max_kernels, series_id=f"synth-{seed}-{i}")
            for i in range(count)]
