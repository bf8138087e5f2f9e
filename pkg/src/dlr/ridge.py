"""Linear readout: closed-form ridge regression, prediction, grid search."""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .complexity import FIT, PREDICT, ComplexityCounter, count, fit_multiplies
from .errors import ConfigError, DataError, FormatError, NumericError

DEFAULT_LAMBDA = 1e-2

WEIGHTS_MAGIC = b"DLRW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sHHIdQ")


@dataclass
class WeightModel:
    W_out: np.ndarray  # (Q, N)
    labels: tuple[int, ...]
    lam: float = DEFAULT_LAMBDA
    transform_id: str = ""
    reservoir_hash: int = 0
    trained_on: int = 0

    def __post_init__(self):
        self.W_out = np.atleast_2d(np.asarray(self.W_out, dtype=np.float64))
        self.labels = tuple(int(v) for v in self.labels)
        if self.W_out.shape[0] != len(self.labels):
            raise DataError(f"W_out has {self.W_out.shape[0]} rows for {len(self.labels)} labels")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("labels must be unique")
        if len(self.labels) < 2:
            raise DataError("a readout needs at least two classes")
        if not np.all(np.isfinite(self.W_out)):
            raise NumericError("W_out has non-finite entries")

    @property
    def Q(self) -> int:
        return self.W_out.shape[0]

    @property
    def N(self) -> int:
        return self.W_out.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.W_out.size

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, self.Q, self.N, self.lam, self.reservoir_hash)
        labels = struct.pack(f"<{self.Q}H", *self.labels)
        return head + labels + self.W_out.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightModel":
        if len(raw) < _HEADER.size:
            raise FormatError("truncated weight header")
        magic, version, q, n, lam, rhash = _HEADER.unpack_from(raw)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad weight magic {magic!r}")
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weight version {version}")
        off = _HEADER.size
        expected = off + 2 * q + 4 * q * n
        if len(raw) != expected:
            raise FormatError(f"weight file has {len(raw)} bytes, expected {expected}")
        labels = struct.unpack_from(f"<{q}H", raw, off)
        W = np.frombuffer(raw, dtype="<f4", count=q * n, offset=off + 2 * q).reshape(q, n)
        return cls(W.astype(np.float64), labels, lam, reservoir_hash=rhash)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def wire_size(q: int, n: int) -> int:
    """Bytes of a serialized model: header + labels + f32 payload."""
    return _HEADER.size + 2 * q + 4 * q * n


def one_hot(y: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    index = {c: i for i, c in enumerate(labels)}
    try:
        rows = np.fromiter((index[int(v)] for v in y), dtype=np.intp, count=len(y))
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} not in label list") from exc
    Y = np.zeros((len(y), len(labels)))
    Y[np.arange(len(y)), rows] = 1.0
    return Y


def fit_rr(X, Y, lam: float = DEFAULT_LAMBDA, labels: Sequence[int] | None = None,
           counter: ComplexityCounter | None = None, transform_id: str = "",
           reservoir_hash: int = 0) -> WeightModel:
    """W_out = ((X^T X + lam I)^-1 X^T Y)^T via Cholesky."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    b, n = X.shape
    if b < 1 or Y.shape[0] != b:
        raise DataError(f"X has {b} rows but Y has {Y.shape[0]}")
    if lam < 0 or not math.isfinite(lam):
        raise ConfigError("lambda must be finite and non-negative")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("non-finite training data")
    q = Y.shape[1]
    A = X.T @ X
    A[np.diag_indices(n)] += lam
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError("X^T X + lambda I is singular; increase lambda") from exc
    W = scipy.linalg.cho_solve(factor, X.T @ Y, check_finite=False)
    count(counter, FIT, fit_multiplies(b, n, q))
    if labels is None:
        labels = range(q)
    return WeightModel(W.T, tuple(labels), lam, transform_id, reservoir_hash, b)


def fit_labels(X, y, lam: float = DEFAULT_LAMBDA, labels: Sequence[int] | None = None, **kw) -> WeightModel:
    """``fit_rr`` on integer labels; one-hot targets in ``labels`` order."""
    labels = tuple(sorted(set(int(v) for v in y))) if labels is None else tuple(labels)
    return fit_rr(X, one_hot(y, labels), lam, labels, **kw)


def _check_hash(model: WeightModel, reservoir_hash) -> None:
    if reservoir_hash is not None and model.reservoir_hash and reservoir_hash != model.reservoir_hash:
        raise DataError("state vector comes from a different reservoir than the model")


def predict(model: WeightModel, x, reservoir_hash: int | None = None,
            counter: ComplexityCounter | None = None) -> tuple[int, np.ndarray]:
    """Class and score vector; ties go to the lowest row."""
    if hasattr(x, "reservoir_hash"):
        reservoir_hash = x.reservoir_hash
        x = x.x
    _check_hash(model, reservoir_hash)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.N,):
        raise DataError(f"state has shape {x.shape}, model expects ({model.N},)")
    scores = model.W_out @ x
    count(counter, PREDICT, model.W_out.size)
    return model.labels[int(np.argmax(scores))], scores


def predict_batch(model: WeightModel, X, reservoir_hash: int | None = None,
                  counter: ComplexityCounter | None = None) -> np.ndarray:
    if hasattr(X, "reservoir_hash"):
        reservoir_hash = X.reservoir_hash
        X = X.X
    _check_hash(model, reservoir_hash)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.N:
        raise DataError(f"states have {X.shape[1]} columns, model expects {model.N}")
    count(counter, PREDICT, X.shape[0] * model.W_out.size)
    return np.asarray(model.labels)[np.argmax(X @ model.W_out.T, axis=1)]


def accuracy(model: WeightModel, X, y, **kw) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("empty evaluation set")
    return float(np.mean(predict_batch(model, X, **kw) == y))


class LambdaSweep:
    """Reuses one Gram matrix across many lambdas."""

    def __init__(self, X, y, labels: Sequence[int] | None = None):
        self.X = np.asarray(X, dtype=np.float64)
        self.labels = tuple(sorted(set(int(v) for v in y))) if labels is None else tuple(labels)
        self.G = self.X.T @ self.X
        self.XtY = self.X.T @ one_hot(y, self.labels)

    def fit(self, lam: float) -> WeightModel:
        A = self.G.copy()
        A[np.diag_indices_from(A)] += lam
        try:
            W = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True, check_finite=False), self.XtY)
        except np.linalg.LinAlgError as exc:
            raise NumericError("X^T X + lambda I is singular; increase lambda") from exc
        return WeightModel(W.T, self.labels, lam, trained_on=self.X.shape[0])

    def accuracies(self, lams, X_val, y_val) -> list[float]:
        out = []
        for lam in lams:
            try:
                out.append(accuracy(self.fit(lam), X_val, y_val))
            except NumericError:
                out.append(float("nan"))
        return out


# ---------------------------------------------------------------------------
# hierarchical grid search


@dataclass
class GridResult:
    best: dict
    accuracy: float
    table: list[tuple[dict, float]] = field(default_factory=list)


def _cost_key(point: Mapping) -> tuple:
    # cheaper first: smaller N, then more splits
    return (point.get("N", 0), -point.get("k", 1))


def _refine_values(values: Sequence, incumbent) -> list:
    """Midpoints between the incumbent and its grid neighbours."""
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        return [incumbent]
    ordered = sorted(set(values))
    i = ordered.index(incumbent)
    out = [incumbent]
    for j in (i - 1, i + 1):
        if 0 <= j < len(ordered):
            a, b = ordered[j], incumbent
            if isinstance(a, int) and isinstance(b, int):
                mid = (a + b) // 2
            elif a > 0 and b > 0 and max(a, b) / min(a, b) >= 10:
                mid = math.sqrt(a * b)  # log-spaced axes such as lambda
            else:
                mid = (a + b) / 2
            if mid not in values:
                out.append(mid)
    return out


def grid_search(space: Mapping[str, Sequence], evaluate: Callable[[dict], float],
                refine: bool = True) -> GridResult:
    """Coarse exhaustive pass, then one refined pass around the incumbent.

    ``evaluate`` maps a point to validation accuracy. The best point has the
    highest accuracy; ties go to smaller ``N``, then larger ``k``, then the
    earliest point evaluated.
    """
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("empty search grid")
    names = list(space)
    table: list[tuple[dict, float]] = []
    seen = {}

    def run(points):
        for values in points:
            point = dict(zip(names, values))
            key = tuple(values)
            if key not in seen:
                seen[key] = float(evaluate(point))
                table.append((point, seen[key]))

    def incumbent():
        order = sorted(range(len(table)), key=lambda i: (-table[i][1], _cost_key(table[i][0]), i))
        return table[order[0]]

    run(itertools.product(*(space[n] for n in names)))
    if refine:
        best, _ = incumbent()
        run(itertools.product(*(_refine_values(space[n], best[n]) for n in names)))
    best, acc = incumbent()
    return GridResult(best, acc, table)
