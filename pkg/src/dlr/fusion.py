"""Fusion of local readouts into one perceptron, and entropy outlier rejection.

Each transferred readout becomes a branch: an FC layer holding ``W_out^T``
followed by layer normalization across that branch's outputs. A fixed merge
map sends the concatenated branch outputs to the global labels, then a
Softmax (cross-entropy) or ReLU (squared error) head is applied.
"""
from __future__ import annotations

import copy
import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .complexity import TRAIN, ComplexityCounter, count
from .errors import ConfigError, DataError, FormatError, NumericError
from .ridge import WeightModel, one_hot
from .signal_model import make_rng

EPS = 1e-5
SOFTMAX, RELU = "softmax", "relu"
HEADS = {SOFTMAX: 0, RELU: 1}
CE, MSE = "ce", "mse"
LOSS_FOR_HEAD = {SOFTMAX: CE, RELU: MSE}


@dataclass
class Branch:
    W: np.ndarray  # (N, Q_i)
    labels: tuple[int, ...]
    gamma: np.ndarray = None
    beta: np.ndarray = None
    eps: float = EPS

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        q = self.W.shape[1]
        self.labels = tuple(int(v) for v in self.labels)
        self.gamma = np.ones(q) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.zeros(q) if self.beta is None else np.asarray(self.beta, dtype=np.float64)
        if len(self.labels) != q or self.gamma.shape != (q,) or self.beta.shape != (q,):
            raise DataError("branch parameter shapes disagree")

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def Q(self) -> int:
        return self.W.shape[1]


@dataclass
class FusionNet:
    branches: list[Branch]
    merge_map: np.ndarray  # (sum Q_i, Q_global); column c averages the outputs feeding label c
    global_labels: tuple[int, ...]
    head: str = SOFTMAX
    reservoir_hash: int = 0

    def __post_init__(self):
        self.merge_map = np.asarray(self.merge_map, dtype=np.float64)
        self.global_labels = tuple(int(v) for v in self.global_labels)
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if not self.branches:
            raise DataError("a fusion net needs at least one branch")
        if len({b.N for b in self.branches}) != 1:
            raise DataError("branches disagree on the state dimension")
        rows = sum(b.Q for b in self.branches)
        if self.merge_map.shape != (rows, len(self.global_labels)):
            raise DataError(f"merge map must be {rows}x{len(self.global_labels)}")
        if not np.allclose(self.merge_map.sum(axis=0), 1.0, atol=1e-12):
            raise DataError("every global label must be a convex combination of branch outputs")

    @property
    def N(self) -> int:
        return self.branches[0].N

    @property
    def Q(self) -> int:
        return len(self.global_labels)

    @property
    def loss(self) -> str:
        return LOSS_FOR_HEAD[self.head]

    @property
    def parameter_count(self) -> int:
        return sum(b.W.size + 2 * b.Q for b in self.branches)

    def copy(self) -> "FusionNet":
        return copy.deepcopy(self)

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(struct.pack("<4sHHBQ", NET_MAGIC, NET_VERSION, len(self.branches), HEADS[self.head], self.reservoir_hash))
        for b in self.branches:
            out.write(struct.pack("<IId", b.N, b.Q, b.eps))
            out.write(struct.pack(f"<{b.Q}H", *b.labels))
            for arr in (b.W, b.gamma, b.beta):
                out.write(arr.astype("<f4").tobytes())
        out.write(struct.pack("<II", *self.merge_map.shape))
        out.write(self.merge_map.astype("<f4").tobytes())
        out.write(struct.pack(f"<H{self.Q}H", self.Q, *self.global_labels))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FusionNet":
        buf = memoryview(raw)
        pos = 0

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise FormatError("truncated fusion net file")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        def floats(n):
            nonlocal pos
            if pos + 4 * n > len(buf):
                raise FormatError("truncated fusion net file")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64)
            pos += 4 * n
            return arr

        magic, version, nb, head, rhash = take("<4sHHBQ")
        if magic != NET_MAGIC:
            raise FormatError(f"bad fusion net magic {magic!r}")
        if version != NET_VERSION:
            raise FormatError(f"unsupported fusion net version {version}")
        heads = {v: k for k, v in HEADS.items()}
        if head not in heads:
            raise FormatError(f"unknown head tag {head}")
        branches = []
        for _ in range(nb):
            n, q, eps = take("<IId")
            labels = take(f"<{q}H")
            W = floats(n * q).reshape(n, q)
            branches.append(Branch(W, labels, floats(q), floats(q), eps))
        r, c = take("<II")
        merge = floats(r * c).reshape(r, c)
        (q,) = take("<H")
        labels = take(f"<{q}H")
        if pos != len(buf):
            raise FormatError("trailing bytes in fusion net file")
        # merge weights went through f32; restore exact column sums
        merge = merge / merge.sum(axis=0, keepdims=True)
        return cls(branches, merge, labels, heads[head], rhash)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FusionNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


NET_MAGIC = b"DLRN"
NET_VERSION = 1


# ---------------------------------------------------------------------------
# transfer


def _check_pair(m1: WeightModel, m2: WeightModel) -> None:
    if m1.N != m2.N:
        raise DataError(f"models have different state sizes ({m1.N} vs {m2.N})")
    if m1.reservoir_hash != m2.reservoir_hash:
        raise DataError("models come from different reservoirs")


def transfer_single(model: WeightModel, head: str = SOFTMAX) -> FusionNet:
    branch = Branch(model.W_out.T.copy(), model.labels)
    return FusionNet([branch], np.eye(model.Q), model.labels, head, model.reservoir_hash)


def transfer_disjoint(m1: WeightModel, m2: WeightModel, head: str = SOFTMAX) -> FusionNet:
    """Two branches stacked side by side; outputs are concatenated."""
    _check_pair(m1, m2)
    if set(m1.labels) & set(m2.labels):
        raise DataError("label sets overlap; use transfer_overlapping")
    return _merge([m1, m2], None, head)


def transfer_overlapping(m1: WeightModel, m2: WeightModel, counts: Sequence[Mapping[int, float]] | None = None,
                         head: str = SOFTMAX) -> FusionNet:
    """Shared labels average the two branch outputs, weighted by training counts.

    ``counts[i][label]`` is the number of training bursts model ``i`` saw
    for ``label``; missing counts mean equal weights.
    """
    _check_pair(m1, m2)
    if not set(m1.labels) & set(m2.labels):
        raise DataError("label sets are disjoint; use transfer_disjoint")
    return _merge([m1, m2], counts, head)


def _merge(models: Sequence[WeightModel], counts, head: str) -> FusionNet:
    global_labels = tuple(sorted(set().union(*(m.labels for m in models))))
    col = {c: i for i, c in enumerate(global_labels)}
    rows = sum(m.Q for m in models)
    merge = np.zeros((rows, len(global_labels)))
    r = 0
    for i, m in enumerate(models):
        for c in m.labels:
            w = 1.0 if counts is None else float(counts[i].get(c, 1.0))
            if w < 0:
                raise DataError("training counts must be non-negative")
            merge[r, col[c]] = w
            r += 1
    totals = merge.sum(axis=0, keepdims=True)
    if np.any(totals == 0):
        raise DataError("a shared label has zero total training count")
    merge /= totals
    branches = [Branch(m.W_out.T.copy(), m.labels) for m in models]
    return FusionNet(branches, merge, global_labels, head, models[0].reservoir_hash)


# ---------------------------------------------------------------------------
# forward / training


@dataclass
class _Cache:
    X: np.ndarray
    norm: list[np.ndarray]
    inv_std: list[np.ndarray]
    v: np.ndarray
    out: np.ndarray


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward(net: FusionNet, X: np.ndarray) -> _Cache:
    norm, inv_std, parts = [], [], []
    for b in net.branches:
        z = X @ b.W
        mu = z.mean(axis=1, keepdims=True)
        s = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + b.eps)
        n = (z - mu) * s
        norm.append(n)
        inv_std.append(s)
        parts.append(n * b.gamma + b.beta)
    v = np.concatenate(parts, axis=1) @ net.merge_map
    out = _softmax(v) if net.head == SOFTMAX else np.maximum(v, 0.0)
    return _Cache(X, norm, inv_std, v, out)


def _states(net: FusionNet, X) -> np.ndarray:
    if hasattr(X, "reservoir_hash"):
        if net.reservoir_hash and X.reservoir_hash != net.reservoir_hash:
            raise DataError("states come from a different reservoir than the net")
        X = X.X if hasattr(X, "X") else X.x
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != net.N:
        raise DataError(f"states have {X.shape[1]} entries, net expects {net.N}")
    return X, squeeze


def forward(net: FusionNet, X) -> np.ndarray:
    """Head output for one state (1-D) or a batch of states (2-D)."""
    X, squeeze = _states(net, X)
    out = _forward(net, X).out
    if not np.all(np.isfinite(out)):
        raise NumericError("fusion net produced non-finite output")
    return out[0] if squeeze else out


def classify(net: FusionNet, X) -> np.ndarray:
    return np.asarray(net.global_labels)[np.argmax(forward(net, np.atleast_2d(X)), axis=1)]


def net_accuracy(net: FusionNet, X, y) -> float:
    return float(np.mean(classify(net, X) == np.asarray(y)))


def _loss(net: FusionNet, out: np.ndarray, Y: np.ndarray) -> float:
    if net.head == SOFTMAX:
        return float(-np.mean(np.sum(Y * np.log(np.clip(out, 1e-300, None)), axis=1)))
    return float(np.mean((out - Y) ** 2))


def loss_and_grads(net: FusionNet, X, y) -> tuple[float, list[dict[str, np.ndarray]]]:
    """Loss and gradients w.r.t. each branch's ``W``, ``gamma`` and ``beta``.

    Softmax heads use cross-entropy on the labels; ReLU heads use mean
    squared error against one-hot label vectors.
    """
    X, _ = _states(net, X)
    Y = one_hot(np.asarray(y), net.global_labels)
    c = _forward(net, X)
    B = X.shape[0]
    if net.head == SOFTMAX:
        dv = (c.out - Y) / B
    else:
        dv = 2.0 * (c.out - Y) * (c.v > 0) / Y.size
    du = dv @ net.merge_map.T
    grads, start = [], 0
    for b, n, s in zip(net.branches, c.norm, c.inv_std):
        d = du[:, start : start + b.Q]
        start += b.Q
        dn = d * b.gamma
        dz = s * (dn - dn.mean(axis=1, keepdims=True) - n * (dn * n).mean(axis=1, keepdims=True))
        grads.append({"W": X.T @ dz, "gamma": (d * n).sum(axis=0), "beta": d.sum(axis=0)})
    return _loss(net, c.out, Y), grads


def _step_multiplies(net: FusionNet, batch: int) -> int:
    # forward and weight-gradient matmuls dominate; layer norm and merge are O(B Q)
    fc = sum(batch * b.N * b.Q for b in net.branches)
    small = sum(batch * b.Q * 6 for b in net.branches) + 2 * batch * int(np.count_nonzero(net.merge_map))
    return 2 * fc + small


@dataclass
class TrainResult:
    net: FusionNet
    losses: list[float] = field(default_factory=list)


def train(net: FusionNet, X, y, epochs: int = 50, lr: float = 0.05, batch: int | None = None,
          seed: int = 0, counter: ComplexityCounter | None = None) -> TrainResult:
    """Gradient descent on FC weights and layer-norm parameters.

    Full-batch by default; ``batch`` switches to shuffled minibatches. The
    merge map stays frozen. ``losses[e]`` is the full-data loss before
    epoch ``e``; the last entry is the final loss.
    """
    if epochs < 0 or lr < 0:
        raise ConfigError("epochs and lr must be non-negative")
    X, _ = _states(net, X)
    y = np.asarray(y)
    if not set(np.unique(y).tolist()) <= set(net.global_labels):
        raise DataError("training labels outside the net's label set")
    net = net.copy()
    rng = make_rng(seed, 0x7A)
    losses = []
    for _ in range(epochs):
        if batch is None or batch >= len(y):
            batches = [np.arange(len(y))]
        else:
            order = rng.permutation(len(y))
            batches = [order[i : i + batch] for i in range(0, len(y), batch)]
        for j, idx in enumerate(batches):
            loss, grads = loss_and_grads(net, X[idx], y[idx])
            if j == 0 and len(batches) == 1:
                losses.append(loss)
            if not np.isfinite(loss):
                raise NumericError("training diverged; lower the learning rate")
            count(counter, TRAIN, _step_multiplies(net, len(idx)))
            if lr == 0:
                continue
            for b, g in zip(net.branches, grads):
                b.W -= lr * g["W"]
                b.gamma -= lr * g["gamma"]
                b.beta -= lr * g["beta"]
        if len(batches) > 1:
            losses.append(_loss(net, _forward(net, X).out, one_hot(y, net.global_labels)))
    losses.append(_loss(net, _forward(net, X).out, one_hot(y, net.global_labels)))
    if not np.isfinite(losses[-1]):
        raise NumericError("training diverged; lower the learning rate")
    return TrainResult(net, losses)


def random_init(net: FusionNet, seed: int = 0, scale: float | None = None) -> FusionNet:
    """Same architecture with Gaussian FC weights and fresh layer norms."""
    rng = make_rng(seed, 0x52)
    out = net.copy()
    for b in out.branches:
        std = scale if scale is not None else 1.0 / np.sqrt(b.N)
        b.W = rng.normal(0.0, std, b.W.shape)
        b.gamma = np.ones(b.Q)
        b.beta = np.zeros(b.Q)
    return out


# ---------------------------------------------------------------------------
# entropy outlier detection


def entropy_stat(p) -> np.ndarray | float:
    """Shannon entropy (nats) of a distribution, or of each row of a batch."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1) > 1e-6):
        raise DataError("entropy needs a probability vector")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


@dataclass(frozen=True)
class OutlierDetector:
    threshold: float
    net: FusionNet = field(repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.threshold) or self.threshold < 0:
            raise DataError("entropy threshold must be finite and non-negative")


def _entropies(net: FusionNet, X) -> np.ndarray:
    if net.head != SOFTMAX:
        raise ConfigError("entropy detection needs a softmax head")
    return entropy_stat(forward(net, np.atleast_2d(np.asarray(X.X if hasattr(X, "X") else X))))


def calibrate_threshold(net: FusionNet, X_train) -> OutlierDetector:
    """Threshold at the largest training entropy, so every training input passes."""
    X = np.atleast_2d(np.asarray(X_train.X if hasattr(X_train, "X") else X_train, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("need at least one training state")
    return OutlierDetector(float(np.max(_entropies(net, X))), net)


def detect_outlier(detector: OutlierDetector, x) -> tuple[bool, float]:
    h = float(_entropies(detector.net, np.atleast_2d(x))[0])
    return h > detector.threshold, h


@dataclass
class ROC:
    thresholds: np.ndarray
    fpr: np.ndarray  # outliers accepted
    tpr: np.ndarray  # legitimate inputs accepted
    auc: float
    fp_at_tp100: float
    legit_entropy: np.ndarray
    outlier_entropy: np.ndarray

    def histogram_overlap(self, bins: int = 20) -> float:
        """Shared probability mass of the two entropy histograms."""
        lo = min(self.legit_entropy.min(), self.outlier_entropy.min())
        hi = max(self.legit_entropy.max(), self.outlier_entropy.max())
        edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
        a = np.histogram(self.legit_entropy, edges)[0] / self.legit_entropy.size
        b = np.histogram(self.outlier_entropy, edges)[0] / self.outlier_entropy.size
        return float(np.minimum(a, b).sum())

    def roc_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([f"{t:.9g}", f"{f:.6f}", f"{p:.6f}"])
        return out.getvalue()

    def histogram_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["H", "population"])
        for h in self.legit_entropy:
            w.writerow([f"{h:.9g}", "legitimate"])
        for h in self.outlier_entropy:
            w.writerow([f"{h:.9g}", "outlier"])
        return out.getvalue()


def roc_from_entropies(h_legit, h_out) -> ROC:
    h_legit = np.asarray(h_legit, dtype=np.float64)
    h_out = np.asarray(h_out, dtype=np.float64)
    if h_legit.size == 0 or h_out.size == 0:
        raise DataError("ROC needs both populations")
    # accept when H <= threshold; sweep every observed value
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([h_legit, h_out]))])
    tpr = np.searchsorted(np.sort(h_legit), thresholds, side="right") / h_legit.size
    fpr = np.searchsorted(np.sort(h_out), thresholds, side="right") / h_out.size
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    fp100 = float(np.mean(h_out <= h_legit.max()))
    return ROC(thresholds, fpr, tpr, auc, fp100, h_legit, h_out)


def roc_curve(net: FusionNet, legit, outliers) -> ROC:
    return roc_from_entropies(_entropies(net, legit), _entropies(net, outliers))
