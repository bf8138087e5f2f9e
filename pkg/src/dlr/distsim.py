"""In-process simulation of DLR nodes that exchange readouts and fuse them.

Nodes sit in one full-mesh neighbourhood with reliable delivery and no
relaying. Every node broadcasts its serialized ``WeightModel`` once; the
ledger records the bytes each node puts on the air, the copies delivered to
each neighbour, and the multiplies spent on local fitting and retraining.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .complexity import FIT, TRAIN, ComplexityCounter
from .errors import ConfigError, DataError, FormatError
from .fusion import (SOFTMAX, FusionNet, _merge, net_accuracy, random_init, train,
                     transfer_single)
from .reservoir import ReservoirConfig, run_batch
from .ridge import DEFAULT_LAMBDA, WeightModel, fit_labels, wire_size
from .signal_model import make_rng

DISJOINT, OVERLAPPING = "disjoint", "overlapping"
BYTES_PER_WEIGHT = 4


@dataclass
class NodeSpec:
    """One node: its devices, local training slice and the shared reservoir.

    ``inputs`` are loop inputs (transformed bursts); precomputed ``states``
    skip the reservoir run.
    """

    node_id: int
    devices: tuple[int, ...]
    labels: np.ndarray
    cfg: ReservoirConfig
    inputs: np.ndarray | None = None
    states: np.ndarray | None = None

    def __post_init__(self):
        self.devices = tuple(int(d) for d in self.devices)
        self.labels = np.asarray(self.labels)
        if not self.devices:
            raise DataError(f"node {self.node_id} has no devices")
        if self.inputs is None and self.states is None:
            raise DataError(f"node {self.node_id} has neither inputs nor states")
        if not set(np.unique(self.labels).tolist()) <= set(self.devices):
            raise DataError(f"node {self.node_id} has training labels outside its device set")

    def local_states(self, threads: int = 1) -> np.ndarray:
        if self.states is None:
            self.states = run_batch(self.inputs, self.cfg, threads=threads)
        return self.states


@dataclass(frozen=True)
class ExchangeMessage:
    sender: int
    payload: bytes

    @property
    def byte_size(self) -> int:
        return len(self.payload)

    @property
    def model(self) -> WeightModel:
        return WeightModel.from_bytes(self.payload)


@dataclass
class CostLedger:
    transmitted: dict[int, int] = field(default_factory=dict)  # bytes put on the air
    payload: dict[int, int] = field(default_factory=dict)  # weight bytes among them
    delivered: dict[int, int] = field(default_factory=dict)  # copies that reached neighbours
    received: dict[int, int] = field(default_factory=dict)
    fit_multiplies: dict[int, int] = field(default_factory=dict)
    retrain_multiplies: dict[int, int] = field(default_factory=dict)
    transfer_only: bool = True

    def record(self, msg: ExchangeMessage, payload_bytes: int, receivers: Sequence[int]) -> None:
        s = msg.sender
        self.transmitted[s] = self.transmitted.get(s, 0) + msg.byte_size
        self.payload[s] = self.payload.get(s, 0) + payload_bytes
        self.delivered[s] = self.delivered.get(s, 0) + msg.byte_size * len(receivers)
        for r in receivers:
            self.received[r] = self.received.get(r, 0) + msg.byte_size

    def mean_payload(self, nodes: Sequence[int]) -> float:
        return sum(self.payload.get(n, 0) for n in nodes) / len(nodes)

    def mean_header(self, nodes: Sequence[int]) -> float:
        return sum(self.transmitted.get(n, 0) - self.payload.get(n, 0) for n in nodes) / len(nodes)

    @property
    def conserved(self) -> bool:
        return sum(self.delivered.values()) == sum(self.received.values())

    @property
    def total_retrain(self) -> int:
        return sum(self.retrain_multiplies.values())

    def summary_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["node", "transmitted_bytes", "payload_bytes", "delivered_bytes", "received_bytes",
                    "fit_multiplies", "retrain_multiplies"])
        for n in sorted(set(self.fit_multiplies) | set(self.transmitted) | set(self.received)):
            w.writerow([n, self.transmitted.get(n, 0), self.payload.get(n, 0), self.delivered.get(n, 0),
                        self.received.get(n, 0), self.fit_multiplies.get(n, 0), self.retrain_multiplies.get(n, 0)])
        return out.getvalue()


@dataclass
class ScenarioResult:
    nets: dict[int, FusionNet]
    models: dict[int, WeightModel]
    ledger: CostLedger
    accuracy: dict[int, float]
    transfer_accuracy: dict[int, float]
    local_accuracy: dict[int, float]
    retrain_epochs: dict[int, int] = field(default_factory=dict)

    def accuracy_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["node", "local_accuracy", "transfer_accuracy", "final_accuracy", "retrain_epochs"])
        for n in sorted(self.accuracy):
            w.writerow([n, f"{self.local_accuracy[n]:.6f}", f"{self.transfer_accuracy[n]:.6f}",
                        f"{self.accuracy[n]:.6f}", self.retrain_epochs.get(n, 0)])
        return out.getvalue()


def partition_devices(Q: int, L: int, overlap: int = 0) -> list[tuple[int, ...]]:
    """Contiguous device blocks; with ``overlap`` neighbouring blocks share that many devices.

    For ``L = 2`` and ``overlap = Q/5`` this gives ``{0..3Q/5-1}`` and
    ``{2Q/5..Q-1}``.
    """
    if L < 1 or Q < L:
        raise ConfigError("need 1 <= L <= Q")
    if overlap < 0 or (L > 1 and overlap >= Q // L):
        raise ConfigError("overlap must be smaller than a node's exclusive block")
    edges = np.linspace(0, Q, L + 1).round().astype(int)
    sets = []
    for p in range(L):
        lo = edges[p] - (overlap - overlap // 2 if p > 0 else 0)
        hi = edges[p + 1] + (overlap // 2 if p < L - 1 else 0)
        sets.append(tuple(range(lo, hi)))
    return sets


def split_training(labels: np.ndarray, device_sets: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Row indices per node; bursts of shared devices are dealt out round-robin."""
    labels = np.asarray(labels)
    owners = {}
    for p, devs in enumerate(device_sets):
        for d in devs:
            owners.setdefault(d, []).append(p)
    picks: list[list[int]] = [[] for _ in device_sets]
    seen: dict[int, int] = {}
    for i, c in enumerate(labels.tolist()):
        own = owners.get(c)
        if not own:
            continue
        k = seen.get(c, 0)
        picks[own[k % len(own)]].append(i)
        seen[c] = k + 1
    return [np.asarray(p, dtype=np.intp) for p in picks]


def comm_cost(device_counts: Sequence[int], b: int = BYTES_PER_WEIGHT, N: int = 1000) -> float:
    """Average bytes each node transmits: b N / L * sum(n_i)."""
    L = len(device_counts)
    if L < 1:
        raise ConfigError("need at least one node")
    return b * N / L * sum(device_counts)


def retrain_cost(E: int, N: int, Q: int, B: int, ell: float = 1.0) -> float:
    """Multiply estimate ``ell * E * N * Q * B`` for retraining."""
    if min(E, N, Q, B) < 0 or ell < 0:
        raise ConfigError("retrain cost arguments must be non-negative")
    return ell * E * N * Q * B


@dataclass
class RetrainMeasurement:
    estimate: float
    measured: int
    ell: float


def measure_retrain_cost(E: int, N: int, Q: int, B: int, seed: int = 0) -> RetrainMeasurement:
    """Train a toy single-branch net and compare its counted multiplies with the estimate."""
    rng = make_rng(seed, 0xC0)
    X = rng.normal(size=(B, N))
    y = np.arange(B) % Q
    model = WeightModel(rng.normal(size=(Q, N)), tuple(range(Q)))
    counter = ComplexityCounter()
    train(transfer_single(model), X, y, epochs=E, lr=0.01, counter=counter)
    est = retrain_cost(E, N, Q, B)
    measured = counter[TRAIN]
    return RetrainMeasurement(est, measured, measured / est if est else 0.0)


def _select_epochs(net: FusionNet, X, y, X_val, y_val, epochs: int, lr: float, counter):
    """Train up to ``epochs`` and keep the epoch with the best validation accuracy."""
    best_net, best_acc, best_e = net, net_accuracy(net, X_val, y_val), 0
    cur = net
    for e in range(1, epochs + 1):
        cur = train(cur, X, y, epochs=1, lr=lr, counter=counter).net
        acc = net_accuracy(cur, X_val, y_val)
        if acc > best_acc:
            best_net, best_acc, best_e = cur, acc, e
    return best_net, best_e


def run_scenario(nodes: Sequence[NodeSpec], test_states: np.ndarray, test_labels: np.ndarray,
                 mode: str = DISJOINT, retrain: bool = False, lam: float = DEFAULT_LAMBDA,
                 epochs: int = 50, lr: float = 0.05, retrain_fraction: float = 0.5,
                 head: str = SOFTMAX, seed: int = 0, threads: int = 1) -> ScenarioResult:
    """Local fit, broadcast, fusion and optional retraining on every node.

    Retraining uses ``retrain_fraction`` of the pooled training bursts of
    all nodes; the rest validates the epoch count, so epoch 0 (transfer
    only) is kept when training does not help.
    """
    if mode not in (DISJOINT, OVERLAPPING):
        raise ConfigError(f"unknown scenario mode {mode!r}")
    if not nodes:
        raise ConfigError("scenario has no nodes")
    hashes = {n.cfg.hash() for n in nodes}
    if len(hashes) != 1:
        raise DataError("nodes use different reservoirs; transfer needs identical loops")
    rhash = hashes.pop()
    ids = [n.node_id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate node ids")
    ledger = CostLedger(transfer_only=not retrain)
    models, counts = {}, {}
    for n in sorted(nodes, key=lambda n: n.node_id):
        counter = ComplexityCounter()
        models[n.node_id] = fit_labels(n.local_states(threads), n.labels, lam, labels=n.devices,
                                       counter=counter, reservoir_hash=rhash)
        ledger.fit_multiplies[n.node_id] = counter[FIT]
        counts[n.node_id] = {c: int(np.sum(n.labels == c)) for c in n.devices}

    inbox: dict[int, list[ExchangeMessage]] = {i: [] for i in ids}
    for i in sorted(ids):
        m = models[i]
        msg = ExchangeMessage(i, m.to_bytes())
        assert msg.byte_size == wire_size(m.Q, m.N)
        receivers = [j for j in sorted(ids) if j != i]
        ledger.record(msg, BYTES_PER_WEIGHT * m.Q * m.N, receivers)
        for j in receivers:
            inbox[j].append(msg)

    if retrain:
        X_all = np.concatenate([n.local_states(threads) for n in nodes])
        y_all = np.concatenate([n.labels for n in nodes])
        order = make_rng(seed, 0x5E).permutation(len(y_all))
        cut = int(round(retrain_fraction * len(y_all)))
        fit_idx, val_idx = order[:cut], order[cut:]
        if len(val_idx) == 0:
            val_idx = fit_idx

    nets, acc, acc0, local, epochs_used = {}, {}, {}, {}, {}
    for i in sorted(ids):
        own = models[i]
        local[i] = net_accuracy(transfer_single(own), *_restrict(test_states, test_labels, own.labels))
        received = sorted(inbox[i], key=lambda m: m.sender)
        group = [own] + [msg.model for msg in received]
        senders = [i] + [msg.sender for msg in received]
        if len(group) == 1:
            net = transfer_single(own, head)
        else:
            labels = [set(m.labels) for m in group]
            shared = any(a & b for k, a in enumerate(labels) for b in labels[k + 1 :])
            if mode == DISJOINT and shared:
                raise DataError("disjoint mode needs disjoint device sets")
            if mode == OVERLAPPING and not shared:
                raise DataError("overlapping mode needs shared devices")
            net = _merge(group, [counts[s] for s in senders] if mode == OVERLAPPING else None, head)
        acc0[i] = net_accuracy(net, test_states, test_labels)
        if retrain:
            counter = ComplexityCounter()
            net, epochs_used[i] = _select_epochs(net, X_all[fit_idx], y_all[fit_idx], X_all[val_idx],
                                                 y_all[val_idx], epochs, lr, counter)
            ledger.retrain_multiplies[i] = counter[TRAIN]
        nets[i] = net
        acc[i] = net_accuracy(net, test_states, test_labels)
    return ScenarioResult(nets, models, ledger, acc, acc0, local, epochs_used)


def _restrict(X, y, labels):
    keep = np.isin(y, list(labels))
    return X[keep], y[keep]


def control_no_transfer(template: FusionNet, X_train, y_train, X_test, y_test, epochs: int = 100,
                        lr: float = 0.05, seed: int = 0) -> list[tuple[int, float, float]]:
    """Accuracy per epoch of the same architecture trained from random weights.

    Rows are ``(epoch, random_init_accuracy, transfer_init_accuracy)``.
    """
    nets = [random_init(template, seed), template]
    rows = [(0, net_accuracy(nets[0], X_test, y_test), net_accuracy(nets[1], X_test, y_test))]
    for e in range(1, epochs + 1):
        nets = [train(n, X_train, y_train, epochs=1, lr=lr).net for n in nets]
        rows.append((e, net_accuracy(nets[0], X_test, y_test), net_accuracy(nets[1], X_test, y_test)))
    return rows


def control_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "random_init_accuracy", "transfer_init_accuracy"])
    for e, a, b in rows:
        w.writerow([e, f"{a:.6f}", f"{b:.6f}"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# scenario file


@dataclass
class Scenario:
    L: int = 2
    mode: str = DISJOINT
    overlap: int = 0
    retrain: bool = False
    epochs: int = 50
    lr: float = 0.05
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    devices: list[tuple[int, ...]] = field(default_factory=list)

    def device_sets(self, Q: int) -> list[tuple[int, ...]]:
        return self.devices or partition_devices(Q, self.L, self.overlap)

    def to_text(self) -> str:
        rows = [f"L={self.L}", f"mode={self.mode}", f"overlap={self.overlap}", f"retrain={int(self.retrain)}",
                f"epochs={self.epochs}", f"lr={self.lr!r}", f"lambda={self.lam!r}", f"seed={self.seed}"]
        rows += [f"node.{i}=" + ",".join(map(str, d)) for i, d in enumerate(self.devices)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"bad scenario line {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            nodes = sorted((int(k[5:]), v) for k, v in kv.items() if k.startswith("node."))
            devices = [tuple(parse_ids(v)) for _, v in nodes]
            sc = cls(
                L=int(kv.get("L", len(devices) or 2)), mode=kv.get("mode", DISJOINT),
                overlap=int(kv.get("overlap", 0)), retrain=kv.get("retrain", "0").lower() in ("1", "true", "yes"),
                epochs=int(kv.get("epochs", 50)), lr=float(kv.get("lr", 0.05)),
                lam=float(kv.get("lambda", DEFAULT_LAMBDA)), seed=int(kv.get("seed", 0)), devices=devices,
            )
        except ValueError as exc:
            raise FormatError(f"bad scenario value: {exc}") from exc
        if sc.devices and len(sc.devices) != sc.L:
            raise ConfigError(f"scenario declares L={sc.L} but lists {len(sc.devices)} nodes")
        if sc.mode not in (DISJOINT, OVERLAPPING):
            raise ConfigError(f"unknown scenario mode {sc.mode!r}")
        return sc


def parse_ids(text: str) -> list[int]:
    """``0-9,12`` -> [0, ..., 9, 12]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out
