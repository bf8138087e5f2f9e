"""Digital delay-loop reservoir.

One nonlinear node is time-multiplexed into ``N`` virtual nodes. Input
sample ``s[n]`` is held for ``N`` chips and multiplied by the mask, giving
the chip-time drive ``J(t) = s[n] * m[j]`` with ``t = n*N + j``. Each chip
updates

    X[t] = h0 f(eta X[t-N] + nu J[t]) + h1 f(eta X[t-N+1] + nu J[t-1]) + sigma eps

with zero history before ``t = 0``. The state vector is the last ``N`` chips
after the final sample.

The compiled kernel (``dlr._kernel``) is used when it imports; otherwise the
numpy fallback runs. Set ``DLR_PURE=1`` to force the fallback.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _fallback
from .complexity import LOOP, ComplexityCounter, count, loop_multiplies
from .errors import ConfigError, DataError, NumericError
from .signal_model import make_rng

if os.environ.get("DLR_PURE"):
    _kernel = None
else:
    try:
        from . import _kernel
    except ImportError:  # extension not built
        _kernel = None

BACKEND = "compiled" if _kernel is not None else "numpy"

SIN, TANH = "sin", "tanh"
NONLINEARITIES = {SIN: 0, TANH: 1}
BINARY, UNIFORM = "binary", "uniform"
SUM, PRODUCT, CONCAT = "sum", "product", "concat"
COMBINERS = (SUM, PRODUCT, CONCAT)
PRECISIONS = {"float64": np.float64, "float32": np.float32}


def backend_module(name: str | None = None):
    """Kernel module by name (``compiled``/``numpy``); default is the active one."""
    if name in (None, BACKEND):
        return _kernel if BACKEND == "compiled" else _fallback
    if name == "numpy":
        return _fallback
    if name == "compiled":
        if _kernel is None:
            raise ConfigError("compiled kernel is not available")
        return _kernel
    raise ConfigError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class Mask:
    chips: np.ndarray
    seed: int
    kind: str = BINARY

    def __len__(self):
        return self.chips.size


def gen_mask(seed: int, n: int, kind: str = BINARY) -> Mask:
    if n < 1:
        raise ConfigError("mask needs at least one chip")
    rng = make_rng(seed, n, 0x4D)
    if kind == BINARY:
        chips = rng.integers(0, 2, n).astype(np.float64) * 2 - 1
    elif kind == UNIFORM:
        chips = rng.uniform(-1.0, 1.0, n)
    else:
        raise ConfigError(f"unknown mask kind {kind!r}")
    chips.setflags(write=False)
    return Mask(chips, seed, kind)


def spread(sample: float, mask: Mask | np.ndarray) -> np.ndarray:
    chips = mask.chips if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    return sample * chips


@dataclass(frozen=True)
class ReservoirConfig:
    """Loop hyper-parameters.

    ``N`` is the node count of each loop. With ``k > 1`` the datapoint is cut
    into ``k`` pieces; loop ``j`` uses ``split_sizes[j]`` nodes (default
    ``N``) and mask seed ``split_seeds[j]`` (default ``mask_seed + j``).
    """

    N: int = 600
    eta: float = 0.5
    nu: float = 0.5
    nl: str = SIN
    h: tuple[float, float] = (1.0, 0.0)
    sigma: float = 0.0
    mask_seed: int = 1
    mask_kind: str = BINARY
    k: int = 1
    combiner: str = CONCAT
    split_sizes: tuple[int, ...] = ()
    split_seeds: tuple[int, ...] = ()
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "h", tuple(float(v) for v in self.h))
        object.__setattr__(self, "split_sizes", tuple(int(v) for v in self.split_sizes))
        object.__setattr__(self, "split_seeds", tuple(int(v) for v in self.split_seeds))
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if len(self.h) != 2 or min(self.h) < 0 or sum(self.h) <= 0:
            raise ConfigError("filter taps must be two non-negative values with positive sum")
        if self.nl not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nl!r}")
        if self.mask_kind not in (BINARY, UNIFORM):
            raise ConfigError(f"unknown mask kind {self.mask_kind!r}")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.combiner not in COMBINERS:
            raise ConfigError(f"unknown combiner {self.combiner!r}")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ConfigError("sigma must be finite and non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        for name in ("split_sizes", "split_seeds"):
            v = getattr(self, name)
            if v and len(v) != self.k:
                raise ConfigError(f"{name} needs k={self.k} entries")
        sizes = self.sizes
        if min(sizes) < 1:
            raise ConfigError("every loop needs at least one node")
        if self.h[1] != 0 and min(sizes) < 2:
            raise ConfigError("the second filter tap needs N >= 2")
        if self.combiner in (SUM, PRODUCT) and len(set(sizes)) > 1:
            raise ConfigError(f"{self.combiner} combiner needs equal loop sizes")

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.split_sizes or (self.N,) * self.k

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.split_seeds or tuple(self.mask_seed + j for j in range(self.k))

    @property
    def state_dim(self) -> int:
        return sum(self.sizes) if self.combiner == CONCAT else self.sizes[0]

    def masks(self) -> list[Mask]:
        return [gen_mask(s, n, self.mask_kind) for s, n in zip(self.seeds, self.sizes)]

    def sub_config(self, j: int) -> "ReservoirConfig":
        """Single-loop config of split ``j``."""
        return ReservoirConfig(
            N=self.sizes[j], eta=self.eta, nu=self.nu, nl=self.nl, h=self.h, sigma=self.sigma,
            mask_seed=self.seeds[j], mask_kind=self.mask_kind, precision=self.precision,
        )

    def replace(self, **changes) -> "ReservoirConfig":
        d = asdict(self)
        d.update(changes)
        return ReservoirConfig(**d)

    def to_dict(self, prefix: str = "reservoir.") -> dict[str, str]:
        d = {
            "N": self.N, "eta": repr(self.eta), "nu": repr(self.nu), "nl": self.nl,
            "h": f"{self.h[0]!r},{self.h[1]!r}", "sigma": repr(self.sigma),
            "mask_seed": self.mask_seed, "mask_kind": self.mask_kind, "k": self.k,
            "combiner": self.combiner, "precision": self.precision,
        }
        if self.split_sizes:
            d["split_sizes"] = ",".join(map(str, self.split_sizes))
        if self.split_seeds:
            d["split_seeds"] = ",".join(map(str, self.split_seeds))
        return {prefix + k: str(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, kv: dict[str, str], prefix: str = "reservoir.") -> "ReservoirConfig":
        conv = {
            "N": int, "eta": float, "nu": float, "nl": str, "sigma": float, "mask_seed": int,
            "mask_kind": str, "k": int, "combiner": str, "precision": str,
            "h": lambda v: tuple(float(x) for x in v.split(",")),
            "split_sizes": lambda v: tuple(int(x) for x in v.split(",") if x.strip()),
            "split_seeds": lambda v: tuple(int(x) for x in v.split(",") if x.strip()),
        }
        args = {}
        try:
            for name, fn in conv.items():
                if prefix + name in kv:
                    args[name] = fn(kv[prefix + name].strip())
        except ValueError as exc:
            raise ConfigError(f"bad reservoir setting: {exc}") from exc
        return cls(**args)

    def hash(self) -> int:
        return reservoir_hash(self)


def reservoir_hash(cfg: ReservoirConfig) -> int:
    """Stable 64-bit digest over the canonical field order."""
    parts = [
        struct.pack("<I", cfg.N),
        struct.pack("<ddddd", cfg.eta, cfg.nu, cfg.h[0], cfg.h[1], cfg.sigma),
        cfg.nl.encode(), cfg.mask_kind.encode(), cfg.combiner.encode(), cfg.precision.encode(),
        struct.pack("<qI", cfg.mask_seed, cfg.k),
        struct.pack(f"<{cfg.k}I", *cfg.sizes),
        struct.pack(f"<{cfg.k}q", *cfg.seeds),
    ]
    digest = hashlib.blake2b(b"\x00".join(parts), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class StateVector:
    x: np.ndarray
    reservoir_hash: int
    label: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if not np.all(np.isfinite(self.x)):
            raise NumericError("state vector has non-finite entries")

    def __len__(self):
        return self.x.size


@dataclass
class StateBatch:
    """Row-stacked state vectors that share one reservoir."""

    X: np.ndarray
    reservoir_hash: int
    labels: np.ndarray | None = field(default=None)

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> StateVector:
        return StateVector(self.X[i], self.reservoir_hash, None if self.labels is None else int(self.labels[i]))


def _row_seeds(noise_seed, batch: int) -> np.ndarray:
    if np.ndim(noise_seed) == 0:
        return (np.uint64(noise_seed) + np.arange(batch, dtype=np.uint64)).astype(np.uint64)
    seeds = np.asarray(noise_seed, dtype=np.uint64)
    if seeds.shape != (batch,):
        raise ConfigError("need one noise seed per row")
    return seeds


def _loop_rows(S: np.ndarray, cfg: ReservoirConfig, seeds: np.ndarray, threads: int, counter, backend) -> np.ndarray:
    dt = PRECISIONS[cfg.precision]
    S = np.ascontiguousarray(S, dtype=dt)
    if not np.all(np.isfinite(S)):
        raise DataError("loop input has non-finite values")
    mask = np.ascontiguousarray(gen_mask(cfg.mask_seed, cfg.N, cfg.mask_kind).chips, dtype=dt)
    out = np.zeros((S.shape[0], cfg.N), dtype=dt)
    backend_module(backend).run_loop_batch(
        S, mask, cfg.eta, cfg.nu, cfg.h[0], cfg.h[1], NONLINEARITIES[cfg.nl], out, cfg.sigma, seeds, threads
    )
    if not np.all(np.isfinite(out)):
        raise NumericError("loop produced non-finite states; check eta and nu")
    count(counter, LOOP, S.shape[0] * loop_multiplies(S.shape[1], cfg.N, cfg.h, cfg.sigma))
    return out.astype(np.float64)


def combine(states, combiner: str = CONCAT):
    """Merge per-loop states (vectors or row-stacked matrices)."""
    arrays = [s.x if isinstance(s, StateVector) else np.asarray(s, dtype=np.float64) for s in states]
    if not arrays:
        raise DataError("nothing to combine")
    if combiner == CONCAT:
        out = np.concatenate(arrays, axis=-1)
    elif combiner in (SUM, PRODUCT):
        if len({a.shape for a in arrays}) > 1:
            raise DataError(f"{combiner} combiner needs equal-length states")
        if combiner == SUM:
            out = np.sum(arrays, axis=0)
        else:
            out = np.prod(arrays, axis=0)
            norm = np.linalg.norm(out, axis=-1, keepdims=True)
            if np.any(norm == 0):
                raise NumericError("zero-norm product cannot be normalized")
            out = out / norm
    else:
        raise ConfigError(f"unknown combiner {combiner!r}")
    if isinstance(states[0], StateVector):
        return StateVector(out, states[0].reservoir_hash, states[0].label)
    return out


def run_streams(streams, cfg: ReservoirConfig, noise_seed=0, threads: int = 1,
                counter: ComplexityCounter | None = None, backend: str | None = None) -> np.ndarray:
    """Feed stream ``j`` (a ``(B, l_j)`` array) to loop ``j`` and combine."""
    if len(streams) != cfg.k:
        raise ConfigError(f"config has {cfg.k} loops but got {len(streams)} streams")
    batch = streams[0].shape[0]
    seeds = _row_seeds(noise_seed, batch)
    states = []
    for j, piece in enumerate(streams):
        # distinct noise per loop; j = 0 keeps the single-loop seeds
        piece_seeds = seeds + np.uint64(j << 32)
        states.append(_loop_rows(piece, cfg.sub_config(j), piece_seeds, threads, counter, backend))
    if cfg.k == 1:
        return states[0]
    return combine(states, cfg.combiner)


def run_batch(S: np.ndarray, cfg: ReservoirConfig, noise_seed=0, threads: int = 1,
              counter: ComplexityCounter | None = None, backend: str | None = None) -> np.ndarray:
    """States for every row of ``S`` (shape ``(B, l)``), split into ``cfg.k`` pieces.

    Row ``b`` draws its loop noise from ``noise_seed + b`` unless an array of
    per-row seeds is given.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[1] % cfg.k:
        raise DataError(f"split count {cfg.k} does not divide length {S.shape[1]}")
    return run_streams(np.split(S, cfg.k, axis=1), cfg, noise_seed, threads, counter, backend)


def _values(datapoint) -> tuple[np.ndarray, int | None]:
    if hasattr(datapoint, "values"):
        return np.asarray(datapoint.values, dtype=np.float64), datapoint.label
    return np.asarray(datapoint, dtype=np.float64), None


def run_loop(datapoint, cfg: ReservoirConfig, noise_seed: int = 0,
             counter: ComplexityCounter | None = None, backend: str | None = None) -> StateVector:
    if cfg.k != 1:
        raise ConfigError("run_loop takes a single-loop config; use run_split")
    values, label = _values(datapoint)
    x = run_batch(values[None, :], cfg, noise_seed, counter=counter, backend=backend)[0]
    return StateVector(x, cfg.hash(), label)


def run_split(datapoint, cfg: ReservoirConfig, noise_seed: int = 0,
              counter: ComplexityCounter | None = None, backend: str | None = None) -> StateVector:
    values, label = _values(datapoint)
    x = run_batch(values[None, :], cfg, noise_seed, counter=counter, backend=backend)[0]
    return StateVector(x, cfg.hash(), label)
