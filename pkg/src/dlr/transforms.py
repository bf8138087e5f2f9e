"""Complex burst -> real loop input.

Every transform discards phase; only ``differential_fft`` uses it, and only
for its intermediate complex waveform. Functions accept either an
:class:`~dlr.signal_model.IQBurst` or a raw array; batch variants work on
``(B, ell)`` arrays along the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

AMPLITUDE = "amplitude"
SUBBURST = "subburst"
FFT = "fft"
DIFF_FFT = "diff_fft"
DECIMATED_DFT = "ddft"
FREQ = "freq"
MIXED = "mixed"
KINDS = (AMPLITUDE, SUBBURST, FFT, DIFF_FFT, DECIMATED_DFT, FREQ, MIXED)


@dataclass
class RealDatapoint:
    values: np.ndarray
    label: int | None = None
    transform_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise DataError("datapoint has non-finite values")

    def __len__(self):
        return self.values.size


def _samples(burst) -> tuple[np.ndarray, int | None]:
    if hasattr(burst, "samples"):
        return np.asarray(burst.samples, dtype=np.complex128), burst.label
    return np.asarray(burst, dtype=np.complex128), None


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def amplitude_rows(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def fft_magnitude_rows(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if not _is_pow2(n):
        raise DataError(f"FFT magnitude needs a power-of-two length, got {n}")
    return np.abs(np.fft.fft(x, axis=-1)) / n


def differential_fft_rows(x: np.ndarray, mean_amplitudes: np.ndarray) -> np.ndarray:
    mean_amplitudes = np.asarray(mean_amplitudes, dtype=np.float64)
    if mean_amplitudes.shape[-1] != x.shape[-1]:
        raise DataError("mean amplitude vector does not match burst length")
    amp = np.abs(x)
    # x * (|x| - m) / |x| keeps the phase and is exact when m = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        debiased = np.where(amp > 0, x * ((amp - mean_amplitudes) / amp), -mean_amplitudes + 0j)
    return fft_magnitude_rows(debiased)


def decimated_dft_rows(x: np.ndarray, d: int) -> np.ndarray:
    """Keep every d-th column of the 1/n-scaled DFT matrix.

    Column ``j*d`` of that matrix is bin ``j*d`` of the FFT, so the product
    is read off the full FFT instead of forming the dense matrix.
    """
    n = x.shape[-1]
    if d < 1 or n % d:
        raise DataError(f"decimation {d} does not divide length {n}")
    return np.abs(np.fft.fft(x, axis=-1)[..., ::d]) / n


def freq_estimate_rows(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n < 3:
        raise DataError("frequency estimation needs at least 3 samples")
    m = n // 3
    w = x[..., : 3 * m].reshape(*x.shape[:-1], m, 3)
    d1 = np.angle(w[..., 1] * np.conj(w[..., 0]))
    d2 = np.angle(w[..., 2] * np.conj(w[..., 1]))
    return (d1 + d2) / (4 * np.pi)


def amplitude(burst) -> RealDatapoint:
    x, label = _samples(burst)
    return RealDatapoint(amplitude_rows(x), label, AMPLITUDE)


def fft_magnitude(burst) -> RealDatapoint:
    x, label = _samples(burst)
    return RealDatapoint(fft_magnitude_rows(x), label, FFT)


def differential_fft(burst, mean_amplitudes) -> RealDatapoint:
    x, label = _samples(burst)
    mean = mean_amplitudes.values if isinstance(mean_amplitudes, RealDatapoint) else mean_amplitudes
    return RealDatapoint(differential_fft_rows(x, mean), label, DIFF_FFT)


def decimated_dft(burst, d: int) -> RealDatapoint:
    x, label = _samples(burst)
    return RealDatapoint(decimated_dft_rows(x, d), label, f"{DECIMATED_DFT}{d}")


def freq_estimate(burst) -> RealDatapoint:
    x, label = _samples(burst)
    return RealDatapoint(freq_estimate_rows(x), label, FREQ)


def split(datapoint, k: int) -> list:
    values = datapoint.values if isinstance(datapoint, RealDatapoint) else np.asarray(datapoint)
    n = values.shape[-1]
    if k < 1 or n % k:
        raise DataError(f"split count {k} does not divide length {n}")
    pieces = np.split(values, k, axis=-1)
    if isinstance(datapoint, RealDatapoint):
        return [RealDatapoint(p, datapoint.label, datapoint.transform_id) for p in pieces]
    return pieces


def fit_length(values: np.ndarray, length: int) -> np.ndarray:
    """Truncate (or zero-pad) the last axis to ``length``."""
    n = values.shape[-1]
    if n >= length:
        return values[..., :length]
    pad = [(0, 0)] * (values.ndim - 1) + [(0, length - n)]
    return np.pad(values, pad)


@dataclass
class TransformSpec:
    """Serializable description of the input transform.

    ``parts`` and ``lengths`` are only used by the mixed transform: each part
    is a plain spec whose output is truncated to the matching length, and the
    streams are later fed to separate loops.
    """

    kind: str = FFT
    window: tuple[int, int] | None = None
    decimation: int = 1
    mean_amplitudes: np.ndarray | None = field(default=None, repr=False)
    parts: list["TransformSpec"] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform {self.kind!r}")
        if self.kind == SUBBURST and self.window is None:
            raise ConfigError("subburst transform needs a window")
        if self.kind == MIXED:
            if not self.parts or len(self.parts) != len(self.lengths):
                raise ConfigError("mixed transform needs one length per part")
            if any(p.kind == MIXED for p in self.parts):
                raise ConfigError("mixed transforms do not nest")

    @property
    def transform_id(self) -> str:
        if self.kind == DECIMATED_DFT:
            return f"{DECIMATED_DFT}{self.decimation}"
        if self.kind == SUBBURST:
            return f"{SUBBURST}{self.window[0]}-{self.window[1]}"
        if self.kind == MIXED:
            return "+".join(f"{p.transform_id}:{n}" for p, n in zip(self.parts, self.lengths))
        return self.kind

    def fit(self, train_samples: np.ndarray) -> "TransformSpec":
        """Learn training-set statistics (differential FFT mean amplitudes)."""
        if self.kind == DIFF_FFT:
            self.mean_amplitudes = np.abs(np.asarray(train_samples, dtype=np.complex128)).mean(axis=0)
        for p in self.parts:
            p.fit(train_samples)
        return self

    def streams(self, samples: np.ndarray) -> list[np.ndarray]:
        """Transformed streams, one per part (a single stream for plain kinds)."""
        if self.kind == MIXED:
            return [fit_length(p.apply(samples), n) for p, n in zip(self.parts, self.lengths)]
        return [self.apply(samples)]

    def apply(self, samples: np.ndarray) -> np.ndarray:
        x = np.asarray(samples, dtype=np.complex128)
        if self.kind == AMPLITUDE:
            return amplitude_rows(x)
        if self.kind == SUBBURST:
            start, stop = self.window
            if start < 0 or stop > x.shape[-1] or start >= stop:
                raise DataError(f"window {self.window} outside burst")
            return amplitude_rows(x[..., start:stop])
        if self.kind == FFT:
            return fft_magnitude_rows(x)
        if self.kind == DIFF_FFT:
            if self.mean_amplitudes is None:
                raise ConfigError("differential FFT used before fit() on training data")
            return differential_fft_rows(x, self.mean_amplitudes)
        if self.kind == DECIMATED_DFT:
            return decimated_dft_rows(x, self.decimation)
        if self.kind == FREQ:
            return freq_estimate_rows(x)
        return np.concatenate(self.streams(x), axis=-1)

    def to_dict(self, prefix: str = "transform.") -> dict[str, str]:
        out = {f"{prefix}kind": self.kind}
        if self.window is not None:
            out[f"{prefix}window"] = f"{self.window[0]},{self.window[1]}"
        if self.kind == DECIMATED_DFT:
            out[f"{prefix}decimation"] = str(self.decimation)
        if self.kind == MIXED:
            out[f"{prefix}parts"] = ",".join(p.kind if p.kind != DECIMATED_DFT else f"{p.kind}{p.decimation}" for p in self.parts)
            out[f"{prefix}lengths"] = ",".join(str(n) for n in self.lengths)
        return out

    @classmethod
    def from_dict(cls, kv: dict[str, str], prefix: str = "transform.") -> "TransformSpec":
        kind = kv.get(f"{prefix}kind", FFT)
        window = kv.get(f"{prefix}window")
        spec = dict(kind=kind)
        if window:
            a, b = (int(v) for v in window.split(","))
            spec["window"] = (a, b)
        if f"{prefix}decimation" in kv:
            spec["decimation"] = int(kv[f"{prefix}decimation"])
        if kind == MIXED:
            parts = []
            for name in kv[f"{prefix}parts"].split(","):
                name = name.strip()
                if name.startswith(DECIMATED_DFT):
                    parts.append(cls(DECIMATED_DFT, decimation=int(name[len(DECIMATED_DFT):] or 1)))
                else:
                    parts.append(cls(name))
            spec["parts"] = parts
            spec["lengths"] = [int(v) for v in kv[f"{prefix}lengths"].split(",")]
        try:
            return cls(**spec)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def default_mixed() -> TransformSpec:
    """Amplitudes (750) alongside frequency estimates (341 truncated to 250)."""
    return TransformSpec(MIXED, parts=[TransformSpec(AMPLITUDE), TransformSpec(FREQ)], lengths=[750, 250])
