"""Synthetic RF bursts with per-emitter hardware fingerprints.

Two dataset modes are supported:

* ``SEI`` -- every class is one emitter transmitting the same deterministic
  preamble; classes differ only through their hardware impairments.
* ``WiPRec`` -- every class is one protocol family with its own waveform
  template; emitter impairments are drawn per burst as a nuisance.

Bursts are stored as ``complex64`` so that the on-disk format (f32 I/Q)
round-trips bit-exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

SEI = "SEI"
WIPREC = "WiPRec"
MODES = (SEI, WIPREC)
MODE_CODES = {SEI: 0, WIPREC: 1}

DEFAULT_LENGTH = 1024

# fingerprint parameter ranges
A3_RANGE = (-0.05, 0.05)
A5_RANGE = (-0.05, 0.05)
IMBALANCE_RANGE = (0.98, 1.02)
SKEW_RANGE = (-0.02, 0.02)
CFO_RANGE = (-1e-3, 1e-3)
DC_MAX = 0.02

SEI_TEMPLATE = "preamble"
WIPREC_TEMPLATES = ("wifi", "bt", "zigbee", "nrf")
TEMPLATES = (SEI_TEMPLATE,) + WIPREC_TEMPLATES


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class IQBurst:
    samples: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.iscomplexobj(self.samples):
            self.samples = self.samples.astype(np.complex128)
        if self.samples.ndim != 1 or self.samples.size < 3:
            raise DataError("a burst needs at least 3 samples")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("burst contains non-finite samples")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class EmitterProfile:
    class_id: int
    iq_gain_imbalance: float = 1.0
    iq_phase_skew: float = 0.0
    dc_offset: complex = 0j
    freq_offset: float = 0.0
    pa_poly: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.pa_poly[0] <= 0:
            raise DataError("PA linear gain a1 must be positive")
        if abs(self.freq_offset) >= 0.5:
            raise DataError("frequency offset must be below 0.5 cycles/sample")

    def as_tuple(self):
        return (
            self.class_id,
            self.iq_gain_imbalance,
            self.iq_phase_skew,
            self.dc_offset,
            self.freq_offset,
            self.pa_poly,
        )


IDENTITY = EmitterProfile(class_id=0)


def synth_emitter_profile(class_id: int, seed: int) -> EmitterProfile:
    rng = make_rng(seed, class_id, 0xE1)
    a3 = rng.uniform(*A3_RANGE)
    a5 = rng.uniform(*A5_RANGE)
    dc = DC_MAX * np.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform())
    return EmitterProfile(
        class_id=int(class_id),
        iq_gain_imbalance=float(rng.uniform(*IMBALANCE_RANGE)),
        iq_phase_skew=float(rng.uniform(*SKEW_RANGE)),
        dc_offset=complex(dc),
        freq_offset=float(rng.uniform(*CFO_RANGE)),
        pa_poly=(1.0, float(a3), float(a5)),
    )


# ---------------------------------------------------------------------------
# waveform templates

_OVERSAMPLE = 5


def _ofdm_symbol(values: dict[int, complex], nfft: int) -> np.ndarray:
    spec = np.zeros(nfft, dtype=np.complex128)
    for k, v in values.items():
        spec[k % nfft] = v
    return np.fft.ifft(spec) * np.sqrt(nfft)


def _preamble(length: int) -> np.ndarray:
    """Fixed OFDM-style preamble: ten short periods then a long training field."""
    nfft = 64 * _OVERSAMPLE
    pattern = make_rng(802, 11)
    qpsk = np.exp(1j * (np.pi / 4 + np.pi / 2 * pattern.integers(0, 4, 12)))
    short = _ofdm_symbol({k: q for k, q in zip([s for s in range(-24, 25, 4) if s], qpsk)}, nfft)
    bpsk = 1 - 2 * pattern.integers(0, 2, 52)
    long_ = _ofdm_symbol({k: b for k, b in zip([s for s in range(-26, 27) if s], bpsk)}, nfft)
    period = short[: 16 * _OVERSAMPLE]
    stf = np.tile(period, 10)
    ltf = np.concatenate([long_[-32 * _OVERSAMPLE :], long_, long_])
    wave = np.concatenate([stf, ltf])
    while wave.size < length:
        wave = np.concatenate([wave, long_])
    return wave[:length]


def _shape(symbols: np.ndarray, sps: int, pulse: str) -> np.ndarray:
    up = np.zeros(symbols.size * sps, dtype=np.complex128)
    up[::sps] = symbols
    if pulse == "rect":
        taps = np.ones(sps)
    elif pulse == "halfsine":
        taps = np.sin(np.pi * (np.arange(2 * sps) + 0.5) / (2 * sps))
    else:  # gaussian, BT = 0.5
        t = (np.arange(4 * sps) - 2 * sps + 0.5) / sps
        taps = np.exp(-2 * (np.pi * 0.5) ** 2 * t**2 / np.log(2))
    return np.convolve(up, taps, mode="same")


def _fsk(bits: np.ndarray, sps: int, h: float) -> np.ndarray:
    freq = _shape((2 * bits - 1).astype(np.complex128), sps, "gaussian").real
    freq /= np.max(np.abs(freq))
    phase = np.pi * h / sps * np.cumsum(freq)
    return np.exp(1j * phase)


def template_waveform(
    template: str, length: int, rng: np.random.Generator | None = None, common_rate: bool = False
) -> np.ndarray:
    """Clean unit-RMS baseband waveform for ``template``.

    ``common_rate`` strips bandwidth as a feature by giving every protocol the
    same samples-per-symbol.
    """
    if template not in TEMPLATES:
        raise DataError(f"unknown waveform template {template!r}")
    if template == SEI_TEMPLATE:
        wave = _preamble(length)
    else:
        rng = rng if rng is not None else make_rng(0)
        sps = {"wifi": 5, "bt": 100, "zigbee": 50, "nrf": 50}[template]
        if common_rate:
            sps = 10
        nsym = length // sps + 8
        if template == "wifi":
            nfft = 64 * sps
            data = np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, 52)))
            sym = _ofdm_symbol({k: d for k, d in zip([s for s in range(-26, 27) if s], data)}, nfft)
            wave = np.concatenate([sym[-nfft // 4 :], sym] * (length // nfft + 2))
        elif template == "zigbee":
            chips = 1 - 2 * rng.integers(0, 2, (nsym, 2))
            i = _shape(chips[:, 0].astype(np.complex128), sps, "halfsine")
            q = _shape(chips[:, 1].astype(np.complex128), sps, "halfsine")
            q = np.roll(q, sps // 2)
            wave = i.real + 1j * q.real
        else:
            h = 0.32 if template == "bt" else 0.5
            wave = _fsk(rng.integers(0, 2, nsym), sps, h)
        start = int(rng.integers(0, wave.size - length + 1))
        wave = wave[start : start + length]
    return wave / np.sqrt(np.mean(np.abs(wave) ** 2))


def distort(x: np.ndarray, profile: EmitterProfile, drive: float = 1.0) -> np.ndarray:
    """Apply the emitter's IQ modulator, PA and oscillator impairments.

    ``drive`` sets the PA operating point; the output is referred back to the
    input scale so drive only changes the shape of the nonlinearity.
    """
    g, phi = profile.iq_gain_imbalance, profile.iq_phase_skew
    i, q = x.real, x.imag
    y = i + 1j * g * (q * np.cos(phi) - i * np.sin(phi))
    y = y + profile.dc_offset
    a1, a3, a5 = profile.pa_poly
    u = drive * y
    p = np.abs(u) ** 2
    y = u * (a1 + a3 * p + a5 * p * p) / drive
    n = np.arange(x.size)
    return y * np.exp(2j * np.pi * profile.freq_offset * n)


def add_noise(x: np.ndarray, noise_db: float, rng: np.random.Generator) -> np.ndarray:
    if not np.isfinite(noise_db):
        if noise_db > 0:
            return x
        raise DataError("noise_db must be finite or +inf")
    power = np.mean(np.abs(x) ** 2)
    sigma = np.sqrt(power / 10 ** (noise_db / 10) / 2)
    return x + sigma * (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size))


@dataclass(frozen=True)
class Nuisance:
    """Per-burst variation that is not part of the fingerprint."""

    drive: tuple[float, float] = (1.0, 1.0)
    random_phase: bool = False
    max_shift: int = 0
    cfo_jitter: float = 0.0
    # receiver channelizer lands up to this many FFT bins off the nominal carrier
    rx_bin_offset: int = 0


NO_NUISANCE = Nuisance()
DEFAULT_NUISANCE = Nuisance(drive=(0.6, 0.6), random_phase=True, rx_bin_offset=4)


def synth_burst(
    profile: EmitterProfile,
    template: str,
    noise_db: float,
    seed: int,
    length: int = DEFAULT_LENGTH,
    nuisance: Nuisance = NO_NUISANCE,
    common_rate: bool = False,
) -> IQBurst:
    if np.isnan(noise_db):
        raise DataError("noise_db must not be NaN")
    rng = make_rng(seed, profile.class_id, 0xB0)
    shift = int(rng.integers(0, nuisance.max_shift + 1)) if nuisance.max_shift else 0
    clean = template_waveform(template, length + shift, rng, common_rate)[shift:]
    drive = rng.uniform(*nuisance.drive) if nuisance.drive[0] != nuisance.drive[1] else nuisance.drive[0]
    if nuisance.random_phase:
        # baseband phase ahead of the modulator, so it interacts with IQ/DC impairments
        clean = clean * np.exp(2j * np.pi * rng.uniform())
    if nuisance.cfo_jitter:
        jitter = rng.uniform(-nuisance.cfo_jitter, nuisance.cfo_jitter)
        profile = replace(profile, freq_offset=profile.freq_offset + jitter)
    y = distort(clean, profile, drive)
    y = add_noise(y, noise_db, rng)
    if nuisance.rx_bin_offset:
        m = int(rng.integers(-nuisance.rx_bin_offset, nuisance.rx_bin_offset + 1))
        y = y * np.exp(2j * np.pi * m * np.arange(length) / length)
    return IQBurst(y.astype(np.complex64), label=profile.class_id, source_id=f"{profile.class_id}:{seed}")


def normalize(burst: IQBurst) -> IQBurst:
    x = burst.samples.astype(np.complex128)
    rms = np.sqrt(np.mean(np.abs(x) ** 2))
    if rms == 0:
        raise DataError("cannot normalize an all-zero burst")
    return replace(burst, samples=x / rms)


def normalize_rows(samples: np.ndarray) -> np.ndarray:
    """Vectorized ``normalize`` over a (B, ell) array."""
    x = np.asarray(samples, dtype=np.complex128)
    rms = np.sqrt(np.mean(np.abs(x) ** 2, axis=1, keepdims=True))
    if np.any(rms == 0):
        raise DataError("cannot normalize an all-zero burst")
    return x / rms


def extract_subburst(burst: IQBurst, start: int, length: int) -> IQBurst:
    if start < 0 or length < 1 or start + length > len(burst):
        raise DataError(f"window [{start}, {start + length}) outside burst of length {len(burst)}")
    return replace(burst, samples=burst.samples[start : start + length].copy())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    mode: str = SEI
    Q: int = 20
    bursts_per_class_train: int = 600
    bursts_per_class_test: int = 100
    length: int = DEFAULT_LENGTH
    noise_db: float = 20.0
    seed: int = 7
    nuisance: Nuisance = DEFAULT_NUISANCE
    common_rate: bool = False
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown dataset mode {self.mode!r}")
        if self.Q < 2:
            raise DataError("need at least two classes")
        if self.mode == WIPREC and self.Q > len(WIPREC_TEMPLATES):
            raise DataError(f"WiPRec mode has {len(WIPREC_TEMPLATES)} classes")
        if self.length < 3:
            raise DataError("burst length must be at least 3")

    def to_text(self) -> str:
        n = self.nuisance
        rows = {
            "mode": self.mode,
            "Q": self.Q,
            "bursts_per_class_train": self.bursts_per_class_train,
            "bursts_per_class_test": self.bursts_per_class_test,
            "length": self.length,
            "noise_db": repr(float(self.noise_db)),
            "seed": self.seed,
            "drive_lo": repr(n.drive[0]),
            "drive_hi": repr(n.drive[1]),
            "random_phase": int(n.random_phase),
            "max_shift": n.max_shift,
            "cfo_jitter": repr(float(n.cfo_jitter)),
            "rx_bin_offset": n.rx_bin_offset,
            "common_rate": int(self.common_rate),
        }
        rows.update({f"path.{k}": v for k, v in sorted(self.paths.items())})
        return "".join(f"{k}={v}\n" for k, v in rows.items())

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"bad manifest line {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        d = DEFAULT_NUISANCE
        try:
            return cls(
                mode=kv.get("mode", SEI),
                Q=int(kv.get("Q", 20)),
                bursts_per_class_train=int(kv.get("bursts_per_class_train", 600)),
                bursts_per_class_test=int(kv.get("bursts_per_class_test", 100)),
                length=int(kv.get("length", DEFAULT_LENGTH)),
                noise_db=float(kv.get("noise_db", 20.0)),
                seed=int(kv.get("seed", 7)),
                nuisance=Nuisance(
                    drive=(float(kv.get("drive_lo", d.drive[0])), float(kv.get("drive_hi", d.drive[1]))),
                    random_phase=bool(int(kv.get("random_phase", int(d.random_phase)))),
                    max_shift=int(kv.get("max_shift", d.max_shift)),
                    cfo_jitter=float(kv.get("cfo_jitter", d.cfo_jitter)),
                    rx_bin_offset=int(kv.get("rx_bin_offset", d.rx_bin_offset)),
                ),
                common_rate=bool(int(kv.get("common_rate", 0))),
                paths={k[5:]: v for k, v in kv.items() if k.startswith("path.")},
            )
        except ValueError as exc:
            raise FormatError(f"bad manifest value: {exc}") from exc


@dataclass
class Dataset:
    """A block of equal-length bursts with integer labels."""

    samples: np.ndarray  # (B, ell) complex64
    labels: np.ndarray  # (B,) int
    manifest: DatasetManifest | None = None

    def __len__(self):
        return self.labels.size

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(self.samples[mask_or_index], self.labels[mask_or_index], self.manifest)

    def classes(self, class_ids) -> "Dataset":
        return self.subset(np.isin(self.labels, list(class_ids)))

    def bursts(self):
        for x, y in zip(self.samples, self.labels):
            yield IQBurst(x, int(y))


def _class_bursts(manifest: DatasetManifest, class_id: int, count: int, offset: int):
    if manifest.mode == SEI:
        profile = synth_emitter_profile(class_id, manifest.seed)
        template = SEI_TEMPLATE
        out = np.empty((count, manifest.length), dtype=np.complex64)
        for i in range(count):
            out[i] = synth_burst(
                profile, template, manifest.noise_db, manifest.seed * 1_000_003 + offset + i,
                manifest.length, manifest.nuisance, manifest.common_rate,
            ).samples
        return out
    # WiPRec: class = protocol, the emitter is a random device per burst
    template = WIPREC_TEMPLATES[class_id]
    out = np.empty((count, manifest.length), dtype=np.complex64)
    for i in range(count):
        device = synth_emitter_profile(100 + (offset + i) % 5, manifest.seed)
        profile = replace(device, class_id=class_id)
        out[i] = synth_burst(
            profile, template, manifest.noise_db, manifest.seed * 1_000_003 + offset + i,
            manifest.length, manifest.nuisance, manifest.common_rate,
        ).samples
    return out


def generate_dataset(manifest: DatasetManifest) -> tuple[Dataset, Dataset]:
    """Train and test sets; a pure function of the manifest.

    Train bursts use per-class indices ``0..n_train-1`` and test bursts the
    following ``n_test`` indices, so the two never share a burst seed.
    """
    n_tr, n_te = manifest.bursts_per_class_train, manifest.bursts_per_class_test
    tr, te, ytr, yte = [], [], [], []
    for c in range(manifest.Q):
        tr.append(_class_bursts(manifest, c, n_tr, 0))
        te.append(_class_bursts(manifest, c, n_te, n_tr))
        ytr.append(np.full(n_tr, c))
        yte.append(np.full(n_te, c))
    return (
        Dataset(np.concatenate(tr), np.concatenate(ytr), manifest),
        Dataset(np.concatenate(te), np.concatenate(yte), manifest),
    )


# ---------------------------------------------------------------------------
# binary dataset file

DATASET_MAGIC = b"DLRD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHBHII")


def dataset_file_size(count: int, length: int) -> int:
    return _HEADER.size + count * (2 + 8 * length)


def save_dataset(path, dataset: Dataset, manifest: DatasetManifest | None = None) -> None:
    """Write the binary payload and a ``.manifest`` key=value sidecar."""
    manifest = manifest or dataset.manifest or DatasetManifest(Q=max(2, int(dataset.labels.max()) + 1))
    path = Path(path)
    samples = np.ascontiguousarray(dataset.samples, dtype=np.complex64)
    count, length = samples.shape
    rec = np.empty(count, dtype=np.dtype([("label", "<u2"), ("iq", "<f4", (2 * length,))]))
    rec["label"] = dataset.labels
    rec["iq"] = samples.view(np.float32).reshape(count, 2 * length)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, MODE_CODES[manifest.mode], manifest.Q, length, count))
        fh.write(rec.tobytes())
    Path(str(path) + ".manifest").write_text(manifest.to_text(), encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, mode, q, length, count = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if mode not in MODE_CODES.values():
        raise FormatError(f"{path}: unknown mode code {mode}")
    if len(raw) != dataset_file_size(count, length):
        raise FormatError(f"{path}: payload size mismatch (truncated or corrupt)")
    rec = np.frombuffer(raw, offset=_HEADER.size, dtype=np.dtype([("label", "<u2"), ("iq", "<f4", (2 * length,))]))
    samples = rec["iq"].astype(np.float32).view(np.complex64).reshape(count, length)
    sidecar = Path(str(path) + ".manifest")
    if sidecar.exists():
        manifest = DatasetManifest.from_text(sidecar.read_text(encoding="utf-8"))
    else:
        manifest = DatasetManifest(mode={v: k for k, v in MODE_CODES.items()}[mode], Q=q, length=length)
    return Dataset(samples.copy(), rec["label"].astype(np.int64), manifest)


# ---------------------------------------------------------------------------
# salience map


@dataclass
class SalienceMap:
    windows: list[tuple[int, int]]
    accuracy: np.ndarray
    best: tuple[int, int]

    @property
    def best_accuracy(self) -> float:
        return float(self.accuracy[self.windows.index(self.best)])

    def to_csv(self) -> str:
        rows = ["start,end,accuracy"]
        rows += [f"{s},{e},{a:.6f}" for (s, e), a in zip(self.windows, self.accuracy)]
        return "\n".join(rows) + "\n"


def salience_grid(length: int, stride: int = 32, min_len: int | None = None) -> list[tuple[int, int]]:
    """All ``(start, end)`` pairs on a ``stride`` lattice, ``end`` exclusive."""
    if stride < 1:
        raise DataError("stride must be positive")
    min_len = stride if min_len is None else min_len
    marks = list(range(0, length, stride)) + [length]
    return [(s, e) for s in marks for e in marks if e - s >= min_len]


def build_salience_map(train: Dataset, test: Dataset, lam: float = 1e-2, stride: int = 32,
                       windows: list[tuple[int, int]] | None = None) -> SalienceMap:
    """Ridge-regression accuracy on the amplitudes of every window.

    All windows share one Gram matrix of the full-burst amplitudes; each cell
    solves its diagonal block, which is exactly the fit on that sub-burst.
    The best window is the shortest one reaching the top accuracy, then the
    earliest.
    """
    import scipy.linalg

    from .ridge import one_hot

    length = train.samples.shape[1]
    windows = salience_grid(length, stride) if windows is None else list(windows)
    if not windows:
        raise DataError("empty salience grid")
    for s, e in windows:
        if not 0 <= s < e <= length:
            raise DataError(f"window ({s}, {e}) outside burst of length {length}")
    A = np.abs(normalize_rows(train.samples))
    T = np.abs(normalize_rows(test.samples))
    labels = tuple(sorted(set(train.labels.tolist())))
    G = A.T @ A
    R = A.T @ one_hot(train.labels, labels)
    lab = np.asarray(labels)
    acc = np.empty(len(windows))
    for i, (s, e) in enumerate(windows):
        block = G[s:e, s:e].copy()
        block[np.diag_indices_from(block)] += lam
        W = scipy.linalg.solve(block, R[s:e], assume_a="pos", check_finite=False)
        acc[i] = np.mean(lab[np.argmax(T[:, s:e] @ W, axis=1)] == test.labels)
    top = acc.max()
    best = min((w for w, a in zip(windows, acc) if a == top), key=lambda w: (w[1] - w[0], w[0]))
    return SalienceMap(windows, acc, best)
