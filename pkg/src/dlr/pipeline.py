"""Experiment configuration and the burst -> state -> readout pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .complexity import ComplexityCounter
from .errors import ConfigError, FormatError
from .reservoir import CONCAT, ReservoirConfig, StateBatch, run_streams
from .ridge import DEFAULT_LAMBDA, WeightModel, accuracy, fit_labels
from .signal_model import Dataset, DatasetManifest, generate_dataset, load_dataset, normalize_rows
from .transforms import MIXED, TransformSpec


def parse_kv(text: str) -> dict[str, str]:
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


@dataclass
class ExperimentConfig:
    """Flat key=value experiment description.

    Sections are key prefixes: ``dataset.*`` (manifest fields), ``transform.*``,
    ``reservoir.*``; top-level keys are ``lambda``, ``seed``, ``noise_seed``,
    ``out``, ``scenario`` and ``data.train`` / ``data.test`` (dataset files
    used instead of synthesis).
    """

    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    transform: TransformSpec = field(default_factory=TransformSpec)
    reservoir: ReservoirConfig = field(default_factory=ReservoirConfig)
    lam: float = DEFAULT_LAMBDA
    seed: int = 7
    noise_seed: int = 0
    out: str = "out"
    scenario: str | None = None
    train_path: str | None = None
    test_path: str | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_text(cls, text: str, base_dir=".") -> "ExperimentConfig":
        kv = parse_kv(text)
        ds = {k[8:]: v for k, v in kv.items() if k.startswith("dataset.")}
        try:
            manifest = DatasetManifest.from_text("".join(f"{k}={v}\n" for k, v in ds.items()))
            seed = int(kv.get("seed", manifest.seed))
            if "seed" in kv and "seed" not in ds:
                manifest = replace(manifest, seed=seed)
            cfg = cls(
                manifest=manifest,
                transform=TransformSpec.from_dict(kv),
                reservoir=ReservoirConfig.from_dict(kv),
                lam=float(kv.get("lambda", DEFAULT_LAMBDA)),
                seed=seed,
                noise_seed=int(kv.get("noise_seed", 0)),
                out=kv.get("out", "out"),
                scenario=kv.get("scenario"),
                train_path=kv.get("data.train"),
                test_path=kv.get("data.test"),
                base_dir=Path(base_dir),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls.from_text(path.read_text(encoding="utf-8"), path.parent)

    def check(self) -> None:
        if self.transform.kind == MIXED:
            if self.reservoir.k != len(self.transform.parts) or self.reservoir.combiner != CONCAT:
                raise ConfigError("a mixed transform needs one concatenated loop per part")
        for p in (self.train_path, self.test_path, self.scenario):
            if p is not None and not self.resolve(p).is_file():
                raise ConfigError(f"referenced file {p} not found")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_text(self) -> str:
        rows = {f"dataset.{k}": v for k, v in parse_kv(self.manifest.to_text()).items()}
        rows.update(self.transform.to_dict())
        rows.update(self.reservoir.to_dict())
        rows.update({"lambda": repr(self.lam), "seed": self.seed, "noise_seed": self.noise_seed, "out": self.out})
        for k, v in (("scenario", self.scenario), ("data.train", self.train_path), ("data.test", self.test_path)):
            if v is not None:
                rows[k] = v
        return "".join(f"{k}={v}\n" for k, v in rows.items())

    def datasets(self) -> tuple[Dataset, Dataset]:
        if self.train_path and self.test_path:
            return load_dataset(self.resolve(self.train_path)), load_dataset(self.resolve(self.test_path))
        return generate_dataset(self.manifest)


def loop_inputs(spec: TransformSpec, samples: np.ndarray, k: int = 1) -> list[np.ndarray]:
    """Normalized, transformed bursts as one array per loop."""
    streams = spec.streams(normalize_rows(samples))
    if spec.kind == MIXED:
        return streams
    (s,) = streams
    if s.shape[1] % k:
        raise ConfigError(f"split count {k} does not divide transformed length {s.shape[1]}")
    return np.split(s, k, axis=1)


def compute_states(spec: TransformSpec, cfg: ReservoirConfig, dataset: Dataset, noise_seed: int = 0,
                   threads: int = 1, counter: ComplexityCounter | None = None) -> StateBatch:
    X = run_streams(loop_inputs(spec, dataset.samples, cfg.k), cfg, noise_seed, threads, counter)
    return StateBatch(X, cfg.hash(), dataset.labels)


def train_readout(states: StateBatch, lam: float, spec: TransformSpec,
                  counter: ComplexityCounter | None = None, labels=None) -> WeightModel:
    return fit_labels(states.X, states.labels, lam, labels=labels, counter=counter,
                      transform_id=spec.transform_id, reservoir_hash=states.reservoir_hash)


def baseline_features(spec: TransformSpec, dataset: Dataset) -> np.ndarray:
    """The transformed features without a reservoir, for plain ridge regression."""
    return np.concatenate(spec.streams(normalize_rows(dataset.samples)), axis=1)


def evaluate(model: WeightModel, states: StateBatch) -> float:
    return accuracy(model, states.X, states.labels, reservoir_hash=states.reservoir_hash)
