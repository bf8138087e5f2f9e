"""``dlr`` command-line interface.

Every subcommand reads a key=value experiment config and writes its outputs
under ``--out``. Exit codes: 0 success, 1 other failure, 2 config error,
3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import datetime
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import distsim, fusion, reservoir, ridge
from .complexity import FIT, LOOP, TRAIN, ComplexityCounter
from .errors import ConfigError, DataError, DLRError
from .pipeline import ExperimentConfig, baseline_features, compute_states, evaluate, parse_kv, train_readout
from .reservoir import StateBatch
from .signal_model import Dataset, build_salience_map, load_dataset, save_dataset


def _header(args) -> str:
    if args.no_timestamp:
        return ""
    return f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')}\n"


def _write(args, name: str, text: str, stamp: bool = True) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text((_header(args) if stamp else "") + text, encoding="utf-8")
    return path


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.manifest = replace(cfg.manifest, seed=args.seed)
    if args.out is None:
        args.out = cfg.out
    return cfg


def _counter(args) -> ComplexityCounter | None:
    return ComplexityCounter() if args.counter else None


def _dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise ConfigError(f"dataset file {path} not found")
    return load_dataset(path)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    train, test = cfg.datasets()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.dlrd", train, cfg.manifest)
    save_dataset(out / "test.dlrd", test, cfg.manifest)
    print(f"wrote {len(train)} train and {len(test)} test bursts to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    counter = ComplexityCounter()
    t0 = time.perf_counter()
    train, test = cfg.datasets()
    if args.classes:
        ids = distsim.parse_ids(args.classes)
        train, test = train.classes(ids), test.classes(ids)
    s_train = compute_states(cfg.transform, cfg.reservoir, train, cfg.noise_seed, args.threads, counter)
    model = train_readout(s_train, cfg.lam, cfg.transform, counter)
    elapsed = time.perf_counter() - t0
    s_test = compute_states(cfg.transform, cfg.reservoir, test, cfg.noise_seed + len(train), args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.dlrw")
    lines = [
        f"transform={cfg.transform.transform_id}",
        f"reservoir_hash={model.reservoir_hash:016x}",
        f"train_accuracy={evaluate(model, s_train):.6f}",
        f"test_accuracy={evaluate(model, s_test):.6f}",
        f"parameters={model.parameter_count}",
        f"macs_loop={counter[LOOP]}",
        f"macs_fit={counter[FIT]}",
        f"macs_total={counter.total}",
    ]
    if not args.no_timestamp:
        lines.append(f"train_seconds={elapsed:.3f}")
    path = _write(args, "fom.txt", "\n".join(lines) + "\n")
    print(path.read_text(), end="")
    return 0


def _states_for(cfg: ExperimentConfig, dataset: Dataset, args, noise_offset: int = 0) -> StateBatch:
    return compute_states(cfg.transform, cfg.reservoir, dataset, cfg.noise_seed + noise_offset,
                          args.threads, _counter(args))


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    model = ridge.WeightModel.load(args.model)
    data = _dataset(args.data) if args.data else cfg.datasets()[1]
    states = _states_for(cfg, data, args)
    pred = ridge.predict_batch(model, states.X, reservoir_hash=states.reservoir_hash)
    rows = ["index,label,prediction"] + [f"{i},{y},{p}" for i, (y, p) in enumerate(zip(data.labels, pred))]
    _write(args, "predictions.csv", "\n".join(rows) + "\n", stamp=False)
    acc = float(np.mean(pred == data.labels))
    _write(args, "infer.txt", f"accuracy={acc:.6f}\ncount={len(pred)}\n")
    print(f"accuracy={acc:.6f}")
    return 0


def cmd_salience(args) -> int:
    cfg = _load_config(args)
    train, test = cfg.datasets()
    smap = build_salience_map(train, test, cfg.lam, args.stride)
    _write(args, "salience.csv", smap.to_csv(), stamp=False)
    print(f"best window {smap.best[0]}..{smap.best[1]} accuracy={smap.best_accuracy:.6f}")
    return 0


def cmd_merge(args) -> int:
    cfg = _load_config(args)
    models = [ridge.WeightModel.load(p) for p in args.models]
    if len(models) == 1:
        net = fusion.transfer_single(models[0], args.head)
    elif args.mode == distsim.DISJOINT:
        net = fusion._merge(models, None, args.head) if len(models) > 2 else fusion.transfer_disjoint(*models, args.head)
    else:
        if len(models) != 2:
            raise ConfigError("overlapping merge takes exactly two models")
        net = fusion.transfer_overlapping(*models, head=args.head)
    train, test = cfg.datasets()
    s_test = _states_for(cfg, test.classes(net.global_labels), args, len(train))
    counter = ComplexityCounter()
    acc0 = fusion.net_accuracy(net, s_test.X, s_test.labels)
    acc = acc0
    if args.retrain:
        s_train = _states_for(cfg, train.classes(net.global_labels), args)
        half = np.arange(len(s_train)) % 2 == 0
        net = fusion.train(net, s_train.X[half], s_train.labels[half], epochs=args.epochs, lr=args.lr,
                           counter=counter).net
        acc = fusion.net_accuracy(net, s_test.X, s_test.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "fusion.dlrn")
    text = (f"branches={len(net.branches)}\nglobal_classes={net.Q}\ntransfer_accuracy={acc0:.6f}\n"
            f"final_accuracy={acc:.6f}\ngradient_multiplies={counter[TRAIN]}\n")
    _write(args, "merge.txt", text)
    print(text, end="")
    return 0


def cmd_outlier(args) -> int:
    cfg = _load_config(args)
    net = fusion.FusionNet.load(args.net)
    legit = _states_for(cfg, _dataset(args.legit), args)
    outl = _states_for(cfg, _dataset(args.outliers), args)
    if args.train:
        detector = fusion.calibrate_threshold(net, _states_for(cfg, _dataset(args.train), args).X)
    else:
        detector = None
    roc = fusion.roc_curve(net, legit.X, outl.X)
    _write(args, "roc.csv", roc.roc_csv(), stamp=False)
    _write(args, "histogram.csv", roc.histogram_csv(), stamp=False)
    text = f"auc={roc.auc:.6f}\nfp_at_tp100={roc.fp_at_tp100:.6f}\noverlap={roc.histogram_overlap():.6f}\n"
    if detector is not None:
        text += f"threshold={detector.threshold:.9g}\n"
    _write(args, "outlier.txt", text)
    print(text, end="")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    path = Path(args.scenario or (cfg.resolve(cfg.scenario) if cfg.scenario else ""))
    if not path.is_file():
        raise ConfigError("simulate needs a scenario file (--scenario or scenario= in the config)")
    sc = distsim.Scenario.from_text(path.read_text(encoding="utf-8"))
    train, test = cfg.datasets()
    sets = sc.device_sets(cfg.manifest.Q)
    s_train = _states_for(cfg, train, args)
    s_test = _states_for(cfg, test, args, len(train))
    nodes = []
    for i, (devs, idx) in enumerate(zip(sets, distsim.split_training(train.labels, sets))):
        nodes.append(distsim.NodeSpec(i, devs, train.labels[idx], cfg.reservoir, states=s_train.X[idx]))
    res = distsim.run_scenario(nodes, s_test.X, test.labels, sc.mode, sc.retrain, sc.lam, sc.epochs, sc.lr,
                               seed=sc.seed, threads=args.threads)
    _write(args, "ledger.csv", res.ledger.summary_csv(), stamp=False)
    _write(args, "accuracy.csv", res.accuracy_csv(), stamp=False)
    formula = distsim.comm_cost([len(s) for s in sets], distsim.BYTES_PER_WEIGHT, cfg.reservoir.state_dim)
    ids = [n.node_id for n in nodes]
    text = (f"nodes={len(nodes)}\nmode={sc.mode}\nformula_bytes={formula:.1f}\n"
            f"mean_payload_bytes={res.ledger.mean_payload(ids) if len(ids) > 1 else 0:.1f}\n"
            f"mean_header_bytes={res.ledger.mean_header(ids):.1f}\nretrain_multiplies={res.ledger.total_retrain}\n")
    _write(args, "simulate.txt", text)
    print(text, end="")
    return 0


def _grid(text: str) -> dict[str, list]:
    space = {}
    for k, v in parse_kv(text).items():
        vals = []
        for item in v.split(","):
            item = item.strip()
            try:
                vals.append(int(item))
            except ValueError:
                try:
                    vals.append(float(item))
                except ValueError:
                    raise ConfigError(f"grid value {item!r} for {k} is not a number") from None
        space[k] = vals
    return space


def cmd_tune(args) -> int:
    cfg = _load_config(args)
    if not Path(args.grid).is_file():
        raise ConfigError(f"grid file {args.grid} not found")
    space = _grid(Path(args.grid).read_text(encoding="utf-8"))
    known = {"lambda", "eta", "nu", "N", "k"}
    if not space or set(space) - known:
        raise ConfigError(f"grid keys must be among {sorted(known)}")
    train, _ = cfg.datasets()
    order = np.arange(len(train))
    val = order % 5 == 0  # every fifth burst validates; test data stays untouched
    fit_set, val_set = train.subset(~val), train.subset(val)
    lams = space.pop("lambda", [cfg.lam])
    cache = {}

    def evaluate_point(point):
        rc = cfg.reservoir.replace(**{k: v for k, v in point.items() if k != "lambda"})
        key = rc.hash()
        if key not in cache:
            a = compute_states(cfg.transform, rc, fit_set, cfg.noise_seed, args.threads)
            b = compute_states(cfg.transform, rc, val_set, cfg.noise_seed + len(fit_set), args.threads)
            cache[key] = (ridge.LambdaSweep(a.X, a.labels), b)
        sweep, b = cache[key]
        try:
            return ridge.accuracy(sweep.fit(point["lambda"]), b.X, b.labels)
        except DLRError:
            return 0.0

    space = {**space, "lambda": lams}
    result = ridge.grid_search(space, evaluate_point, refine=not args.no_refine)
    rows = ["N,k,eta,nu,lambda,accuracy"]
    for p, a in sorted(result.table, key=lambda r: (r[0].get("N", cfg.reservoir.N), -r[1])):
        rows.append(",".join(str(p.get(k, getattr(cfg.reservoir, k, ""))) for k in ("N", "k", "eta", "nu"))
                    + f",{p['lambda']!r},{a:.6f}")
    _write(args, "tune.csv", "\n".join(rows) + "\n", stamp=False)
    best = dict(result.best)
    lam = best.pop("lambda")
    tuned = ExperimentConfig(cfg.manifest, cfg.transform, cfg.reservoir.replace(**best), lam, cfg.seed,
                             cfg.noise_seed, cfg.out, cfg.scenario, cfg.train_path, cfg.test_path, cfg.base_dir)
    _write(args, "best.cfg", tuned.to_text())
    print(f"best {result.best} validation_accuracy={result.accuracy:.6f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    train, test = cfg.datasets()
    model = ridge.fit_labels(baseline_features(cfg.transform, train), train.labels, cfg.lam)
    acc = ridge.accuracy(model, baseline_features(cfg.transform, test), test.labels)
    _write(args, "baseline.txt", f"transform={cfg.transform.transform_id}\ntest_accuracy={acc:.6f}\n")
    print(f"test_accuracy={acc:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment config")
    common.add_argument("--seed", type=int, help="dataset seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--no-timestamp", action="store_true", help="omit timestamps and wall-clock figures")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--counter", action="store_true", help="count multiplies")

    p = argparse.ArgumentParser(prog="dlr", description="Delay-loop reservoir classification of RF bursts.")
    p.add_argument("--version", action="version", version=f"%(prog)s (kernel: {reservoir.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset").set_defaults(func=cmd_synth)
    s = sub.add_parser("train", parents=[common], help="train a readout and write the FOM report")
    s.add_argument("--classes", help="train on these devices only, e.g. 0-9")
    s.set_defaults(func=cmd_train)
    sub.add_parser("baseline", parents=[common], help="ridge regression without a reservoir").set_defaults(func=cmd_baseline)
    s = sub.add_parser("infer", parents=[common], help="predict with a saved readout")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help="dataset file (default: the config's test set)")
    s.set_defaults(func=cmd_infer)
    s = sub.add_parser("salience", parents=[common], help="sub-burst accuracy map")
    s.add_argument("--stride", type=int, default=32)
    s.set_defaults(func=cmd_salience)
    s = sub.add_parser("merge", parents=[common], help="fuse saved readouts into one net")
    s.add_argument("models", nargs="+")
    s.add_argument("--mode", choices=[distsim.DISJOINT, distsim.OVERLAPPING], default=distsim.DISJOINT)
    s.add_argument("--head", choices=list(fusion.HEADS), default=fusion.SOFTMAX)
    s.add_argument("--retrain", action="store_true")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--lr", type=float, default=0.05)
    s.set_defaults(func=cmd_merge)
    s = sub.add_parser("outlier", parents=[common], help="entropy ROC for legitimate vs outlier bursts")
    s.add_argument("--net", required=True)
    s.add_argument("--legit", required=True)
    s.add_argument("--outliers", required=True)
    s.add_argument("--train", help="training set used to calibrate the threshold")
    s.set_defaults(func=cmd_outlier)
    s = sub.add_parser("simulate", parents=[common], help="run a multi-node exchange scenario")
    s.add_argument("--scenario")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("tune", parents=[common], help="hierarchical grid search")
    s.add_argument("--grid", required=True)
    s.add_argument("--no-refine", action="store_true")
    s.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DLRError as exc:
        kind = type(exc).__name__
        print(f"dlr {args.command}: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dlr {args.command}: DataError: {exc}", file=sys.stderr)
        return DataError.exit_code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
