"""``neural-ekf <verb> --config FILE [--set key=value]...``

Verbs: simulate, preprocess, train, predict, evaluate, cluster. Every command
writes the fully resolved configuration to ``config.yaml`` in its output
directory. Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import ContractError, DecompositionError, DimensionError
from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint, training_state_to_checkpoint
from .config import ConfigError
from .data import (
    DataError,
    DuffingConfig,
    SimulationError,
    TimeSeriesDataset,
    butterworth_filter,
    load_csv,
    read_dataset,
    resample,
    simulate_duffing,
    standardize,
    window,
    write_dataset,
)
from .evaluation import ClusterReport, anomaly_report, rmse
from .models import ModelConfig, NeuralEKF
from .predict import predict_dataset
from .trainer import LOG_COLUMNS, TrainingError, train

log = logging.getLogger("neural_ekf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(cfg: dict, out: Path, extra: dict | None = None) -> None:
    doc = dict(cfg)
    if extra:
        doc = {**doc, "command": extra}
    (out / "config.yaml").write_text(cfgmod.dump(doc), encoding="utf-8")


def _dataset(path) -> TimeSeriesDataset:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return read_dataset(p)


def _duffing_config(cfg: dict) -> DuffingConfig:
    try:
        return DuffingConfig.from_dict(cfg["data"]["duffing"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "data.duffing") from None


def _model_config(cfg: dict, ds: TimeSeriesDataset) -> ModelConfig:
    m = cfg["model"]
    latent = m["latent_dim"] if m["latent_dim"] is not None else 2 * ds.obs_dim
    return ModelConfig(
        state_dim=latent,
        input_dim=ds.input_dim,
        obs_dim=ds.obs_dim,
        hidden_widths=tuple(m["hidden_widths"]),
        activation=m["activation"],
        residual=bool(m["residual"]),
        transition_output_gain=float(m["transition_output_gain"]),
        q_init=float(m["q_init"]),
        r_init=float(m["r_init"]),
        sigma0_init=float(m["sigma0_init"]),
    )


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_table(path: Path):
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


# --- commands --------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    dcfg = _duffing_config(cfg)
    n = cfg["data"]["n_trajectories"]
    ds = simulate_duffing(dcfg, n)
    out = _out_dir(args.out)
    write_dataset(ds, out)
    _echo(cfg, out, {"verb": "simulate"})
    print(f"simulated {len(ds)} trajectories: T={ds.trajectories[0].length}, d_u={ds.input_dim}, "
          f"d_x={ds.obs_dim} -> {out / 'manifest.yaml'}")
    return EXIT_OK


def _load_raw_csv(cfg) -> TimeSeriesDataset:
    c = cfg["data"]["csv"]
    files = []
    for pattern in c["files"]:
        hits = sorted(glob.glob(str(pattern)))
        if not hits:
            raise FileNotFoundError(str(pattern))
        files.extend(hits)
    if not files:
        raise ConfigError("no input files listed", "data.csv.files")
    parts = [load_csv(f, c["input_columns"], c["output_columns"], float(c["rate"]), c["delimiter"]) for f in files]
    first = parts[0]
    trajs = [tr for p in parts for tr in p.trajectories]
    ds = TimeSeriesDataset(trajs, first.sample_rate, first.input_names, first.output_names)
    ds.provenance.append({"op": "load_csv", "args": {"files": [Path(f).name for f in files]}})
    return ds


def apply_preprocessing(ds: TimeSeriesDataset, ops: list) -> TimeSeriesDataset:
    for i, op in enumerate(ops):
        kw = {k: v for k, v in op.items() if k != "op"}
        try:
            if op["op"] == "resample":
                ds = resample(ds, float(kw["rate"]))
            elif op["op"] == "butterworth":
                ds = butterworth_filter(ds, kw["kind"], float(kw["cutoff"]), int(kw.get("order", 4)),
                                        kw.get("channels", "both"))
            elif op["op"] == "window":
                ds = window(ds, int(kw["length"]), int(kw.get("stride", kw["length"])))
        except KeyError as e:
            raise ConfigError(f"missing argument {e.args[0]!r}", f"data.preprocess[{i}]") from None
    return ds


def cmd_preprocess(args, cfg) -> int:
    ds = _dataset(args.dataset) if args.dataset else _load_raw_csv(cfg)
    ds = apply_preprocessing(ds, cfg["data"]["preprocess"])
    out = _out_dir(args.out)
    write_dataset(ds, out)
    _echo(cfg, out, {"verb": "preprocess", "dataset": args.dataset})
    print(f"wrote {len(ds)} trajectories at {ds.sample_rate:g} Hz -> {out / 'manifest.yaml'}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = _dataset(args.dataset)
    tcfg = cfgmod.train_config(cfg)
    out = _out_dir(args.out)
    if args.resume:
        ck = load_checkpoint(args.resume)
        model, state, norm = restore(ck)
        mcfg = model.config
        train_ds, _ = standardize(ds, norm)
    else:
        mcfg = _model_config(cfg, ds)
        train_ds, norm = standardize(ds)
        model = NeuralEKF.build(mcfg, seed=int(cfg["model"]["seed"]))
        state = None
    if ds.obs_dim != mcfg.obs_dim or ds.input_dim != mcfg.input_dim:
        raise ContractError(f"dataset has d_u={ds.input_dim}, d_x={ds.obs_dim} but the model expects "
                            f"d_u={mcfg.input_dim}, d_x={mcfg.obs_dim}")
    _echo(cfg, out, {"verb": "train", "dataset": str(args.dataset), "resume": args.resume})
    log_path = out / "train_log.csv"

    def snapshot(st):
        return training_state_to_checkpoint(st, mcfg, tcfg, norm)

    def on_epoch(st, row):
        _write_rows(log_path, LOG_COLUMNS, [[r[c] for c in LOG_COLUMNS] for r in st.history])
        if tcfg.checkpoint_every and st.epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(snapshot(st), out / f"checkpoint_epoch{st.epoch:04d}.ckpt")
        print(f"epoch {row['epoch']:4d}  loss {row['loss']:.6g}  kl {row['kl']:.6g}", flush=True)

    state = train(train_ds, model, tcfg, state=state, on_epoch=on_epoch)
    save_checkpoint(snapshot(state), out / "checkpoint.ckpt")
    if cfg["evaluation"].get("figures", True):
        from .plotting import plot_loss_curve

        plot_loss_curve(state.history, out / "loss_curve.png")
    print(f"trained to epoch {state.epoch}; checkpoint -> {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, _, norm = restore(ck)
    ds = _dataset(args.dataset)
    mode = args.mode or cfg["evaluation"]["mode"]
    steps = cfg["evaluation"]["condition_steps"]
    preds = predict_dataset(model, ds, norm, mode, steps)
    out = _out_dir(args.out)
    header = ["t", *[f"{n}_mean" for n in ds.output_names], *[f"{n}_var" for n in ds.output_names]]
    figures = cfg["evaluation"].get("figures", True)
    for i, (tr, p) in enumerate(zip(ds.trajectories, preds)):
        name = tr.meta.get("file", f"traj_{i:04d}.csv")
        t = np.arange(tr.length) / ds.sample_rate
        _write_rows(out / name, header, np.column_stack([t, p.mean, p.variance]).tolist())
        if figures:
            from .plotting import plot_prediction

            plot_prediction(t, tr.x, p.mean, p.variance, ds.output_names, out / (Path(name).stem + ".png"),
                            title=f"{mode}: {name}")
    _echo(cfg, out, {"verb": "predict", "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
                     "mode": mode})
    print(f"wrote {len(preds)} {mode} predictions -> {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    ds = _dataset(args.dataset)
    pred_dir = Path(args.predictions)
    rows = []
    for i, tr in enumerate(ds.trajectories):
        name = tr.meta.get("file", f"traj_{i:04d}.csv")
        header, body = _read_table(pred_dir / name)
        cols = [header.index(f"{n}_mean") for n in ds.output_names if f"{n}_mean" in header]
        if len(cols) != ds.obs_dim:
            raise DataError(f"{pred_dir / name}: expected columns {[n + '_mean' for n in ds.output_names]}")
        pred = np.array([[float(r[c]) for c in cols] for r in body])
        if len(pred) != tr.length:
            raise DataError(f"{name}: prediction has {len(pred)} rows, measurement has {tr.length}")
        rows.append([Path(name).stem, *rmse(pred, tr.x)])
    out = _out_dir(args.out)
    _write_rows(out / "rmse.csv", ["case", *ds.output_names], rows)
    _echo(cfg, out, {"verb": "evaluate", "predictions": str(pred_dir), "dataset": str(args.dataset)})
    mean = np.mean([r[1:] for r in rows], axis=0)
    print("mean RMSE per channel: " + ", ".join(f"{n}={v:.6g}" for n, v in zip(ds.output_names, mean)))
    return EXIT_OK


def cmd_cluster(args, cfg) -> int:
    cases = []
    for table in args.rmse:
        path = Path(table)
        header, body = _read_table(path)
        tag = path.parent.name if path.name == "rmse.csv" else path.stem
        for r in body:
            cases.append((f"{tag}/{r[0]}", np.array([float(v) for v in r[1:]])))
    ev = cfg["evaluation"]
    k = args.k if args.k is not None else ev["k"]
    report = anomaly_report(cases, k=k, seed=int(ev["seed"]), baseline=args.baseline,
                            standardize=bool(ev["standardize_rmse"]), restarts=int(ev["restarts"]))
    out = _out_dir(args.out)
    report.write(out)
    if ev.get("figures", True):
        from .plotting import plot_clusters

        plot_clusters(report, out / "clusters.png")
    _echo(cfg, out, {"verb": "cluster", "rmse": [str(t) for t in args.rmse], "k": k})
    for j, members in enumerate(report.clusters()):
        print(f"cluster {j}: {len(members)} cases")
    return EXIT_OK


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neural-ekf", description="Neural extended Kalman filter toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. training.epochs=5 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate Duffing trajectories")
    common(p)
    p = sub.add_parser("preprocess", help="resample / filter / window a dataset")
    common(p)
    p.add_argument("--dataset", help="input manifest (default: data.csv section)")
    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("predict", help="predict observations with a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["rollout", "filtered", "smoothed"])
    p = sub.add_parser("evaluate", help="per-trajectory RMSE of predictions")
    common(p)
    p.add_argument("--predictions", required=True, help="directory written by predict")
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("cluster", help="PCA + k-means over RMSE tables")
    common(p)
    p.add_argument("--rmse", nargs="+", required=True, help="rmse.csv tables")
    p.add_argument("--k", type=int)
    p.add_argument("--baseline", help="label of the baseline case (default: first)")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "cluster": cmd_cluster,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.set)
        return COMMANDS[args.verb](args, cfg)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, DataError, ContractError, DimensionError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DecompositionError, SimulationError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
