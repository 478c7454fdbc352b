"""Command-line front end: ``sysidlab {gen,train,transfer,report,predict}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, data, dynsys, experiments, nn, transfer

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("layer sizes must be positive")
    return sizes


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, command: str, args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    _write_json(out / "config.json", {"command": command, **cfg})


def load_data_dir(path) -> tuple[list[data.Dataset], data.Dataset]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    groups = [data.load_dataset(root / name) for name in manifest["train"]]
    test = data.load_dataset(root / manifest["test"])
    return groups, test


def _train_config(args) -> bench.TrainConfig:
    return bench.TrainConfig(
        epochs_per_group=args.epochs_per_group,
        stop_tol=args.stop_tol,
        max_epochs=args.max_epochs,
        bptt_window=args.bptt_window,
        constant_mse=args.constant_mse,
        eval_every=args.eval_every,
        seed=args.seed,
        stop_on=args.stop_on,
        lr=args.lr,
        clip_norm=args.clip_norm,
    )


def _layer_sizes(args) -> tuple[int, ...]:
    return args.lstm_sizes or experiments.SCALES[args.preset].sizes


def _save_run(out: Path, prefix: str, net, curve, metrics_report, **provenance) -> None:
    (out / f"{prefix}curve.csv").write_text(curve.to_csv())
    (out / f"{prefix}metrics.json").write_text(metrics_report.to_json() + "\n")
    nn.save_checkpoint(net, out / f"{prefix}model.sidm", **provenance)


# --- commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    scale = experiments.SCALES[args.preset]
    spec = data.DatasetSpec(
        n_groups=args.groups if args.groups is not None else scale.groups,
        group_size=args.group_size if args.group_size is not None else scale.group_size,
        train_len=args.train_len if args.train_len is not None else scale.train_len,
        test_len=args.test_len if args.test_len is not None else scale.test_len,
        seed=args.seed,
    )
    name = experiments.SYSTEMS[args.system]
    options = {}
    if name in ("wh_benchmark", "cheby2_source"):
        options["front_feedback"] = args.front_feedback
    if name == "wh_benchmark":
        options["back_feedback"] = args.back_feedback
    train, test = data.build_dataset(name, spec, system_options=options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, g in enumerate(train):
        fname = f"train_g{k}.sidd"
        data.save_dataset(g, out / fname)
        files.append(fname)
    data.save_dataset(test, out / "test.sidd")
    if args.csv:
        data.export_csv(test, out / "test.csv")
    _write_json(out / "manifest.json", {
        "system": name,
        "system_options": options,
        "spec": spec.__dict__,
        "train": files,
        "test": "test.sidd",
    })
    _echo_config(out, "gen", args)
    print(f"system {name}  seed {spec.seed}")
    print(f"train: {spec.n_groups} groups x {spec.group_size} seqs x {spec.train_len} steps x 2 features")
    print(f"test:  {spec.group_size} seqs x {spec.test_len} steps x 2 features")
    return EXIT_OK


def _scratch(groups, test, sizes, cfg):
    net = nn.init_network(sizes, cfg.seed, test.features.shape[2], test.labels.shape[2])
    return bench.train(net, groups, test, None, cfg)


def cmd_train(args) -> int:
    groups, test = load_data_dir(args.data)
    cfg = _train_config(args)
    sizes = _layer_sizes(args)
    net, curve = _scratch(groups, test, sizes, cfg)
    report = bench.metrics(curve, constant=cfg.constant_mse)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_run(out, "", net, curve, report, seed=cfg.seed, train_config=cfg.to_dict(),
              data=test.meta.get("system"), run="scratch")
    _echo_config(out, "train", args)
    print(f"layers {sizes}  epochs {len(curve)} ({curve.stopped_by})  "
          f"min test MSE {report.curve_minimal_test_mse:.6g}  "
          f"epochs to {cfg.constant_mse:g}: {report.epochs_to_constant}")
    return EXIT_OK


def _transfer_arm(src, tgt, strategy, cfg, sizes):
    return transfer.run_transfer(src, tgt, strategy, cfg, sizes)


def cmd_transfer(args) -> int:
    src = load_data_dir(args.source_data)
    tgt = load_data_dir(args.target_data)
    cfg = _train_config(args)
    sizes = _layer_sizes(args)
    reinit_seed = args.reinit_seed if args.reinit_seed is not None else args.seed + 1
    if args.strategy == "finetune":
        if args.frozen is not None or args.reinit is not None:
            raise UsageError("--frozen/--reinit only apply to --strategy freeze")
        strategy = transfer.TransferStrategy.finetune(
            10 if args.source_epochs is None else args.source_epochs)
    else:
        frozen = _names(args.frozen) if args.frozen is not None else ["LSTM1", "LSTM2"]
        names = [f"LSTM{i + 1}" for i in range(len(sizes))] + ["Dense"]
        reinit = _names(args.reinit) if args.reinit is not None else None
        unknown = (set(frozen) | set(reinit or ())) - set(names)
        if unknown:
            raise UsageError(f"unknown layer names {sorted(unknown)}; network has {names}")
        strategy = transfer.TransferStrategy.freeze(
            40 if args.source_epochs is None else args.source_epochs,
            frozen, reinit, reinit_seed, names)

    baseline = None
    if args.with_baseline:
        workers = experiments.worker_count()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=2) as pool:
                fut_b = pool.submit(_scratch, tgt[0], tgt[1], sizes, cfg)
                fut_t = pool.submit(_transfer_arm, src, tgt, strategy, cfg, sizes)
                baseline, rep = fut_b.result(), fut_t.result()
        else:
            baseline = _scratch(tgt[0], tgt[1], sizes, cfg)
            rep = _transfer_arm(src, tgt, strategy, cfg, sizes)
    else:
        rep = _transfer_arm(src, tgt, strategy, cfg, sizes)

    reference_min = None
    base_report = None
    if baseline is not None:
        base_report = bench.metrics(baseline[1], constant=cfg.constant_mse)
        reference_min = base_report.minimal_test_mse
    elif args.baseline_metrics:
        reference_min = bench.MetricsReport.from_dict(
            json.loads(Path(args.baseline_metrics).read_text())).minimal_test_mse
    t_report = bench.metrics(rep.target_curve, constant=cfg.constant_mse, reference_min=reference_min)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = dict(seed=cfg.seed, train_config=cfg.to_dict(), strategy=strategy.to_dict())
    nn.save_checkpoint(rep.pretrained, out / "pretrained.sidm", run="pretrained", **prov)
    (out / "source_curve.csv").write_text(rep.source_curve.to_csv())
    _save_run(out, "", rep.network, rep.target_curve, t_report, run="transferred", **prov)
    rep.checkpoints = {"pretrained": "pretrained.sidm", "transferred": "model.sidm"}
    (out / "target_curve.csv").write_text(rep.target_curve.to_csv())
    if baseline is not None:
        _save_run(out, "baseline_", baseline[0], baseline[1], base_report,
                  seed=cfg.seed, train_config=cfg.to_dict(), run="scratch")
        rep.checkpoints["baseline"] = "baseline_model.sidm"
        comp = bench.compare(base_report, t_report)
        (out / "comparison.json").write_text(comp.to_json() + "\n")
        print(comp.table())
    (out / "report.json").write_text(rep.to_json() + "\n")
    _echo_config(out, "transfer", args)
    print(f"{strategy.kind}: {len(rep.source_curve)} source epochs, "
          f"{len(rep.target_curve)} target epochs ({rep.target_curve.stopped_by})")
    return EXIT_OK


def cmd_report(args) -> int:
    base = bench.MetricsReport.from_dict(json.loads(Path(args.baseline).read_text()))
    trans = bench.MetricsReport.from_dict(json.loads(Path(args.transferred).read_text()))
    if args.rebase:
        trans = bench.rebase(trans, base.minimal_test_mse)
    comp = bench.compare(base, trans)
    print(comp.table())
    if args.out:
        Path(args.out).write_text(comp.to_json() + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    groups, test = load_data_dir(args.data)
    ds = test if args.split == "test" else groups[args.group]
    if not 0 <= args.seq_index < ds.n_sequences:
        raise IndexError(f"--seq-index {args.seq_index} out of range [0, {ds.n_sequences})")
    x = ds.features[args.seq_index:args.seq_index + 1]
    y = ds.labels[args.seq_index, :, 0]
    if args.self_test:
        pred = y.copy()
    else:
        if not args.model:
            raise UsageError("--model is required unless --self-test is given")
        net, _ = nn.load_checkpoint(args.model)
        pred = nn.forward(net, x, keep_cache=False)[0][0, :, 0]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y_true", "y_pred"])
        for t in range(y.size):
            w.writerow([t, f"{y[t]:.17g}", f"{pred[t]:.17g}"])
    finally:
        if args.out:
            fh.close()
    if args.out:
        print(f"wrote {y.size} rows, MSE {float(np.mean((pred - y) ** 2)):.6g}", file=sys.stderr)
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = bench.TrainConfig()
    p.add_argument("--seed", type=int, default=2021)
    p.add_argument("--preset", choices=sorted(experiments.SCALES), default="desk",
                   help="scale preset used for default layer sizes")
    p.add_argument("--lstm-sizes", type=_sizes, default=None, help="e.g. 16,64,128")
    p.add_argument("--stop-tol", type=float, default=d.stop_tol)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--bptt-window", type=int, default=d.bptt_window)
    p.add_argument("--epochs-per-group", type=int, default=d.epochs_per_group)
    p.add_argument("--constant-mse", type=float, default=d.constant_mse)
    p.add_argument("--eval-every", type=int, default=d.eval_every)
    p.add_argument("--stop-on", choices=("train", "test"), default=d.stop_on)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--clip-norm", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sysidlab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag defaults (as echoed into config.json)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/test datasets")
    g.add_argument("--system", choices=sorted(experiments.SYSTEMS), required=True)
    g.add_argument("--seed", type=int, default=2021)
    g.add_argument("--preset", choices=sorted(experiments.SCALES), default="desk")
    g.add_argument("--groups", type=int)
    g.add_argument("--group-size", type=int)
    g.add_argument("--train-len", type=int)
    g.add_argument("--test-len", type=int)
    g.add_argument("--front-feedback", choices=dynsys.FEEDBACK_CONVENTIONS, default="printed")
    g.add_argument("--back-feedback", choices=dynsys.FEEDBACK_CONVENTIONS, default="printed")
    g.add_argument("--csv", action="store_true", help="also export test set as CSV")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network from scratch")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="run a fine-tune or freeze transfer experiment")
    x.add_argument("--source-data", required=True)
    x.add_argument("--target-data", required=True)
    x.add_argument("--strategy", choices=("finetune", "freeze"), required=True)
    x.add_argument("--source-epochs", type=int)
    x.add_argument("--frozen", help="comma-separated layer names (freeze only)")
    x.add_argument("--reinit", help="comma-separated layer names to re-initialize (freeze only)")
    x.add_argument("--reinit-seed", type=int)
    x.add_argument("--with-baseline", action="store_true",
                   help="also train a scratch baseline and write a comparison")
    x.add_argument("--baseline-metrics", help="baseline metrics.json supplying the dynamic threshold")
    x.add_argument("--out", required=True)
    _add_train_flags(x)
    x.set_defaults(func=cmd_transfer)

    r = sub.add_parser("report", help="compare baseline and transferred metrics")
    r.add_argument("--baseline", required=True)
    r.add_argument("--transferred", required=True)
    r.add_argument("--rebase", action="store_true",
                   help="rescore the transferred curve against the baseline's dynamic threshold")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    p = sub.add_parser("predict", help="write truth/prediction overlay CSV")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--seq-index", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--group", type=int, default=0)
    p.add_argument("--self-test", action="store_true", help="use labels as predictions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return parser


_POSITIVE = ("groups", "group_size", "train_len", "test_len", "max_epochs", "bptt_window",
             "epochs_per_group", "eval_every")


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config: {exc}")
    cfg.pop("command", None)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            valid = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: tuple(v) if k == "lstm_sizes" and v else v
                               for k, v in cfg.items() if k in valid})
            for a in sp._actions:
                if a.dest in cfg and a.required:
                    a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    for name in _POSITIVE:
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    if getattr(args, "source_epochs", None) is not None and args.source_epochs < 0:
        parser.error("--source-epochs must be >= 0")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (transfer.ConfigurationError, bench.ThresholdMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, transfer.ConfigurationError) else EXIT_RUNTIME
    except (OSError, ValueError, IndexError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
