"""Command-line front end: ``drolt <command> [options]``.

Commands: synth, train, sweep, probe, boundgap, coverage, eval.

Exit codes: 0 success, 2 usage, 3 config validation, 4 runtime failure.
Training runs go to ``<root>/<config-hash>-<timestamp>/`` where the root is
``--run-root``, else ``$DROLT_RUN_ROOT``, else ``./runs``.  Existing run
directories are never written to again.
"""

import argparse
import concurrent.futures
import csv
import io
import itertools
import json
import os
import statistics
import sys
import time

import numpy as np

from drolt import centroids, config, data, epsilon, evaluation, losses, trainer
from drolt.model import CheckpointError, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
RUN_ROOT_ENV = "DROLT_RUN_ROOT"

SWEEP_COLUMNS = ["value", "seed", "status", "acc_many", "acc_med", "acc_few", "acc_balanced", "run_dir", "error"]
SWEEP_SUMMARY_COLUMNS = ["value", "runs_ok", "acc_many", "acc_med", "acc_few", "acc_balanced"]
BOUNDGAP_COLUMNS = ["class", "count", "epsilon", "upper_mean", "lower_mean", "gap_ratio"]
COVERAGE_COLUMNS = ["n", "dim", "sigma", "eps_metric", "trials", "seed", "p_hat", "stderr", "closed_form"]
ACCURACY_COLUMNS = ["split", "acc_many", "acc_med", "acc_few", "acc_balanced"]

RUNTIME_ERRORS = (CheckpointError, trainer.TrainingDiverged, trainer.StageOrderError,
                  data.DatasetFormatError, OSError)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def run_root(args):
    return args.run_root or os.environ.get(RUN_ROOT_ENV) or "runs"


def new_run_dir(root, cfg, prefix=""):
    """Create a fresh directory named by config hash and timestamp."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{prefix}{config.digest(cfg)}-{stamp}")
    path, k = base, 0
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            k += 1
            path = f"{base}-{k}"


def add_config_flags(parser):
    group = parser.add_argument_group("config overrides (each one mirrors a config key)")
    for key, (default, _, _, desc) in config.SCHEMA.items():
        shown = ",".join(map(str, default)) if isinstance(default, list) else default
        group.add_argument(f"--{key}", dest=key, metavar="V", default=None, help=f"{desc} [default: {shown}]")


def config_from_args(args, base=None):
    cfg = dict(base or {})
    if getattr(args, "config", None):
        cfg.update(config.load(args.config))
    problems = []
    for key in config.SCHEMA:
        text = getattr(args, key, None)
        if text is None:
            continue
        try:
            cfg[key] = config.coerce(key, text)
        except config.ConfigError as exc:
            problems += exc.problems
    if problems:
        raise config.ConfigError(problems)
    return cfg


def write_csv(path, rows, columns, meta=None):
    """Write ``rows`` to ``path`` (or stdout for ``None``) plus a ``.json`` sidecar with ``meta``."""
    if path is None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: evaluation._cell(row[k]) for k in columns})
        sys.stdout.write(buf.getvalue())
        return
    evaluation.write_csv(path, rows, columns)
    if meta is not None:
        with open(f"{path}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_run(checkpoint, dataset_path=None):
    """Network, resolved config, dataset and radius policy stored with a checkpoint."""
    net, extra, meta = load_checkpoint(checkpoint)
    cfg = meta.get("config")
    if cfg is None:
        raise CheckpointError(f"checkpoint {checkpoint} carries no run config")
    ds = data.load(dataset_path) if dataset_path else trainer.build_dataset(cfg)
    if cfg["epsilon.variant"] == "learned" and extra.get("eps_param") is not None and extra["eps_param"].size:
        policy = epsilon.EpsilonPolicy("learned", ds.class_counts, per_class_param=extra["eps_param"])
    else:
        policy = trainer.build_policy(cfg, ds)
    return net, cfg, ds, policy


def _artifact_meta(cfg, **more):
    meta = {"config": cfg, "seed": {"data": cfg["data.seed"], "train": cfg["train.seed"]}}
    meta.update(more)
    return meta


def _sort_key(value):
    if isinstance(value, (int, float)):
        return (0, float(value), "")
    return (1, 0.0, json.dumps(value))


# --------------------------------------------------------------------------- commands


def cmd_synth(args):
    try:
        counts = data.count_profile(args.classes, args.n_max, args.beta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = data.synthesize(args.classes, args.n_max, args.beta, args.dim, spread=args.spread, seed=args.seed,
                         separation=args.separation, test_per_class=args.test_per_class,
                         val_per_class=args.val_per_class)
    data.save(ds, args.out)
    print("counts:", " ".join(str(int(n)) for n in counts))
    print(f"beta check: {counts[0]}/{counts[-1]} = {counts[0] / counts[-1]:.4g} (requested {args.beta:g})")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args):
    base = None
    if args.resume:
        _, _, meta = load_checkpoint(args.resume)
        base = {k: v for k, v in meta["config"].items() if k != "schema_version"}
    cfg = config_from_args(args, base)
    if args.stage:
        cfg["run.stage"] = args.stage
    cfg = config.resolve(cfg)
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        print("config is valid; nothing written", file=sys.stderr)
        return EXIT_OK
    out = new_run_dir(run_root(args), cfg)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = trainer.run(cfg, out_dir=out, resume=args.resume)
    t = report["test"]
    print(f"run directory: {out}")
    print(f"test accuracy: many={_fmt(t['many'])} med={_fmt(t['med'])} few={_fmt(t['few'])} "
          f"balanced={_fmt(t['balanced'])}")
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def _sweep_child(job):
    cfg, out_dir = job
    try:
        rep = trainer.run(cfg, out_dir=out_dir)
    except Exception as exc:  # recorded, the sweep carries on
        return {"status": "failed", "error": " ".join(f"{type(exc).__name__}: {exc}".split())}
    return {"status": "ok", "error": "", **{f"acc_{k}": v for k, v in rep["test"].items()}}


def cmd_sweep(args):
    if args.key not in config.SCHEMA:
        raise config.ConfigError([f"sweep key {args.key!r} is not a config key"])
    base = config.resolve(config_from_args(args))
    values = [config.coerce(args.key, text) for text in args.values]
    seeds = args.seeds if args.seeds else [base["train.seed"]]
    root = new_run_dir(run_root(args), {**base, "sweep": [args.key, values, seeds]}, prefix="sweep-")
    jobs, rows = [], []
    for i, (value, seed) in enumerate(itertools.product(values, seeds)):
        cfg = {k: v for k, v in base.items() if k != "schema_version"}
        cfg[args.key] = value
        if args.seeds:
            cfg["data.seed"] = seed
            cfg["train.seed"] = seed
        out = os.path.join(root, f"run{i:03d}")
        jobs.append((cfg, out))
        rows.append({"value": value, "seed": seed, "run_dir": os.path.basename(out)})
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]
    for row, res in zip(rows, results):
        row.update({"acc_many": None, "acc_med": None, "acc_few": None, "acc_balanced": None})
        row.update(res)
    rows.sort(key=lambda r: (_sort_key(r["value"]), r["seed"]))
    for r in rows:
        r["value"] = json.dumps(r["value"]) if isinstance(r["value"], list) else r["value"]

    summary = []
    for value, group in itertools.groupby(rows, key=lambda r: r["value"]):
        ok = [r for r in group if r["status"] == "ok"]
        entry = {"value": value, "runs_ok": len(ok)}
        for col in ("acc_many", "acc_med", "acc_few", "acc_balanced"):
            vals = [r[col] for r in ok if r[col] is not None]
            entry[col] = statistics.median(vals) if vals else None
        summary.append(entry)
    failures = [r for r in rows if r["status"] != "ok"]
    meta = {"config": base, "sweep_key": args.key, "values": values, "seeds": seeds,
            "failures": [{"value": r["value"], "seed": r["seed"], "error": r["error"]} for r in failures]}
    write_csv(os.path.join(root, "sweep.csv"), rows, SWEEP_COLUMNS, meta)
    write_csv(os.path.join(root, "sweep_summary.csv"), summary, SWEEP_SUMMARY_COLUMNS, meta)
    print(f"sweep directory: {root}")
    for entry in summary:
        print(f"{args.key}={entry['value']}: balanced={_fmt(entry['acc_balanced'])} ({entry['runs_ok']} ok)")
    if failures:
        print(f"{len(failures)} of {len(rows)} runs failed:", file=sys.stderr)
        for r in failures:
            print(f"  {args.key}={r['value']} seed={r['seed']}: {r['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_probe(args):
    net, cfg, ds, _ = load_run(args.checkpoint, args.dataset)
    rows = evaluation.probe_rows(net, ds)
    write_csv(args.out, rows, evaluation.PROBE_COLUMNS, _artifact_meta(cfg, checkpoint=str(args.checkpoint)))
    return EXIT_OK


def boundgap_rows(z, labels, class_counts, bank, policy, weight_mode="inverse_count"):
    batch = losses.make_batch(z, labels, class_counts, weight_mode)
    upper = losses.upper_bound_loss(batch, bank, policy)
    lower = losses.lower_bound_loss(batch, bank, policy)
    ratio = np.abs(upper - lower) / upper
    eps = policy.values()
    rows = []
    for c in range(len(class_counts)):
        m = labels == c
        rows.append({"class": c, "count": int(class_counts[c]), "epsilon": float(eps[c]),
                     "upper_mean": float(upper[m].mean()), "lower_mean": float(lower[m].mean()),
                     "gap_ratio": float(ratio[m].mean())})
    return rows, float(ratio.mean())


def cmd_boundgap(args):
    net, cfg, ds, policy = load_run(args.checkpoint, args.dataset)
    if args.variant is not None or args.value is not None:
        variant = args.variant or "shared"
        value = cfg["epsilon.value"] if args.value is None else args.value
        if value < 0:
            raise UsageError("--value must be >= 0")
        policy = epsilon.make_policy(variant, value, ds.class_counts, init=cfg["epsilon.init"])
    z = net.embed(ds.x_train)[-1]
    bank = centroids.recompute(z, ds.y_train, ds.n_classes)
    rows, mean_ratio = boundgap_rows(z, ds.y_train, ds.class_counts, bank, policy, cfg["train.weight_mode"])
    write_csv(args.out, rows, BOUNDGAP_COLUMNS,
              _artifact_meta(cfg, checkpoint=str(args.checkpoint), epsilon=policy.values().tolist(),
                             mean_gap_ratio=mean_ratio))
    print(f"bound gap |upper - lower| / robust, averaged over {len(ds.y_train)} samples: {mean_ratio:.2f}",
          file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK


def cmd_coverage(args):
    rows = []
    for n, d, eps in itertools.product(args.n, args.dim, args.eps):
        est = evaluation.estimate_coverage(n, args.sigma, d, eps, args.trials, seed=args.seed)
        rows.append({"n": n, "dim": d, "sigma": args.sigma, "eps_metric": eps, "trials": est.trials,
                     "seed": args.seed, "p_hat": est.p_hat, "stderr": est.stderr,
                     "closed_form": evaluation.coverage_closed_form(n, args.sigma, d, eps)})
    meta = {"seed": args.seed, "inputs": {"n": args.n, "dim": args.dim, "eps": args.eps,
                                          "sigma": args.sigma, "trials": args.trials}}
    write_csv(args.out, rows, COVERAGE_COLUMNS, meta)
    return EXIT_OK


def cmd_eval(args):
    net, cfg, ds, policy = load_run(args.checkpoint, args.dataset)
    acc_rows = []
    for split in ("test", "val", "train"):
        a = evaluation.evaluate(net, ds, split)
        acc_rows.append({"split": split, "acc_many": a.many, "acc_med": a.med, "acc_few": a.few,
                         "acc_balanced": a.balanced})
    eps_rows, rho = evaluation.epsilon_report(policy, ds.class_counts)
    meta = _artifact_meta(cfg, checkpoint=str(args.checkpoint), spearman_count_epsilon=rho)
    if args.out_dir is None:
        write_csv(None, acc_rows, ACCURACY_COLUMNS)
    else:
        os.makedirs(args.out_dir, exist_ok=True)
        write_csv(os.path.join(args.out_dir, "accuracy.csv"), acc_rows, ACCURACY_COLUMNS, meta)
        write_csv(os.path.join(args.out_dir, "error_gap.csv"), evaluation.error_gap_report(net, ds),
                  evaluation.ERROR_GAP_COLUMNS, meta)
        write_csv(os.path.join(args.out_dir, "epsilon.csv"), eps_rows, evaluation.EPSILON_COLUMNS, meta)
        bank = centroids.recompute(net.embed(ds.x_train)[-1], ds.y_train, ds.n_classes)
        centroids.write_csv(bank, os.path.join(args.out_dir, "bank.csv"))
        with open(os.path.join(args.out_dir, "bank.csv.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"spearman(count, epsilon): {'undefined' if rho is None else f'{rho:.4f}'}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="drolt", description=__doc__.splitlines()[0])
    p.add_argument("--run-root", default=None, help=f"directory for run outputs (env {RUN_ROOT_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a long-tail dataset file")
    s.add_argument("--out", required=True, help="output dataset file")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--n-max", type=int, default=500)
    s.add_argument("--beta", type=float, default=100.0)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--spread", type=float, default=1.0)
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-per-class", type=int, default=100)
    s.add_argument("--val-per-class", type=int, default=20)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the three training stages")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--dry-run", action="store_true", help="validate and print the resolved config only")
    t.add_argument("--stage", choices=["all", "warmup-only"], default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="one training run per value of a config key")
    w.add_argument("--config", help="JSON config file")
    w.add_argument("--key", required=True, help="config key to sweep")
    w.add_argument("--values", required=True, nargs="+", help="values, one argument each")
    w.add_argument("--seeds", type=_csv_list(int), default=None,
                   help="comma-separated seeds; each sets data.seed and train.seed")
    w.add_argument("--jobs", type=int, default=1, help="parallel child runs")
    add_config_flags(w)
    w.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("probe", cmd_probe, "nearest-centroid accuracy at every layer"),
                                 ("boundgap", cmd_boundgap, "per-class gap between the loss bounds"),
                                 ("eval", cmd_eval, "split accuracies, error gaps and radii")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--dataset", default=None, help="dataset file; default regenerates from the run config")
        if name == "eval":
            e.add_argument("--out-dir", default=None)
        else:
            e.add_argument("--out", default=None, help="CSV path; default prints to stdout")
        if name == "boundgap":
            e.add_argument("--variant", choices=epsilon.VARIANTS, default=None)
            e.add_argument("--value", type=float, default=None)
        e.set_defaults(func=func)

    c = sub.add_parser("coverage", help="Monte-Carlo coverage of the radius ball vs the chi-square form")
    c.add_argument("--n", type=_csv_list(int), required=True)
    c.add_argument("--dim", type=_csv_list(int), required=True)
    c.add_argument("--eps", type=_csv_list(float), required=True, help="metric radii")
    c.add_argument("--sigma", type=float, default=1.0)
    c.add_argument("--trials", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_coverage)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"drolt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except config.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
