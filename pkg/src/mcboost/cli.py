"""Command-line interface: ``mcboost {run,verify,sweep,rate-fit,export-plot}``."""

import argparse
import configparser
import csv
import io
import json
import os
import re
import sys
import tempfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dataio, hypotheses, metrics
from .dynamics import Trace
from .estimator import MulticalibrationBooster
from .exceptions import ContractError, NumericFailure, RunAborted
from .verify import check_trace
from .weaklearn import BaggedForestRegressor

SEED_ENV = "MCBOOST_SEED"


@dataclass
class RunConfig:
    dataset: str = "diabetes"
    data_path: str = None
    oracle: str = "trees"
    rule: str = "unit"
    eta: float = 1.0
    rounds: int = 20
    n_trees: int = 100
    learn_rate: float = 0.1
    max_depth: int = 3
    min_leaf: int = 1
    init: str = "forest"
    init_file: str = None
    init_n_trees: int = 100
    init_max_depth: int = 5
    gamma_mix: float = 1.0
    strong_max_depth: int = 8
    hypothesis_class: str = "intercept-slope"
    n_thresholds: int = 0
    seed: int = 0
    train_frac: float = 0.8
    synthetic_n: int = 200

    def validate(self):
        if self.rounds < 1:
            raise ContractError(f"rounds (T) must be >= 1, got {self.rounds}")
        if self.rule not in ("unit", "relaxed", "adaptive", "hybrid"):
            raise ContractError(f"unknown rule {self.rule!r}")
        if self.oracle not in ("trees", "exact"):
            raise ContractError(f"unknown oracle {self.oracle!r}")
        if self.init not in ("forest", "zero", "file"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.init == "file" and not self.init_file:
            raise ContractError("init=file needs --init-file")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, value):
    if value is None:
        return None
    typ = _FIELD_TYPES[name]
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    return str(value)


def build_config(args):
    """Defaults < ``--config`` file < ``MCBOOST_SEED`` < explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise ContractError(f"cannot read config file {args.config}")
        if "run" in cp:
            for key, val in cp["run"].items():
                name = key.replace("-", "_")
                if name not in _FIELD_TYPES:
                    raise ContractError(f"unknown config key {key!r}")
                setattr(cfg, name, _coerce(name, val))
    if os.environ.get(SEED_ENV):
        cfg.seed = int(os.environ[SEED_ENV])
    for name in _FIELD_TYPES:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, _coerce(name, val))
    return cfg.validate()


def config_to_ini(cfg):
    cp = configparser.ConfigParser()
    cp["run"] = {k.replace("_", "-"): str(v) for k, v in asdict(cfg).items() if v is not None}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# --- running ------------------------------------------------------------------


def _toy():
    X = np.zeros((2, 1))
    y = np.array([1.0, 3.0])
    ds = dataio.Dataset(X, y, ["x0"], np.array([True]), {"dataset_id": "toy"})
    return ds, ds


def load_split(cfg):
    if cfg.dataset == "toy":
        return _toy()
    if cfg.dataset == "synthetic":
        ds = dataio.make_synthetic(n=cfg.synthetic_n, seed=0)
    else:
        ds = dataio.load_dataset(cfg.dataset, cfg.data_path)
    return dataio.split(ds, cfg.train_frac, cfg.seed)


def _hclass(cfg, X, y):
    name = cfg.hypothesis_class
    if cfg.dataset == "toy" or name == "mean":
        return hypotheses.mean_class()
    if name == "intercept-slope":
        return hypotheses.intercept_slope_class(X, n_thresholds=cfg.n_thresholds)
    if name == "clamped":
        return hypotheses.clamped_link_class(X, y, n_thresholds=cfg.n_thresholds)
    if os.path.exists(name):
        with open(name, encoding="utf-8") as fh:
            return hypotheses.class_from_config(fh.read())
    raise ContractError(f"unknown hypothesis class {name!r}")


def make_estimator(cfg, X, y):
    oracle = "exact" if cfg.dataset == "toy" else cfg.oracle
    init = "zero" if cfg.dataset == "toy" else cfg.init
    strong = None
    if cfg.rule == "hybrid":
        strong = BaggedForestRegressor(cfg.init_n_trees, cfg.strong_max_depth, random_state=cfg.seed + 1)
    return MulticalibrationBooster(
        rule=cfg.rule,
        oracle=oracle,
        eta=cfg.eta,
        n_rounds=cfg.rounds,
        hypothesis_class=_hclass(cfg, X, y) if oracle == "exact" else None,
        n_trees=cfg.n_trees,
        learning_rate=cfg.learn_rate,
        max_depth=cfg.max_depth,
        min_leaf=cfg.min_leaf,
        gamma_mix=cfg.gamma_mix,
        strong_model=strong,
        init="zero" if init == "file" else init,
        init_n_trees=cfg.init_n_trees,
        init_max_depth=cfg.init_max_depth,
        random_state=cfg.seed,
    )


def _load_init_file(path, n):
    vals = np.loadtxt(path, delimiter=",", ndmin=1)
    if vals.shape != (n,):
        raise ContractError(f"init file {path} has {vals.size} values, expected {n}")
    return vals


def execute(cfg):
    """Fit on the training split; returns ``(estimator, train, test)``."""
    train, test = load_split(cfg)
    est = make_estimator(cfg, train.X, train.y)
    f0 = _load_init_file(cfg.init_file, train.n) if cfg.init == "file" else None
    est.fit(train.X, train.y, f0=f0)
    est.trace_.config.update({"dataset": cfg.dataset, "train_frac": cfg.train_frac, "init": cfg.init})
    return est, train, test


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    return "-" if v is None else f"{v:.6g}"


def round_table(trace):
    lines = [f"{'t':>3} {'w_t':>12} {'gap':>12} {'train_mse':>12} {'mce_l2':>12} {'bound':>12}"]
    for r in trace.rounds:
        lines.append(
            f"{r.t:>3} {_fmt(r.weight_used):>12} {_fmt(r.gap):>12} {_fmt(r.train_mse):>12} "
            f"{_fmt(r.mce_l2):>12} {_fmt(r.mce_bound):>12}"
        )
    return "\n".join(lines)


def cmd_run(args):
    cfg = build_config(args)
    try:
        est, _, _ = execute(cfg)
        trace = est.trace_
    except RunAborted as exc:
        if exc.trace is not None and exc.trace.rounds:
            _atomic_write(os.path.join(args.out_dir, "trace.partial.json"), exc.trace.to_json())
        raise
    _atomic_write(os.path.join(args.out_dir, "trace.json"), trace.to_json())
    _atomic_write(os.path.join(args.out_dir, "trace.csv"), trace.to_csv())
    _atomic_write(os.path.join(args.out_dir, "config.ini"), config_to_ini(cfg))
    print(round_table(trace))
    return 0


def read_trace(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return Trace.from_json(fh.read())
    except OSError as exc:
        raise ContractError(f"cannot read trace {path}: {exc}") from None


def cmd_verify(args):
    try:
        trace = read_trace(args.trace)
        report = check_trace(trace)
    except (ContractError, KeyError, TypeError, ValueError) as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return 2
    out = args.out_dir or os.path.dirname(os.path.abspath(args.trace))
    _atomic_write(os.path.join(out, "report.json"), report.to_json())
    _atomic_write(os.path.join(out, "report.txt"), report.to_text())
    print(report.to_text(), end="")
    failed = [c.name for c in report.checks if c.status == "fail"]
    if failed:
        print(f"failed checks: {', '.join(failed)}")
    return 0 if report.overall == "pass" else 1


def _window(args, trace):
    gaps = [g for g in trace.series("gap") if g is not None]
    if args.window:
        start, end = args.window
        if end > len(gaps):
            raise ContractError(f"window end {end} exceeds the {len(gaps)} recorded gaps")
        return gaps, (start, end)
    return gaps, metrics.default_window(gaps, float(np.linalg.norm(trace.y)))


def cmd_rate_fit(args):
    trace = read_trace(args.trace)
    gaps, window = _window(args, trace)
    fit = metrics.fit_log_linear(gaps, window)
    out = args.out_dir or os.path.dirname(os.path.abspath(args.trace))
    _atomic_write(os.path.join(out, "ratefit.json"), json.dumps(fit.to_dict(), indent=2))
    print(f"slope={fit.slope:.6g} kappa_hat={fit.kappa_hat:.6g} r2={fit.r2:.6g} window={list(fit.fit_window)}")
    return 0


def parse_seeds(text):
    """``"0-19"``, ``"1,4,7"`` or a mix; duplicates are rejected."""
    seeds = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            seeds.extend(range(int(m.group(1)), int(m.group(2)) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ContractError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ContractError(f"duplicate seeds in {text!r}")
    return seeds


def _sweep_one(cfg, seed, rule, out_dir):
    c = RunConfig(**{**asdict(cfg), "seed": seed, "rule": rule})
    try:
        est, _, test = execute(c)
    except Exception as exc:  # recorded; the sweep continues
        return {"seed": seed, "rule": rule, "error": f"{type(exc).__name__}: {exc}"}
    tr = est.trace_
    run_dir = os.path.join(out_dir, f"seed_{seed}", rule)
    _atomic_write(os.path.join(run_dir, "trace.json"), tr.to_json())
    _atomic_write(os.path.join(run_dir, "trace.csv"), tr.to_csv())
    diag = est.staged_diagnostics(test.X, test.y)
    return {
        "seed": seed,
        "rule": rule,
        "train_mse": tr.series("train_mse"),
        "train_mce_l2": tr.series("mce_l2"),
        "test_mse": diag["mse"].tolist(),
        "test_mce_l2": diag["mce_l2"].tolist(),
    }


def aggregate(results):
    """Long-format rows: mean curves per (rule, round) and the argmin test-MSE round per rule."""
    rows = []
    ok = [r for r in results if "error" not in r]
    for rule in sorted({r["rule"] for r in ok}):
        runs = [r for r in ok if r["rule"] == rule]
        keys = ("train_mse", "test_mse", "train_mce_l2", "test_mce_l2")
        means = {k: np.mean([r[k] for r in runs], axis=0) for k in keys}
        best = int(np.argmin(means["test_mse"]))
        for t in range(len(means["train_mse"])):
            row = {"rule": rule, "round": t, "n_seeds": len(runs)}
            row.update({f"{k}_mean": repr(float(means[k][t])) for k in keys})
            row["best_round"] = int(t == best)
            rows.append(row)
    return rows


def cmd_sweep(args):
    cfg = build_config(args)
    seeds = parse_seeds(args.seeds)
    rules = [r.strip() for r in args.rules.split(",") if r.strip()]
    for r in rules:
        RunConfig(rule=r).validate()
    jobs = [(s, r) for s in seeds for r in rules]
    if args.jobs == 1:
        results = [_sweep_one(cfg, s, r, args.out_dir) for s, r in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=args.jobs)(delayed(_sweep_one)(cfg, s, r, args.out_dir) for s, r in jobs)
    errors = [r for r in results if "error" in r]
    for e in errors:
        print(f"seed {e['seed']} rule {e['rule']} failed: {e['error']}", file=sys.stderr)
    rows = aggregate(results)
    if rows:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _atomic_write(os.path.join(args.out_dir, "aggregate.csv"), buf.getvalue())
        for row in rows:
            if row["best_round"]:
                print(f"rule {row['rule']}: best round {row['round']} (mean test MSE {float(row['test_mse_mean']):.6g})")
    return 1 if len(errors) == len(results) else 0


def cmd_export_plot(args):
    gap_rows, curve_rows = [], []
    for path in args.traces:
        tr = read_trace(path)
        label = args.label or f"{tr.config['rule']['kind']}:{os.path.basename(os.path.dirname(os.path.abspath(path)))}"
        gaps = [g for g in tr.series("gap") if g is not None]
        fit = None
        try:
            fit = metrics.fit_log_linear(gaps, metrics.default_window(gaps, float(np.linalg.norm(tr.y))))
        except ContractError:
            pass
        for t, g in enumerate(gaps):
            line = "" if fit is None else repr(fit.intercept + fit.slope * t)
            gap_rows.append([label, t, repr(g), repr(float(np.log(g))) if g > 0 else "", line])
        for r in tr.rounds:
            curve_rows.append([label, r.t, repr(r.train_mse), repr(r.mce_l2), repr(r.mce_linf)])
    for name, header, rows in (
        ("plot_gaps.csv", ["series", "t", "gap", "log_gap", "fit_log_gap"], gap_rows),
        ("plot_curves.csv", ["series", "t", "train_mse", "mce_l2", "mce_linf"], curve_rows),
    ):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        _atomic_write(os.path.join(args.out_dir, name), buf.getvalue())
    return 0


# --- parser -------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="INI file with a [run] section")
    p.add_argument("--dataset", help="california|diabetes|adult|german|communities|synthetic|toy")
    p.add_argument("--data-path")
    p.add_argument("--oracle", choices=["trees", "exact"])
    p.add_argument("--rule", choices=["unit", "relaxed", "adaptive", "hybrid"])
    p.add_argument("--eta", type=float)
    p.add_argument("--rounds", "-T", type=int, help="number of boosting rounds T")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--learn-rate", type=float)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-leaf", type=int)
    p.add_argument("--init", choices=["forest", "zero", "file"])
    p.add_argument("--init-file")
    p.add_argument("--init-n-trees", type=int)
    p.add_argument("--init-max-depth", type=int)
    p.add_argument("--gamma-mix", type=float)
    p.add_argument("--strong-max-depth", type=int)
    p.add_argument("--hypothesis-class")
    p.add_argument("--n-thresholds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--synthetic-n", type=int)
    p.add_argument("--out-dir", default=".")


def build_parser():
    parser = argparse.ArgumentParser(prog="mcboost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write trace.json / trace.csv")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check a trace; exit 0 pass, 1 fail, 2 malformed")
    p.add_argument("trace")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run several seeds and rules, write aggregate.csv")
    _add_run_flags(p)
    p.add_argument("--seeds", default="0-19", help="e.g. 0-19 or 0,3,5")
    p.add_argument("--rules", default="unit,relaxed,adaptive")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rate-fit", help="fit log(gap) against t and write ratefit.json")
    p.add_argument("trace")
    p.add_argument("--window", type=int, nargs=2, metavar=("START", "END"))
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_rate_fit)

    p = sub.add_parser("export-plot", help="write plot-ready CSVs from traces")
    p.add_argument("traces", nargs="+")
    p.add_argument("--label")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, NumericFailure, RunAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ContractError) else 1


if __name__ == "__main__":
    sys.exit(main())
