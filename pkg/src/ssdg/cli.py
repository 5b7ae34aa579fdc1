"""Command-line harness: single runs, leave-one-domain-out ablation grids,
reports and bound evaluation.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, coerce, load_config
from .data import save_dataset
from .errors import ConfigError, NumericError
from .fusion import TEST_RULES, TRAIN_RULES
from .metrics import bound_report, estimate_bound_inputs
from .model import MODES, save_checkpoint
from .trainer import history_csv, make_dataset, summarize, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

OVERRIDE_FLAGS = ("train_rule", "test_rule", "bn_mode", "head_mode", "tau", "labels_per_class")


@dataclass(frozen=True)
class GridEntry:
    name: str
    train_rule: str
    test_rule: str
    bn_mode: str = "per-task"
    head_mode: str = "per-task"

    def __post_init__(self):
        if self.train_rule not in TRAIN_RULES or self.test_rule not in TEST_RULES:
            raise ConfigError(f"grid entry {self.name!r}: unknown fusion rule")
        if self.bn_mode not in MODES or self.head_mode not in MODES:
            raise ConfigError(f"grid entry {self.name!r}: unknown bn/head mode")

    def apply(self, config):
        return config.replace(train_rule=self.train_rule, test_rule=self.test_rule,
                              bn_mode=self.bn_mode, head_mode=self.head_mode)


FIXMATCH = GridEntry("Baseline (FixMatch)", "local-only", "global-only", "shared", "shared")

GRIDS = {
    "table2": (
        FIXMATCH,
        GridEntry("MTL+TRAIN-local+TEST-global", "local-only", "global-only"),
        GridEntry("MTL+TRAIN-local+TEST-global-local", "local-only", "avg"),
        GridEntry("MTL+TRAIN-global-local+TEST-global", "max", "global-only"),
        GridEntry("MTL+TRAIN-global-local+TEST-global-local", "max", "avg"),
    ),
    "table3": tuple(
        GridEntry(f"TRAIN-{tr}+TEST-{te}", tr, te)
        for tr in ("max", "avg") for te in ("avg", "avg-all", "max")
    ),
    "table7": (
        GridEntry("w/ SBN", "max", "avg", bn_mode="shared"),
        GridEntry("w/ SC", "max", "avg", head_mode="shared"),
        GridEntry("Ours", "max", "avg"),
    ),
}


def load_custom_grid(path):
    """CSV with columns name, train_rule, test_rule, bn_mode, head_mode."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"grid file {str(path)!r} not found")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"grid file {str(path)!r} has no rows")
    entries = []
    for k, row in enumerate(rows, start=2):
        try:
            entries.append(GridEntry(row["name"], row["train_rule"], row["test_rule"],
                                     row.get("bn_mode") or "per-task",
                                     row.get("head_mode") or "per-task"))
        except KeyError as exc:
            raise ConfigError(f"grid file missing column {exc.args[0]!r}", line=k) from None
        except ConfigError as exc:
            raise ConfigError(str(exc), line=k) from None
    return tuple(entries)


def resolve_grid(spec):
    if spec in GRIDS:
        return GRIDS[spec]
    raise ConfigError(f"unknown grid {spec!r}; expected one of {sorted(GRIDS)} or custom")


# -- single run -----------------------------------------------------------------

def _write(path, text):
    Path(path).write_text(text)


def run_experiment(config, out_dir):
    """Train one config and write dataset.csv, metrics.csv, summary.json,
    checkpoint.json and config.txt into ``out_dir``. Returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(config)
    save_dataset(dataset, out / "dataset.csv")
    _write(out / "config.txt", config.to_text())
    state = train(config, dataset)
    _write(out / "metrics.csv", history_csv(state.history))
    summary = summarize(state, config, dataset)
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(state.model, out / "checkpoint.json")
    return summary


# -- ablation grid --------------------------------------------------------------

GRID_FIELDS = ("name", "kind", "seed", "target", "target_acc", "target_acc_std",
               "pl_macro_f1", "pl_macro_f1_std")


def _fmt(v):
    return "" if v is None else repr(float(v))


def run_ablation_grid(entries, base, seeds, out_dir=None):
    """Leave-one-domain-out over every (entry, seed, target) cell.

    Entries that differ only in their test rule share one training run.
    Returns rows of kind ``cell``, then per-target ``target_mean`` rows and a
    ``grand_mean`` row per entry. The grand mean's std is taken across seeds
    of the per-seed average over targets.
    """
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError("grid entry names must be unique")
    targets = list(range(base.n_domains + 1))
    cells = {}
    cache = {}
    for seed in seeds:
        dataset = make_dataset(base.replace(seed=seed))
        for target in targets:
            for entry in entries:
                cfg = entry.apply(base.replace(seed=seed, target_domain=target))
                key = (seed, target, cfg.replace(test_rule=TEST_RULES[0]))
                if key not in cache:
                    log.info("training %s seed=%d target=%d", entry.name, seed, target)
                    state = train(cfg, dataset)
                    cache[key] = summarize(state, cfg, dataset)
                summary = cache[key]
                cells[entry.name, seed, target] = (summary["target_acc_by_rule"][entry.test_rule],
                                                   summary["final_pl_macro_f1"])
    rows = []
    for entry in entries:
        for seed in seeds:
            for target in targets:
                acc, f1 = cells[entry.name, seed, target]
                rows.append(dict(name=entry.name, kind="cell", seed=seed, target=target,
                                 target_acc=acc, target_acc_std=None, pl_macro_f1=f1,
                                 pl_macro_f1_std=None))
    for entry in entries:
        grid = np.array([[cells[entry.name, s, t] for t in targets] for s in seeds])  # S x T x 2
        for k, target in enumerate(targets):
            rows.append(dict(name=entry.name, kind="target_mean", seed=None, target=target,
                             target_acc=grid[:, k, 0].mean(), target_acc_std=grid[:, k, 0].std(),
                             pl_macro_f1=grid[:, k, 1].mean(), pl_macro_f1_std=grid[:, k, 1].std()))
        per_seed = grid.mean(axis=1)
        rows.append(dict(name=entry.name, kind="grand_mean", seed=None, target=None,
                         target_acc=per_seed[:, 0].mean(), target_acc_std=per_seed[:, 0].std(),
                         pl_macro_f1=per_seed[:, 1].mean(), pl_macro_f1_std=per_seed[:, 1].std()))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "grid.csv", grid_csv(rows))
        _write(out / "config.txt", base.to_text())
    return rows


def grid_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=GRID_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) if k.startswith(("target_acc", "pl_")) else
                         ("" if row[k] is None else row[k]) for k in GRID_FIELDS})
    return buf.getvalue()


# -- reports --------------------------------------------------------------------

def _read_metrics(run_dir):
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _final_accuracies(rows):
    last = rows[-1]
    cols = sorted((k for k in last if k.startswith("acc_domain_")), key=lambda k: int(k.rsplit("_", 1)[1]))
    return {k: float(last[k]) for k in cols + ["target_acc"]}


def emit_report(run_dir, compare_dir=None):
    """Write ``pl_precision_series.csv`` and ``report.txt`` into ``run_dir``.

    Both are pure functions of the archived metrics.csv files, so rerunning
    on the same artifacts reproduces them byte for byte.
    """
    run_dir = Path(run_dir)
    rows = _read_metrics(run_dir)
    series = io.StringIO()
    series.write("epoch,iteration,pl_precision\n")
    for r in rows:
        series.write(f"{r['epoch']},{r['iteration']},{r['pl_precision']}\n")
    _write(run_dir / "pl_precision_series.csv", series.getvalue())

    acc = _final_accuracies(rows)
    last = rows[-1]
    lines = [f"run: {run_dir.name}", f"epochs: {len(rows)}",
             f"final pseudo-label precision/recall/macro-F1: "
             f"{float(last['pl_precision']):.2f} / {float(last['pl_recall']):.2f} / "
             f"{float(last['pl_macro_f1']):.2f}", ""]
    if compare_dir is None:
        lines.append(f"{'column':<16}{'accuracy':>10}")
        lines += [f"{k:<16}{100 * v:>10.2f}" for k, v in acc.items()]
    else:
        other = _final_accuracies(_read_metrics(compare_dir))
        lines.append(f"compared with: {Path(compare_dir).name}")
        lines.append(f"{'column':<16}{'this':>10}{'other':>10}{'delta':>10}")
        for k in acc:
            if k in other:
                lines.append(f"{k:<16}{100 * acc[k]:>10.2f}{100 * other[k]:>10.2f}"
                             f"{100 * (acc[k] - other[k]):>+10.2f}")
    text = "\n".join(lines) + "\n"
    _write(run_dir / "report.txt", text)
    return text


# -- argument handling ----------------------------------------------------------

def parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def config_from_args(args):
    overrides = {k: getattr(args, k) for k in OVERRIDE_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config is None:
        return ExperimentConfig(**{k: coerce(k, v) for k, v in overrides.items()})
    return load_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="ssdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", help="key = value config file; defaults apply when omitted")
        if seeds:
            p.add_argument("--seeds", default="0", help="comma-separated seeds, e.g. 0,1,2")
        else:
            p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--train-rule", dest="train_rule", choices=TRAIN_RULES)
        p.add_argument("--test-rule", dest="test_rule", choices=TEST_RULES)
        p.add_argument("--bn-mode", dest="bn_mode", choices=MODES)
        p.add_argument("--head-mode", dest="head_mode", choices=MODES)
        p.add_argument("--tau", type=float)
        p.add_argument("--labels-per-class", dest="labels_per_class", type=int)

    common(sub.add_parser("run", help="train one configuration"))
    g = sub.add_parser("grid", help="leave-one-domain-out ablation grid")
    common(g, seeds=True)
    g.add_argument("--grid", nargs="+", default=["table2"], metavar="NAME",
                   help="table2, table3, table7 or 'custom PATH'")
    r = sub.add_parser("report", help="plot data and summary table for a run directory")
    r.add_argument("run_dir")
    r.add_argument("--compare", help="second run directory for a per-domain accuracy diff")
    b = sub.add_parser("bound", help="evaluate the target-error bound on a generated dataset")
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default="-", help="JSON file, or - for stdout")
    b.add_argument("--delta", type=float, default=0.05)
    b.add_argument("--uniform", action="store_true")
    return parser


def _grid_spec(words):
    if words[0] == "custom":
        if len(words) != 2:
            raise ConfigError("--grid custom needs exactly one PATH")
        return load_custom_grid(words[1])
    if len(words) != 1:
        raise ConfigError(f"unexpected --grid arguments {words[1:]}")
    return resolve_grid(words[0])


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            try:
                print(emit_report(args.run_dir, args.compare), end="")
            except FileNotFoundError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            return EXIT_OK
        if args.command == "bound":
            for k in OVERRIDE_FLAGS:
                setattr(args, k, None)
            config = config_from_args(args)
            dataset = make_dataset(config)
            inputs = estimate_bound_inputs(dataset, config.target, delta=args.delta, seed=config.seed)
            text = json.dumps(bound_report(inputs, uniform=args.uniform), indent=2, sort_keys=True) + "\n"
            if args.out == "-":
                print(text, end="")
            else:
                _write(args.out, text)
            return EXIT_OK
        config = config_from_args(args)
        if args.command == "run":
            summary = run_experiment(config, args.out)
            print(f"target accuracy {summary['target_acc']:.4f}  "
                  f"pseudo-label macro-F1 {summary['final_pl_macro_f1']:.2f}  -> {args.out}")
            return EXIT_OK
        entries = _grid_spec(args.grid)
        rows = run_ablation_grid(entries, config, parse_seeds(args.seeds), args.out)
        for row in rows:
            if row["kind"] == "grand_mean":
                print(f"{row['name']:<45} {100 * row['target_acc']:6.2f} +- {100 * row['target_acc_std']:5.2f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
