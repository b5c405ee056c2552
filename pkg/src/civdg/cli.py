"""Command-line front end: generate, train, ablation, sweep, report.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 data error, 4 numerical abort, 5 contract violation.
"""

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from ._backend import BACKEND
from .config import ExperimentConfig, load_config
from .errors import (
    CivdgError,
    ConfigError,
    ContractViolation,
    DataError,
    NumericalAbort,
    ValidationError,
)
from .fileio import (
    read_dataset_binary,
    write_checkpoint,
    write_dataset_binary,
    write_representations,
)
from .scm import (
    check_mechanism_shift,
    exclude_site,
    make_ood_shift,
    parse_ood_mode,
    sample_dataset,
)
from .seeding import mix
from .trainer import ABLATIONS, fit, lambda_sweep

SPLITS = ("train", "source_val", "id_test", "ood_test")
TABLE_METRICS = ("ood_wg_acc", "ood_accuracy", "ood_ece", "ood_macro_auroc", "ood_eod", "ood_dpd",
                 "id_accuracy", "id_wg_acc", "moment_violation")

EXIT_CODES = ((ConfigError, 2), (ValidationError, 2), (DataError, 3), (NumericalAbort, 4),
              (ContractViolation, 5), (CivdgError, 1))


def exit_code_for(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


# ------------------------------------------------------------ data


def data_seed(exp, seed_index):
    return mix(exp.seed, exp.scm.seed, "data", seed_index)


def run_seed(exp, seed_index):
    """Shared by every method so ablations differ only in the method itself."""
    return mix(exp.seed, "run", seed_index)


def make_splits(exp, seed_index=0):
    """Sample the four splits; only the OOD split sees the shifted selection."""
    mode, site = parse_ood_mode(exp.ood_mode)
    base = replace(exp.scm, seed=data_seed(exp, seed_index))
    src = exclude_site(base, site) if mode == "held_out_site" else base
    ood_cfg = make_ood_shift(base, mode, site)
    splits = {
        "train": sample_dataset(src, exp.n_train, 0, "train"),
        "source_val": sample_dataset(src, exp.n_val, 1, "source_val"),
        "id_test": sample_dataset(src, exp.n_id_test, 2, "id_test"),
        "ood_test": sample_dataset(ood_cfg, exp.n_ood_test, 3, "ood_test"),
    }
    check_mechanism_shift(splits["train"], splits["ood_test"])
    return splits


def _manifest_text(exp, splits, seeds):
    lines = [f"version = {__version__}", f"config_hash = {exp.hash()}", f"ood_mode = {exp.ood_mode}"]
    lines += [f"seed.{k} = {v}" for k, v in seeds.items()]
    for name, split in splits.items():
        sel = split.config.selection_matrix
        lines.append(f"{name}.n = {len(split)}")
        lines.append(f"{name}.selection_matrix = " + "; ".join(",".join(repr(float(v)) for v in row) for row in sel))
    return "\n".join(lines) + "\n" + exp.to_text()


def cmd_generate(exp, out=None):
    out = Path(out) if out else exp.dataset_dir
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(exp, 0)
    for name, split in splits.items():
        write_dataset_binary(split, out / f"{name}.civd")
    (out / "manifest.txt").write_text(_manifest_text(exp, splits, {"master": exp.seed, "data": data_seed(exp, 0)}))
    return out


def load_splits(directory):
    directory = Path(directory)
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.civd"
        if not path.exists():
            raise DataError(f"dataset file not found: {path}")
        splits[name] = read_dataset_binary(path)
        if splits[name].role != name:
            raise DataError(f"{path}: holds role {splits[name].role!r}, expected {name!r}")
    return splits


# ------------------------------------------------------------ runs


def run_one(exp, splits, ablation, seed):
    """Fit one model and evaluate it on the held-out splits."""
    cfg = replace(exp.train, ablation=ablation, seed=seed)
    model, history = fit(splits["train"], splits["source_val"], cfg)
    ood = metrics.evaluate(model, splits["ood_test"], exp.metric.n_bins)
    idt = metrics.evaluate(model, splits["id_test"], exp.metric.n_bins)
    row = {
        "ood_wg_acc": ood.wg_acc, "ood_accuracy": ood.accuracy, "ood_ece": ood.ece,
        "ood_macro_auroc": ood.macro_auroc, "ood_eod": ood.eod, "ood_dpd": ood.dpd,
        "id_accuracy": idt.accuracy, "id_wg_acc": idt.wg_acc, "moment_violation": idt.moment_violation,
        "val_metric": history.best_metric, "best_step": history.best_step,
    }
    return model, history, {"id_test": idt, "ood_test": ood}, row


def cmd_train(exp, out=None, dump_representations=False):
    out = Path(out) if out else Path(exp.out)
    splits = load_splits(exp.dataset_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = run_seed(exp, 0)
    model, history, reports, row = run_one(exp, splits, exp.train.ablation, seed)
    write_checkpoint(model, out / "checkpoint.civd", extra={"config_hash": exp.hash(), "seed": seed})
    (out / "history.csv").write_text(history.to_text())
    reports["train"] = metrics.evaluate(model, splits["train"], exp.metric.n_bins)
    reports["source_val"] = metrics.evaluate(model, splits["source_val"], exp.metric.n_bins)
    lines = [f"# config_hash={exp.hash()}", "split," + ",".join(metrics.MetricReport.COLUMNS)]
    for name in SPLITS:
        vals = reports[name].as_dict()
        lines.append(name + "," + ",".join(metrics._fmt(vals[c]) for c in metrics.MetricReport.COLUMNS))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(f"config_hash {exp.hash()}\n")
        for name in SPLITS:
            fh.write(f"\n[{name}]\n" + reports[name].to_table())
    if dump_representations:
        for name in SPLITS:
            write_representations(out / f"representations_{name}.csv", model, splits[name])
    return out, row


def _suite_job(args):
    exp, ablation, seed_index = args
    seed = run_seed(exp, seed_index)
    try:
        splits = make_splits(exp, seed_index)
        _, _, _, row = run_one(exp, splits, ablation, seed)
        return ablation, seed_index, seed, row, ""
    except CivdgError as exc:
        return ablation, seed_index, seed, None, f"{type(exc).__name__}: {exc}"


def _map(jobs, fn, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_ablation_suite(exp, workers=1, methods=ABLATIONS):
    jobs = [(exp, m, si) for m in methods for si in range(exp.n_seeds)]
    return _map(jobs, _suite_job, workers)


def runs_to_text(exp, results):
    cols = ("method", "seed_index", "run_seed", "status") + TABLE_METRICS
    lines = [f"# config_hash={exp.hash()}", ",".join(cols)]
    for method, si, seed, row, err in results:
        status = "ok" if row is not None else "failed:" + err.replace(",", ";").replace("\n", " ")
        vals = [repr(float(row[m])) if row is not None else "nan" for m in TABLE_METRICS]
        lines.append(",".join([method, str(si), str(seed), status] + vals))
    return "\n".join(lines) + "\n"


def parse_runs_text(text):
    config_hash, rows = "", []
    lines = text.splitlines()
    if lines and lines[0].startswith("# config_hash="):
        config_hash = lines[0].split("=", 1)[1]
        lines = lines[1:]
    header = lines[0].split(",")
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        rec = dict(zip(header, parts))
        for m in TABLE_METRICS:
            rec[m] = float(rec[m])
        rows.append(rec)
    return config_hash, rows


def results_table(config_hash, rows, methods=ABLATIONS, metric_names=TABLE_METRICS):
    """Aligned mean ± std table in percent (2 decimals); failed runs are listed per cell."""
    head = ["method", "n_ok"] + list(metric_names)
    body = []
    for method in methods:
        mine = [r for r in rows if r["method"] == method]
        if not mine:
            continue
        ok = [r for r in mine if r["status"] == "ok"]
        cells = [method, f"{len(ok)}/{len(mine)}"]
        for m in metric_names:
            vals = np.array([r[m] for r in ok], dtype=np.float64)
            if vals.size == 0 or np.isnan(vals).all():
                cells.append("n/a")
                continue
            vals = vals[~np.isnan(vals)]
            cells.append(f"{100 * vals.mean():.2f} ± {100 * vals.std():.2f}")
        body.append(cells)
    widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [f"# config_hash={config_hash} (values in percent, mean ± std over seeds)", fmt(head)]
    lines += [fmt(r) for r in body]
    failed = [r for r in rows if r["status"] != "ok"]
    lines += [f"# failed: {r['method']} seed_index={r['seed_index']} {r['status']}" for r in failed]
    return "\n".join(lines) + "\n"


def cmd_ablation(exp, out=None, workers=1):
    out = Path(out) if out else Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation_suite(exp, workers)
    runs_text = runs_to_text(exp, results)
    (out / "ablation_runs.csv").write_text(runs_text)
    table = results_table(*parse_runs_text(runs_text))
    (out / "ablation_table.txt").write_text(table)
    return out, table


def _sweep_job(args):
    exp, seed_index = args
    splits = make_splits(exp, seed_index)
    seed = run_seed(exp, seed_index)
    try:
        rows = lambda_sweep(splits["train"], splits["source_val"], splits["ood_test"],
                            replace(exp.train, seed=seed), metric=exp.metric.headline)
    except CivdgError as exc:
        return seed_index, [], f"{type(exc).__name__}: {exc}"
    return seed_index, rows, ""


def cmd_sweep(exp, out=None, workers=1):
    out = Path(out) if out else Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _map([(exp, si) for si in range(exp.n_seeds)], _sweep_job, workers)
    lines = [f"# config_hash={exp.hash()}", "lambda,seed_index,run_seed,val,ood,selected"]
    for si, rows, err in results:
        if err:
            lines.append(f"# failed: seed_index={si} {err}")
        for r in rows:
            lines.append(f"{r['lam']!r},{si},{r['run_seed']},{r['val']!r},{r['ood']!r},{int(r['selected'])}")
    text = "\n".join(lines) + "\n"
    (out / "sweep.csv").write_text(text)
    return out, text


def parse_sweep_text(text):
    rows = []
    for line in text.splitlines():
        if line.startswith("#") or line.startswith("lambda,") or not line.strip():
            continue
        lam, si, seed, val, ood, sel = line.split(",")
        rows.append({"lam": float(lam), "seed_index": int(si), "run_seed": int(seed),
                     "val": float(val), "ood": float(ood), "selected": sel == "1"})
    return rows


def cmd_report(path):
    path = Path(path)
    if path.is_dir():
        path = path / "ablation_runs.csv"
    if not path.exists():
        raise DataError(f"run file not found: {path}")
    return results_table(*parse_runs_text(path.read_text()))


# ------------------------------------------------------------ entry point


def build_parser():
    p = argparse.ArgumentParser(prog="civdg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"civdg {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("generate", "train", "ablation", "sweep", "report"):
        s = sub.add_parser(verb)
        s.add_argument("--config", required=verb != "report", help="flat key=value config file")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--mode", help="independent | reversed | held_out_site=K")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--dump-representations", action="store_true")
        if verb == "report":
            s.add_argument("runs", nargs="?", help="ablation_runs.csv or its directory")
    return p


def _experiment(args):
    exp = load_config(args.config)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    if args.mode is not None:
        exp = replace(exp, ood_mode=args.mode)
    if args.out is not None:
        exp = replace(exp, out=args.out)
    return exp


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            target = args.runs or args.out
            if target is None and args.config:
                target = _experiment(args).out
            if target is None:
                raise ConfigError("report needs a runs file or --out directory")
            sys.stdout.write(cmd_report(target))
            return 0
        exp = _experiment(args)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.verb == "generate":
            out = cmd_generate(exp)
            print(f"wrote datasets to {out} (config_hash={exp.hash()})")
        elif args.verb == "train":
            out, row = cmd_train(exp, dump_representations=args.dump_representations)
            print(f"wrote run to {out} (config_hash={exp.hash()}); "
                  f"ood wg_acc={row['ood_wg_acc']:.4f} id acc={row['id_accuracy']:.4f}")
        elif args.verb == "ablation":
            _, table = cmd_ablation(exp, workers=args.workers)
            sys.stdout.write(table)
        elif args.verb == "sweep":
            out, _ = cmd_sweep(exp, workers=args.workers)
            print(f"wrote {out / 'sweep.csv'} (config_hash={exp.hash()})")
        return 0
    except CivdgError as exc:
        print(f"civdg: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
