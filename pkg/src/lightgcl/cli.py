"""Command-line pipeline: preprocess, train, evaluate, sweep.

Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure.
Set THREADS to cap BLAS worker threads; THREADS=1 gives bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import pickle
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config, parse_assignments
from .errors import ConfigError, DataError, LightGCLError
from .evaluation import evaluate
from .model import load_checkpoint, save_checkpoint
from .svd import approx_svd, load_factors, save_factors
from .trainer import TRAIN_LOG_COLUMNS, VAL_LOG_COLUMNS, full_forward, train

log = logging.getLogger("lightgcl")

SWEEP_KEYS = ("lambda1", "tau", "q", "dropout")


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        names = {
            "train": "train.tsv", "val": "val.tsv", "test": "test.tsv", "idmap": "idmap.tsv",
            "adjacency": "adjacency.bin", "factors": "factors.bin", "config": "config.txt",
            "checkpoint": "checkpoint.bin", "resume": "resume.pkl",
            "train_log": "train_log.tsv", "val_log": "val_log.tsv",
            "metrics_json": "metrics.json", "metrics_tsv": "metrics.tsv",
            "sweep_summary": "sweep_summary.tsv",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise DataError("missing artifact(s): " + ", ".join(missing) + "; run `lightgcl preprocess` first")


def _shape(wd):
    user_raw, item_raw = D.read_idmap(wd.idmap)
    return user_raw.size, item_raw.size


def load_splits(wd):
    _require(wd.idmap, wd.train, wd.test)
    n_users, n_items = _shape(wd)
    train_set = D.read_dense(wd.train, n_users, n_items)
    test_set = D.read_dense(wd.test, n_users, n_items)
    val_set = D.read_dense(wd.val, n_users, n_items) if wd.val.exists() and wd.val.stat().st_size else None
    return train_set, val_set, test_set


def run_preprocess(cfg: RunConfig, out=None):
    out = out or sys.stdout
    if not cfg.interactions:
        raise ConfigError("set interactions=<path> to preprocess")
    if not Path(cfg.interactions).exists():
        raise DataError(f"interaction file not found: {cfg.interactions}")
    wd = Workdir(cfg.workdir)
    wd.root.mkdir(parents=True, exist_ok=True)
    everything = D.load_interactions(cfg.interactions, cfg.format)
    if cfg.q > min(everything.n_users, everything.n_items):
        raise ConfigError(f"q={cfg.q} exceeds min(I, J)={min(everything.n_users, everything.n_items)}")
    fit, test = D.split(everything, cfg.test_ratio, cfg.split_seed)
    if cfg.val_ratio > 0:
        fit, val = D.split(fit, cfg.val_ratio, cfg.split_seed + 1)
    else:
        val = fit.with_pairs([], [])
    adj = D.normalize(fit)
    factors = approx_svd(adj, cfg.rsvd_config())

    D.write_interactions(fit, wd.train)
    D.write_interactions(val, wd.val)
    D.write_interactions(test, wd.test)
    D.write_idmap(everything, wd.idmap)
    D.save_adjacency(adj, wd.adjacency)
    save_factors(factors, wd.factors)
    wd.config.write_text(cfg.to_text(), encoding="utf-8")

    n_users, n_items, n_edges = everything.n_users, everything.n_items, len(everything)
    density = n_edges / (n_users * n_items)
    print(f"I={n_users} J={n_items} E={n_edges} density={density:.6g}", file=out)
    print(f"train={len(fit)} val={len(val)} test={len(test)} q={factors.q} "
          f"sigma_max={factors.s[0]:.6g}", file=out)
    return wd


def run_train(cfg: RunConfig, resume=False, out=None):
    out = out or sys.stdout
    wd = Workdir(cfg.workdir)
    _require(wd.adjacency)
    train_set, val_set, _ = load_splits(wd)
    adj = D.load_adjacency(wd.adjacency)
    tcfg = cfg.train_config()
    factors = None
    if tcfg.lambda1 > 0:
        _require(wd.factors)
        factors = load_factors(wd.factors)
        if factors.shape != adj.shape:
            raise DataError(f"factor shape {factors.shape} does not match adjacency {adj.shape}")
    snapshot = None
    if resume:
        if not wd.resume.exists():
            raise DataError(f"nothing to resume: {wd.resume} not found")
        with open(wd.resume, "rb") as fh:
            snapshot = pickle.load(fh)
        # the epoch budget may grow on resume; everything else must match
        saved = {k: v for k, v in snapshot["config"].items() if k != "epochs"}
        if saved != {k: v for k, v in tcfg.__dict__.items() if k != "epochs"}:
            raise ConfigError("resume snapshot was produced with a different configuration")
        if snapshot.get("finished"):
            print("run already finished; nothing to resume", file=out)

    def save_snapshot(snap):
        tmp = wd.resume.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(snap, fh, protocol=4)
        os.replace(tmp, wd.resume)

    wd.config.write_text(cfg.to_text(), encoding="utf-8")
    if snapshot is not None and snapshot.get("finished"):
        from .model import EmbeddingState
        best = EmbeddingState(snapshot["best_user0"], snapshot["best_item0"], tcfg.n_layers)
        train_log, val_log, best_epoch = snapshot["train_log"], snapshot["val_log"], snapshot["best_epoch"]
    else:
        result = train(tcfg, train_set, adj, factors, val_set, resume=snapshot, on_epoch_end=save_snapshot)
        best, train_log, val_log, best_epoch = result.state, result.train_log, result.val_log, result.best_epoch
    save_checkpoint(best, wd.checkpoint)
    _write_tsv(wd.train_log, TRAIN_LOG_COLUMNS, train_log)
    _write_tsv(wd.val_log, VAL_LOG_COLUMNS, val_log)
    last = train_log[-1] if train_log else None
    print(f"epochs={train_log[-1][0] if last else 0} batches={len(train_log)} best_epoch={best_epoch}"
          + (f" best_val_recall@20={max(v[1] for v in val_log):.6f}" if val_log else ""), file=out)
    return wd


def run_evaluate(cfg: RunConfig, checkpoint=None, groups=None, out=None, prefix=None):
    out = out or sys.stdout
    wd = Workdir(cfg.workdir)
    checkpoint = Path(checkpoint) if checkpoint else wd.checkpoint
    _require(checkpoint, wd.adjacency)
    train_set, val_set, test_set = load_splits(wd)
    known = train_set.union(val_set) if val_set is not None else train_set
    adj = D.load_adjacency(wd.adjacency)
    state = load_checkpoint(checkpoint)
    if (state.n_users, state.n_items) != adj.shape:
        raise DataError(f"checkpoint shape {(state.n_users, state.n_items)} does not match data {adj.shape}")
    full_forward(state, adj)
    boundaries = groups if groups is not None else cfg.group_boundaries()
    report = evaluate(state, known, test_set, cfg.eval_ns(), boundaries,
                      with_mad=cfg.mad_sample > 1, mad_sample=cfg.mad_sample, seed=cfg.seed)
    json_path = Path(f"{prefix}.json") if prefix else wd.metrics_json
    tsv_path = Path(f"{prefix}.tsv") if prefix else wd.metrics_tsv
    json_path.write_text(report.to_json(), encoding="utf-8")
    tsv_path.write_text(report.to_tsv(), encoding="utf-8")
    summary = " ".join(f"recall@{n}={report.recall[n]:.6f} ndcg@{n}={report.ndcg[n]:.6f}" for n in report.ns)
    print(f"users={report.n_users} {summary}" + (f" mad={report.mad:.4f}" if report.mad is not None else ""),
          file=out)
    if report.boundaries is not None:
        print("group\tusers\t" + "\t".join(f"recall@{n}" for n in report.ns) + "\t"
              + "\t".join(f"decomposed@{n}" for n in report.ns), file=out)
        for g in sorted(report.user_group_count):
            print(f"{g}\t{report.user_group_count[g]}\t"
                  + "\t".join(f"{report.user_group_recall[g][n]:.6f}" for n in report.ns) + "\t"
                  + "\t".join(f"{report.item_group_recall[g][n]:.6f}" for n in report.ns), file=out)
    return report


def parse_grid(text):
    """``"tau=0.3,0.5;lambda1=1e-7,0"`` -> ordered list of override dicts (cartesian product)."""
    axes = []
    for part in text.replace("\n", ";").split(";"):
        part = part.split("#", 1)[0].strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad grid axis {part!r}; expected key=v1,v2,...")
        key, values = (s.strip() for s in part.split("=", 1))
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; allowed: {', '.join(SWEEP_KEYS)}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append([(key, v) for v in vals])
    if not axes:
        raise ConfigError("empty grid")
    return [dict(combo) for combo in itertools.product(*axes)]


def _sweep_point(args):
    base, idx, point = args
    wd = Workdir(base.workdir)
    point_dir = wd.root / "sweep" / f"point_{idx:03d}"
    point_dir.mkdir(parents=True, exist_ok=True)
    overrides = parse_assignments([f"{k}={v}" for k, v in point.items()])
    try:
        cfg = base.replace(workdir=str(point_dir), **overrides)
        for name in ("train", "val", "test", "idmap", "adjacency"):
            src = getattr(wd, name)
            if src.exists():
                getattr(Workdir(point_dir), name).write_bytes(src.read_bytes())
        if cfg.q != base.q:
            factors = approx_svd(D.load_adjacency(wd.adjacency), cfg.rsvd_config())
            save_factors(factors, Workdir(point_dir).factors)
        else:
            Workdir(point_dir).factors.write_bytes(wd.factors.read_bytes())
        sink = open(os.devnull, "w")
        with sink:
            run_train(cfg, out=sink)
            report = run_evaluate(cfg, out=sink)
        return idx, point, "ok", report
    except Exception as exc:  # a failed point is recorded, the sweep goes on
        return idx, point, f"failed: {type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " "), None


def run_sweep(cfg: RunConfig, grid, jobs=1, out=None):
    out = out or sys.stdout
    wd = Workdir(cfg.workdir)
    _require(wd.adjacency, wd.factors)
    points = parse_grid(grid) if isinstance(grid, str) else list(grid)
    tasks = [(cfg, i, p) for i, p in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    keys = list(dict.fromkeys(k for p in points for k in p))
    ns = cfg.eval_ns()
    header = ["point", *keys, "status"] + [f"{m}@{n}" for n in ns for m in ("recall", "ndcg")]
    rows = []
    for idx, point, status, report in sorted(results, key=lambda r: r[0]):
        metrics = []
        for n in ns:
            metrics += [repr(report.recall[n]), repr(report.ndcg[n])] if report else ["", ""]
        rows.append([str(idx), *[point.get(k, "") for k in keys], status, *metrics])
    with open(wd.sweep_summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    print(f"{len(rows)} point(s), {sum(r[len(keys) + 1] == 'ok' for r in rows)} ok -> {wd.sweep_summary}",
          file=out)
    return rows


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="lightgcl", description="SVD-augmented graph contrastive recommender")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key=value config file")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", parents=[common], help="split, normalize, factorize")
    t = sub.add_parser("train", parents=[common], help="train and checkpoint")
    t.add_argument("--resume", action="store_true", help="continue from the last epoch snapshot")
    e = sub.add_parser("evaluate", parents=[common], help="write metrics reports")
    e.add_argument("--checkpoint", help="checkpoint file (default: <workdir>/checkpoint.bin)")
    e.add_argument("--groups", help="degree boundaries, e.g. 15,30,50")
    e.add_argument("--out", help="report path prefix (default: <workdir>/metrics)")
    s = sub.add_parser("sweep", parents=[common], help="grid over lambda1/tau/q/dropout")
    s.add_argument("--grid", required=True, help="'tau=0.3,0.5;lambda1=1e-7,0' or @file")
    s.add_argument("--jobs", type=int, default=1)
    return p


def _limit_threads():
    threads = os.environ.get("THREADS")
    if not threads:
        return None
    try:
        n = int(threads)
    except ValueError:
        raise ConfigError(f"THREADS must be an integer, got {threads!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config, args.overrides)
        if args.command == "preprocess":
            run_preprocess(cfg)
        elif args.command == "train":
            run_train(cfg, resume=args.resume)
        elif args.command == "evaluate":
            groups = None
            if args.groups:
                groups = cfg.replace(groups=args.groups).group_boundaries()
            run_evaluate(cfg, args.checkpoint, groups, prefix=args.out)
        elif args.command == "sweep":
            grid = args.grid
            if grid.startswith("@"):
                grid = Path(grid[1:]).read_text(encoding="utf-8")
            run_sweep(cfg, grid, jobs=args.jobs)
        del limiter
    except LightGCLError as exc:
        print(f"lightgcl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"lightgcl: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
