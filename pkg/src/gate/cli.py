"""Command-line entry point: ``gate <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry
from .data import NormStats, SplitManifest, corrupt, load_csv, make_split, normalize, synth_pair
from .evaluation import (METHODS, MetricsReport, RunConfig, ablation_losses, corruption_experiment,
                         cross_validate, pca_project, relative_table, rmse, table_csv)
from .networks import load_checkpoint, save_checkpoint
from .training import (eval_batch_size, holdout_indices, predict, train_gate, train_mtl, train_stl,
                       write_ndjson)

log = logging.getLogger("gate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _run_config(args) -> RunConfig:
    rc = RunConfig()
    if args.config:
        rc = RunConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    if args.seed is not None:
        rc = replace(rc, seed=args.seed, train=replace(rc.train, seed=args.seed))
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides["max_epochs"] = args.epochs
        overrides["patience"] = min(rc.train.patience, args.epochs)
    if getattr(args, "lr", None) is not None:
        overrides["lr"] = args.lr
    if overrides:
        rc = replace(rc, train=replace(rc.train, **overrides))
    return rc


def _val_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1 << 20]))


def _load_pair(args, need_source: bool):
    target = load_csv(args.target, "target")
    source = None
    if need_source:
        if not args.source:
            raise UsageError("this method needs --source")
        source = load_csv(args.source, "source")
    return target, source


# ------------------------------------------------------------------ subcommands


def cmd_synth(args, rc: RunConfig) -> None:
    seed = rc.seed
    t, s = synth_pair(args.n_target, args.n_source, args.rho, seed, args.noise)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t.to_csv(out / "target.csv")
    s.to_csv(out / "source.csv")
    _write_json({"target": str(out / "target.csv"), "source": str(out / "source.csv"),
                 "n_target": len(t), "n_source": len(s), "rho": args.rho, "seed": seed}, None)


def cmd_split(args, rc: RunConfig) -> None:
    d = load_csv(args.data)
    m = make_split(d, args.mode or rc.split_mode, rc.seed)
    if args.corrupted:
        m.corrupted = sorted(json.loads(Path(args.corrupted).read_text())["corrupted"])
    text = m.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_corrupt(args, rc: RunConfig) -> None:
    d = load_csv(args.data)
    dn, stats = normalize(d)
    bad = corrupt(dn, rc.seed, args.fraction if args.fraction is not None else rc.corruption_fraction)
    out = bad.with_values(bad.values * stats.std + stats.mean)
    out.to_csv(args.out)
    record = {"data": args.data, "seed": rc.seed, "corrupted": sorted(bad.corrupted),
              "original": [d.values[i] for i in sorted(bad.corrupted)]}
    _write_json(record, args.record)


def cmd_train(args, rc: RunConfig) -> None:
    method = args.method
    target, source = _load_pair(args, method != "stl")
    if args.manifest:
        manifest = SplitManifest.from_json(Path(args.manifest).read_text(encoding="utf-8"))
        pair = (target, source if source is not None else target)
        if method == "stl" and source is None:
            pair = (target, target)
        report = cross_validate(method, pair, manifest, rc)
        _write_json(report.to_dict(), args.report)
        return
    tn, t_stats = normalize(target)
    t_tr, t_va = holdout_indices(len(tn), rc.train.val_fraction, _val_rng(rc.seed))
    sink_records: list[dict] = []
    if method == "stl":
        res = train_stl(tn.subset(t_tr), rc.train, rc.model, val=tn.subset(t_va), sink=sink_records.append)
    else:
        sn, _ = normalize(source)
        s_tr, s_va = holdout_indices(len(sn), rc.train.val_fraction, _val_rng(rc.seed + 1))
        fn = train_gate if method == "gate" else train_mtl
        res = fn([tn.subset(t_tr), sn.subset(s_tr)], rc.train, rc.model,
                 val=[tn.subset(t_va), sn.subset(s_va)], sink=sink_records.append)
    extra = {"method": method, "run_config": rc.to_dict(), "target": str(args.target),
             "stats": {"mean": t_stats.mean, "std": t_stats.std}, "val_indices": [int(i) for i in t_va],
             "best_val_rmse": res.best_val_rmse, "best_epoch": res.best_epoch,
             "batch_size": eval_batch_size(rc.train)}
    Path(args.checkpoint).write_bytes(save_checkpoint(res.model, extra))
    if args.history:
        write_ndjson(sink_records, args.history)
    _write_json({"checkpoint": args.checkpoint, "best_epoch": res.best_epoch,
                 "best_val_rmse": res.best_val_rmse, "epochs_run": res.epochs_run}, None)


def _checkpoint_data(args):
    model, extra = load_checkpoint(Path(args.checkpoint).read_bytes())
    path = args.data or extra.get("target")
    if not path:
        raise UsageError("no --data given and the checkpoint records no dataset")
    d = load_csv(path)
    stats = extra.get("stats")
    if stats:
        d, _ = normalize(d, NormStats(stats["mean"], stats["std"]))
    else:
        d, _ = normalize(d)
    return model, extra, d


def cmd_eval(args, rc: RunConfig) -> None:
    model, extra, d = _checkpoint_data(args)
    out = {"checkpoint": args.checkpoint, "method": extra.get("method")}
    batch = int(extra.get("batch_size", rc.train.batch_size))
    if args.data is None and "val_indices" in extra:
        val = d.subset(extra["val_indices"])
        out["val_rmse"] = rmse(val.values, predict(model, val, 0, batch))
        out["recorded_best_val_rmse"] = extra.get("best_val_rmse")
    else:
        out["rmse"] = rmse(d.values, predict(model, d, 0, batch))
        out["n"] = len(d)
    _write_json(out, args.out)


def cmd_ablate(args, rc: RunConfig) -> None:
    target, source = _load_pair(args, True)
    rep = ablation_losses((normalize(target)[0], normalize(source)[0]), rc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, v in rep["variants"].items():
        write_ndjson(v["curve"], out / f"curve_{name.replace('+', '_')}.ndjson")
    summary = {"run_config": rep["run_config"],
               "variants": {k: {kk: vv for kk, vv in v.items() if kk != "curve"}
                            for k, v in rep["variants"].items()}}
    _write_json(summary, str(out / "ablation.json"))
    _write_json(summary["variants"], None)


def cmd_corruption(args, rc: RunConfig) -> None:
    target, source = _load_pair(args, True)
    rep = corruption_experiment((normalize(target)[0], normalize(source)[0]), rc)
    _write_json(rep, args.out)


def cmd_pca(args, rc: RunConfig) -> None:
    model, _, d = _checkpoint_data(args)
    from . import autodiff as ad
    from .training import _BatchCache

    cache = _BatchCache(d, eval_batch_size(rc.train))
    with ad.no_grad():
        z = np.concatenate([model.latent(b, args.task).data for b, _ in cache.parts])
    res = pca_project(z, args.k)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("smiles," + ",".join(f"pc{i + 1}" for i in range(args.k)) + "\n")
            for s, row in zip(d.smiles, res.projections):
                fh.write(s + "," + ",".join(repr(float(x)) for x in row) + "\n")
    _write_json({"eigenvalues": res.eigenvalues.tolist(), "k": args.k, "n": len(d),
                 "trace": float(np.trace(res.covariance))}, None)


def cmd_geo_check(args, rc: RunConfig) -> None:
    if args.metric == "sphere":
        g, point = geometry.sphere(), args.point or [np.pi / 4, 0.0]
    elif args.metric == "euclidean":
        g = geometry.euclidean(args.dim)
        point = args.point or [0.0] * args.dim
    else:
        if not args.checkpoint:
            raise UsageError("--metric transfer needs --checkpoint")
        model, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
        if not hasattr(model, "tasks"):
            raise UsageError("transfer metric needs a GATE checkpoint")
        f = geometry.transfer_map(model, args.task)
        dim = model.config.latent
        point = args.point or list(np.random.default_rng(rc.seed).standard_normal(dim) * 0.1)
        gz = geometry.pullback_metric(f, np.asarray(point, dtype=float))
        field = geometry.MetricField(dim, lambda z: geometry.pullback_metric(f, z), "transfer-pullback")
        # nested differences: a coarser outer step keeps round-off in check
        gam = geometry.christoffel(field, np.asarray(point, dtype=float), h=1e-3)
        _write_json({"metric": "transfer-pullback", "point": list(map(float, point)),
                     "christoffel": gam.tolist(),
                     "residuals": {"symmetry": float(np.abs(gz - gz.T).max()),
                                   "flatness": geometry.flatness_residual(gz)}}, args.out)
        return
    point = np.asarray(point, dtype=float)
    gam = geometry.christoffel(g, point)
    residuals = {"lower_symmetry": float(np.abs(gam - gam.transpose(0, 2, 1)).max()),
                 "flatness": geometry.flatness_residual(g(point))}
    if args.metric == "sphere":
        th = point[0]
        residuals["closed_form"] = float(max(abs(gam[0, 1, 1] + np.sin(th) * np.cos(th)),
                                             abs(gam[1, 0, 1] - np.cos(th) / np.sin(th))))
    else:
        residuals["max_abs"] = float(np.abs(gam).max())
    _write_json({"metric": args.metric, "point": point.tolist(), "christoffel": gam.tolist(),
                 "residuals": residuals}, args.out)


def cmd_report(args, rc: RunConfig) -> None:
    reports = []
    for p in args.reports:
        d = json.loads(Path(p).read_text(encoding="utf-8"))
        reports.append(MetricsReport(**d))
    rows = relative_table(reports)
    _write_json({"rows": rows, "run_config": rc.to_dict()}, args.out)
    if args.csv:
        Path(args.csv).write_text(table_csv(rows), encoding="utf-8")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gate", description="Geometrically aligned transfer encoder experiments")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="write a synthetic correlated task pair")
    s.add_argument("--rho", type=float, default=0.9)
    s.add_argument("--n-target", type=int, default=200)
    s.add_argument("--n-source", type=int, default=2000)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("split", parents=[common], help="write a split manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("random", "scaffold"))
    s.add_argument("--corrupted", help="corruption record to embed in the manifest")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("corrupt", parents=[common], help="corrupt labels beyond one std")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float)
    s.add_argument("--out", required=True, help="corrupted CSV")
    s.add_argument("--record", help="JSON with corrupted indices and original values")
    s.set_defaults(fn=cmd_corrupt)

    s = sub.add_parser("train", parents=[common], help="train gate, stl or mtl")
    s.add_argument("method", choices=METHODS)
    s.add_argument("--target", required=True)
    s.add_argument("--source")
    s.add_argument("--manifest", help="run 4-fold cross-validation instead of a single fit")
    s.add_argument("--report", help="where the cross-validation report goes")
    s.add_argument("--checkpoint", default="model.ckpt")
    s.add_argument("--history", help="per-epoch NDJSON loss records")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="score this CSV instead of the recorded validation slice")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="loss-set ablation curves")
    s.add_argument("--target", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--out-dir", default="ablation")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("corruption", parents=[common], help="GATE vs MTL on corrupted labels")
    s.add_argument("--target", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(fn=cmd_corruption)

    s = sub.add_parser("pca", parents=[common], help="principal components of latent vectors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--out", help="projections CSV")
    s.set_defaults(fn=cmd_pca)

    s = sub.add_parser("geo-check", parents=[common], help="Christoffel and flatness diagnostics")
    s.add_argument("--metric", choices=("sphere", "euclidean", "transfer"), default="sphere")
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--point", type=float, nargs="+")
    s.add_argument("--checkpoint")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_geo_check)

    s = sub.add_parser("report", parents=[common], help="relative-RMSE table from CV reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _run_config(args)
        args.fn(args, rc)
    except UsageError as exc:
        print(f"gate {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure of a run maps to exit 2
        log.debug("run failed", exc_info=True)
        print(f"gate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
