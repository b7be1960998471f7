"""Command-line front end: ``lnmix {fit,posterior,diagnose,simulate,score}``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .diagnostics import evidence_table, write_evidence
from .em import EMConfig, FitResult, Hyperparams, fit, get_method
from .io import ExpressionMatrix, ingest, read_kv, read_tsv, write_kv, write_matrix, write_tsv
from .patterns import PatternSet, all_partitions, each_vs_control, read_pattern_file, write_pattern_file
from .posterior import PosteriorTable, eppee_cdf, gene_list, posteriors, topk_overlap
from .simulate import calibration_score, generate, read_simspec, read_truth, roc_auc, roc_points, write_truth
from .variance_prior import VariancePrior, sample_variances, shrink

log = logging.getLogger("lnmix")


class StageError(Exception):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"{stage}: {msg}")
        self.stage = stage


def _stage(stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (ValueError, OSError, ArithmeticError, KeyError) as exc:
        raise StageError(stage, str(exc) or type(exc).__name__) from exc


def _patterns(args, data: ExpressionMatrix) -> PatternSet:
    if args.patterns:
        return read_pattern_file(args.patterns, data.design)
    if args.vs_control:
        return each_vs_control(data.design, args.vs_control)
    return all_partitions(data.design)


def _config(args) -> EMConfig:
    return EMConfig(tol=args.tol, max_iter=args.max_iter, Q=args.Q, threads=args.threads)


def _fit_items(res: FitResult, patterns: PatternSet) -> dict:
    th = res.hyperparams
    items: dict = {"method": res.method.name, "model": th.model, "P": patterns.P, "mu": th.mu,
                   "tau_var": th.tau_var, "gamma_var": th.gamma_var}
    if th.error_var is not None:
        items["error_var"] = th.error_var
    if th.prior is not None:
        items["phi"] = th.prior.phi
        items["nu"] = th.prior.nu
    if patterns.null_index is not None:
        items["pi_null"] = float(res.pi[patterns.null_index])
    for k, v in enumerate(res.pi, start=1):
        items[f"pi_{k}"] = float(v)
    items.update(loglik=res.loglik, iterations=res.n_iter, converged=str(res.converged).lower(),
                 flags=",".join(res.flags) or "none")
    return items


def _load_fit(path, data: ExpressionMatrix, patterns: PatternSet) -> FitResult:
    kv = read_kv(path)
    method = get_method(kv["method"])
    P = int(kv["P"])
    if P != patterns.P:
        raise ValueError(f"fit file has {P} patterns, pattern set has {patterns.P}")
    pi = np.array([float(kv[f"pi_{k}"]) for k in range(1, P + 1)])
    kw = dict(model=kv["model"], mu=float(kv["mu"]), tau_var=float(kv["tau_var"]), gamma_var=float(kv["gamma_var"]))
    if method.gene_specific:
        prior = VariancePrior(float(kv["nu"]), float(kv["phi"]))
        sv = sample_variances(data.values, data.design)
        kw.update(gene_error_var=shrink(sv, prior, method.variance, data.design.I, data.design.T), prior=prior)
    else:
        kw["error_var"] = float(kv["error_var"])
    return FitResult(method, Hyperparams(**kw), pi, float(kv["loglik"]), int(kv["iterations"]),
                     kv["converged"] == "true", [], [])


def _write_fit(out: Path, res: FitResult, patterns: PatternSet) -> None:
    write_kv(out / "fit.txt", _fit_items(res, patterns))
    write_tsv(out / "trace.tsv", ("iteration", "loglik"), enumerate(res.trace))


def _write_posterior(out: Path, table: PosteriorTable, patterns: PatternSet) -> None:
    header = ["gene_id"] + [f"pp_{k}" for k in range(1, patterns.P + 1)]
    has_e = table.has_eppee
    if has_e:
        header.append("eppee")
    rows = []
    for j, gid in enumerate(table.gene_ids):
        row = [gid] + list(table.probs[j])
        if has_e:
            row.append(table.eppee[j])
        rows.append(row)
    write_tsv(out / "posterior.tsv", header, rows)
    if has_e:
        x, f = eppee_cdf(table)
        write_tsv(out / "eppee_cdf.tsv", ("eppee", "fraction_le"), zip(x, f))


def _read_posterior(path) -> PosteriorTable:
    header, rows = read_tsv(path)
    if not header or header[0] != "gene_id" or "eppee" not in header:
        raise ValueError(f"{path}: expected a posterior table with gene_id and eppee columns")
    pcols = [k for k, h in enumerate(header) if h.startswith("pp_")]
    probs = np.array([[float(r[k]) for k in pcols] for r in rows])
    e = np.array([float(r[header.index("eppee")]) for r in rows])
    null = int(np.argmin(np.abs(probs - e[:, None]).sum(axis=0)))
    return PosteriorTable(probs, tuple(r[0] for r in rows), Path(path).stem, null)


# -- subcommands --------------------------------------------------------


def cmd_fit(args) -> None:
    data = _stage("ingest", ingest, args.data)
    pats = _stage("patterns", _patterns, args, data)
    res = _stage("fit", fit, data, pats, args.method, _config(args))
    _write_fit(args.out, res, pats)
    print(f"{res.method.name}: loglik {res.loglik:.6f} after {res.n_iter} iterations (converged={res.converged})")


def cmd_posterior(args) -> None:
    data = _stage("ingest", ingest, args.data)
    pats = _stage("patterns", _patterns, args, data)
    if args.fit:
        res = _stage("posterior", _load_fit, args.fit, data, pats)
    else:
        res = _stage("fit", fit, data, pats, args.method, _config(args))
        _write_fit(args.out, res, pats)
    table = _stage("posterior", posteriors, data, pats, res, args.method or res.method, _config(args))
    _write_posterior(args.out, table, pats)
    if table.has_eppee:
        print(f"{table.method}: {len(gene_list(table, 0.1))} genes with ePPEE < 0.1")


def cmd_diagnose(args) -> None:
    data = _stage("ingest", ingest, args.data)
    rows = _stage("diagnose", evidence_table, data, args.bins)
    write_evidence(args.out / "evidence.tsv", rows)


def cmd_simulate(args) -> None:
    spec = _stage("simulate", read_simspec, args.config, args.seed)
    data, truth = _stage("simulate", generate, spec, args.threads)
    write_matrix(args.out / "data.tsv", data)
    write_truth(args.out / "truth.tsv", data.gene_ids, truth)
    write_pattern_file(args.out / "patterns.txt", spec.patterns)


def cmd_score(args) -> None:
    ids, truth = _stage("score", read_truth, args.truth)
    tables = [_stage("score", _read_posterior, p) for p in args.posteriors]
    labels = args.labels or [Path(p).parent.name if Path(p).stem == "posterior" else Path(p).stem for p in args.posteriors]
    if len(labels) != len(tables) or len(set(labels)) != len(labels):
        raise StageError("score", "need one distinct label per posterior table")
    null = args.null_pattern - 1
    summary = {}
    for lab, t in zip(labels, tables):
        if t.gene_ids != ids:
            raise StageError("score", f"{lab}: gene ids differ from the truth table")
        cal = calibration_score(t, truth, null, args.bins)
        write_tsv(args.out / f"calibration_{lab}.tsv", ("bin_lo", "bin_hi", "mean_eppee", "ee_fraction", "count"),
                  [(r[0], r[1], r[2], r[3], int(r[4])) for r in cal])
        fp, tp = roc_points(t, truth, null)
        write_tsv(args.out / f"roc_{lab}.tsv", ("false_positives", "true_positives"), zip(fp.tolist(), tp.tolist()))
        try:
            summary[f"auc_{lab}"] = roc_auc(fp, tp)
        except ValueError:
            summary[f"auc_{lab}"] = math.nan
        summary[f"list_0.1_{lab}"] = len(gene_list(t, 0.1))
    if len(tables) >= 2:
        ov = _stage("score", topk_overlap, tables, args.K)
        write_tsv(args.out / "overlap.tsv", ["method"] + labels, ([lab] + row.tolist() for lab, row in zip(labels, ov)))
    write_kv(args.out / "score.txt", summary)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lnmix", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)

    def model_opts(p, method_required=True):
        p.add_argument("--data", required=True, help="expression matrix TSV")
        p.add_argument("--method", required=method_required, help="LNN, LNNMV, LNNMV*, LNNGV, LN3, LN3MV*, LN3GV")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--patterns", help="pattern file (one pattern per line)")
        g.add_argument("--all-partitions", action="store_true", help="every partition of the conditions (default)")
        g.add_argument("--vs-control", metavar="NAME", help="each treatment EE or DE with control NAME")
        p.add_argument("--Q", type=int, default=1000, help="quantile grid size for GV methods")
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=500)

    p = sub.add_parser("fit", help="estimate hyperparameters and mixing proportions")
    model_opts(p)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("posterior", help="posterior pattern probabilities and ePPEE CDF")
    model_opts(p, method_required=False)
    p.add_argument("--fit", help="fit.txt from a previous 'fit' run (skips fitting)")
    common(p)
    p.set_defaults(func=cmd_posterior)

    p = sub.add_parser("diagnose", help="covariance evidence table for gene effects")
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=20, help="p-value histogram bins")
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="simulate data and truth from a key=value config")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="calibration, ROC and top-K overlap against a truth table")
    p.add_argument("--truth", required=True)
    p.add_argument("--posteriors", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--K", type=int, default=200)
    p.add_argument("--null-pattern", type=int, default=1, help="1-based index of the null pattern in the truth table")
    common(p)
    p.set_defaults(func=cmd_score)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "method", None) is None and args.command == "posterior" and not args.fit:
        print("lnmix posterior: error: --method is required unless --fit is given", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("lnmix: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except StageError as exc:
        print(f"lnmix {args.command}: {exc.stage} failed: {exc.__cause__ or exc}".splitlines()[0], file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lnmix {args.command}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    log.info("backend: %s", _kernels.backend_name())
    return 0


if __name__ == "__main__":
    sys.exit(main())
