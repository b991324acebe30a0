"""Command line entry point: ``stsparse <command> ...``.

Commands: ``generate``, ``recover``, ``stream``, ``eval``, ``bench`` and
``replay`` (re-run a command from the manifest it wrote). Exit status is 0
on success, 1 on usage errors and 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .admm import AdmmConfig, lasso_admm, select_lambda
from .ep import run_offline
from .metrics import score, support
from .model import Dataset, synthetic_dataset
from .stream import run_stream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _config(args) -> io.RunConfig:
    if args.config:
        cfg = io.parse_config(args.config)
    else:
        cfg = io.load_profile(args.profile)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ratio", None) is not None:
        overrides["ratio"] = args.ratio
    if getattr(args, "ratios", None):
        overrides["ratios"] = args.ratios
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    if getattr(args, "methods", None):
        overrides["methods"] = args.methods
    cfg = replace(cfg, **overrides)
    io._check_run(cfg, "command line")
    return cfg


def _load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    X = d / "X.txt"
    Om = d / "Omega.txt"
    return Dataset(io.load_matrix(d / "A.txt"), io.load_matrix(d / "Y.txt"),
                   io.load_matrix(X) if X.exists() else None,
                   io.load_matrix(Om) if Om.exists() else None)


def _save_estimate(out: Path, x_hat, z, diagnostics: list[dict]) -> list[str]:
    io.save_matrix(x_hat, out / "X_hat.txt")
    io.save_matrix(z, out / "z.txt")
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for rec in diagnostics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return ["X_hat.txt", "z.txt", "diagnostics.jsonl"]


def _sweep_dicts(diag) -> list[dict]:
    # strict JSON has no infinity; the first sweep's change is written as null
    return [{"iteration": s.iteration,
             "change": s.change if np.isfinite(s.change) else None, "eta": s.eta,
             "neg_var": s.neg_var, "skipped": s.skipped, "seconds": s.seconds}
            for s in diag.sweeps]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg: io.RunConfig) -> dict:
    out = io.ensure_dir(args.out)
    d = synthetic_dataset(cfg.n, cfg.t, cfg.ratio, cfg.seed, cfg.n_groups,
                          cfg.target_sparsity, cfg.value_variance, cfg.noise_variance)
    for name, m in (("A", d.A), ("Y", d.Y), ("X", d.X), ("Omega", d.Omega)):
        io.save_matrix(m, out / f"{name}.txt")
    return {"inputs": {}, "outputs": ["A.txt", "Y.txt", "X.txt", "Omega.txt"]}


def cmd_recover(args, cfg: io.RunConfig) -> dict:
    data = _load_dataset(args.data)
    out = io.ensure_dir(args.out)
    _, post, diag = run_offline(data, cfg.hyper)
    files = _save_estimate(out, post.x_mean, post.z, _sweep_dicts(diag))
    summary = {"iterations": diag.iterations, "converged": diag.converged,
               "seconds": diag.wall_time}
    print(json.dumps(summary))
    return {"inputs": {"data": str(Path(args.data).resolve())}, "outputs": files}


def cmd_stream(args, cfg: io.RunConfig) -> dict:
    data = _load_dataset(args.data)
    out = io.ensure_dir(args.out)
    state = run_stream(data, cfg.hyper, cfg.t_init, cfg.block)
    diags = [{"block": i, "iterations": d.iterations, "converged": d.converged,
              "seconds": d.wall_time} for i, d in enumerate(state.diagnostics)]
    files = _save_estimate(out, state.x_hat(), state.z(), diags)
    print(json.dumps({"timestamps": state.t, "blocks": len(state.diagnostics)}))
    return {"inputs": {"data": str(Path(args.data).resolve())}, "outputs": files}


def cmd_eval(args, cfg: io.RunConfig) -> dict:
    truth = Path(args.truth)
    est = Path(args.estimate)
    X = io.load_matrix(truth / "X.txt")
    X_hat = io.load_matrix(est / "X_hat.txt")
    z_path = est / "z.txt"
    rule = args.rule or ("posterior" if z_path.exists() else "magnitude")
    mask = support(io.load_matrix(z_path), "posterior") if rule == "posterior" \
        else support(X_hat, "magnitude", args.tau)
    om = truth / "Omega.txt"
    true_mask = io.load_matrix(om) == 0 if om.exists() else None
    report = score(X, X_hat, mask, true_mask).to_dict()
    report["rule"] = rule
    out = Path(args.out)
    io.ensure_dir(out.parent if out.parent != Path("") else ".")
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return {"inputs": {"truth": str(truth.resolve()), "estimate": str(est.resolve())},
            "outputs": [out.name], "manifest_dir": str(out.parent),
            "manifest_name": out.name + ".manifest.json"}


def run_cell(cfg: io.RunConfig, method: str, ratio: float, seed: int,
             admm_lam: float | None = None) -> io.ResultRecord:
    """Score one method on one (ratio, seed) synthetic dataset."""
    d = synthetic_dataset(cfg.n, cfg.t, ratio, seed, cfg.n_groups, cfg.target_sparsity,
                          cfg.value_variance, cfg.noise_variance)
    t0 = time.perf_counter()
    if method == "twolevel":
        _, post, diag = run_offline(d, cfg.hyper)
        x_hat, mask = post.x_mean, support(post.z, "posterior")
        iters, conv = diag.iterations, diag.converged
    elif method == "twolevel_online":
        state = run_stream(d, cfg.hyper, cfg.t_init, cfg.block)
        x_hat, mask = state.x_hat(), support(state.z(), "posterior")
        iters = sum(g.iterations for g in state.diagnostics)
        conv = all(g.converged for g in state.diagnostics)
    elif method == "admm":
        if admm_lam is None:
            admm_lam = admm_lambda(cfg, ratio)
        res = lasso_admm(d.A, d.Y, AdmmConfig(admm_lam, cfg.admm_rho, cfg.admm_max_iters))
        x_hat, mask = res.x, support(res.x, "magnitude")
        iters, conv = res.iterations, res.converged
    else:
        raise ValueError(f"unknown method {method!r}")
    seconds = time.perf_counter() - t0
    rep = score(d.X, x_hat, mask, d.Omega == 0)
    return io.ResultRecord(method, ratio, seed, rep.nmse, rep.f_measure, rep.precision,
                           rep.recall, rep.n_true, rep.n_est, rep.n_both, iters, conv, seconds)


def admm_lambda(cfg: io.RunConfig, ratio: float) -> float:
    """Lasso penalty chosen on the held-out seed for this ratio."""
    d = synthetic_dataset(cfg.n, cfg.t, ratio, cfg.admm_holdout_seed, cfg.n_groups,
                          cfg.target_sparsity, cfg.value_variance, cfg.noise_variance)
    return select_lambda(d.A, d.Y, d.Omega == 0,
                         AdmmConfig(1.0, cfg.admm_rho, cfg.admm_max_iters), cfg.admm_grid)


def summarize(records: list[io.ResultRecord]) -> list[dict]:
    """Mean and standard deviation of F-measure and NMSE per (method, ratio)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.ratio), []).append(r)
    rows = []
    for (method, ratio), recs in sorted(groups.items()):
        f = np.array([r.f_measure for r in recs])
        e = np.array([r.nmse for r in recs])
        rows.append({"method": method, "ratio": ratio, "n": len(recs),
                     "f_mean": float(f.mean()), "f_std": float(f.std()),
                     "nmse_mean": float(e.mean()), "nmse_std": float(e.std()),
                     "iterations_mean": float(np.mean([r.iterations for r in recs]))})
    return rows


def cmd_bench(args, cfg: io.RunConfig) -> dict:
    out = io.ensure_dir(args.out)
    cells = io.ensure_dir(out / "cells")
    lams = {}
    if "admm" in cfg.methods:
        lams = {ratio: admm_lambda(cfg, ratio) for ratio in cfg.ratios}
        (out / "admm_lambda.json").write_text(
            json.dumps({repr(k): v for k, v in lams.items()}, indent=2) + "\n", encoding="utf-8")
    cell_files = []
    for method in cfg.methods:
        for ratio in cfg.ratios:
            for seed in cfg.seeds:
                name = f"{method}_r{ratio:g}_s{seed}.jsonl"
                path = cells / name
                if path.exists():
                    path.unlink()
                rec = run_cell(cfg, method, ratio, seed, lams.get(ratio))
                io.append_records(path, [rec])
                cell_files.append(path)
                print(f"{method} ratio={ratio:g} seed={seed} F={rec.f_measure:.3f} "
                      f"nmse={rec.nmse:.3e} iters={rec.iterations}", file=sys.stderr)
    results = out / "results.jsonl"
    if results.exists():
        results.unlink()
    for path in cell_files:
        io.append_records(results, io.read_records(path))
    rows = summarize(io.read_records(results))
    cols = ["method", "ratio", "n", "f_mean", "f_std", "nmse_mean", "nmse_std",
            "iterations_mean"]
    with open(out / "summary.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in cols) + "\n")
    return {"inputs": {}, "outputs": ["results.jsonl", "summary.tsv"]}


COMMANDS = {"generate": cmd_generate, "recover": cmd_recover, "stream": cmd_stream,
            "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stsparse", description="Spatio-temporal sparse recovery with EP.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="config file (default: the chosen profile)")
        sp.add_argument("--profile", default="synthetic", choices=io.PROFILES)

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ratio", type=float)

    for name, text in (("recover", "offline EP"), ("stream", "online filtering")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--data", required=True, help="directory with A.txt and Y.txt")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="score an estimate against the truth")
    common(sp)
    sp.add_argument("--truth", required=True, help="directory with X.txt (and Omega.txt)")
    sp.add_argument("--estimate", required=True, help="directory with X_hat.txt (and z.txt)")
    sp.add_argument("--out", required=True, help="score report (JSON)")
    sp.add_argument("--rule", choices=("posterior", "magnitude"))
    sp.add_argument("--tau", type=float)

    sp = sub.add_parser("bench", help="sweep ratios x seeds x methods")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratios", type=float, nargs="+")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--methods", nargs="+", choices=("twolevel", "twolevel_online", "admm"))

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


def _run(command: str, args, cfg: io.RunConfig) -> None:
    result = COMMANDS[command](args, cfg)
    directory = result.pop("manifest_dir", args.out)
    name = result.pop("manifest_name", "manifest.json")
    arg_dict = {k: v for k, v in vars(args).items()
                if k not in ("config", "profile", "command", "manifest")}
    io.write_manifest(directory, command, cfg, result["inputs"], result["outputs"],
                      {"args": arg_dict}, name)


def _replay(args) -> None:
    manifest = io.read_manifest(args.manifest)
    cfg = io.config_from_manifest(manifest)
    ns = argparse.Namespace(**manifest.get("args", {}))
    ns.out = args.out
    _run(manifest["command"], ns, cfg)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.command == "replay":
            _replay(args)
        else:
            _run(args.command, args, _config(args))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError, KeyError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
