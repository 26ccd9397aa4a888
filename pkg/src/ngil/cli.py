"""``ngil`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ngil.exceptions import NGILError

log = logging.getLogger("ngil")

# flag -> ExperimentConfig field
RUN_OVERRIDES = {
    "alpha": "alpha",
    "beta": "beta",
    "weight_drift": "alpha",
    "weight_crosstask": "beta",
    "budget": "memory_budget",
    "subsample": "mmd_subsample",
    "kernel_alphas": "kernel_alphas",
    "mode": "mode",
    "seed": "seed",
    "epochs": "epochs",
    "lr": "lr",
    "hidden": "hidden",
    "layers": "layers",
    "trainer": "trainer",
    "out": "out_dir",
}


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _plan(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(c) for c in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a plan like 80:20,20:80, got {text!r}") from None


def _read_matrix(path) -> np.ndarray:
    """Numeric CSV, skipping one header row when present."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [line for line in text if line.strip()]
    if rows:
        try:
            [float(x) for x in rows[0].split(",")]
        except ValueError:
            rows = rows[1:]
    try:
        return np.array([[float(x) for x in r.split(",")] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def cmd_gen_csbm(args) -> int:
    from ngil.csbm import CSBMParams, generate_csbm, shifted_sequence_params
    from ngil.formats import write_graph_bundle

    if args.plan is not None:
        mu1 = np.asarray(args.mu1 if args.mu1 is not None else [1.0], dtype=np.float64)
        mu2 = np.asarray(args.mu2 if args.mu2 is not None else [-1.0], dtype=np.float64)
        params = CSBMParams(mu1=mu1, mu2=mu2, p_in=args.p_in if args.p_in is not None else 0.1,
                            p_out=args.p_out if args.p_out is not None else 0.05,
                            batch_plan=args.plan, sigma=args.sigma)
    else:
        params = shifted_sequence_params(
            n_tasks=args.tasks, batch_size=args.batch_size, imbalance=args.imbalance, dim=args.dim,
            gap=args.gap, spread=args.spread,
            p_in=args.p_in if args.p_in is not None else 0.03,
            p_out=args.p_out if args.p_out is not None else 0.015,
            sigma=args.sigma, seed=args.seed, orientation=args.orientation,
        )
    seq = generate_csbm(params, seed=args.seed)
    final = seq.snapshots[-1]
    manifest = write_graph_bundle(args.out, seq.batches, final.edges(), final.features, final.labels)
    c = manifest["counts"]
    print(f"wrote {args.out}: vertices={c['vertices']} edges={c['edges']} tasks={c['tasks']}")
    return 0


def _resolve_config(args):
    from ngil.config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for flag, key in RUN_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.bundle is not None:
        overrides["source"] = "bundle"
        overrides["bundle"] = args.bundle
    return cfg.with_overrides(**overrides).validate()


def cmd_run(args) -> int:
    from ngil.experiment import run_sequence, run_trials

    cfg = _resolve_config(args)
    if args.trials > 1:
        results = run_trials(cfg, args.trials, cfg.out_dir, workers=args.workers)
        for k, r in enumerate(results):
            print(_summary(r, prefix=f"trial={k} seed={r.config.seed} "))
        return 0
    print(_summary(run_sequence(cfg)))
    return 0


def _summary(result, prefix="") -> str:
    m = result.metrics
    faf = "N.A." if m.faf is None else f"{m.faf:.6g}"
    c = result.config
    return (
        f"{prefix}status={result.status} trainer={c.trainer} mode={c.mode} alpha={c.alpha:g} "
        f"beta={c.beta:g} FAP={m.fap:.6g} FAF={faf}"
    )


def cmd_verify_prop1(args) -> int:
    from ngil.csbm import CSBMParams, verify_prop1

    params = CSBMParams(
        mu1=np.asarray(args.mu1, dtype=np.float64),
        mu2=np.asarray(args.mu2, dtype=np.float64),
        p_in=args.p_in,
        p_out=args.p_out,
        batch_plan=args.plan,
        sigma=args.sigma,
    )
    report = verify_prop1(params, trials=args.trials, seed=args.seed)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_mmd(args) -> int:
    from ngil.mmd import KernelConfig, mmd2_hat

    X, Y = _read_matrix(args.x), _read_matrix(args.y)
    cfg = KernelConfig(alphas=tuple(args.kernel_alphas), norm=args.norm)
    print(f"{mmd2_hat(X, Y, cfg):.6f}")
    return 0


def cmd_grad_check(args) -> int:
    from ngil.train import gradient_suite

    reports = gradient_suite(
        seed=args.seed, layers=args.layers, hidden=args.hidden, activation=args.activation,
        eps=args.eps, tolerance=args.tolerance,
    )
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        status = "pass" if rep.passed else "FAIL"
        print(f"{name}: max_rel_error={rep.max_rel_error:.3e} coords={rep.checked} {status}")
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    from ngil.formats import read_matrix_csv
    from ngil.metrics import compute_metrics

    rep = compute_metrics(read_matrix_csv(args.matrix))
    faf = "N.A." if rep.faf is None else f"{rep.faf:.6g}"
    print(f"FAP={rep.fap:.6g} FAF={faf}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngil", description="Inductive graph continual learning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-csbm", help="write a CSBM-generated graph bundle")
    g.add_argument("--out", required=True, help="bundle directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--plan", type=_plan, help="fixed-means CSBM, e.g. 80:20,20:80 (community counts per batch)")
    g.add_argument("--mu1", type=_float_list, help="community 1 mean (with --plan)")
    g.add_argument("--mu2", type=_float_list, help="community 2 mean (with --plan)")
    g.add_argument("--tasks", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=100)
    g.add_argument("--imbalance", type=float, default=0.8)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--gap", type=float, default=4.0)
    g.add_argument("--spread", type=float, default=2.0)
    g.add_argument("--p-in", type=float)
    g.add_argument("--p-out", type=float)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--orientation", choices=("random", "alternating"), default="alternating",
                   help="per-task class axis: fresh random, or one shared axis with alternating sign")
    g.set_defaults(func=cmd_gen_csbm)

    r = sub.add_parser("run", help="train and evaluate a task sequence")
    r.add_argument("--config", help="flat JSON config (a previous run's config.json works)")
    r.add_argument("--bundle", help="graph bundle directory (replaces the synthetic source)")
    r.add_argument("--trainer", choices=("bare", "joint", "replay", "bare+ssrm", "replay+ssrm"))
    r.add_argument("--alpha", type=float, help="weight of the memory drift term")
    r.add_argument("--beta", type=float, help="weight of the memory-vs-new-batch term")
    r.add_argument("--weight-drift", type=float, help="alias of --alpha")
    r.add_argument("--weight-crosstask", type=float, help="alias of --beta")
    r.add_argument("--budget", type=int, help="memory vertices per past task")
    r.add_argument("--subsample", type=int, help="sample cap per MMD term")
    r.add_argument("--kernel-alphas", type=_float_list, help="kernel bandwidths, e.g. 1,0.1,0.01")
    r.add_argument("--mode", choices=("inductive", "transductive"))
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--hidden", type=int)
    r.add_argument("--layers", type=int)
    r.add_argument("--out", help="artifact directory")
    r.add_argument("--trials", type=int, default=1, help="seed-derived trials, each in out/trial_NNN")
    r.add_argument("--workers", type=int, help="parallel processes for --trials")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-prop1", help="Monte-Carlo check of the imbalance mean-aggregation shift")
    v.add_argument("--plan", type=_plan, default=[(80, 20), (20, 80)])
    v.add_argument("--p-in", type=float, default=0.1)
    v.add_argument("--p-out", type=float, default=0.05)
    v.add_argument("--mu1", type=_float_list, default=[1.0])
    v.add_argument("--mu2", type=_float_list, default=[-1.0])
    v.add_argument("--sigma", type=float, default=1.0)
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="also write the report here")
    v.set_defaults(func=cmd_verify_prop1)

    m = sub.add_parser("mmd", help="print the squared-MMD estimate between two sample CSVs")
    m.add_argument("x", metavar="X.csv")
    m.add_argument("y", metavar="Y.csv")
    m.add_argument("--kernel-alphas", type=_float_list, default=[1.0, 0.1, 0.01])
    m.add_argument("--norm", choices=("l2", "sqeuclidean"), default="l2")
    m.set_defaults(func=cmd_mmd)

    c = sub.add_parser("grad-check", help="finite-difference check of the training gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--layers", type=int, default=1)
    c.add_argument("--hidden", type=int, default=4)
    c.add_argument("--activation", choices=("relu", "tanh", "identity"), default="relu")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("metrics", help="FAP and FAF of a performance-matrix CSV")
    x.add_argument("matrix", metavar="matrix.csv")
    x.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (NGILError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
