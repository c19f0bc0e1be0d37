"""Batch front end: run chains, benchmark grids, compute metrics, diff traces.

Every data output is machine readable (JSON reports, RFC-4180 CSV, binary
traces with JSON sidecars). Figure rendering lives behind the separate
``report`` subcommand so the data path never imports a plotting stack.

Exit codes: 0 success, 1 usage or contract error, 2 chain divergence,
3 diff failure.
"""

import argparse
import dataclasses
import json
import math
import os
import statistics
import sys
import time

import numpy as np

from .core import ChainDivergedError, StructuralError, sequential_evaluate
from .deer import DeerConfig, run_deer
from .metrics import (
    ess,
    median_heuristic,
    mmd_bootstrap_se,
    mmd_unbiased,
)
from .noise import ConfigurationError
from .pscan import set_workers
from .samplers import GibbsKernel, HmcKernel, MalaKernel, generate_eight_schools
from .targets import (
    DatasetError,
    blr,
    load_design_matrix,
    model_logp_grad_hvp,
    mog,
    orthogonal_basis,
    rosenbrock,
    std_normal,
    synthetic_credit_like,
    transform_system,
)
from .tracefile import TraceFormatError, export_csv, read_trace, write_trace

__all__ = ["RunConfig", "UsageError", "load_config_file", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_DIFF = 3

SAMPLERS = ("mala", "hmc", "hmc-parallel-leapfrog", "gibbs")
METHOD_MODES = {
    "deer-dense": "dense",
    "quasi-deer": "diag-stochastic",
    "block-quasi-deer": "block2x2-stochastic",
}
METHODS = ("sequential",) + tuple(METHOD_MODES)


class UsageError(Exception):
    """Bad flag, bad config key, or a referenced file that does not exist."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; this front end reserves 2
    # for divergence, so route parse errors through the usual usage path
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    """One chain-running job; every field maps to a flag and a config key."""

    sampler: str = "mala"
    target: str = "std-normal:2"
    method: str = "sequential"
    T: int = 1024
    B: int = 1
    seed: int = 0
    eps: float = 0.1
    leapfrog_steps: int = 8
    atol: float = 1e-4
    rtol: float = 1e-3
    max_iters: int | None = None
    hutchinson_samples: int = 1
    damping: float = 1.0
    clip: float = math.inf
    window: int | None = None
    full_trace: bool = False
    orthogonal: bool = False
    warmups: int = 0
    threads: int | None = None
    out: str = "trace.bin"

    def validate(self):
        if self.sampler not in SAMPLERS:
            raise UsageError(f"sampler: got {self.sampler!r}, expected one of {SAMPLERS}")
        if self.method not in METHODS:
            raise UsageError(f"method: got {self.method!r}, expected one of {METHODS}")
        if self.T < 1:
            raise UsageError(f"T: must be >= 1, got {self.T}")
        if self.B < 1:
            raise UsageError(f"B: must be >= 1, got {self.B}")
        if self.warmups < 0:
            raise UsageError(f"warmups: must be >= 0, got {self.warmups}")
        if self.sampler == "gibbs" and self.method == "block-quasi-deer":
            raise UsageError("method: block-quasi-deer needs a position/momentum "
                             "kernel; the gibbs sweep has no 2x2 block structure")
        if self.orthogonal and self.sampler == "gibbs":
            raise UsageError("orthogonal: only applies to samplers with a "
                             "continuous target model")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


def _opt_int(raw: str):
    low = raw.strip().lower()
    return None if low in ("", "none") else int(raw)


_CASTS = {
    "sampler": str,
    "target": str,
    "method": str,
    "out": str,
    "T": int,
    "B": int,
    "seed": int,
    "leapfrog_steps": int,
    "hutchinson_samples": int,
    "warmups": int,
    "eps": float,
    "atol": float,
    "rtol": float,
    "damping": float,
    "clip": float,
    "max_iters": _opt_int,
    "window": _opt_int,
    "threads": _opt_int,
    "full_trace": _parse_bool,
    "orthogonal": _parse_bool,
}


def load_config_file(path: str) -> dict:
    """Plain key=value lines, '#' comments; keys spelled like the long flags
    (hyphen or underscore, either works)."""
    if not os.path.exists(path):
        raise UsageError(f"config: no such file {path!r}")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config: line {lineno} is not key=value: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_run_config(args, file_cfg: dict) -> RunConfig:
    """Merge precedence: explicit flag > config file > dataclass default."""
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(file_cfg) - names
    if unknown:
        raise UsageError(f"config: unknown key(s) {sorted(unknown)}")
    values = {}
    for name in names:
        cli = getattr(args, name, None)
        if cli is not None:
            values[name] = cli
        elif name in file_cfg:
            try:
                values[name] = _CASTS[name](file_cfg[name])
            except ValueError as exc:
                raise UsageError(f"config: bad value for {name}: {exc}") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def config_echo(cfg: RunConfig) -> dict:
    """JSON-safe dump of the config; feeding it back as key=value lines
    reproduces the run byte for byte."""
    echo = dataclasses.asdict(cfg)
    if math.isinf(echo["clip"]):
        echo["clip"] = "inf"
    return echo


# ---------------------------------------------------------------------------
# model and kernel construction


def build_model(cfg: RunConfig):
    name = cfg.target
    if name.startswith("std-normal"):
        dim = 2
        if ":" in name:
            try:
                dim = int(name.split(":", 1)[1])
            except ValueError:
                raise UsageError(f"target: bad dimension in {name!r}") from None
        return std_normal(dim)
    if name == "rosenbrock":
        return rosenbrock()
    if name == "mog":
        return mog()
    if name == "blr-synthetic":
        X, y, _ = synthetic_credit_like()
        return blr(X, y)
    if name.startswith("blr:"):
        path = name.split(":", 1)[1]
        if not os.path.exists(path):
            raise UsageError(f"target: no such file {path!r}")
        X, y = load_design_matrix(path)
        return blr(X, y)
    raise UsageError(f"target: unknown target {name!r}")


def build_kernel(cfg: RunConfig, chain_seed: int):
    if cfg.sampler == "gibbs":
        return GibbsKernel(generate_eight_schools(), seed=chain_seed, T=cfg.T)
    model = model_logp_grad_hvp(build_model(cfg))
    if cfg.sampler == "mala":
        return MalaKernel(model, eps=cfg.eps, seed=chain_seed, T=cfg.T)
    parallel = cfg.sampler == "hmc-parallel-leapfrog"
    leapfrog_cfg = None
    if parallel:
        leapfrog_cfg = DeerConfig(
            mode="block2x2-stochastic",
            atol=cfg.atol,
            rtol=cfg.rtol,
            hutchinson_samples=cfg.hutchinson_samples,
            damping=cfg.damping,
            clip=cfg.clip,
        )
    return HmcKernel(
        model,
        eps=cfg.eps,
        L=cfg.leapfrog_steps,
        seed=chain_seed,
        T=cfg.T,
        leapfrog_mode="parallel" if parallel else "sequential",
        leapfrog_cfg=leapfrog_cfg,
    )


def initial_state(kernel, cfg: RunConfig):
    if cfg.sampler == "gibbs":
        return kernel.initial_state()
    return np.zeros(kernel.dim)


def deer_config(cfg: RunConfig, kernel) -> DeerConfig | None:
    if cfg.method == "sequential":
        return None
    mode = METHOD_MODES[cfg.method]
    pre = None
    if cfg.sampler == "gibbs" and mode == "diag-stochastic":
        pre = kernel.recommended_preconditioner()
    return DeerConfig(
        mode=mode,
        atol=cfg.atol,
        rtol=cfg.rtol,
        max_iters=cfg.max_iters,
        hutchinson_samples=cfg.hutchinson_samples,
        damping=cfg.damping,
        clip=cfg.clip,
        window_len=cfg.window,
        full_trace=cfg.full_trace,
        preconditioner=pre,
    )


def _curvature_at_origin(model):
    D = model.dim
    x = np.zeros((1, D))
    H = np.column_stack([-model.hvp(x, np.eye(D)[k][None])[0] for k in range(D)])
    return (H + H.T) / 2.0


def _execute(system, s0, dcfg):
    if dcfg is None:
        trace = sequential_evaluate(system, s0)
        return trace, {"iterations": None, "converged": True, "delta_history": []}, None
    result = run_deer(system, s0, dcfg)
    info = {
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "delta_history": [float(x) for x in result.delta_history],
    }
    return result.trace, info, result


def run_one_chain(cfg: RunConfig, b: int):
    """Execute chain b; returns (trace in original coordinates, stats dict)."""
    chain_seed = cfg.seed ^ b
    kernel = build_kernel(cfg, chain_seed)
    s0 = initial_state(kernel, cfg)
    system, Q = kernel, None
    if cfg.orthogonal:
        Q = orthogonal_basis(_curvature_at_origin(kernel.model)).Q
        system = transform_system(kernel, Q)
        s0 = Q.T @ s0
    dcfg = deer_config(cfg, kernel)
    for _ in range(cfg.warmups):
        _execute(system, s0, dcfg)
    t0 = time.perf_counter()
    trace, info, result = _execute(system, s0, dcfg)
    wall = time.perf_counter() - t0
    if Q is not None:
        trace = trace @ Q.T
    prev = np.vstack([(Q @ s0 if Q is not None else s0)[None], trace[:-1]])
    moved = np.any(np.abs(trace - prev) > cfg.atol + cfg.rtol * np.abs(trace), axis=1)
    stats = {
        "chain": b,
        "seed": chain_seed,
        "iterations": info["iterations"],
        "converged": info["converged"],
        "delta_history": info["delta_history"],
        "acceptance_rate": float(moved.mean()),
        "wall_seconds": wall,
    }
    if hasattr(kernel, "fallback_events"):
        stats["leapfrog_fallbacks"] = len(kernel.fallback_events)
    full = result.full_trace if (result is not None and cfg.full_trace) else None
    return trace, stats, full


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    cfg = build_run_config(args, file_cfg)
    if cfg.threads is not None:
        set_workers(cfg.threads)
    traces, chains, iter_stack = [], [], None
    total0 = time.perf_counter()
    for b in range(cfg.B):
        trace, stats, full = run_one_chain(cfg, b)
        traces.append(trace)
        chains.append(stats)
        if b == 0 and full:
            iter_stack = np.asarray(full)
    total = time.perf_counter() - total0
    arr = np.stack(traces)
    write_trace(cfg.out, arr, cfg.sampler, cfg.seed, config=config_echo(cfg))
    report = {
        "schema_version": 1,
        "config": config_echo(cfg),
        "chains": chains,
        "wall_seconds_total": total,
        "trace_path": cfg.out,
    }
    if iter_stack is not None:
        iters_path = cfg.out + ".iters"
        write_trace(iters_path, iter_stack, cfg.sampler + "-iterates", cfg.seed,
                    config=config_echo(cfg))
        report["iterates_path"] = iters_path
    report_path = cfg.out + ".report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if args.csv:
        export_csv(cfg.out + ".csv", arr)
    for st in chains:
        iters = "-" if st["iterations"] is None else st["iterations"]
        print(
            f"chain {st['chain']}: converged={st['converged']} "
            f"iterations={iters} acceptance={st['acceptance_rate']:.3f} "
            f"wall={st['wall_seconds']:.3f}s"
        )
    print(f"wrote {cfg.out} (+.json sidecar) and {report_path}")
    return EXIT_OK


def _split_list(raw, cast):
    try:
        return [cast(tok) for tok in str(raw).split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list value {raw!r}: {exc}") from exc


def cmd_bench(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    methods = _split_list(args.method or file_cfg.pop("method", "sequential"), str)
    Ts = _split_list(args.T or file_cfg.pop("T", "1024"), int)
    Bs = _split_list(args.B or file_cfg.pop("B", "1"), int)
    reps = args.reps if args.reps is not None else int(file_cfg.pop("reps", 5))
    if reps < 1:
        raise UsageError(f"reps: must be >= 1, got {reps}")
    ns = argparse.Namespace(**vars(args))
    ns.T = ns.B = ns.method = None
    if ns.warmups is None and "warmups" not in file_cfg:
        ns.warmups = 3
    base = build_run_config(ns, file_cfg)
    if base.threads is not None:
        set_workers(base.threads)
    for method in methods:
        if method not in METHODS:
            raise UsageError(f"method: got {method!r}, expected one of {METHODS}")

    rows = []
    for method in methods:
        for T in Ts:
            for B in Bs:
                cfg = dataclasses.replace(base, method=method, T=T, B=B)
                cfg.validate()
                try:
                    rows.append(_bench_cell(cfg, reps))
                except (ChainDivergedError, ConfigurationError, StructuralError,
                        FloatingPointError) as exc:
                    rows.append([cfg.sampler, method, B, T, "", "", "",
                                 f"{type(exc).__name__}: {exc}"])
    _write_csv_rows(
        args.out,
        ["sampler", "method", "B", "T", "median_seconds", "iterations",
         "converged_fraction", "status"],
        rows,
    )
    return EXIT_OK


def _bench_cell(cfg: RunConfig, reps: int):
    def once():
        iters, conv = [], []
        for b in range(cfg.B):
            kernel = build_kernel(cfg, cfg.seed ^ b)
            s0 = initial_state(kernel, cfg)
            _, info, _ = _execute(kernel, s0, deer_config(cfg, kernel))
            iters.append(info["iterations"])
            conv.append(info["converged"])
        return iters, conv

    for _ in range(cfg.warmups):
        once()
    times = []
    iters, conv = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        iters, conv = once()
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    if iters[0] is None:
        iter_repr = ""
    else:
        iter_repr = f"{statistics.median(iters):g}"
    frac = sum(bool(c) for c in conv) / len(conv)
    return [cfg.sampler, cfg.method, cfg.B, cfg.T, f"{med:.6f}", iter_repr,
            f"{frac:.3f}", "ok"]


def _write_csv_rows(out, header, rows):
    import csv

    if out and out != "-":
        fh = open(out, "w", newline="")
        close = True
    else:
        fh = sys.stdout
        close = False
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if close:
            fh.close()


def cmd_metrics(args) -> int:
    trace, _ = read_trace(args.trace)
    B, T, D = trace.shape
    out = {"which": args.which, "trace": args.trace}
    if args.which == "mmd":
        if not args.reference:
            raise UsageError("reference: required for mmd")
        if args.reference == args.trace:
            # self-comparison: split the pooled points into disjoint halves
            pooled = trace.reshape(-1, D)
            half = pooled.shape[0] // 2
            X, Y = pooled[:half], pooled[half : 2 * half]
        else:
            ref, _ = read_trace(args.reference)
            if ref.shape[-1] != D:
                raise StructuralError(
                    f"trace has D={D} but reference has D={ref.shape[-1]}"
                )
            X = trace.reshape(-1, D)
            Y = ref.reshape(-1, ref.shape[-1])
        rng = np.random.default_rng(0)
        cap = args.subsample
        if X.shape[0] > cap:
            X = X[rng.choice(X.shape[0], size=cap, replace=False)]
        if Y.shape[0] > cap:
            Y = Y[rng.choice(Y.shape[0], size=cap, replace=False)]
        sigma = args.bandwidth if args.bandwidth else median_heuristic(Y)
        out.update(
            mmd2=mmd_unbiased(X, Y, sigma),
            bootstrap_se=mmd_bootstrap_se(X, Y, sigma),
            bandwidth=sigma,
            subsample=cap,
            n_x=int(X.shape[0]),
            n_y=int(Y.shape[0]),
        )
    elif args.which == "ess":
        totals = np.zeros(D)
        for b in range(B):
            per_dim, _, _ = ess(trace[b])
            totals += per_dim
        out.update(
            ess_per_dim=[float(v) for v in totals],
            ess_min=float(totals.min()),
            ess_mean=float(totals.mean()),
        )
    else:  # acceptance
        diffs = np.abs(trace[:, 1:] - trace[:, :-1])
        tol = args.atol + args.rtol * np.abs(trace[:, 1:])
        moved = np.any(diffs > tol, axis=2)
        out.update(
            acceptance_rate=float(moved.mean()),
            atol=args.atol,
            rtol=args.rtol,
            steps=int(moved.size),
        )
    payload = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_diff(args) -> int:
    a, _ = read_trace(args.trace_a)
    b, _ = read_trace(args.trace_b)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch: {a.shape} vs {b.shape}")
    bad = np.abs(b - a) > args.atol + args.rtol * np.abs(b)
    bad_step = np.any(bad, axis=(0, 2))
    first = int(np.argmax(bad_step)) + 1 if bad_step.any() else None
    report = {
        "match": not bad_step.any(),
        "max_abs_error": float(np.max(np.abs(a - b))),
        "first_divergence_step": first,
        "steps_checked": int(a.shape[1]),
        "atol": args.atol,
        "rtol": args.rtol,
    }
    if args.out:
        per_step = np.max(np.abs(a - b), axis=(0, 2))
        _write_csv_rows(
            args.out,
            ["step", "max_abs_error", "within_tolerance"],
            [[t + 1, repr(float(per_step[t])), str(not bad_step[t]).lower()]
             for t in range(a.shape[1])],
        )
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["match"] else EXIT_DIFF


def cmd_report(args) -> int:
    from .report import render_report

    written = render_report(args.report, trace_path=args.trace, out_dir=args.out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--sampler", choices=SAMPLERS)
    p.add_argument("--target", help="std-normal[:D], rosenbrock, mog, "
                                    "blr-synthetic, or blr:<csv path>")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--leapfrog-steps", type=int)
    p.add_argument("--atol", type=float)
    p.add_argument("--rtol", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--hutchinson-samples", type=int)
    p.add_argument("--damping", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--full-trace", action="store_true", default=None)
    p.add_argument("--orthogonal", action="store_true", default=None)
    p.add_argument("--warmups", type=int)
    p.add_argument("--threads", type=int,
                   help="worker pool size (env CHAINSCAN_THREADS also honored)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chainscan",
                     description="Parallel-in-time MCMC chain evaluation.")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run B chains and write a trace + report")
    _add_run_flags(p_run)
    p_run.add_argument("--method", choices=METHODS)
    p_run.add_argument("--T", type=int)
    p_run.add_argument("--B", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--csv", action="store_true",
                       help="also export the trace as CSV (small traces only)")
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="sweep a (method, T, B) grid, emit CSV")
    _add_run_flags(p_bench)
    p_bench.add_argument("--method", help="comma-separated methods")
    p_bench.add_argument("--T", help="comma-separated chain lengths")
    p_bench.add_argument("--B", help="comma-separated chain counts")
    p_bench.add_argument("--reps", type=int, help="timed repetitions (default 5)")
    p_bench.add_argument("--out", help="CSV path; '-' or absent prints to stdout")
    p_bench.set_defaults(func=cmd_bench)

    p_metrics = sub.add_parser("metrics", help="compute mmd/ess/acceptance for a trace")
    p_metrics.add_argument("trace")
    p_metrics.add_argument("--reference",
                           help="second trace for mmd; pass the trace itself "
                                "to compare disjoint halves")
    p_metrics.add_argument("--which", choices=("mmd", "ess", "acceptance"),
                           required=True)
    p_metrics.add_argument("--bandwidth", type=float,
                           help="RBF bandwidth; default median heuristic")
    p_metrics.add_argument("--subsample", type=int, default=2048,
                           help="point cap per set for mmd (default 2048)")
    p_metrics.add_argument("--atol", type=float, default=1e-4)
    p_metrics.add_argument("--rtol", type=float, default=1e-3)
    p_metrics.add_argument("--out", help="also write the JSON here")
    p_metrics.set_defaults(func=cmd_metrics)

    p_diff = sub.add_parser("diff", help="elementwise tolerance comparison of two traces")
    p_diff.add_argument("trace_a")
    p_diff.add_argument("trace_b")
    p_diff.add_argument("--atol", type=float, default=1e-4)
    p_diff.add_argument("--rtol", type=float, default=1e-3)
    p_diff.add_argument("--out", help="per-step error CSV")
    p_diff.set_defaults(func=cmd_diff)

    p_report = sub.add_parser("report", help="render figures for a run report")
    p_report.add_argument("report", help="path to a <out>.report.json file")
    p_report.add_argument("--trace", help="trace path override")
    p_report.add_argument("--out-dir", help="directory for figures and CSV")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChainDivergedError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, StructuralError, DatasetError, TraceFormatError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
