"""Command line front end: ``hadalg gen|run|bench``.

Exit codes: 0 when the task converged, 1 for unreadable input or bad
arguments, 2 when an iteration stopped without meeting its stopping rule.
Multi-indices are printed 1-based.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import multiprocessing as mp
import statistics
import sys
import time

import numpy as np

from . import generators
from .core import (
    DenseCapError,
    DivergenceError,
    DegenerateIterateError,
    HadalgError,
    StoppingRule,
    TruncationPolicy,
)
from .cp import CpTensor
from .dense import DenseTensor
from .io import MalformedFileError, load, save
from .postproc import (
    EmptyLevelSetError,
    Interval,
    characteristic,
    closest_to,
    conditional_mean,
    find_extreme,
    hadamard_inverse,
    hadamard_sign,
    hadamard_sqrt,
    level_set,
    mean_variance,
    probability,
    support_cardinality,
)
from .tt import TtTensor, tt_from_cp

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

GEN_KINDS = ("random-cp", "random-tt", "poisson-rhs", "function-sample")
RUN_TASKS = ("max", "min", "closest", "levelset", "count", "prob", "mean", "var", "sign", "inv", "sqrt")
BENCH_TASKS = ("max", "sign")
CSV_HEADER = ["d", "n", "rank", "N", "task", "iterations", "wall_seconds", "final_rank", "error_metric"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _rank_of(w):
    if isinstance(w, TtTensor):
        return list(w.tt_ranks)
    return w.rank


# --------------------------------------------------------------------------
# gen


def sample_expression(n: int, d: int, expr: str) -> DenseTensor:
    """Dense samples of a numpy expression in ``x[0] .. x[d-1]`` on the interior grid."""
    g = generators.grid(n)
    shape = (n,) * d
    x = [g.reshape([n if k == j else 1 for k in range(d)]) for j in range(d)]
    namespace = {"x": x, "np": np, "d": d, "n": n, "pi": math.pi}
    vals = eval(expr, {"__builtins__": {}}, namespace)  # user-supplied formula
    return DenseTensor(shape, np.array(np.broadcast_to(np.asarray(vals, dtype=float), shape)))


def cmd_gen(kind: str, n: int, d: int, rank: int = 1, seed: int = 0, out_path=None, expr: str = "1", fmt=None, binary=False):
    if min(n, d, rank) < 1:
        raise ValueError("n, d and rank must be >= 1")
    if kind == "random-cp":
        w = generators.random_cp(n, d, rank, seed)
    elif kind == "random-tt":
        w = generators.random_tt(n, d, rank, seed)
    elif kind == "poisson-rhs":
        w = generators.poisson_rhs(n, d)
    elif kind == "function-sample":
        w = sample_expression(n, d, expr)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if fmt == "tt" and isinstance(w, CpTensor):
        w = tt_from_cp(w)
    elif fmt == "dense" and not isinstance(w, DenseTensor):
        w = w.to_dense()
    elif fmt == "cp" and isinstance(w, TtTensor):
        raise ValueError("TT to CP conversion is not offered")
    if out_path is not None:
        save(w, out_path, binary=binary)
    return w


# --------------------------------------------------------------------------
# run


def _report(rep) -> dict:
    return {
        "iterations": rep.iterations,
        "converged": rep.converged,
        "final_residual": rep.final_residual,
        "max_rank": rep.max_rank,
    }


def working_form(w, backend: str, policy: TruncationPolicy):
    """Representation the iterations run on.

    ``auto`` converts CP input to TT: SVD rounding of the iterates is
    reliable and fast, while ALS recompression of squared CP iterates can
    need many terms.  ``native`` keeps the input format.
    """
    if backend not in ("auto", "native"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "auto" and isinstance(w, CpTensor):
        return tt_from_cp(w, policy)
    return w


def cmd_run(task: str, w, policy: TruncationPolicy, stop=None, interval=None, rho=None, method="exp-power", out_path=None, binary=False, backend="auto"):
    """Run one task; returns ``(result_dict, converged)``."""
    interval = interval or Interval()
    x = working_form(w, backend, policy)
    if task in ("max", "min"):
        res = find_extreme(x, task, method, policy, stop)
        res.value = w.entry(res.index)
        out = res.to_dict()
        return out, res.converged and not res.flags.get("index_mismatch", False)
    if task == "closest":
        if rho is None:
            raise ValueError("closest needs --rho")
        res = closest_to(x, rho, policy, stop, method)
        res.value = w.entry(res.index)
        out = res.to_dict()
        out["rho"] = rho
        return out, res.converged
    w = x
    if task in ("mean", "var"):
        mean, var = mean_variance(w)
        return ({"mean": mean} if task == "mean" else {"mean": mean, "variance": var}), True
    if task in ("levelset", "count", "prob"):
        chi, reps = characteristic(w, interval, policy, stop)
        ok = all(r.converged for r in reps)
        out = {"interval": [interval.lower, interval.upper], "sign_runs": [_report(r) for r in reps]}
        if task == "prob":
            out["probability"] = probability(w, interval, chi=chi)
        else:
            count, raw = support_cardinality(chi)
            out.update({"count": count, "raw_count": raw})
        if task == "levelset":
            lset = level_set(w, interval, policy, stop, chi=chi)
            out["rank"] = _rank_of(lset)
            try:
                out["conditional_mean"] = conditional_mean(w, interval, policy, stop, chi=chi)
            except EmptyLevelSetError:
                out["conditional_mean"] = None
            if out_path is not None:
                save(lset, out_path, binary=binary)
        return out, ok
    if task in ("sign", "inv", "sqrt"):
        fn = {"sign": hadamard_sign, "inv": hadamard_inverse, "sqrt": hadamard_sqrt}[task]
        v, rep = fn(w, policy, stop)
        out = _report(rep)
        out["rank"] = _rank_of(v)
        if task == "sign":
            out["scale"] = rep.extras.get("scale")
        if out_path is not None:
            save(v, out_path, binary=binary)
        return out, rep.converged
    raise ValueError(f"unknown task {task!r}")


def _stop_for(task, eta, max_iters):
    if eta is None and max_iters is None:
        return None
    kind = "residual" if task in ("sign", "inv", "sqrt", "levelset", "count", "prob") else "relative-step"
    default_eta = {"residual": 1e-8}.get(kind, 1e-10)
    return StoppingRule(kind=kind, eta=default_eta if eta is None else eta, max_iters=max_iters or 100)


# --------------------------------------------------------------------------
# bench


def bench_case(task: str, n: int, d: int, rank: int, eps: float = 1e-8, eta: float = None):
    """One timed run; returns the row fields other than the timing."""
    policy = TruncationPolicy(eps)
    if task == "max":
        w = generators.poisson_rhs(n, d)
        stop = StoppingRule(kind="relative-step", eta=1e-6 if eta is None else eta, max_iters=30)
        t0 = time.perf_counter()
        # SVD rounding keeps the squared iterates compact; the conversion is
        # part of the timed work
        x = tt_from_cp(w, policy)
        res = find_extreme(x, "max", "exp-power", policy, stop)
        wall = time.perf_counter() - t0
        metric = res.error_bound / abs(res.value) if res.value else res.error_bound
        extra = {"max_rank": res.report.max_rank, "value": res.value, "index": [i + 1 for i in res.index]}
        return w.rank, res.report.iterations, wall, _rank_of(res.eigenvector), metric, res.converged, extra
    if task == "sign":
        w, threshold = generators.level_family(n, d, rank)
        stop = StoppingRule(kind="residual", eta=1e-7 if eta is None else eta, max_iters=30)
        t0 = time.perf_counter()
        x = w - w.same_kind_unit().scale(threshold)
        v, rep = hadamard_sign(x, policy, stop)
        wall = time.perf_counter() - t0
        extra = {"max_rank": rep.max_rank}
        return w.rank, rep.iterations, wall, _rank_of(v), rep.final_residual, rep.converged, extra
    raise ValueError(f"unknown bench task {task!r}")


def _max_rank(r):
    return max(r) if isinstance(r, list) else r


def _bench_row(task, n, d, rank, repeats, eps, eta):
    walls = []
    for _ in range(repeats):
        in_rank, iters, wall, final_rank, metric, converged, extra = bench_case(task, n, d, rank, eps, eta)
        walls.append(wall)
    row = {
        "d": d,
        "n": n,
        "rank": in_rank,
        "N": str(n**d),
        "task": task,
        "iterations": iters,
        "wall_seconds": statistics.median(walls),
        "final_rank": _max_rank(final_rank),
        "error_metric": metric,
        "converged": converged,
    }
    row.update(extra)
    return row


def _row_worker(queue, args):
    try:
        queue.put(("ok", _bench_row(*args)))
    except Exception as exc:  # reported in the row, the harness goes on
        queue.put(("error", f"{type(exc).__name__}: {exc}"))


def _failed_row(task, n, d, rank, wall, marker):
    return {"d": d, "n": n, "rank": rank, "N": str(n**d), "task": task, "iterations": "", "wall_seconds": wall,
            "final_rank": "", "error_metric": marker, "converged": False}


def cmd_bench(task: str, n: int, d_list, rank: int = 4, repeats: int = 1, eps: float = 1e-8, eta=None, timeout: float = 300.0, jobs: int = 1):
    """Benchmark rows, one child process per row so that a timeout can stop it.

    Rows are returned sorted by ``d`` whatever order they finish in.
    """
    if task not in BENCH_TASKS:
        raise ValueError(f"unknown bench task {task!r}")
    try:
        ctx = mp.get_context("fork")
    except ValueError:
        ctx = mp.get_context("spawn")
    pending = sorted(set(int(d) for d in d_list))
    running = []
    rows = []
    while pending or running:
        while pending and len(running) < max(1, jobs):
            d = pending.pop(0)
            q = ctx.Queue()
            p = ctx.Process(target=_row_worker, args=(q, (task, n, d, rank, repeats, eps, eta)), daemon=True)
            p.start()
            running.append((d, p, q, time.monotonic()))
        still = []
        for d, p, q, t0 in running:
            elapsed = time.monotonic() - t0
            msg = None
            if not q.empty():
                msg = q.get()
            elif not p.is_alive():
                p.join()
                msg = q.get() if not q.empty() else ("error", f"worker exited with code {p.exitcode}")
            elif elapsed > timeout:
                p.terminate()
                p.join()
                rows.append(_failed_row(task, n, d, rank, elapsed, "timeout"))
                continue
            if msg is None:
                still.append((d, p, q, t0))
                continue
            p.join()
            status, payload = msg
            rows.append(payload if status == "ok" else _failed_row(task, n, d, rank, elapsed, "error"))
        running = still
        if running:
            time.sleep(0.01)
    rows.sort(key=lambda r: r["d"])
    return rows


def fitted_exponent(rows):
    """Slope of log(wall time) against log(d) over the completed rows."""
    pts = [(r["d"], r["wall_seconds"]) for r in rows if r.get("converged") and r["wall_seconds"] > 0]
    if len({d for d, _ in pts}) < 2:
        return None
    x = np.log([d for d, _ in pts])
    y = np.log([t for _, t in pts])
    return float(np.polyfit(x, y, 1)[0])


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hadalg", description="Post-processing of low-rank tensors via Hadamard algebra.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic tensor file")
    g.add_argument("kind", choices=GEN_KINDS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--rank", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--expr", default="1", help="function-sample formula in x[0]..x[d-1]")
    g.add_argument("--format", dest="fmt", choices=("dense", "cp", "tt"), default=None)
    g.add_argument("--binary", action="store_true")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run a post-processing task on a tensor file")
    r.add_argument("task", choices=RUN_TASKS)
    r.add_argument("path")
    r.add_argument("--eps", type=float, default=1e-10)
    r.add_argument("--max-rank", type=int, default=None)
    r.add_argument("--stop-eta", type=float, default=None)
    r.add_argument("--max-iters", type=int, default=None)
    r.add_argument("--method", choices=("power", "power-rq", "exp-power"), default="exp-power")
    r.add_argument("--rho", type=float, default=None)
    r.add_argument("--lower", type=float, default=-math.inf)
    r.add_argument("--upper", type=float, default=math.inf)
    r.add_argument("--out", default=None, help="write the resulting tensor (levelset, sign, inv, sqrt)")
    r.add_argument("--binary", action="store_true")
    r.add_argument("--backend", choices=("auto", "native"), default="auto",
                   help="auto runs CP input in TT format; native keeps the file format")
    r.add_argument("--json", action="store_true")

    b = sub.add_parser("bench", help="timing table")
    b.add_argument("task", choices=BENCH_TASKS)
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--d", type=int, nargs="+", default=[25, 50, 100, 150])
    b.add_argument("--rank", type=int, default=4)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--eps", type=float, default=1e-8)
    b.add_argument("--stop-eta", type=float, default=None)
    b.add_argument("--timeout", type=float, default=300.0)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--csv", default=None, help="CSV output file (default: standard output)")
    b.add_argument("--json", action="store_true")
    return parser


def _print_result(out: dict, as_json: bool):
    if as_json:
        print(json.dumps(out, default=str))
        return
    for k, v in out.items():
        print(f"{k}: {v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            w = cmd_gen(args.kind, args.n, args.d, args.rank, args.seed, args.out, args.expr, args.fmt, args.binary)
            print(f"wrote {type(w).__name__} shape={list(w.shape)} rank={_rank_of(w)} to {args.out}")
            return EXIT_OK
        if args.command == "run":
            w = load(args.path)
            policy = TruncationPolicy(args.eps, args.max_rank)
            stop = _stop_for(args.task, args.stop_eta, args.max_iters)
            try:
                out, ok = cmd_run(args.task, w, policy, stop, Interval(args.lower, args.upper), args.rho,
                                  args.method, args.out, args.binary, args.backend)
            except (DivergenceError, DegenerateIterateError) as exc:
                out, ok = {"error": str(exc)}, False
            out = {"task": args.task, "converged": ok, **{k: v for k, v in out.items() if k != "converged"}}
            _print_result(out, args.json)
            return EXIT_OK if ok else EXIT_NOT_CONVERGED
        rows = cmd_bench(args.task, args.n, args.d, args.rank, args.repeats, args.eps, args.stop_eta, args.timeout, args.jobs)
        slope = fitted_exponent(rows)
        if args.json:
            print(json.dumps({"rows": rows, "fitted_exponent": slope}, default=str))
        else:
            text = rows_to_csv(rows)
            if args.csv:
                with open(args.csv, "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            msg = "n/a" if slope is None else f"{slope:.3f}"
            print(f"fitted exponent of wall time in d: {msg}", file=sys.stderr)
        return EXIT_OK if all(r.get("converged") for r in rows) else EXIT_NOT_CONVERGED
    except (MalformedFileError, OSError, DenseCapError) as exc:
        print(f"hadalg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, HadalgError) as exc:
        print(f"hadalg: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
