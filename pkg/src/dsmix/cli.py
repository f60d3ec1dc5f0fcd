"""Command-line entry point: ``dsmix <subcommand> [--flags]``.

Data goes to stdout (JSON or CSV) or to the file named by ``--out``;
diagnostics go to stderr. The exit code is 0 only when every internal
check of the subcommand passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analyze import colsum_stats, depth_product, emit_report, nu_scan
from .bench import bench_block
from .birkhoff import birkhoff_decompose, build_basis, combine, describe_weights, max_terms
from .grad import DEFAULT_THRESHOLD, grad_check_seed
from .hyperblock import SK_ITERS, Variant
from .matcore import MAX_PERM_ORDER, CapacityError, DomainError, col_sums, relative_range, row_sums
from .sinkhorn import adverse_matrix, sk_normalize
from .toytrain import Harvest, ToyModel, TrainConfig, TrainingDiverged, harvest_hres, make_task, train

log = logging.getLogger("dsmix")

VARIANTS = [v.value for v in Variant]


@dataclass
class RunConfig:
    variant: Variant = Variant.MHC_LITE
    n: int = 4
    C: int = 16
    L: int = 6
    sk_iters: int = SK_ITERS
    seed: int = 0
    steps: int = 500
    lr: float = 1e-3
    out: Path | None = None
    harvest: Path | None = None

    def validate(self) -> None:
        if self.n < 1 or self.C < 1 or self.L < 1:
            raise ValueError("n, C and L must be >= 1")
        if self.variant is Variant.MHC_LITE and self.n > MAX_PERM_ORDER:
            raise ValueError(f"mhc-lite supports n <= {MAX_PERM_ORDER}")
        if self.sk_iters < 1:
            raise ValueError("sk_iters must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


def _config(args) -> RunConfig:
    cfg = RunConfig(**{k: getattr(args, k) for k in RunConfig.__dataclass_fields__
                       if hasattr(args, k) and getattr(args, k) is not None})
    cfg.variant = Variant.parse(cfg.variant)
    cfg.validate()
    return cfg


def _emit_json(obj, out) -> None:
    text = json.dumps(obj, indent=1)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")
        log.info("wrote %s", out)


def cmd_sk_demo(args) -> int:
    m = adverse_matrix(args.alpha)
    t0 = time.perf_counter()
    rep = sk_normalize(m, args.iters, args.tol)
    elapsed = time.perf_counter() - t0
    _emit_json({
        "alpha": args.alpha,
        "input": m.tolist(),
        "log_inv_nu": float(np.log(1.0 / relative_range(m))),
        "iterations": rep.iterations_run,
        "converged": rep.converged,
        "matrix": rep.result.tolist(),
        "row_sums": row_sums(rep.result).tolist(),
        "col_sums": col_sums(rep.result).tolist(),
        "l1_trace": [{"iteration": i + 1, "row_l1": e.row_l1, "col_l1": e.col_l1,
                      "total": e.total} for i, e in enumerate(rep.l1_trace)],
        "elapsed_ms": 1e3 * elapsed,
    }, args.out)
    return 0


def _load_harvest(path) -> Harvest:
    try:
        return Harvest.load(path)
    except (OSError, KeyError, ValueError) as e:
        raise ValueError(f"cannot read harvest file {path}: {e}") from e


def _write_stats(stats, out) -> None:
    if out is None:
        print(json.dumps([s.to_dict() for s in stats], indent=1))
    else:
        emit_report(stats, out)
        log.info("wrote %s", out)


def cmd_nu_scan(args) -> int:
    hv = _load_harvest(args.harvest)
    if hv.pre_sk is None:
        log.error("harvest %s is %s; only mhc harvests carry pre-SK matrices",
                  args.harvest, hv.variant.value)
        return 1
    n = hv.hres.shape[-1]
    _write_stats([nu_scan(hv.pre_sk.reshape(-1, n, n), f"{hv.variant.value}/log_inv_nu")],
                 args.out)
    return 0


def cmd_colsum(args) -> int:
    hv = _load_harvest(args.harvest)
    n = hv.hres.shape[-1]
    name = hv.variant.value
    stats = [colsum_stats(hv.hres.reshape(-1, n, n), f"{name}/per-matrix")]
    stats.append(colsum_stats([depth_product(s) for s in hv.per_token_stacks()],
                              f"{name}/product"))
    _write_stats(stats, args.out)
    return 0


def cmd_decompose(args) -> int:
    text = Path(args.input).read_text() if args.input else sys.stdin.read()
    try:
        m = np.array(json.loads(text), dtype=np.float64)
    except (json.JSONDecodeError, ValueError, TypeError) as e:
        log.error("input is not a JSON matrix: %s", e)
        return 1
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        log.error("expected a square matrix, got shape %s", m.shape)
        return 1
    try:
        basis = build_basis(m.shape[0])
        w = birkhoff_decompose(m, basis)
    except (DomainError, CapacityError) as e:
        log.error("%s", e)
        return 1
    terms = describe_weights(basis, w)
    err = float(np.abs(combine(basis, w) - m).max())
    _emit_json({"n": m.shape[0], "num_terms": len(terms), "max_terms": max_terms(m.shape[0]),
                "reconstruction_error": err, "terms": terms}, args.out)
    return 0


def _grad_job(job):
    variant, seed, n, C, sk_iters, threshold = job
    return grad_check_seed(variant, seed, n, C, sk_iters, threshold)


def cmd_grad_check(args) -> int:
    variants = VARIANTS if args.variant == "all" else [Variant.parse(args.variant).value]
    cfg = _config(argparse.Namespace(**{**vars(args), "variant": variants[0]}))
    jobs = [(v, s, cfg.n, cfg.C, cfg.sk_iters, args.threshold)
            for v in variants for s in range(cfg.seed, cfg.seed + args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            reports = list(ex.map(_grad_job, jobs))  # map keeps submission order
    else:
        reports = [_grad_job(j) for j in jobs]
    ok = all(r.passed for r in reports)
    if args.json:
        _emit_json({"passed": ok, "reports": [r.to_dict() for r in reports]}, args.out)
    else:
        for r in reports:
            print(f"# {r.variant.value} seed={r.seed} n={cfg.n} C={cfg.C} "
                  f"{'PASS' if r.passed else 'FAIL'}")
            print(r.table())
    if not ok:
        bad = [f"{r.variant.value}/seed{r.seed}" for r in reports if not r.passed]
        log.error("gradient check failed: %s", ", ".join(bad))
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = _config(args)
    data = make_task(cfg.seed, samples=args.samples)
    model = ToyModel.create(cfg.variant, cfg.n, cfg.C, cfg.L, seed=cfg.seed,
                            sk_iters=cfg.sk_iters)
    tcfg = TrainConfig(steps=cfg.steps, lr=cfg.lr, batch_size=args.batch_size, seed=cfg.seed)
    try:
        tlog = train(model, data, tcfg, dump_dir=args.dump_dir)
    except TrainingDiverged as e:
        log.error("%s", e)
        return 1
    if cfg.out is None:
        tlog.write_csv(sys.stdout)
    else:
        tlog.write_csv(cfg.out)
        log.info("wrote %s", cfg.out)
    sm = tlog.smoothed_loss()
    log.info("%s: loss %.4g -> smoothed %.4g over %d steps", cfg.variant.value,
             tlog.records[0].loss, sm[-1], len(tlog))
    if cfg.harvest is not None:
        harvest_hres(model, data, min(args.tokens, len(data))).save(cfg.harvest)
        log.info("wrote harvest %s", cfg.harvest)
    return 0


def _bench_job(job):
    return bench_block(*job)


def cmd_bench(args) -> int:
    variants = VARIANTS if args.variant == "all" else [Variant.parse(args.variant).value]
    if args.reps < 1 or args.batch < 1 or args.n < 1 or args.C < 1:
        raise ValueError("reps, batch, n and C must be >= 1")
    jobs = [(v, args.n, args.C, args.reps, args.batch, args.sk_iters, args.seed)
            for v in variants]
    if args.jobs > 1:
        log.warning("parallel workers share cores; compare medians from one run only")
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_bench_job, jobs))
    else:
        results = [_bench_job(j) for j in jobs]
    by = {r.variant: r.median_ns for r in results}
    out = {"results": [r.to_dict() for r in results]}
    if "mhc" in by and "mhc-lite" in by:
        out["lite_over_mhc"] = by["mhc-lite"] / by["mhc"]
    _emit_json(out, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsmix", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("sk-demo", help="Sinkhorn-Knopp on the slow-converging 3x3 matrix")
    p.add_argument("--alpha", type=float, default=1e-13, help="small entry (default 1e-13)")
    p.add_argument("--iters", type=int, default=SK_ITERS)
    p.add_argument("--tol", type=float, default=1e-6, help="stop once the l1 error <= tol")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sk_demo)

    for name, fn, help_ in (("nu-scan", cmd_nu_scan, "ln(1/nu) boxplot over a harvest"),
                            ("colsum", cmd_colsum, "column-sum boxplots over a harvest")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--harvest", type=Path, required=True, help=".npz written by `train`")
        p.add_argument("--out", type=Path, help=".json or .csv report (default: JSON on stdout)")
        p.set_defaults(func=fn)

    p = sub.add_parser("decompose", help="Birkhoff decomposition of a JSON matrix")
    p.add_argument("--input", type=Path, help="JSON file (default: stdin)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--variant", default="all", choices=VARIANTS + ["all"])
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--C", type=int, default=8)
    p.add_argument("--sk-iters", type=int, default=SK_ITERS)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--json", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="toy training; writes the per-step log as CSV")
    p.add_argument("--variant", default="mhc-lite", choices=VARIANTS)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--C", type=int, default=16)
    p.add_argument("--L", type=int, default=6)
    p.add_argument("--sk-iters", type=int, default=SK_ITERS)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--batch-size", type=int, help="default: full batch")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("--harvest", type=Path, help="also save per-token H_res to this .npz")
    p.add_argument("--tokens", type=int, default=64, help="tokens to harvest")
    p.add_argument("--dump-dir", type=Path, help="where to dump the batch on divergence")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="median forward latency per variant")
    p.add_argument("--variant", default="all", choices=VARIANTS + ["all"])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--C", type=int, default=768)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--sk-iters", type=int, default=SK_ITERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s: %(message)s",
                        level=logging.DEBUG if args.verbose else logging.INFO, force=True)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
