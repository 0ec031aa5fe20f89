"""Command-line front end: train, predict, eval, synth, bench.

Every run with a fixed --seed and --threads 1 is reproducible; pass
--wall-clock false to additionally zero the timing column of the metrics
CSV so the output files are byte-identical across runs. Output files are
written to a temporary name and renamed on success, so failures never
leave partial files. Exit codes: 2 argument errors, 3 data errors,
4 numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import statistics
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .completion import (
    CompletionConfig,
    CompletionModel,
    load_model,
    predict,
    save_model,
    train,
)
from .data import IdMap, SparseObservations, gen_synthetic, load_ratings, save_ratings
from .errors import DataError, InvalidArgumentError, NumericalFailureError
from .linalg import CompactSVD, reduced_qr
from .probing import make_rng, sample_probe
from .solver import incremental_update, subgradient_probe
from .losses import SquaredLoss

PROBE_FLAGS = {"columns": "column_sampling", "rademacher": "rademacher", "gaussian": "gaussian"}
METRICS_HEADER = "super_iter,iter,wall_seconds,objective,train_rmse,test_rmse"


def _bool_flag(value: str) -> bool:
    if value not in ("true", "false"):
        raise argparse.ArgumentTypeError(f"expected true or false, got {value!r}")
    return value == "true"


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, payload: dict) -> None:
    _atomic_write(out_path + ".manifest.json",
                  (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _save_model_bundle(path: str, model: CompletionModel, idmap: IdMap) -> None:
    buf = io.BytesIO()
    save_model(model, buf)
    _atomic_write(path, buf.getvalue())
    _atomic_write(path + ".idmap.json", (json.dumps(
        {"rows": idmap.row_ids, "cols": idmap.col_ids}, sort_keys=True
    ) + "\n").encode())


def _load_idmap(model_path: str, dims: tuple[int, int]) -> IdMap:
    sidecar = model_path + ".idmap.json"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return IdMap(list(raw["rows"]), list(raw["cols"]))
    return IdMap.identity(*dims)


def _fmt(x: float) -> str:
    return f"{x:.12g}"


# --- train -------------------------------------------------------------------

def _add_train_parser(sub) -> None:
    p = sub.add_parser("train", help="fit a completion model from a ratings file")
    p.add_argument("--train", dest="train_path", help="training ratings file (required)")
    p.add_argument("--test", dest="test_path", help="held-out ratings file for test RMSE")
    p.add_argument("--rank", type=int, default=11)
    p.add_argument("--super-iters", type=int, default=30)
    p.add_argument("--delta", type=float, default=0.015)
    p.add_argument("--nu", type=float, default=0.005)
    p.add_argument("--k", type=int, default=None, help="probe width (default: rank)")
    p.add_argument("--probe", choices=sorted(PROBE_FLAGS), default="columns")
    p.add_argument("--loss", choices=["squared", "absolute", "hinge"], default="squared")
    p.add_argument("--masked", type=_bool_flag, default=True,
                   help="restrict residuals to observed cells (true) or "
                        "use zero-imputed targets (false)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out")
    p.add_argument("--metrics-out", help="per-super-iteration metrics CSV")
    p.add_argument("--metrics-every", type=int, default=1)
    p.add_argument("--return-best", type=_bool_flag, default=False,
                   help="return the best-objective checkpoint instead of the final iterate")
    p.add_argument("--center", type=_bool_flag, default=True)
    p.add_argument("--wall-clock", type=_bool_flag, default=True,
                   help="false: write 0.0 in the wall_seconds column for "
                        "byte-reproducible metrics files")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--from-manifest", help="load configuration from a run manifest")
    p.set_defaults(func=_cmd_train)


def _apply_manifest(args) -> None:
    with open(args.from_manifest, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    cfg = manifest["config"]
    args.rank = cfg["rank"]
    args.super_iters = cfg["super_iters"]
    args.delta = cfg["delta"]
    args.nu = cfg["nu"]
    args.k = cfg["k"]
    args.probe = cfg["probe"]
    args.loss = cfg["loss"]
    args.masked = cfg["masked"]
    args.metrics_every = cfg["metrics_every"]
    args.return_best = cfg["return_best"]
    args.center = cfg["center"]
    args.wall_clock = cfg["wall_clock"]
    args.seed = manifest["seed"]
    args.train_path = args.train_path or manifest["inputs"]["train"]["path"]
    test_in = manifest["inputs"].get("test")
    args.test_path = args.test_path or (test_in["path"] if test_in else None)


def _metrics_csv(records, wall_clock: bool) -> bytes:
    lines = [METRICS_HEADER]
    for r in records:
        wall = r.wall_seconds if wall_clock else 0.0
        test = _fmt(r.test_rmse) if r.test_rmse is not None else ""
        lines.append(
            f"{r.super_iteration},{r.iteration},{wall:.6f},"
            f"{_fmt(r.objective)},{_fmt(r.train_rmse)},{test}"
        )
    return ("\n".join(lines) + "\n").encode()


def _cmd_train(args) -> int:
    if args.from_manifest:
        _apply_manifest(args)
    if not args.train_path:
        raise InvalidArgumentError("--train is required")
    train_obs, idmap = load_ratings(args.train_path)
    test_obs = None
    if args.test_path:
        test_obs = _load_aligned_test(args.test_path, idmap, train_obs.shape)

    config = CompletionConfig(
        rank=args.rank,
        super_iters=args.super_iters,
        delta=args.delta,
        nu=args.nu,
        probe_width=args.k,
        probe_kind=PROBE_FLAGS[args.probe],
        loss=args.loss,
        masked=args.masked,
        seed=args.seed,
        metrics_every=args.metrics_every,
        return_best=args.return_best,
    )
    records = []
    model = train(
        train_obs,
        config,
        metrics_sink=records.append,
        test_obs=test_obs,
        center=args.center,
    )

    manifest = {
        "artifact": "nnssgd",
        "version": __version__,
        "command": "train",
        "seed": args.seed,
        "threads": args.threads if args.threads is not None else 1,
        "config": {
            "rank": config.rank,
            "super_iters": config.super_iters,
            "delta": config.delta,
            "nu": config.nu,
            "k": config.k,
            "probe": args.probe,
            "loss": config.loss,
            "masked": config.masked,
            "metrics_every": config.metrics_every,
            "return_best": config.return_best,
            "center": args.center,
            "wall_clock": args.wall_clock,
        },
        "inputs": {
            "train": {"path": args.train_path, "sha256": _sha256(args.train_path)},
            "test": {"path": args.test_path, "sha256": _sha256(args.test_path)}
            if args.test_path else None,
        },
    }
    if args.model_out:
        _save_model_bundle(args.model_out, model, idmap)
        _write_manifest(args.model_out, manifest)
    if args.metrics_out:
        _atomic_write(args.metrics_out, _metrics_csv(records, args.wall_clock))
        _write_manifest(args.metrics_out, manifest)

    last = records[-1]
    print(f"final objective {_fmt(last.objective)}")
    print(f"final train RMSE {last.train_rmse:.6f}")
    if last.test_rmse is not None:
        print(f"final test RMSE {last.test_rmse:.6f}")
    return 0


def _load_aligned_test(path: str, idmap: IdMap, shape: tuple[int, int]):
    """Test ratings remapped into the training index space.

    Entries whose user or item never appears in training cannot live on the
    training grid; they are returned separately as raw triples.
    """
    rows, cols, vals, extra = [], [], [], []
    test_raw, test_map = load_ratings(path)
    for i, j, v in zip(test_raw.rows, test_raw.cols, test_raw.values):
        ti = idmap.row_index(test_map.row_ids[i])
        tj = idmap.col_index(test_map.col_ids[j])
        if ti is None or tj is None:
            extra.append((test_map.row_ids[i], test_map.col_ids[j], v))
            continue
        rows.append(ti)
        cols.append(tj)
        vals.append(v)
    if not rows:
        raise DataError(f"no test rating in {path} matches the training grid")
    obs = SparseObservations(shape[0], shape[1], rows, cols, vals)
    if extra:
        print(f"warning: {len(extra)} test ratings reference unseen users/items "
              "and are excluded from the training-time test RMSE", file=sys.stderr)
    return obs


# --- predict -----------------------------------------------------------------

def _add_predict_parser(sub) -> None:
    p = sub.add_parser("predict", help="predict ratings for user/item pairs")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pairs", help="file of 'user item' lines")
    g.add_argument("--all", action="store_true", help="predict the whole grid")
    p.add_argument("--out", help="write predictions here instead of stdout")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_predict)


def _fallback_predict(model: CompletionModel, i, j) -> float:
    if i is not None and j is not None:
        return predict(model, i, j)
    row_term = model.row_means[i] if i is not None else model.global_mean
    col_term = model.col_means[j] if j is not None else model.global_mean
    return 0.5 * (float(row_term) + float(col_term))


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    idmap = _load_idmap(args.model, model.dims)
    lines = []
    unknown = 0
    if args.all:
        m, n = model.dims
        for i in range(m):
            for j in range(n):
                lines.append(
                    f"{idmap.row_ids[i]} {idmap.col_ids[j]} {predict(model, i, j):.10g}"
                )
    else:
        with open(args.pairs, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                fields = line.split()
                if len(fields) != 2:
                    raise DataError(f"line {lineno}: expected 'user item', got {line!r}")
                i = idmap.row_index(fields[0])
                j = idmap.col_index(fields[1])
                if i is None or j is None:
                    unknown += 1
                lines.append(f"{fields[0]} {fields[1]} {_fallback_predict(model, i, j):.10g}")
        lines.append(f"# unknown_ids {unknown}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return 0


# --- eval --------------------------------------------------------------------

def _add_eval_parser(sub) -> None:
    p = sub.add_parser("eval", help="RMSE of a model on a test ratings file")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_eval)


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    idmap = _load_idmap(args.model, model.dims)
    test_raw, test_map = load_ratings(args.test)
    sq_sum = 0.0
    for i, j, v in zip(test_raw.rows, test_raw.cols, test_raw.values):
        ti = idmap.row_index(test_map.row_ids[i])
        tj = idmap.col_index(test_map.col_ids[j])
        sq_sum += (_fallback_predict(model, ti, tj) - v) ** 2
    print(f"{math.sqrt(sq_sum / test_raw.nnz):.6f}")
    return 0


# --- synth -------------------------------------------------------------------

def _add_synth_parser(sub) -> None:
    p = sub.add_parser("synth", help="generate a synthetic completion problem")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--density", type=float, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_synth)


def _cmd_synth(args) -> int:
    train_obs, test_obs, truth = gen_synthetic(
        args.m, args.n, args.rank, args.density, args.noise, args.seed
    )
    idmap = IdMap.identity(args.m, args.n)
    for obs, suffix in ((train_obs, ".train"), (test_obs, ".test")):
        buf = io.StringIO()
        save_ratings(obs, buf, idmap)
        _atomic_write(args.out_prefix + suffix, buf.getvalue().encode())
    truth_model = CompletionModel(truth, np.zeros(args.m), np.zeros(args.n), 0.0)
    _save_model_bundle(args.out_prefix + ".truth", truth_model, idmap)
    _write_manifest(args.out_prefix + ".truth", {
        "artifact": "nnssgd",
        "version": __version__,
        "command": "synth",
        "seed": args.seed,
        "config": {
            "m": args.m, "n": args.n, "rank": args.rank,
            "density": args.density, "noise": args.noise,
        },
    })
    print(f"wrote {args.out_prefix}.train ({train_obs.nnz} ratings), "
          f"{args.out_prefix}.test ({test_obs.nnz} ratings), "
          f"{args.out_prefix}.truth")
    return 0


# --- bench -------------------------------------------------------------------

def _add_bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="per-iteration wall time of the update kernel")
    p.add_argument("--m-list", required=True, help="comma-separated row counts")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--rank", type=int, default=10)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_bench)


def bench_median_seconds(m: int, n: int, rank: int, k: int, iters: int, seed: int) -> float:
    """Median wall time of one probe-step iteration at the given sizes."""
    rng = make_rng(seed)
    # Fixed per-column observation count keeps the loss support m-independent.
    per_col = 20
    rows = rng.integers(0, m, size=per_col * n)
    cols = np.repeat(np.arange(n), per_col)
    keep = ~_duplicate_mask(rows, cols)
    obs = SparseObservations(m, n, rows[keep], cols[keep],
                             rng.standard_normal(int(keep.sum())))
    loss = SquaredLoss(obs, weight=1.0 / obs.nnz, masked=True)

    U = reduced_qr(rng.standard_normal((m, rank)))[0]
    V = reduced_qr(rng.standard_normal((n, rank)))[0]
    sigma = np.sort(np.abs(rng.standard_normal(rank)) + 0.5)[::-1]
    X = CompactSVD(U, sigma, V)
    radius = 1e12
    step = 1e-3

    times = []
    for it in range(iters + 3):
        t0 = time.perf_counter()
        probe = sample_probe("column_sampling", n, k, rng)
        S = subgradient_probe(X, loss, 1e-6, probe)
        X = incremental_update(X, S, probe, step, rank, radius)
        elapsed = time.perf_counter() - t0
        if it >= 3:  # discard warmup
            times.append(elapsed)
    return statistics.median(times)


def _duplicate_mask(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    order = np.lexsort((rows, cols))
    dup_sorted = np.zeros(rows.size, dtype=bool)
    same = (np.diff(rows[order]) == 0) & (np.diff(cols[order]) == 0)
    dup_sorted[1:] = same
    out = np.zeros(rows.size, dtype=bool)
    out[order] = dup_sorted
    return out


def _cmd_bench(args) -> int:
    try:
        m_list = [int(tok) for tok in args.m_list.split(",") if tok.strip()]
    except ValueError:
        raise InvalidArgumentError(f"--m-list must be comma-separated integers, got {args.m_list!r}")
    if not m_list:
        raise InvalidArgumentError("--m-list is empty")
    k = args.k if args.k is not None else args.rank
    print("m,median_seconds")
    for m in m_list:
        med = bench_median_seconds(m, args.n, args.rank, k, args.iters, args.seed)
        print(f"{m},{med:.9f}")
    return 0


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnssgd",
        description="Low-rank stochastic subgradient solver for "
                    "nuclear-norm-regularized matrix completion.",
    )
    parser.add_argument("--version", action="version", version=f"nnssgd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train_parser(sub)
    _add_predict_parser(sub)
    _add_eval_parser(sub)
    _add_synth_parser(sub)
    _add_bench_parser(sub)
    return parser


def _resolve_threads(args) -> int | None:
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InvalidArgumentError(f"--threads must be >= 1, got {args.threads}")
        return args.threads
    env = os.environ.get("NNSSGD_THREADS")
    if env:
        try:
            val = int(env)
        except ValueError:
            raise InvalidArgumentError(f"NNSSGD_THREADS must be an integer, got {env!r}")
        if val < 1:
            raise InvalidArgumentError(f"NNSSGD_THREADS must be >= 1, got {val}")
        return val
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = _resolve_threads(args)
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
