"""Command-line entry point: ``ttq <command> [options]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, modelio, pipeline, qnet, rnn, tt
from .errors import TTQError
from .quant import QuantizedActivations, QuantizedWeights, conv2d_float, qconv2d

DENSE_BASELINE_PARAMS = 57_600 * 1024
PUBLISHED_TT_COUNTS = {"T-RNN with frame inputs": 3_360, "T-RNN with detector features": 3_920}
TT_CONFIGS = {
    "T-RNN with frame inputs": ((8, 20, 20, 18), (4, 4, 4, 4), (1, 4, 4, 4, 1)),
    "T-RNN with detector features": ((17, 19, 19, 25), (4, 4, 4, 4), (1, 4, 4, 4, 1)),
}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v)


def _record_run(args, path: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    modelio.atomic_write(path, (json.dumps(cfg, indent=1, sort_keys=True, default=str) + "\n").encode())


def _load_net_config(spec: str) -> dict:
    if os.path.exists(spec):
        return qnet.load_cfg(spec)
    return qnet.builtin_cfg(spec)


# --------------------------------------------------------------------------
# commands

def cmd_quantize(args) -> int:
    model = qnet.build_qnet(_load_net_config(args.net))
    if args.weights:
        model = qnet.load_darknet_weights(model, Path(args.weights).read_bytes())
    elif args.random_seed is not None:
        model = qnet.init_random_weights(model, args.random_seed)
    print(qnet.format_report(qnet.report_layers(model)))
    fp, q = qnet.storage_bytes(model)
    print(f"\ntotal parameters: fp32 {fp / 1e6:.1f} MB -> 8-bit {q / 1e6:.1f} MB "
          f"({fp / q:.3f}x)")
    if args.report_only:
        return 0
    if not args.out:
        raise SystemExit("quantize: --out is required unless --report-only is given")
    out = Path(args.out)
    modelio.save_qnet(qnet.quantize_model(model), out)
    _record_run(args, out.with_name(out.name + ".run.json"))
    print(f"wrote {out}")
    return 0


def cmd_decompose(args) -> int:
    matrix = np.load(args.matrix)
    ttm, err = tt.tt_from_dense(matrix, _ints(args.row_modes), _ints(args.col_modes),
                                max_ranks=args.max_rank, tol=args.tol)
    norm = float(np.linalg.norm(matrix))
    print(f"ranks: {ttm.ranks}")
    print(f"parameters: {ttm.param_count} (dense {matrix.size})")
    print(f"discarded energy (Frobenius): {err:.3e}; relative {err / norm if norm else 0.0:.3e}")
    if args.out:
        out = Path(args.out)
        with open(out, "wb") as fh:
            np.savez(fh, **{f"core{k}": c for k, c in enumerate(ttm.cores)})
        _record_run(args, out.with_name(out.name + ".run.json"))
    return 0


def _load_clips(args) -> list:
    if args.synth:
        classes, per_class = _ints(args.synth)
        return pipeline.synth_dataset(classes, per_class, shape=tuple(_ints(args.synth_shape)),
                                      n_frames=args.synth_frames, seed=args.seed)
    clips = []
    for path in sorted(Path(args.clips_dir).glob("*.npz")):
        with np.load(path) as z:
            label = int(z["label"]) if "label" in z else None
            fps = float(z["fps"]) if "fps" in z else 25.0
            clips.append(pipeline.VideoClip(z["frames"], fps, label))
    return clips


def cmd_extract(args) -> int:
    if not args.out:
        raise SystemExit("extract: --out is required")
    net = modelio.load_qnet(args.net)
    clips = _load_clips(args)
    modes = _ints(args.input_modes) if args.input_modes else None
    seqs = pipeline.preprocess_dataset(net, clips, args.k, args.seed, args.out, modes, args.threads)
    _record_run(args, Path(args.out) / "run.json")
    print(f"wrote {len(seqs)} feature sequences to {args.out}")
    return 0


def _ttrnn_config(args, input_modes, classes: int) -> rnn.TTRNNConfig:
    cfg = {}
    if args.ttrnn_config:
        cfg = json.loads(Path(args.ttrnn_config).read_text())
    cfg.setdefault("input_modes", input_modes)
    cfg.setdefault("classes", classes)
    cfg.setdefault("hidden_modes", [4] * len(cfg["input_modes"]))
    d = len(cfg["input_modes"])
    cfg.setdefault("ranks_ih", [1] + [4] * (d - 1) + [1])
    cfg.setdefault("ranks_hh", cfg["ranks_ih"])
    cfg.setdefault("seed", args.seed)
    cfg["precision"] = args.precision
    return rnn.TTRNNConfig(**cfg)


def cmd_train(args) -> int:
    if not args.out:
        raise SystemExit("train: --out is required")
    train = pipeline.load_dataset(args.features)
    valid = pipeline.load_dataset(args.valid) if args.valid else []
    cfg = _ttrnn_config(args, list(train[0].frames.shape[1:]),
                        int(max(s.label for s in train)) + 1)
    model = rnn.init_model(cfg)
    opts = rnn.FitOptions(args.epochs, args.lr, args.batch_size, args.optimizer, args.seed)

    def log(rec):
        va = "-" if rec["valid_acc"] is None else f"{rec['valid_acc']:.3f}"
        print(f"epoch {rec['epoch']:3d} loss {rec['loss']:.4f} train {rec['train_acc']:.3f} "
              f"valid {va} ({rec['seconds']:.1f}s)")

    model, history = rnn.fit(model, train, valid, opts, callback=log)
    out = Path(args.out)
    modelio.save_ttrnn(model, out)
    rnn.write_history(history, out.with_name(out.name + ".history.jsonl"))
    _record_run(args, out.with_name(out.name + ".run.json"))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    model = modelio.load_ttrnn(args.model)
    data = pipeline.load_dataset(args.features)
    print(f"accuracy {rnn.evaluate(model, data):.4f} on {len(data)} sequences")
    return 0


def cmd_comprehend(args) -> int:
    net = modelio.load_qnet(args.qnet)
    model = modelio.load_ttrnn(args.ttrnn)
    with np.load(args.clip) as z:
        clip = pipeline.VideoClip(z["frames"])
    res = pipeline.comprehend(net, model, clip, args.k, args.seed, args.conf_threshold)
    print(json.dumps({
        "action_class": res.action_class,
        "action_probs": res.action_probs,
        "frames": res.frame_indices,
        "detections": [[{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                         "confidence": b.confidence, "class_id": b.class_id} for b in boxes]
                       for boxes in res.per_frame_detections],
    }, indent=1))
    return 0


def compression_rows(dense: int = DENSE_BASELINE_PARAMS) -> list[dict]:
    rows = [{"model": "dense RNN", "params": dense, "ratio": None, "basis": "57,600 x 1,024"}]
    for name, count in PUBLISHED_TT_COUNTS.items():
        rows.append({"model": name, "params": count, "ratio": dense / count, "basis": "published"})
    for name, (m, n, r) in TT_CONFIGS.items():
        count = tt.tt_param_count(m, n, r)
        rows.append({"model": name, "params": count, "ratio": dense / count,
                     "basis": "formula sum m_k n_k r_(k-1) r_k"})
    return rows


def cmd_report(args) -> int:
    rows = compression_rows()
    for path in args.models:
        data = Path(path).read_bytes()
        try:
            m = modelio.loads_ttrnn(data)
            count = rnn.input_map_param_count(m.config)
            dense = m.config.input_size * m.config.hidden_size
            rows.append({"model": path, "params": count, "ratio": dense / count,
                         "basis": f"input-to-hidden TT of one gate vs dense {dense:,}; "
                                  f"file {len(data)} B"})
        except TTQError:
            net = modelio.loads_qnet(data)
            fp, q = qnet.storage_bytes(net)
            rows.append({"model": path, "params": sum(l.param_count for l in net.conv_layers),
                         "ratio": fp / q, "basis": f"fp32 vs 8-bit bytes; file {len(data)} B"})
    print(f"{'model':<28}{'params':>14}{'compression':>14}  basis")
    for r in rows:
        ratio = "-" if r["ratio"] is None else f"{r['ratio']:,.0f}x" if r["ratio"] > 100 else f"{r['ratio']:.3f}x"
        print(f"{r['model']:<28}{r['params']:>14,}{ratio:>14}  {r['basis']}")
    print("\nnote: the published T-RNN counts (3,360 / 3,920) exceed the formula values "
          "(2,976 / 3,104); the counting convention behind them is not recoverable.")
    return 0


def _time(fn, reps: int) -> float:
    fn()
    best = float("inf")
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_tt_matvec(row_modes, col_modes, ranks, reps: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    ttm = tt.TTMatrix.random(row_modes, col_modes, ranks, rng)
    dense = rng.standard_normal(ttm.shape)
    x = rng.standard_normal(ttm.shape[0])
    t_tt = _time(lambda: tt.tt_matvec(ttm, x), reps)
    t_dense = _time(lambda: x @ dense, reps)
    return {"op": "tt_matvec", "shape": f"{ttm.shape[0]}x{ttm.shape[1]}",
            "seconds": t_tt, "baseline_seconds": t_dense, "speedup": t_dense / t_tt,
            "mults": tt.tt_flops(row_modes, col_modes, ranks),
            "baseline_mults": tt.dense_flops(row_modes, col_modes)}


def bench_qconv2d(size: int, cin: int, cout: int, reps: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    act = QuantizedActivations(rng.integers(0, 256, (size, size, cin), dtype=np.uint8))
    w = rng.integers(-127, 128, (3, 3, cin, cout)).astype(np.int8)
    wt = QuantizedWeights(w, 1 / 128, 1.0)
    xf = act.values.astype(np.float64) / 256
    wf = w.astype(np.float64) / 128
    t_q = _time(lambda: qconv2d(act, wt, 1, 1), reps)
    t_f = _time(lambda: conv2d_float(xf, wf, 1, 1), reps)
    mults = size * size * 9 * cin * cout
    return {"op": "qconv2d", "shape": f"{size}x{size}x{cin}->{cout}", "seconds": t_q,
            "baseline_seconds": t_f, "speedup": t_f / t_q, "mults": mults, "baseline_mults": mults}


def cmd_bench(args) -> int:
    results = []
    if args.op in ("tt_matvec", "all"):
        results.append(bench_tt_matvec((8, 20, 20, 18), (4, 4, 4, 4), (1, 4, 4, 4, 1),
                                       args.reps, args.seed))
    if args.op in ("qconv2d", "all"):
        for size in _ints(args.sizes):
            results.append(bench_qconv2d(size, 64, 64, args.reps, args.seed))
    for r in results:
        print(f"{r['op']:<10} {r['shape']:<22} {r['seconds'] * 1e3:9.3f} ms vs "
              f"{r['baseline_seconds'] * 1e3:9.3f} ms baseline  speed-up {r['speedup']:.2f}x  "
              f"mults {r['mults']:,} vs {r['baseline_mults']:,}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for r in results:
                fh.write(json.dumps(r) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file whose keys override option defaults")
    common.add_argument("--out")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("TTQ_THREADS", "1")))
    common.add_argument("--precision", choices=("f32", "f64"), default="f64")

    parser = argparse.ArgumentParser(prog="ttq", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", parents=[common], help="build, load weights, quantize, save")
    p.add_argument("--net", required=True, help="cfg file or bundled name (tiny-yolo-voc, ...)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weights", help="Darknet .weights file")
    g.add_argument("--random-seed", type=int)
    p.add_argument("--report-only", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("decompose", parents=[common], help="TT-SVD of a dense .npy matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--row-modes", required=True)
    p.add_argument("--col-modes", required=True)
    p.add_argument("--max-rank", type=int)
    p.add_argument("--tol", type=float, default=0.0)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("extract", parents=[common], help="clips -> feature sequence dataset")
    p.add_argument("--net", required=True, help="quantized net saved by 'quantize'")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--clips-dir", help="directory of .npz clips (frames, optional label/fps)")
    src.add_argument("--synth", help="CLASSES,CLIPS_PER_CLASS for the synthetic generator")
    p.add_argument("--synth-shape", default="32,32")
    p.add_argument("--synth-frames", type=int, default=10)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--input-modes")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train a TT-RNN on a feature dataset")
    p.add_argument("--features", required=True)
    p.add_argument("--valid")
    p.add_argument("--ttrnn-config", help="JSON with TTRNNConfig fields")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=sorted(rnn.OPTIMIZERS), default="adam")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a TT-RNN on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("comprehend", parents=[common], help="detect + classify one clip")
    p.add_argument("--qnet", required=True)
    p.add_argument("--ttrnn", required=True)
    p.add_argument("--clip", required=True, help=".npz with a 'frames' array")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--conf-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_comprehend)

    p = sub.add_parser("report", parents=[common], help="parameter compression table")
    p.add_argument("models", nargs="*")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", parents=[common], help="time qconv2d / tt_matvec vs dense")
    p.add_argument("--op", choices=("qconv2d", "tt_matvec", "all"), default="all")
    p.add_argument("--sizes", default="32,64")
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    overrides = json.loads(Path(args.config).read_text())
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(overrides) - known
    if unknown:
        parser.error(f"unknown keys in --config: {', '.join(sorted(unknown))}")
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(args.threads, 1)):
            return args.func(args)
    except TTQError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[IO]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
