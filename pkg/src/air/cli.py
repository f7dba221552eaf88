"""Command-line entry point: one binary, manifest-driven subcommands.

Every run copies its resolved manifest into the output directory, so
re-running that file reproduces the outputs byte for byte. Outputs are
written temp-then-rename. The only environment knob is AIR_OUT_DIR,
which overrides the default runs/ root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import analysis as an
from . import plots
from . import training as tr
from .manifest import ExperimentManifest, load_manifest
from .model import load_checkpoint, save_checkpoint
from .recurrence import run_rollout, save_trace
from .tasks import build_geometry, load_dataset, write_dataset
from .gradcheck import check_op
from . import tensor as T


def atomic_write_text(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def finalize(tmp_path, path):
    os.replace(tmp_path, path)


def resolve_out_dir(args, manifest: ExperimentManifest, command: str) -> str:
    if getattr(args, "out", None):
        out = args.out
    elif manifest.out_dir:
        out = manifest.out_dir
    else:
        root = os.environ.get("AIR_OUT_DIR", "runs")
        out = os.path.join(root, f"{command}-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(out, exist_ok=True)
    atomic_write_text(os.path.join(out, "manifest.json"), manifest.dumps())
    return out


def get_dataset(manifest: ExperimentManifest, args, count=None):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return manifest.dataset(count=count)


def get_model(manifest: ExperimentManifest, args):
    if getattr(args, "ckpt", None):
        model, _meta = load_checkpoint(args.ckpt)
        return model
    return manifest.build_model()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    t = manifest.task
    for flag in ("kind", "side", "count", "seed", "givens", "augment"):
        val = getattr(args, flag, None)
        if val is not None:
            t = replace(t, **{flag: val})
    manifest.task = t
    out = resolve_out_dir(args, manifest, "gen-data")
    instances = manifest.dataset()
    path = os.path.join(out, "dataset.jsonl")
    write_dataset(f"{path}.tmp", instances)
    finalize(f"{path}.tmp", path)
    if args.export_geometry:
        geom = build_geometry(t.kind, t.side)
        atomic_write_text(os.path.join(out, "geometry.json"), geom.to_json() + "\n")
    print(f"wrote {len(instances)} records to {path}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    out = resolve_out_dir(args, manifest, "train")
    dataset = get_dataset(manifest, args)
    model = manifest.build_model()
    result = tr.train(model, dataset, manifest.train, manifest.recurrence,
                      out_dir=out, log=lambda s: print(s, flush=True))
    metrics_path = os.path.join(out, "metrics.csv")
    tr.write_metrics_csv(f"{metrics_path}.tmp", result.metrics)
    finalize(f"{metrics_path}.tmp", metrics_path)
    ckpt = os.path.join(out, "final.ckpt")
    save_checkpoint(ckpt, model, step=manifest.train.steps)
    plots.render_training_curves(result.metrics, os.path.join(out, "training.svg"))
    print(f"final exact match {result.final_accuracy:.4f} (peak {result.peak_accuracy:.4f}); checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    out = resolve_out_dir(args, manifest, "eval")
    dataset = get_dataset(manifest, args)
    model = get_model(manifest, args)
    acc = tr.evaluate_exact_match(model, dataset, manifest.recurrence)
    atomic_write_text(os.path.join(out, "eval.json"),
                      json.dumps({"exact_match": acc, "n": len(dataset)}, sort_keys=True) + "\n")
    print(f"exact match {acc:.4f} over {len(dataset)} puzzles")
    return 0


def _analysis_cfg(manifest: ExperimentManifest):
    return replace(manifest.recurrence, record_cycles=manifest.analysis.cycles)


def cmd_rollout(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    out = resolve_out_dir(args, manifest, "rollout")
    dataset = get_dataset(manifest, args, count=max(args.index + 1, 1))
    if args.index >= len(dataset):
        raise IndexError(f"puzzle index {args.index} outside dataset of {len(dataset)}")
    puzzle = dataset[args.index]
    model = get_model(manifest, args)
    cfg = _analysis_cfg(manifest)
    trace = run_rollout(model, puzzle, cfg, record=args.record)
    jsonl = os.path.join(out, "trace.jsonl")
    attn = os.path.join(out, "attention.bin")
    save_trace(trace, f"{jsonl}.tmp", f"{attn}.tmp" if trace.captures else None)
    finalize(f"{jsonl}.tmp", jsonl)
    if trace.captures:
        finalize(f"{attn}.tmp", attn)
    if args.render:
        plots.render_decoded_grids(trace, puzzle, os.path.join(out, "decoded.svg"))
    print(f"wrote {len(trace.records)} sub-step records to {jsonl}")
    return 0


def cmd_freeze(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    out = resolve_out_dir(args, manifest, "freeze")
    dataset = get_dataset(manifest, args, count=manifest.analysis.n_puzzles)
    puzzles = dataset[: manifest.analysis.n_puzzles]
    model = get_model(manifest, args)
    which = f"freeze_{args.which}"
    report = an.freeze_experiment(model, puzzles, which, manifest.recurrence)
    path = os.path.join(out, "freeze_report.json")
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    plots.render_freeze_figure(report, os.path.join(out, "freeze.svg"))
    print(f"{which}: normal acc {report['normal']['accuracy']:.3f}, "
          f"frozen acc {report['freeze']['accuracy']:.3f}; report {path}")
    return 0


def cmd_attn_stats(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    if args.cycles:
        manifest.analysis.cycles = tuple(int(c) for c in args.cycles.split(","))
    out = resolve_out_dir(args, manifest, "attn-stats")
    dataset = get_dataset(manifest, args, count=manifest.analysis.n_puzzles)
    puzzles = dataset[: manifest.analysis.n_puzzles]
    model = get_model(manifest, args)
    cfg = _analysis_cfg(manifest)
    contrasts = (an.sudoku_attention_contrasts if manifest.task.kind == "sudoku"
                 else an.maze_attention_contrasts)
    rows = []
    for i, puzzle in enumerate(puzzles):
        trace = run_rollout(model, puzzle, cfg, record=True)
        rows.extend(contrasts(trace, puzzle, puzzle_id=i))
    summary = an.aggregate_report(rows)
    rows_path = os.path.join(out, "rows.csv")
    an.write_rows_csv(f"{rows_path}.tmp", rows)
    finalize(f"{rows_path}.tmp", rows_path)
    summary_path = os.path.join(out, "summary.csv")
    an.write_summary_csv(f"{summary_path}.tmp", summary)
    finalize(f"{summary_path}.tmp", summary_path)
    if summary:
        plots.render_contrast_figure(summary, os.path.join(out, "contrasts.svg"))
    print(f"wrote {len(rows)} rows ({len(summary)} summary groups) to {rows_path}")
    return 0


def cmd_report(args) -> int:
    manifest = load_manifest(args.manifest, args.set)
    out = resolve_out_dir(args, manifest, "report")
    dataset = get_dataset(manifest, args)
    rows, variants = [], []
    for (n_l, n_h) in manifest.analysis.compare:
        rcfg = replace(manifest.recurrence, n_l=n_l, n_h=n_h)
        accs = []
        for seed in manifest.analysis.seeds:
            model = manifest.build_model(seed=seed)
            tcfg = replace(manifest.train, seed=seed)
            result = tr.train(model, dataset, tcfg, rcfg)
            accs.append(result.peak_accuracy)
            rows.append({"variant": f"L{n_l}_H{n_h}", "n_l": n_l, "n_h": n_h,
                         "delta": rcfg.delta, "seed": seed, "exact_match": result.peak_accuracy})
            print(f"variant ({n_l},{n_h}) seed {seed}: peak exact match {accs[-1]:.3f}", flush=True)
        arr = np.asarray(accs)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        variants.append({"variant": f"L{n_l}_H{n_h}", "n_l": n_l, "n_h": n_h, "delta": rcfg.delta,
                         "mean": float(arr.mean()), "ci95": 1.96 * sd / np.sqrt(arr.size) if arr.size > 1 else 0.0,
                         "n": int(arr.size)})
    asym = [v["mean"] for v in variants if v["delta"] > 0]
    sym = [v["mean"] for v in variants if v["delta"] == 0]
    expected = bool(asym and sym and min(asym) >= max(sym)) if (asym and sym) else None
    report = {"variants": variants, "expected_direction": expected}
    csv_path = os.path.join(out, "directional.csv")
    lines = ["variant,n_l,n_h,delta,seed,exact_match"]
    lines += [f"{r['variant']},{r['n_l']},{r['n_h']},{r['delta']},{r['seed']},{r['exact_match']:.6g}"
              for r in rows]
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(out, "direction.json"),
                      json.dumps(report, indent=2, sort_keys=True) + "\n")
    plots.render_direction_figure(report, os.path.join(out, "direction.svg"))
    flag = {True: "expected direction holds", False: "expected direction does NOT hold",
            None: "direction not comparable"}[expected]
    print(f"{flag}; report in {out}")
    return 0


def cmd_selftest(args) -> int:
    from .tasks import gen_maze, gen_sudoku, sudoku_oracle, bfs_distances, MAZE_SOLUTION, encode_puzzle
    rng = np.random.default_rng(0)
    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"ok {name}")
        except Exception as exc:  # report and continue
            failures.append(name)
            print(f"FAIL {name}: {exc}")

    def grads():
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        check_op(lambda p: T.mean_all(T.tanh(p[0] @ p[1])), [x, w])
        check_op(lambda p: T.mean_all(T.softmax_last(p[0])), [rng.standard_normal((2, 5))])
        targets = rng.integers(0, 4, size=(2, 3))
        check_op(lambda p: T.stablemax_cross_entropy(p[0], targets), [rng.standard_normal((2, 3, 4))])

    def sudoku():
        p = gen_sudoku(4, 8, seed=1)
        count, sol = sudoku_oracle(p.input_tokens)
        assert count == 1 and (sol == p.target_tokens).all()

    def maze():
        p = gen_maze(9, seed=1)
        grid = p.input_tokens.reshape(9, 9)
        start = tuple(np.argwhere(grid == "S")[0])
        goal = tuple(np.argwhere(grid == "G")[0])
        dist = bfs_distances(grid, start)[goal][0]
        assert int((encode_puzzle(p)[1] == MAZE_SOLUTION).sum()) == dist + 1

    def entropy():
        assert an.normalized_entropy(np.full(81, 0.3)) == 1.0
        one_hot = np.zeros(81)
        one_hot[5] = 1.0
        assert an.normalized_entropy(one_hot) == 0.0

    def detach_semantics():
        x = T.parameter(rng.standard_normal((2, 2)))
        w = T.parameter(rng.standard_normal((2, 2)))
        loss = T.sum_all(T.mul(x.detach(), w))
        loss.backward()
        assert x.grad is None and np.allclose(w.grad, x.data)

    check("gradient checks", grads)
    check("sudoku oracle", sudoku)
    check("maze shortest path", maze)
    check("entropy normalization", entropy)
    check("detach semantics", detach_semantics)
    if failures:
        print(f"{len(failures)} selftest failures: {', '.join(failures)}")
        return 1
    print("selftest passed")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="air", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-m", "--manifest", help="manifest JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted manifest override, e.g. train.steps=500")
        p.add_argument("--out", help="output directory (default: runs/<cmd>-<timestamp>)")

    p = sub.add_parser("gen-data", help="generate a puzzle dataset (JSONL)")
    common(p)
    p.add_argument("--kind", choices=["sudoku", "maze"])
    p.add_argument("--side", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--givens", type=int)
    p.add_argument("--augment", type=int)
    p.add_argument("--export-geometry", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model per the manifest")
    common(p)
    p.add_argument("--data", help="dataset JSONL (default: generate from task config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="exact-match evaluation of a checkpoint")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rollout", help="trace one puzzle through a full rollout")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--record", action="store_true", help="capture attention")
    p.add_argument("--render", action="store_true", help="render decoded-state panels")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("freeze", help="paired normal-vs-frozen rollout report")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--which", choices=["H", "L"], required=True)
    p.set_defaults(fn=cmd_freeze)

    p = sub.add_parser("attn-stats", help="attention contrast statistics")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--cycles", help="comma-separated capture cycles")
    p.set_defaults(fn=cmd_attn_stats)

    p = sub.add_parser("report", help="directional injection comparison")
    common(p)
    p.add_argument("--data")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("selftest", help="run the gradient/oracle property suites")
    common(p)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
