"""Rollout measurements: content change, freeze pairs, attention contrasts.

Attention statistics follow one convention throughout: masses and
densities sum raw per-head weights, entropy uses the normalized per-head
distribution scaled by log(number of cells), every per-query statistic is
the arithmetic mean of the 8 per-head values, and contrasts are L minus H
(entropy is H minus L, so positive always means L is more concentrated).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from .model import AirModel
from .recurrence import RecurrenceConfig, RolloutTrace, run_rollout
from .tasks import (
    build_geometry,
    encode_puzzle,
    maze_error_set,
    undecided_id,
    violations_sudoku,
)

VIOLATION_ADJACENT = "violation_adjacent"
ERROR_ADJACENT = "error_adjacent"
CONTROL = "control"

METRIC_COLUMNS = ("d_nbr", "d_ent", "d_viol", "drho4", "drho8", "drho5x5", "drho_viol")


def normalized_entropy(weights) -> float:
    """Entropy of the normalized distribution, scaled into [0, 1] by
    log(n). Exactly 1 for a uniform input and exactly 0 for a one-hot."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if w.size < 2 or total <= 0 or (w < 0).any():
        raise ValueError("entropy needs >= 2 nonnegative weights with positive mass")
    p = w / total
    if np.all(p == p[0]):
        return 1.0
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum() / math.log(p.size))
    return min(max(h, 0.0), 1.0)


# ---------------------------------------------------------------------------
# content change


@dataclass
class ContentChangeSeries:
    state: str
    per_step: list          # C^(t) between consecutive decoded grids
    total: int
    rewrites: int
    commitments: int        # undecided -> token
    uncommitments: int      # token -> undecided


def content_change_series(grids, state: str = "H", undecided: int = 0) -> ContentChangeSeries:
    """Token differences between consecutive decoded grids of one state.

    Any transition counts, including undecided <-> committed; the
    breakdown splits commitments, uncommitments, and plain rewrites.
    """
    grids = [np.asarray(g) for g in grids]
    if len(grids) < 2:
        raise ValueError("need at least two decoded grids")
    shape = grids[0].shape
    for g in grids[1:]:
        if g.shape != shape:
            raise ValueError(f"grid shapes differ: {shape} vs {g.shape}")
    per_step = []
    rewrites = commitments = uncommitments = 0
    for prev, cur in zip(grids, grids[1:]):
        diff = prev != cur
        per_step.append(int(diff.sum()))
        commitments += int(((prev == undecided) & diff).sum())
        uncommitments += int(((cur == undecided) & diff).sum())
        rewrites += int((diff & (prev != undecided) & (cur != undecided)).sum())
    return ContentChangeSeries(state=state, per_step=per_step, total=int(sum(per_step)),
                               rewrites=rewrites, commitments=commitments,
                               uncommitments=uncommitments)


@dataclass
class CommittednessProfile:
    undecided_counts: dict   # state -> per-sub-step undecided-cell counts
    shifts: list             # symmetric-difference sizes between consecutive L-updates


def committedness_profile(trace: RolloutTrace, undecided: int = 0) -> CommittednessProfile:
    """Per-sub-step undecided-cell counts per state, plus how the undecided
    locations of z_L move between consecutive L-updates."""
    states = sorted(trace.records[0].decoded) if trace.records else []
    counts = {s: [int((r.decoded[s] == undecided).sum()) for r in trace.records] for s in states}
    key = "L" if "L" in states else states[0] if states else None
    shifts = []
    if key is not None:
        l_grids = [r.decoded[key] for r in trace.records if r.update == "L" or key == "z"]
        sets = [set(np.flatnonzero(g == undecided).tolist()) for g in l_grids]
        shifts = [len(a ^ b) for a, b in zip(sets, sets[1:])]
    return CommittednessProfile(undecided_counts=counts, shifts=shifts)


# ---------------------------------------------------------------------------
# freeze experiments


def freeze_experiment(model: AirModel, puzzles, which: str, cfg: RecurrenceConfig) -> dict:
    """Matched normal/frozen rollouts on the same puzzles.

    Reports the unfrozen state's content-change series under both
    conditions, the frozen state's own series (zero by construction), and
    exact-match accuracies. ``which`` is freeze_H or freeze_L.
    """
    if cfg.single_state:
        raise ValueError("freeze experiments need the two-state schedule")
    if which not in ("freeze_H", "freeze_L"):
        raise ValueError(f"unknown freeze condition {which!r}")
    frozen_state = "H" if which == "freeze_H" else "L"
    measured = "L" if frozen_state == "H" else "H"
    und = undecided_id(puzzles[0].kind)

    def run_condition(run_cfg):
        totals, series_stack, frozen_totals, hits = [], [], [], 0
        for p in puzzles:
            trace = run_rollout(model, p, run_cfg)
            s = content_change_series(trace.state_grids(measured), state=measured, undecided=und)
            totals.append(s.total)
            series_stack.append(s.per_step)
            f = content_change_series(trace.state_grids(frozen_state), state=frozen_state, undecided=und)
            frozen_totals.append(f.total)
            target = encode_puzzle(p)[1]
            hits += int((trace.records[-1].decoded["H"] == target).all())
        mean_series = np.mean(np.asarray(series_stack, dtype=np.float64), axis=0)
        return {
            "measured_state": measured,
            "accuracy": hits / len(puzzles),
            "total_mean": float(np.mean(totals)),
            "totals": [int(t) for t in totals],
            "per_update_mean": [float(x) for x in mean_series],
            "frozen_state_total_mean": float(np.mean(frozen_totals)),
        }

    return {
        "which": which,
        "kind": puzzles[0].kind,
        "n_puzzles": len(puzzles),
        "normal": run_condition(replace(cfg, freeze="none")),
        "freeze": run_condition(replace(cfg, freeze=which)),
    }


# ---------------------------------------------------------------------------
# attention contrasts


@dataclass
class AttentionStatRow:
    puzzle: int
    klass: str
    layer: int
    cycle: int
    n_queries: int
    d_nbr: float | None = None
    d_ent: float | None = None
    d_viol: float | None = None
    drho4: float | None = None
    drho8: float | None = None
    drho5x5: float | None = None
    drho_viol: float | None = None


def _entry_decoded_h(trace: RolloutTrace, cycle: int) -> np.ndarray:
    """Decoded z_H entering the cycle (after the previous final H-update)."""
    if cycle <= 1:
        return trace.initial_decoded["H"]
    idx = (cycle - 1) * trace.config.steps_per_cycle - 1
    return trace.records[idx].decoded["H"]


def _paired_captures(trace: RolloutTrace):
    cycles = [c for c in trace.config.record_cycles if c <= trace.config.max_cycles]
    for cycle in cycles:
        cap_l = trace.capture_for(cycle, "L")
        cap_h = trace.capture_for(cycle, "H")
        if cap_l is None or cap_h is None:
            raise ValueError(f"missing attention capture for cycle {cycle}")
        yield cycle, cap_l, cap_h


def _check_keys(cap, cells: int):
    if cap.weights[0].shape[-1] != cells:
        raise ValueError(
            "attention statistics are defined over puzzle-cell keys only; "
            f"capture has {cap.weights[0].shape[-1]} keys for {cells} cells "
            "(prepend level-token variants are excluded from analysis)"
        )


def _head_stats(cap_l, cap_h, layer: int, q: int, regions: dict) -> dict:
    """Head-averaged L-H contrasts for one query; ``regions`` maps a metric
    name to (cell list, divisor) summed on raw weights, plus 'd_ent'."""
    wl = cap_l.weights[layer][:, q, :]
    wh = cap_h.weights[layer][:, q, :]
    heads = wl.shape[0]
    out = {name: 0.0 for name in regions}
    out["d_ent"] = 0.0
    for h in range(heads):
        row_l, row_h = wl[h], wh[h]
        for name, (cells, divisor) in regions.items():
            if len(cells):
                out[name] += (row_l[cells].sum() - row_h[cells].sum()) / divisor
        out["d_ent"] += normalized_entropy(row_h) - normalized_entropy(row_l)
    return {name: val / heads for name, val in out.items()}


def _within_nbr_value(cap_l, cap_h, layer: int, q: int, viol_cells, clean_cells) -> float:
    """L-H per-cell density on violated minus on non-violated neighbors."""
    wl = cap_l.weights[layer][:, q, :]
    wh = cap_h.weights[layer][:, q, :]
    heads = wl.shape[0]
    acc = 0.0
    for h in range(heads):
        diff_v = (wl[h][viol_cells].mean() - wh[h][viol_cells].mean())
        diff_c = (wl[h][clean_cells].mean() - wh[h][clean_cells].mean())
        acc += diff_v - diff_c
    return acc / heads


def _rows_from_query_values(puzzle_id, layer, cycle, per_class) -> list:
    rows = []
    for klass, entries in per_class.items():
        if not entries:
            continue
        keys = entries[0].keys()
        row = AttentionStatRow(puzzle=puzzle_id, klass=klass, layer=layer, cycle=cycle,
                               n_queries=len(entries))
        for key in keys:
            vals = [e[key] for e in entries if e[key] is not None]
            setattr(row, key, float(np.mean(vals)) if vals else None)
        rows.append(row)
    return rows


def sudoku_attention_contrasts(trace: RolloutTrace, puzzle, puzzle_id: int = 0) -> list:
    """Per (class, layer, cycle) rows of head-averaged d_nbr, d_ent, d_viol
    and the within-neighborhood control, query-averaged.

    Queries are the blank cells of the input; the violation set comes from
    decoded z_H at cycle entry, so both compared sub-steps share it.
    """
    geom = build_geometry("sudoku", puzzle.side)
    input_ids, _ = encode_puzzle(puzzle)
    queries = np.flatnonzero(input_ids == undecided_id("sudoku")).tolist()
    rows = []
    for cycle, cap_l, cap_h in _paired_captures(trace):
        _check_keys(cap_l, puzzle.cells)
        _check_keys(cap_h, puzzle.cells)
        violations = violations_sudoku(_entry_decoded_h(trace, cycle), puzzle.side)
        n_layers = len(cap_l.weights)
        for layer in range(n_layers):
            per_class = {VIOLATION_ADJACENT: [], CONTROL: []}
            for q in queries:
                nbr = geom.tables["sudoku"][q]
                nbr_viol = [k for k in nbr if k in violations]
                klass = VIOLATION_ADJACENT if nbr_viol else CONTROL
                stats = _head_stats(cap_l, cap_h, layer, q, {
                    "d_nbr": (nbr, 1.0),
                    "d_viol": (nbr_viol, 1.0),
                })
                nbr_clean = [k for k in nbr if k not in violations]
                stats["drho_viol"] = (
                    _within_nbr_value(cap_l, cap_h, layer, q, nbr_viol, nbr_clean)
                    if nbr_viol and nbr_clean else None
                )
                per_class[klass].append(stats)
            rows.extend(_rows_from_query_values(puzzle_id, layer, cycle, per_class))
    return rows


def maze_attention_contrasts(trace: RolloutTrace, puzzle, puzzle_id: int = 0) -> list:
    """Maze analogue: per-cell density contrasts for the 4-, 8-, and 5x5
    neighborhoods, entropy over the full grid, and error-cell mass on N4.

    Queries are the ground-truth solution-path cells; the error set is
    where decoded z_H at cycle entry disagrees with the target.
    """
    geom = build_geometry("maze", puzzle.side)
    _, target_ids = encode_puzzle(puzzle)
    from .tasks import MAZE_SOLUTION

    queries = np.flatnonzero(target_ids == MAZE_SOLUTION).tolist()
    rows = []
    for cycle, cap_l, cap_h in _paired_captures(trace):
        _check_keys(cap_l, puzzle.cells)
        _check_keys(cap_h, puzzle.cells)
        errors = maze_error_set(_entry_decoded_h(trace, cycle), target_ids)
        n_layers = len(cap_l.weights)
        for layer in range(n_layers):
            per_class = {ERROR_ADJACENT: [], CONTROL: []}
            for q in queries:
                n4 = geom.tables["n4"][q]
                n8 = geom.tables["n8"][q]
                n5 = geom.tables["n5x5"][q]
                n4_err = [k for k in n4 if k in errors]
                klass = ERROR_ADJACENT if n4_err else CONTROL
                stats = _head_stats(cap_l, cap_h, layer, q, {
                    "drho4": (n4, float(len(n4))),
                    "drho8": (n8, float(len(n8))),
                    "drho5x5": (n5, float(len(n5))),
                    "d_viol": (n4_err, 1.0),
                })
                n4_clean = [k for k in n4 if k not in errors]
                stats["drho_viol"] = (
                    _within_nbr_value(cap_l, cap_h, layer, q, n4_err, n4_clean)
                    if n4_err and n4_clean else None
                )
                per_class[klass].append(stats)
            rows.extend(_rows_from_query_values(puzzle_id, layer, cycle, per_class))
    return rows


def within_neighborhood_control(trace: RolloutTrace, puzzle, kind: str) -> dict:
    """Per-layer mean of the within-neighborhood control over eligible
    queries (violation-adjacent with both bins present) and recorded
    cycles. Empty dict when no query qualifies."""
    if kind == "sudoku":
        geom = build_geometry("sudoku", puzzle.side)
        input_ids, _ = encode_puzzle(puzzle)
        queries = np.flatnonzero(input_ids == undecided_id("sudoku")).tolist()
        nbr_table = geom.tables["sudoku"]
    elif kind == "maze":
        from .tasks import MAZE_SOLUTION
        geom = build_geometry("maze", puzzle.side)
        _, target_ids = encode_puzzle(puzzle)
        queries = np.flatnonzero(target_ids == MAZE_SOLUTION).tolist()
        nbr_table = geom.tables["n4"]
    else:
        raise ValueError(f"unknown task kind {kind!r}")

    acc: dict[int, list] = {}
    for cycle, cap_l, cap_h in _paired_captures(trace):
        entry = _entry_decoded_h(trace, cycle)
        if kind == "sudoku":
            bad = violations_sudoku(entry, puzzle.side)
        else:
            _, target_ids = encode_puzzle(puzzle)
            bad = maze_error_set(entry, target_ids)
        for layer in range(len(cap_l.weights)):
            for q in queries:
                nbr = nbr_table[q]
                viol = [k for k in nbr if k in bad]
                clean = [k for k in nbr if k not in bad]
                if viol and clean:
                    acc.setdefault(layer, []).append(
                        _within_nbr_value(cap_l, cap_h, layer, q, viol, clean))
    return {layer: float(np.mean(vals)) for layer, vals in acc.items()}


# ---------------------------------------------------------------------------
# aggregation and CSV emission


def aggregate_report(rows, group_keys=("klass", "layer")) -> list:
    """Puzzle-level mean with a 95% normal-approximation CI per group.

    A puzzle's rows are first averaged within each group (so each puzzle
    contributes once to every class it has queries for), then groups
    report mean, 1.96 * sd / sqrt(n), and n. Single-puzzle groups get a
    zero-width interval and keep n = 1 visible; empty groups warn and are
    omitted.
    """
    rows = list(rows)
    if not rows:
        warnings.warn("aggregate_report: no rows to aggregate")
        return []
    groups: dict[tuple, dict] = {}
    for r in rows:
        gkey = tuple(getattr(r, k) for k in group_keys)
        groups.setdefault(gkey, {})
        for metric in METRIC_COLUMNS:
            val = getattr(r, metric)
            if val is None:
                continue
            groups[gkey].setdefault(metric, {}).setdefault(r.puzzle, []).append(val)
    summary = []
    for gkey in sorted(groups, key=str):
        for metric in METRIC_COLUMNS:
            per_puzzle = groups[gkey].get(metric)
            if not per_puzzle:
                continue
            values = np.asarray([np.mean(v) for v in per_puzzle.values()], dtype=np.float64)
            n = values.size
            if n == 0:
                warnings.warn(f"aggregate_report: empty group {gkey}/{metric}")
                continue
            mean = float(values.mean())
            sd = float(values.std(ddof=1)) if n > 1 else 0.0
            ci = 1.96 * sd / math.sqrt(n) if n > 1 else 0.0
            entry = dict(zip(group_keys, gkey))
            entry.update({"metric": metric, "mean": mean, "ci95": ci, "n": int(n)})
            summary.append(entry)
    return summary


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def write_rows_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["puzzle", "class", "layer", "cycle", "n_queries", *METRIC_COLUMNS])
        for r in rows:
            writer.writerow([r.puzzle, r.klass, r.layer, r.cycle, r.n_queries,
                             *[_fmt(getattr(r, m)) for m in METRIC_COLUMNS]])


def write_summary_csv(path, summary, group_keys=("klass", "layer")):
    header = [k if k != "klass" else "class" for k in group_keys]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*header, "metric", "mean", "ci95", "n"])
        for row in summary:
            writer.writerow([*[row[k] for k in group_keys], row["metric"],
                             _fmt(row["mean"]), _fmt(row["ci95"]), row["n"]])
