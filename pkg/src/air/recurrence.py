"""The two-state recurrence schedule and its rollout/trace machinery.

A cycle is the sub-step pattern (L x C_L, H) x C_H; the L-update writes
z_L and receives the encoded input, the H-update writes z_H and (by
default) receives none. During training only the final L and final H of a
cycle carry gradient; everything earlier runs on detached values, so
backward traverses exactly two core applications per cycle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import AirModel, AttentionCapture, LatentPair

OPERATOR_FORMS = ("additive", "linear", "nonlinear", "sign_flip", "hadamard")
LEVEL_TOKEN_MODES = ("none", "addition", "prepend_strip", "prepend_no_strip")
FREEZE_MODES = ("none", "freeze_H", "freeze_L")

# Cycles whose first L and first H sub-steps get attention captures.
DEFAULT_RECORD_CYCLES = (2, 4, 6, 8, 10, 12, 14, 15)


@dataclass
class RecurrenceConfig:
    n_l: int = 1
    n_h: int = 0
    operator_form: str = "additive"
    level_token_mode: str = "none"
    tied: bool = True
    single_state: bool = False
    c_l: int = 2
    c_h: int = 2
    max_cycles: int = 16
    freeze: str = "none"
    freeze_onset: int = 0  # global sub-step index where the hold begins
    record_cycles: tuple = DEFAULT_RECORD_CYCLES

    def __post_init__(self):
        if self.n_l < 0 or self.n_h < 0:
            raise ValueError("injection counts must be nonnegative")
        if self.c_l < 1 or self.c_h < 1 or self.max_cycles < 1:
            raise ValueError("c_l, c_h, max_cycles must be positive")
        if self.operator_form not in OPERATOR_FORMS:
            raise ValueError(f"unknown operator form {self.operator_form!r}")
        if self.level_token_mode not in LEVEL_TOKEN_MODES:
            raise ValueError(f"unknown level-token mode {self.level_token_mode!r}")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"unknown freeze mode {self.freeze!r}")
        if self.single_state and self.freeze != "none":
            raise ValueError("single-state mode has no second state to freeze")
        self.record_cycles = tuple(int(c) for c in self.record_cycles)

    @property
    def delta(self) -> int:
        """Asymmetry level: absolute difference of the injection counts."""
        return abs(self.n_l - self.n_h)

    @property
    def steps_per_cycle(self) -> int:
        return (self.c_l + 1) * self.c_h

    def pattern(self) -> list:
        """Sub-step types of one cycle, e.g. L,L,H,L,L,H for the default."""
        return (["L"] * self.c_l + ["H"]) * self.c_h

    def first_sub(self, update: str) -> int:
        """Within-cycle index of the first sub-step of the given type."""
        return 0 if update == "L" else self.c_l

    def to_dict(self) -> dict:
        d = asdict(self)
        d["record_cycles"] = list(self.record_cycles)
        return d


@dataclass
class SubStepRecord:
    t: int        # global sub-step index, 0-based
    cycle: int    # 1-based
    sub: int      # index within the cycle
    update: str   # "L" or "H"
    decoded: dict  # {"H": ids, "L": ids} or {"z": ids} in single-state mode


@dataclass
class RolloutTrace:
    records: list
    captures: dict          # (cycle, sub) -> AttentionCapture
    final_logits: np.ndarray
    initial_decoded: dict   # decoded states before any sub-step
    config: RecurrenceConfig
    seq_len: int            # board cell count

    def state_grids(self, state: str, include_initial: bool = True) -> list:
        """Decoded grids of one state at its own update sub-steps.

        For the two-state schedule "H" collects H-updates and "L" collects
        L-updates; "z" collects every sub-step of a single-state trace.
        """
        if state == "z":
            grids = [r.decoded["z"] for r in self.records]
        else:
            grids = [r.decoded[state] for r in self.records if r.update == state]
        if include_initial:
            return [self.initial_decoded[state if state in self.initial_decoded else "z"]] + grids
        return grids

    def capture_for(self, cycle: int, update: str):
        return self.captures.get((cycle, self.config.first_sub(update)))

    def recorded_cycles(self) -> list:
        return sorted({c for (c, _s) in self.captures})


def _pad_front(t: Tensor, rows: int) -> Tensor:
    """Prepend zero rows along the sequence axis (aligns cells at the end)."""
    if rows == 0:
        return t
    b, _s, d = t.shape
    zeros = T.constant(np.zeros((b, rows, d), dtype=t.dtype))
    return T.concat([zeros, t], axis=1)


def _align(parts: list) -> list:
    longest = max(p.shape[1] for p in parts)
    return [_pad_front(p, longest - p.shape[1]) for p in parts]


def apply_operator_form(x_tilde: Tensor, z_l: Tensor, z_h: Tensor, cfg: RecurrenceConfig, gate: Tensor | None = None) -> Tensor:
    """Build the L-update core argument for the configured injection form."""
    form = cfg.operator_form
    if form in ("linear", "nonlinear") and gate is None:
        raise ValueError(f"operator form {form!r} needs the learned gate matrix (operator_gate=True)")
    z_l, z_h, x_tilde = _align([z_l, z_h, x_tilde])
    if form == "additive":
        if cfg.n_l == 0:
            return z_l + z_h
        return z_l + z_h + T.scale(x_tilde, float(cfg.n_l))
    if form == "linear":
        return z_l + z_h + x_tilde @ gate
    if form == "nonlinear":
        return z_l + z_h + T.tanh(x_tilde @ gate)
    if form == "sign_flip":
        return z_l + z_h - x_tilde
    if form == "hadamard":
        return z_l + T.mul(z_h + z_l, x_tilde)
    raise ValueError(f"unknown operator form {form!r}")


def _run_update(model: AirModel, states: LatentPair, x_tilde: Tensor, cfg: RecurrenceConfig,
                update: str, capture: bool = False):
    """One sub-step; writes exactly one state and leaves the other untouched."""
    base_s = x_tilde.shape[1]
    if update == "L":
        arg = apply_operator_form(x_tilde, states.z_l, states.z_h, cfg, gate=model.params.get("gate"))
    else:
        z_h, z_l, xt = _align([states.z_h, states.z_l, x_tilde])
        arg = z_h + z_l
        if cfg.n_h > 0:
            arg = arg + T.scale(xt, float(cfg.n_h))
    arg, fixup = model.apply_level_token(
        arg, cfg.level_token_mode, update, already_present=arg.shape[1] > base_s
    )
    out, cap = model.core_forward(arg, which=update, capture=capture)
    if fixup.strip_first:
        out = T.narrow(out, 1, 1, out.shape[1] - 1)
    if update == "L":
        return LatentPair(z_h=states.z_h, z_l=out, h0=states.h0, l0=states.l0), cap
    return LatentPair(z_h=out, z_l=states.z_l, h0=states.h0, l0=states.l0), cap


def l_update(model: AirModel, states: LatentPair, x_tilde: Tensor, cfg: RecurrenceConfig) -> LatentPair:
    """z_L <- f(z_L + z_H + n_L x; theta_L); z_H passes through untouched."""
    new, _ = _run_update(model, states, x_tilde, cfg, "L")
    return new


def h_update(model: AirModel, states: LatentPair, x_tilde: Tensor, cfg: RecurrenceConfig) -> LatentPair:
    """z_H <- f(z_H + z_L + n_H x; theta_H); z_L passes through untouched."""
    new, _ = _run_update(model, states, x_tilde, cfg, "H")
    return new


def decode_cells(model: AirModel, z: Tensor, cells: int) -> np.ndarray:
    """Greedy decode of the last ``cells`` positions (level-token slot excluded)."""
    with T.no_grad():
        zc = T.narrow(z, 1, z.shape[1] - cells, cells) if z.shape[1] != cells else z
        _logits, tokens = model.decode_head(zc)
    return tokens[0].copy()


def _detached(states: LatentPair) -> LatentPair:
    return LatentPair(z_h=states.z_h.detach(), z_l=states.z_l.detach(), h0=states.h0, l0=states.l0)


def run_cycle(model: AirModel, states: LatentPair, x_tilde: Tensor, cfg: RecurrenceConfig,
              record: bool = False):
    """One training cycle with one-step truncated gradient.

    Every sub-step except the final L and final H runs without gradient
    recording on detached inputs (forward values are unchanged by this);
    the last two sub-steps build the differentiable graph. Returns
    (states, trace fragment) where the fragment holds decoded grids per
    sub-step when ``record`` is set.
    """
    pattern = cfg.pattern()
    base_s = x_tilde.shape[1]
    frag = []

    def note(update):
        if record:
            frag.append({
                "update": update,
                "H": decode_cells(model, states.z_h, base_s),
                "L": decode_cells(model, states.z_l, base_s),
            })

    with T.no_grad():
        for update in pattern[:-2]:
            states, _ = _run_update(model, states, x_tilde, cfg, update)
            note(update)
    states = _detached(states)
    for update in pattern[-2:]:
        states, _ = _run_update(model, states, x_tilde, cfg, update)
        note(update)
    return states, frag


def run_rollout(model: AirModel, puzzle, cfg: RecurrenceConfig, record: bool = False) -> RolloutTrace:
    """Full inference rollout over max_cycles with per-sub-step decoding.

    Honors the freeze policy (a frozen state's updates are skipped
    entirely, so it holds its broadcast init for the whole rollout by
    default). When ``record`` is set, attention is captured at the first L
    and first H sub-step of the configured record cycles.
    """
    if cfg.single_state:
        return single_state_rollout(model, puzzle, cfg)
    tokens = np.asarray(puzzle.input_tokens, dtype=np.int64)
    base_s = tokens.shape[0]
    capture_at = {
        (c, s)
        for c in cfg.record_cycles
        if c <= cfg.max_cycles
        for s in (cfg.first_sub("L"), cfg.first_sub("H"))
    }
    records, captures = [], {}
    with T.no_grad():
        x_tilde = model.encode_input(tokens)
        states = model.init_states(1, base_s)
        initial = {
            "H": decode_cells(model, states.z_h, base_s),
            "L": decode_cells(model, states.z_l, base_s),
        }
        frozen = {"freeze_H": "H", "freeze_L": "L"}.get(cfg.freeze)
        t = 0
        for cycle in range(1, cfg.max_cycles + 1):
            for sub, update in enumerate(cfg.pattern()):
                skip = frozen == update and t >= cfg.freeze_onset
                want_capture = record and (cycle, sub) in capture_at and not skip
                if not skip:
                    states, cap = _run_update(model, states, x_tilde, cfg, update, capture=want_capture)
                    if want_capture and cap is not None:
                        cap.cycle, cap.sub_step = cycle, sub
                        captures[(cycle, sub)] = cap
                records.append(SubStepRecord(
                    t=t, cycle=cycle, sub=sub, update=update,
                    decoded={
                        "H": decode_cells(model, states.z_h, base_s),
                        "L": decode_cells(model, states.z_l, base_s),
                    },
                ))
                t += 1
        zc = states.z_h
        if zc.shape[1] != base_s:
            zc = T.narrow(zc, 1, zc.shape[1] - base_s, base_s)
        final_logits, _ = model.decode_head(zc)
    return RolloutTrace(records=records, captures=captures, final_logits=final_logits.data[0].copy(),
                        initial_decoded=initial, config=cfg, seq_len=base_s)


def single_state_rollout(model: AirModel, puzzle, cfg: RecurrenceConfig) -> RolloutTrace:
    """One-state ablation: z <- f(z + a_t x) with the periodic injection
    pattern matching the two-state sub-step positions (1,1,0,1,1,0 per
    cycle at the defaults)."""
    if not cfg.single_state:
        raise ValueError("config does not set single_state")
    if cfg.level_token_mode != "none":
        raise ValueError("single-state mode does not support level tokens")
    tokens = np.asarray(puzzle.input_tokens, dtype=np.int64)
    base_s = tokens.shape[0]
    inject = [1] * cfg.c_l + [0]
    records = []
    with T.no_grad():
        x_tilde = model.encode_input(tokens)
        pair = model.init_states(1, base_s)
        z = pair.z_l
        initial = {"z": decode_cells(model, z, base_s)}
        t = 0
        for cycle in range(1, cfg.max_cycles + 1):
            for rep in range(cfg.c_h):
                for sub_in_group, a_t in enumerate(inject):
                    arg = z + T.scale(x_tilde, float(a_t)) if a_t else z
                    z, _ = model.core_forward(arg, which="L")
                    records.append(SubStepRecord(
                        t=t, cycle=cycle, sub=rep * (cfg.c_l + 1) + sub_in_group,
                        update="L" if a_t else "H",
                        decoded={"z": decode_cells(model, z, base_s)},
                    ))
                    t += 1
        final_logits, _ = model.decode_head(z)
    return RolloutTrace(records=records, captures={}, final_logits=final_logits.data[0].copy(),
                        initial_decoded=initial, config=cfg, seq_len=base_s)


def final_state_tokens(model: AirModel, tokens_batch: np.ndarray, cfg: RecurrenceConfig) -> np.ndarray:
    """Batched inference: decoded z_H (or z in single-state mode) after the
    full rollout, shaped [B, S]. Used by evaluation; no tracing."""
    tokens_batch = np.asarray(tokens_batch, dtype=np.int64)
    base_s = tokens_batch.shape[1]
    with T.no_grad():
        x_tilde = model.encode_input(tokens_batch)
        pair = model.init_states(tokens_batch.shape[0], base_s)
        if cfg.single_state:
            z = pair.z_l
            inject = [1] * cfg.c_l + [0]
            for _cycle in range(cfg.max_cycles):
                for _rep in range(cfg.c_h):
                    for a_t in inject:
                        arg = z + T.scale(x_tilde, float(a_t)) if a_t else z
                        z, _ = model.core_forward(arg, which="L")
            final = z
        else:
            frozen = {"freeze_H": "H", "freeze_L": "L"}.get(cfg.freeze)
            t = 0
            for _cycle in range(cfg.max_cycles):
                for update in cfg.pattern():
                    if not (frozen == update and t >= cfg.freeze_onset):
                        pair, _ = _run_update(model, pair, x_tilde, cfg, update)
                    t += 1
            final = pair.z_h
        if final.shape[1] != base_s:
            final = T.narrow(final, 1, final.shape[1] - base_s, base_s)
        _logits, out = model.decode_head(final)
    return out


# ---------------------------------------------------------------------------
# trace files: JSONL of decoded grids + tagged binary attention container


def save_trace(trace: RolloutTrace, jsonl_path, attn_path=None):
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in trace.records:
            row = {"t": r.t, "cycle": r.cycle, "sub": r.sub, "update": r.update}
            for key, grid in r.decoded.items():
                row[f"z_{key}" if key != "z" else "z"] = np.asarray(grid).astype(int).tolist()
            fh.write(json.dumps(row) + "\n")
    if attn_path is not None and trace.captures:
        items = []
        for (cycle, sub), cap in sorted(trace.captures.items()):
            for layer, weights in enumerate(cap.weights):
                items.append(({"cycle": cycle, "sub": sub, "update": cap.update, "layer": layer}, weights))
        T.save_tagged_arrays(attn_path, items)


def load_trace_records(jsonl_path) -> list:
    records = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            decoded = {}
            for key in ("z_H", "z_L", "z"):
                if key in row:
                    decoded[key.replace("z_", "") if key != "z" else "z"] = np.asarray(row[key], dtype=np.int64)
            records.append(SubStepRecord(t=row["t"], cycle=row["cycle"], sub=row["sub"],
                                         update=row["update"], decoded=decoded))
    return records
