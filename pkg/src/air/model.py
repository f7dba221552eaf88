"""Shared Transformer core used for both recurrent update types.

One parameter set serves every sub-step by default (tied mode); an
optional second set supports the two-network ablation. The stack is
4 pre-norm layers of multi-head attention plus MLP, rotary positions on
queries and keys, a token embedding on the way in and a linear head on
the way out. The same head decodes either latent state.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN or inf activations."""


@dataclass
class ModelConfig:
    vocab_size: int = 10
    dim: int = 512
    layers: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    norm: str = "rms"            # recorded so the choice stays swappable
    norm_eps: float = 1e-6
    activation: str = "gelu"     # {"gelu", "tanh"}
    rope_base: float = 10000.0
    level_tokens: bool = False   # allocate the per-update-type vectors
    operator_gate: bool = False  # allocate the learned D x D input transform
    untied: bool = False         # allocate a second core stack for H-updates
    dtype: str = "float64"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.norm != "rms":
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.activation not in ("gelu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class LatentPair:
    """The two recurrent states plus the fixed vectors they start from."""

    z_h: Tensor
    z_l: Tensor
    h0: np.ndarray
    l0: np.ndarray


@dataclass
class AttentionCapture:
    """Post-softmax weights for one recorded sub-step.

    ``weights[layer][head]`` is the [S_queries, S_keys] map. Tagged with
    where in the schedule it was taken.
    """

    cycle: int
    sub_step: int
    update: str  # "L" or "H"
    weights: list  # layers -> [heads, S, S] ndarray

    def head_map(self, layer: int, head: int) -> np.ndarray:
        return self.weights[layer][head]


@dataclass
class LevelTokenFixup:
    """What the caller must do to the core output after the call."""

    strip_first: bool = False


def trunc_normal(rng: np.random.Generator, shape, std: float, bound: float, dtype=np.float64) -> np.ndarray:
    """Normal draws with out-of-range values resampled, not clipped."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > bound
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > bound
    return out.astype(dtype)


class AirModel:
    """Embedding, shared core stack, output head, and level-token machinery."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._init_params(np.random.Generator(np.random.PCG64(self.seed)))

    # -- construction -------------------------------------------------------

    def _init_params(self, rng: np.random.Generator):
        cfg = self.config
        d, dt = cfg.dim, cfg.np_dtype
        w_std = 0.02

        def w(shape):
            return T.parameter(trunc_normal(rng, shape, w_std, 2 * w_std, dt))

        self.params["embed"] = w((cfg.vocab_size, d))
        sets = ["L", "H"] if cfg.untied else ["L"]
        for s in sets:
            for i in range(cfg.layers):
                p = f"{s}.{i}."
                self.params[p + "wq"] = w((d, d))
                self.params[p + "wk"] = w((d, d))
                self.params[p + "wv"] = w((d, d))
                self.params[p + "wo"] = w((d, d))
                self.params[p + "w1"] = w((d, cfg.mlp_ratio * d))
                self.params[p + "w2"] = w((cfg.mlp_ratio * d, d))
                self.params[p + "norm1"] = T.parameter(np.ones(d, dtype=dt))
                self.params[p + "norm2"] = T.parameter(np.ones(d, dtype=dt))
        self.params["head"] = w((d, cfg.vocab_size))
        # Fixed state-init vectors: drawn once, never trained.
        self.params["h0"] = T.constant(trunc_normal(rng, (d,), 1.0, 2.0, dt))
        self.params["l0"] = T.constant(trunc_normal(rng, (d,), 1.0, 2.0, dt))
        if cfg.level_tokens:
            self.params["tau_L"] = w((d,))
            self.params["tau_H"] = w((d,))
        if cfg.operator_gate:
            # Identity start: the learned transform begins as a pass-through.
            self.params["gate"] = T.parameter(np.eye(d, dtype=dt))

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable parameters only (state-init vectors are fixed)."""
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def _param_set(self, which: str) -> str:
        if which == "H" and self.config.untied:
            return "H"
        return "L"

    def _rope_tables(self, s: int):
        if s not in self._rope_cache:
            cfg = self.config
            dh = cfg.head_dim
            inv_freq = 1.0 / (cfg.rope_base ** (np.arange(0, dh, 2, dtype=np.float64) / dh))
            t = np.arange(s, dtype=np.float64)
            freqs = np.outer(t, inv_freq)
            emb = np.concatenate([freqs, freqs], axis=-1)
            self._rope_cache[s] = (np.cos(emb).astype(cfg.np_dtype), np.sin(emb).astype(cfg.np_dtype))
        return self._rope_cache[s]

    # -- contracted operations ----------------------------------------------

    def encode_input(self, tokens) -> Tensor:
        """Token ids -> [1, S, D] embedding rows (no scaling applied)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(
                f"token id outside vocabulary of size {self.config.vocab_size}: "
                f"range [{ids.min()}, {ids.max()}]"
            )
        return T.embedding(self.params["embed"], ids)

    def init_states(self, batch: int, seq_len: int) -> LatentPair:
        """Broadcast copies of the fixed init vectors at every position."""
        h0 = self.params["h0"].data
        l0 = self.params["l0"].data
        z_h = T.constant(np.broadcast_to(h0, (batch, seq_len, h0.shape[0])).copy())
        z_l = T.constant(np.broadcast_to(l0, (batch, seq_len, l0.shape[0])).copy())
        return LatentPair(z_h=z_h, z_l=z_l, h0=h0.copy(), l0=l0.copy())

    def core_forward(self, x: Tensor, which: str = "L", capture: bool = False):
        """Run the shared stack; optionally record post-softmax attention.

        Returns (output tensor shaped like the input, capture or None).
        The capture holds one [heads, S, S] array per layer.
        """
        cfg = self.config
        pset = self._param_set(which)
        b, s, d = x.shape
        heads, dh = cfg.heads, cfg.head_dim
        cos, sin = self._rope_tables(s)
        scale = 1.0 / math.sqrt(dh)
        captured = [] if capture else None

        h = x
        for i in range(cfg.layers):
            p = f"{pset}.{i}."
            normed = T.rms_norm(h, self.params[p + "norm1"], cfg.norm_eps)

            def split_heads(t):
                return T.transpose(T.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

            q = T.rope(split_heads(normed @ self.params[p + "wq"]), cos, sin)
            k = T.rope(split_heads(normed @ self.params[p + "wk"]), cos, sin)
            v = split_heads(normed @ self.params[p + "wv"])
            logits = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), scale)
            attn = T.softmax_last(logits)
            if capture:
                captured.append(attn.data[0].copy())
            mixed = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, s, d))
            h = h + mixed @ self.params[p + "wo"]

            normed2 = T.rms_norm(h, self.params[p + "norm2"], cfg.norm_eps)
            act = T.gelu if cfg.activation == "gelu" else T.tanh
            h = h + act(normed2 @ self.params[p + "w1"]) @ self.params[p + "w2"]

            if not np.isfinite(h.data).all():
                raise NonFiniteError(f"non-finite activations after layer {i} ({which}-update)")

        cap = None
        if capture:
            cap = AttentionCapture(cycle=-1, sub_step=-1, update=which, weights=captured)
        return h, cap

    def apply_level_token(self, z: Tensor, mode: str, which: str, already_present: bool = False):
        """Mark the update type on the core argument.

        addition adds the type vector at every position; the prepend modes
        place it at position 0 (strip removes it again after the call, the
        no-strip variant leaves it in the sequence, so a second call on a
        sequence that already carries the token is a no-op).
        """
        if mode == "none":
            return z, LevelTokenFixup()
        key = f"tau_{which}"
        if key not in self.params:
            raise ValueError(f"level-token mode {mode!r} requires {key} (construct with level_tokens=True)")
        tau = self.params[key]
        b, s, d = z.shape
        if mode == "addition":
            return z + T.broadcast_to(T.reshape(tau, (1, 1, d)), (b, s, d)), LevelTokenFixup()
        if mode == "prepend_strip":
            row = T.broadcast_to(T.reshape(tau, (1, 1, d)), (b, 1, d))
            return T.concat([row, z], axis=1), LevelTokenFixup(strip_first=True)
        if mode == "prepend_no_strip":
            if already_present:
                return z, LevelTokenFixup()
            row = T.broadcast_to(T.reshape(tau, (1, 1, d)), (b, 1, d))
            return T.concat([row, z], axis=1), LevelTokenFixup()
        raise ValueError(f"unknown level-token mode {mode!r}")

    def decode_head(self, z: Tensor):
        """Linear head over the vocabulary; greedy tokens per position."""
        logits = z @ self.params["head"]
        tokens = np.argmax(logits.data, axis=-1)
        return logits, tokens

    def logit_decomposition(self, x: np.ndarray, tau: np.ndarray, layer: int, head: int):
        """Split one head's attention logits for addition-mode input X + tau.

        Returns four [S, S] terms: content-content, content-tau, tau-content
        and the position-independent tau-tau constant. Rotation is excluded
        so the constant term stays position-independent; the sum equals the
        unrotated logits of X + tau.
        """
        cfg = self.config
        dh = cfg.head_dim
        sl = slice(head * dh, (head + 1) * dh)
        wq = self.params[f"L.{layer}.wq"].data[:, sl]
        wk = self.params[f"L.{layer}.wk"].data[:, sl]
        scale = 1.0 / math.sqrt(dh)
        s = x.shape[0]
        xq, xk = x @ wq, x @ wk
        tq, tk = tau @ wq, tau @ wk
        t1 = scale * (xq @ xk.T)
        t2 = scale * np.broadcast_to((xq @ tk)[:, None], (s, s)).copy()
        t3 = scale * np.broadcast_to((tq @ xk)[None, :], (s, s)).copy()
        t4 = scale * np.full((s, s), float(tq @ tk))
        return t1, t2, t3, t4


# ---------------------------------------------------------------------------
# checkpointing: JSON manifest line + serialized tensors


def save_checkpoint(path, model: AirModel, step: int = 0, extra: dict | None = None):
    names = sorted(model.params)
    manifest = {
        "config": asdict(model.config),
        "seed": model.seed,
        "step": int(step),
        "names": names,
    }
    if extra:
        manifest["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            T.write_array(fh, model.params[name].data)


def load_checkpoint(path):
    """Rebuild the model saved by ``save_checkpoint``; returns (model, manifest)."""
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        model = AirModel(ModelConfig(**manifest["config"]), seed=manifest["seed"])
        for name in manifest["names"]:
            arr, _ = T.read_array(fh)
            if arr.shape != model.params[name].shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {model.params[name].shape}")
            model.params[name].data = arr.astype(model.config.np_dtype)
    return model, manifest
