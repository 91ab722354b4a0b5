"""Query-based decoding from fused audio features to spectrogram masks.

One learnable query per source class. A query is "named" by adding its
source's projected object feature onto that class's column, refined
against motion features by cross-attention, then decoded against the
flattened bottleneck tokens by a stack of attention layers. An MLP turns
decoded queries into mask embeddings whose inner product with the final
audio feature map gives per-cell mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dgfnet.autodiff import Tensor, ops
from dgfnet.autodiff.nn import LayerNorm, Linear, Module
from dgfnet.dsp import Spectrogram
from dgfnet.errors import ContractError


def visual_naming(q: Tensor, f_o_proj: Tensor, class_id: int) -> Tensor:
    """Add a projected object feature onto one query column.

    q is (C_Q, N); column class_id is incremented, others untouched. The
    update is an outer product against a one-hot row so gradients flow to
    both the queries and the projection.
    """
    c_q, n = q.shape
    if not 0 <= class_id < n:
        raise ContractError(f"class id {class_id} out of range [0, {n})")
    if f_o_proj.shape != (c_q,):
        raise ContractError(f"projected feature shape {f_o_proj.shape} != ({c_q},)")
    onehot = np.zeros((1, n))
    onehot[0, class_id] = 1.0
    return q + ops.matmul(f_o_proj.reshape(c_q, 1), Tensor(onehot))


class MultiHeadAttention(Module):
    """Batched scaled dot-product attention, (B, L, D) streams."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ContractError(f"heads {heads} must divide width {dim}")
        self.dim, self.heads = dim, heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        h = self.heads
        return x.reshape(b, l, h, d // h).transpose(0, 2, 1, 3).reshape(b * h, l, d // h)

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                capture: dict | None = None) -> Tensor:
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim:
            raise ContractError(
                f"attention width {self.dim}, got q {q.shape} k {k.shape}"
            )
        b, lq = q.shape[0], q.shape[1]
        lk = k.shape[1]
        qh, kh, vh = self._split(self.wq(q)), self._split(self.wk(k)), self._split(self.wv(v))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        att = ops.softmax(ops.matmul(qh, kh.transpose(0, 2, 1)) * scale, axis=-1)
        if capture is not None:
            capture["weights"] = att.data.reshape(b, self.heads, lq, lk).copy()
        out = ops.matmul(att, vh)
        h, dh = self.heads, self.dim // self.heads
        out = out.reshape(b, h, lq, dh).transpose(0, 2, 1, 3).reshape(b, lq, self.dim)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(ops.relu(self.lin1(x)))


class MotionLayer(Module):
    """Cross-attention of queries against motion tokens, then a feed
    forward, both as pre-norm residual sublayers."""

    def __init__(self, c_q: int, c_m: int, heads: int, ffn_hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.kv_proj = Linear(c_m, c_q, rng)
        self.attn = MultiHeadAttention(c_q, heads, rng)
        self.ffn = FeedForward(c_q, ffn_hidden, rng)
        self.ln_q = LayerNorm(c_q)
        self.ln_f = LayerNorm(c_q)

    def forward(self, q: Tensor, motion: Tensor,
                capture: dict | None = None) -> Tensor:
        kv = self.kv_proj(motion)
        q = q + self.attn(self.ln_q(q), kv, kv, capture=capture)
        return q + self.ffn(self.ln_f(q))


class AVDecoderLayer(Module):
    """One decoder layer: audio-token self-attention, query self-attention,
    query-to-audio cross-attention, feed forward — all pre-norm residual.
    Self-attention sublayers can be bypassed (query-locality probes)."""

    def __init__(self, c_q: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.sa_audio = MultiHeadAttention(c_q, heads, rng)
        self.sa_query = MultiHeadAttention(c_q, heads, rng)
        self.cross = MultiHeadAttention(c_q, heads, rng)
        self.ffn_audio = FeedForward(c_q, ffn_hidden, rng)
        self.ffn_query = FeedForward(c_q, ffn_hidden, rng)
        self.ln_a1 = LayerNorm(c_q)
        self.ln_a2 = LayerNorm(c_q)
        self.ln_q1 = LayerNorm(c_q)
        self.ln_q2 = LayerNorm(c_q)
        self.ln_q3 = LayerNorm(c_q)

    def forward(self, q: Tensor, tokens: Tensor, bypass_self_attention: bool = False,
                capture: dict | None = None) -> tuple[Tensor, Tensor]:
        if not bypass_self_attention:
            t = self.ln_a1(tokens)
            tokens = tokens + self.sa_audio(t, t, t)
            tokens = tokens + self.ffn_audio(self.ln_a2(tokens))
            s = self.ln_q1(q)
            q = q + self.sa_query(s, s, s)
        q = q + self.cross(self.ln_q2(q), tokens, tokens, capture=capture)
        q = q + self.ffn_query(self.ln_q3(q))
        return q, tokens


def sinusoidal_grid_encoding(c: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position code, (c, h, w); halves encode rows
    and columns."""
    if c % 4:
        raise ContractError(f"positional channels must be divisible by 4, got {c}")
    q = c // 4
    freqs = 1.0 / (10000.0 ** (np.arange(q) / q))
    ys = np.arange(h)[None, :] * freqs[:, None]  # (q, h)
    xs = np.arange(w)[None, :] * freqs[:, None]  # (q, w)
    enc = np.zeros((c, h, w))
    enc[0 * q:1 * q] = np.sin(ys)[:, :, None]
    enc[1 * q:2 * q] = np.cos(ys)[:, :, None]
    enc[2 * q:3 * q] = np.sin(xs)[:, None, :]
    enc[3 * q:4 * q] = np.cos(xs)[:, None, :]
    return enc


class QueryTransformer(Module):
    """N per-class queries decoded against bottleneck audio tokens."""

    def __init__(self, n_classes: int, c_q: int, c_o: int, c_m: int, c_a: int,
                 c_final: int, heads: int, layers: int, rng: np.random.Generator,
                 ffn_ratio: int = 2, positional_encoding: bool = False):
        super().__init__()
        self.n_classes, self.c_q = n_classes, c_q
        self.positional_encoding = positional_encoding
        self.queries = self.add_param(
            "queries", rng.standard_normal((c_q, n_classes)) / np.sqrt(c_q)
        )
        hidden = ffn_ratio * c_q
        self.obj_proj = Linear(c_o, c_q, rng)
        self.audio_in = Linear(c_a, c_q, rng)
        self.motion = MotionLayer(c_q, c_m, heads, hidden, rng)
        self.n_layers = layers
        for i in range(layers):
            setattr(self, f"layer{i}", AVDecoderLayer(c_q, heads, hidden, rng))
        self.mlp_hidden = Linear(c_q, c_q, rng)
        self.mlp_out = Linear(c_q, c_final, rng)

    def named_queries(self, f_o: Tensor, class_ids: np.ndarray) -> Tensor:
        """Batched visual naming: (B, N, C_Q) query sets, each with its
        example's projected object feature added at its class column."""
        b = f_o.shape[0]
        n, c_q = self.n_classes, self.c_q
        for cid in np.asarray(class_ids).ravel():
            if not 0 <= int(cid) < n:
                raise ContractError(f"class id {int(cid)} out of range [0, {n})")
        base = self.queries.transpose(1, 0).reshape(1, n, c_q)
        base = ops.broadcast_to(base, (b, n, c_q))
        proj = self.obj_proj(f_o)  # (B, C_Q)
        onehot = np.zeros((b, n, 1))
        onehot[np.arange(b), np.asarray(class_ids, dtype=int)] = 1.0
        return base + Tensor(onehot) * proj.reshape(b, 1, c_q)

    def audio_tokens(self, f_d: Tensor) -> Tensor:
        """Flatten (B, C_A, h, w) to (B, h*w, C_Q) tokens."""
        b, c, h, w = f_d.shape
        if self.positional_encoding:
            f_d = f_d + Tensor(sinusoidal_grid_encoding(c, h, w)[None])
        return self.audio_in(f_d.reshape(b, c, h * w).transpose(0, 2, 1))

    def decode(self, q: Tensor, f_d: Tensor, motion: Tensor,
               bypass_self_attention: bool = False,
               capture: list | None = None) -> Tensor:
        """Full query path: motion refinement then the decoder stack.
        Returns A_e as (B, N, C_Q)."""
        caps = capture if capture is not None else None
        cap0 = {} if caps is not None else None
        q = self.motion(q, motion, capture=cap0)
        if caps is not None:
            caps.append(cap0)
        tokens = self.audio_tokens(f_d)
        for i in range(self.n_layers):
            capi = {} if caps is not None else None
            q, tokens = getattr(self, f"layer{i}")(
                q, tokens, bypass_self_attention=bypass_self_attention, capture=capi
            )
            if caps is not None:
                caps.append(capi)
        return q

    def mask_embeddings(self, a_e: Tensor) -> Tensor:
        """(B, N, C_Q) -> (B, N, C'_A)."""
        return self.mlp_out(ops.relu(self.mlp_hidden(a_e)))

    def mask_logits(self, m_e: Tensor, f_a: Tensor) -> Tensor:
        """Inner products of every mask embedding with the final audio
        features: (B, N, F, T) logits."""
        b, c, fdim, tdim = f_a.shape
        if m_e.shape[-1] != c:
            raise ContractError(f"mask embedding dim {m_e.shape[-1]} != C'_A {c}")
        flat = f_a.reshape(b, c, fdim * tdim)
        return ops.matmul(m_e, flat).reshape(b, m_e.shape[1], fdim, tdim)

    @staticmethod
    def select_class(logits: Tensor, class_ids: np.ndarray) -> Tensor:
        """Pick each example's class row from (B, N, F, T) -> (B, F, T)."""
        b, n, fdim, tdim = logits.shape
        onehot = np.zeros((b, 1, n))
        onehot[np.arange(b), 0, np.asarray(class_ids, dtype=int)] = 1.0
        flat = logits.reshape(b, n, fdim * tdim)
        return ops.matmul(Tensor(onehot), flat).reshape(b, fdim, tdim)


# -- masks and the training objective -------------------------------------------

@dataclass(frozen=True)
class MaskMap:
    values: object  # np.ndarray or Tensor, shape (F, T) or batched
    kind: str  # "predicted" | "ground-truth"

    def __post_init__(self):
        if self.kind not in ("predicted", "ground-truth"):
            raise ContractError(f"unknown mask kind {self.kind!r}")

    def array(self) -> np.ndarray:
        return self.values.data if isinstance(self.values, Tensor) else self.values


def apply_mask(s_mix: Spectrogram, m: MaskMap) -> Spectrogram:
    mag = s_mix.magnitude()
    mv = m.array()
    if mv.shape != mag.shape:
        raise ContractError(f"mask shape {mv.shape} != spectrogram {mag.shape}")
    return Spectrogram(
        bins=mag * mv, kind="magnitude", freq_axis=s_mix.freq_axis,
        params=s_mix.params, pad_left=s_mix.pad_left, orig_len=s_mix.orig_len,
        logmap=s_mix.logmap,
    )


def ground_truth_mask(s_k: Spectrogram, s_mix: Spectrogram,
                      floor: float = 1e-8, cap: float = 1.0) -> MaskMap:
    """Ratio mask |S_k| / |S_mix| where the mixture is above floor, else 0,
    clipped to [0, cap]."""
    if floor <= 0:
        raise ContractError(f"floor must be positive, got {floor}")
    a, b = s_k.magnitude(), s_mix.magnitude()
    if a.shape != b.shape:
        raise ContractError(f"source shape {a.shape} != mixture {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(b > floor, a / np.where(b > floor, b, 1.0), 0.0)
    return MaskMap(np.clip(ratio, 0.0, cap), "ground-truth")


def _mask_tensor(m) -> Tensor:
    if isinstance(m, MaskMap):
        m = m.values
    if isinstance(m, Tensor):
        return m
    return Tensor(np.asarray(m, dtype=np.float64))


def separation_loss(preds: list, gts: list, reduction: str = "mean") -> Tensor:
    """Sum over sources of the (mean- or sum-reduced) absolute mask error.

    Each entry may be a MaskMap, a Tensor, or a plain array; targets are
    detached so gradients only flow through the predictions."""
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions vs {len(gts)} targets")
    if not preds:
        raise ContractError("separation loss needs at least one source")
    total = None
    for p, g in zip(preds, gts):
        pv, gv = _mask_tensor(p), _mask_tensor(g)
        if pv.shape != gv.shape:
            raise ContractError(f"mask shapes differ: {pv.shape} vs {gv.shape}")
        term = ops.mean_abs_error(pv, gv.detach(), reduction=reduction)
        total = term if total is None else total + term
    return total
