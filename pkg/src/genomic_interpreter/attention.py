"""Multi-head self-attention sublayers, window partitioning and a dense oracle.

A sublayer is pre-norm residual attention followed (optionally) by a pre-norm
residual feed-forward with 2x expansion and GELU::

    x = x + Wo . MHA(LN1(x))
    x = x + W2 . gelu(W1 . LN2(x) + b1) + b2

The Q/K/V/O projections carry no bias.  An optional per-head relative position
bias table of shape ``(2k - 1, H)`` is indexed by key offset ``j - i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigError, DimensionError


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    ln1_gain: Tensor
    ln1_bias: Tensor
    rel_bias: Tensor | None = None
    ln2_gain: Tensor | None = None
    ln2_bias: Tensor | None = None
    ff_in: Tensor | None = None
    ff_in_bias: Tensor | None = None
    ff_out: Tensor | None = None
    ff_out_bias: Tensor | None = None

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def has_ff(self) -> bool:
        return self.ff_in is not None

    @property
    def bias_window(self) -> int | None:
        return None if self.rel_bias is None else (self.rel_bias.shape[0] + 1) // 2

    def named(self) -> dict[str, Tensor]:
        names = (
            "wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "rel_bias",
            "ln2_gain", "ln2_bias", "ff_in", "ff_in_bias", "ff_out", "ff_out_bias",
        )
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], heads: int) -> "MhaParams":
        return cls(heads=heads, **tensors)


def init_mha(
    d: int,
    heads: int,
    rng: Rng,
    window: int | None = None,
    ff: bool = True,
    ff_mult: int = 2,
    dtype=np.float64,
) -> MhaParams:
    """Gaussian weights with std 1/sqrt(fan_in); biases and the position table start at zero."""
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")

    def weight(fan_in, fan_out):
        return Tensor(rng.normal((fan_in, fan_out), 1.0 / np.sqrt(fan_in)).astype(dtype), requires_grad=True)

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    p = MhaParams(
        wq=weight(d, d), wk=weight(d, d), wv=weight(d, d), wo=weight(d, d),
        heads=heads, ln1_gain=const(d, 1.0), ln1_bias=const(d, 0.0),
    )
    if window is not None:
        p.rel_bias = const((2 * window - 1, heads), 0.0)
    if ff:
        h = ff_mult * d
        p.ln2_gain, p.ln2_bias = const(d, 1.0), const(d, 0.0)
        p.ff_in, p.ff_in_bias = weight(d, h), const(h, 0.0)
        p.ff_out, p.ff_out_bias = weight(h, d), const(d, 0.0)
    return p


@dataclass
class AttentionRecord:
    """Attention weights of one window: ``weights[h, i, j]`` is query i's weight on key j."""

    layer: int
    slot: int
    window: int
    weights: np.ndarray = field(repr=False)

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    @property
    def length(self) -> int:
        return self.weights.shape[-1]


def relative_bias(table: Tensor, length: int) -> Tensor:
    """Gather an ``(H, L, L)`` logit bias from a ``(2k - 1, H)`` offset table."""
    k = (table.shape[0] + 1) // 2
    if length > k:
        raise DimensionError(f"relative bias table covers windows up to {k}, got {length}")
    heads = table.shape[1]
    i = np.arange(length)
    offset = i[None, :] - i[:, None] + k - 1
    idx = np.broadcast_to(offset, (heads, length, length))
    hidx = np.broadcast_to(np.arange(heads)[:, None, None], (heads, length, length))
    return ad.getitem(table, (idx, hidx))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None):
    """softmax(q k^T / sqrt(d_head) + bias) v over the last two axes.

    Returns ``(output, weights)``.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d_head = q.shape[-1]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2), kind="score") * (1.0 / np.sqrt(d_head))
    if bias is not None:
        scores = scores + bias
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v, kind="mix"), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = ad.reshape(x, tuple(lead) + (length, heads, d // heads))
    return ad.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    x = ad.swapaxes(x, -2, -3)
    return ad.reshape(x, tuple(lead) + (length, heads * dh))


def attend(x: Tensor, p: MhaParams) -> tuple[Tensor, Tensor]:
    """Run the attention (+ feed-forward) sublayer on ``(..., L, d)`` windows.

    Every leading index is an independent window.  Returns the updated tokens
    and the ``(..., H, L, L)`` attention weights.
    """
    d = x.shape[-1]
    if d != p.width:
        raise DimensionError(f"token width {d} does not match parameters of width {p.width}")
    if d % p.heads:
        raise ConfigError(f"width {d} is not divisible by {p.heads} heads")
    h = ad.layer_norm(x, p.ln1_gain, p.ln1_bias)
    q = _split_heads(ad.matmul(h, p.wq, kind="proj"), p.heads)
    k = _split_heads(ad.matmul(h, p.wk, kind="proj"), p.heads)
    v = _split_heads(ad.matmul(h, p.wv, kind="proj"), p.heads)
    bias = None if p.rel_bias is None else relative_bias(p.rel_bias, x.shape[-2])
    o, w = scaled_dot_attention(q, k, v, bias)
    x = x + ad.matmul(_merge_heads(o), p.wo, kind="proj")
    if p.has_ff:
        h = ad.layer_norm(x, p.ln2_gain, p.ln2_bias)
        h = ad.gelu(ad.matmul(h, p.ff_in, kind="ffn") + p.ff_in_bias)
        x = x + (ad.matmul(h, p.ff_out, kind="ffn") + p.ff_out_bias)
    return x, w


def multi_head_attention(x: Tensor, p: MhaParams, capture: bool = False):
    """One attention sublayer over a single ``(L, d)`` window.

    Returns ``(tokens, record)``; the record is None unless ``capture``.
    """
    if x.ndim != 2:
        raise DimensionError(f"expected an (L, d) window, got {x.shape}")
    y, w = attend(x, p)
    record = AttentionRecord(0, 1, 0, np.array(w.data)) if capture else None
    return y, record


def window_partition(x: Tensor, k: int) -> list[Tensor]:
    """Split ``(n, d)`` tokens into ceil(n / k) windows; the last may be shorter."""
    if k < 1:
        raise ConfigError(f"window size must be >= 1, got {k}")
    n = x.shape[-2]
    return [ad.getitem(x, (..., slice(s, min(s + k, n)), slice(None))) for s in range(0, n, k)]


def merge_windows(windows: list[Tensor]) -> Tensor:
    return ad.concat(windows, axis=-2)


def window_lengths(n: int, k: int) -> list[int]:
    return [k] * (n // k) + ([n % k] if n % k else [])


def windowed_attention(x: Tensor, p: MhaParams, k: int) -> tuple[Tensor, list[np.ndarray]]:
    """Attention within non-overlapping windows of ``(B, n, d)`` tokens.

    Full windows are stacked and processed in one batched call; a shorter
    trailing window is attended as-is.  Returns tokens and, per window, the
    ``(B, H, L, L)`` weights.
    """
    if k < 1:
        raise ConfigError(f"window size must be >= 1, got {k}")
    b, n, d = x.shape
    full, rest = n // k, n % k
    parts, weights = [], []
    if full:
        head = x if rest == 0 else ad.getitem(x, (slice(None), slice(0, full * k)))
        y, w = attend(ad.reshape(head, (b, full, k, d)), p)
        parts.append(ad.reshape(y, (b, full * k, d)))
        weights.extend(w.data[:, i] for i in range(full))
    if rest:
        y, w = attend(ad.getitem(x, (slice(None), slice(full * k, n))), p)
        parts.append(y)
        weights.append(w.data)
    out = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return out, weights


# ---------------------------------------------------------------------------
# reference implementation, plain numpy, no tape


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def dense_attention_oracle(x, p: MhaParams) -> np.ndarray:
    """The sublayer computed densely over all n tokens, head by head, in numpy.

    Independent of the tape machinery; used to check the windowed path.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n, d = x.shape
    if d % p.heads:
        raise ConfigError(f"width {d} is not divisible by {p.heads} heads")
    dh = d // p.heads
    h = _np_layer_norm(x, p.ln1_gain.data, p.ln1_bias.data)
    q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
    heads_out = []
    for head in range(p.heads):
        cols = slice(head * dh, (head + 1) * dh)
        logits = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
        if p.rel_bias is not None:
            kw = p.bias_window
            for i in range(n):
                for j in range(n):
                    logits[i, j] += p.rel_bias.data[j - i + kw - 1, head]
        logits = logits - logits.max(axis=1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=1, keepdims=True)
        heads_out.append(a @ v[:, cols])
    y = x + np.concatenate(heads_out, axis=1) @ p.wo.data
    if p.has_ff:
        h = _np_layer_norm(y, p.ln2_gain.data, p.ln2_bias.data)
        y = y + _np_gelu(h @ p.ff_in.data + p.ff_in_bias.data) @ p.ff_out.data + p.ff_out_bias.data
    return y
