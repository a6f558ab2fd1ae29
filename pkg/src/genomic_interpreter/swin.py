"""The 1D-Swin block.

One block maps ``(n, d)`` tokens to ``(n // 2, 2d / alpha)``:

1. windowed attention with window ``k`` (slot 1),
2. roll by ``t``, windowed attention again (slot 2), roll back by ``-t``,
3. drop the last token if ``n`` is odd, concatenate adjacent pairs and apply
   a linear map ``2d -> 2d / alpha``.

Multiply-adds for one block on ``B`` sequences, with ``W`` the window lengths
``[k] * (n // k) + [n % k]`` (trailing entry only when non-zero)::

    per slot:  proj  = 4 B n d^2
               score = mix = B d sum(L^2 for L in W)
               ffn   = 4 B n d^2          (feed-forward enabled)
    merge      = B (n // 2) (2d) (2d / alpha)

See :func:`block_madds`.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attention import AttentionRecord, MhaParams, init_mha, window_lengths, windowed_attention
from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError


@dataclass
class Swin1dConfig:
    window: int
    shift: int | None = None
    alpha: float = 1
    heads: int = 2
    ff: bool = True
    rel_bias: bool = True

    def __post_init__(self):
        if self.shift is None:
            self.shift = self.window // 2
        if self.window < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window}")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift {self.shift} must lie in [0, {self.window})")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def out_width(self, d: int) -> int:
        w = Fraction(2 * d) / Fraction(str(self.alpha))
        if w.denominator != 1 or w < 1:
            raise ConfigError(f"2d/alpha = {2 * d}/{self.alpha} is not a positive integer")
        return int(w)

    def to_dict(self) -> dict:
        return {
            "window": self.window, "shift": self.shift, "alpha": self.alpha,
            "heads": self.heads, "ff": self.ff, "rel_bias": self.rel_bias,
        }


@dataclass
class Swin1dParams:
    mha1: MhaParams
    mha2: MhaParams
    merge_w: Tensor
    merge_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {f"mha1.{k}": v for k, v in self.mha1.named().items()}
        out.update({f"mha2.{k}": v for k, v in self.mha2.named().items()})
        out["merge.w"] = self.merge_w
        out["merge.b"] = self.merge_b
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor], heads: int) -> "Swin1dParams":
        def group(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        return cls(
            MhaParams.from_named(group("mha1."), heads),
            MhaParams.from_named(group("mha2."), heads),
            tensors["merge.w"],
            tensors["merge.b"],
        )


def init_swin(d: int, cfg: Swin1dConfig, rng: Rng, dtype=np.float64) -> Swin1dParams:
    d_out = cfg.out_width(d)
    window = cfg.window if cfg.rel_bias else None
    mha1 = init_mha(d, cfg.heads, rng, window=window, ff=cfg.ff, dtype=dtype)
    mha2 = init_mha(d, cfg.heads, rng, window=window, ff=cfg.ff, dtype=dtype)
    w = Tensor(rng.normal((2 * d, d_out), 1.0 / np.sqrt(2 * d)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return Swin1dParams(mha1, mha2, w, b)


def token_merge(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Concatenate adjacent token pairs and apply ``x @ w + b``."""
    if x.shape[-2] % 2:
        raise ContractError(f"token_merge needs an even token count, got {x.shape[-2]}")
    return ad.matmul(ad.concat_pairs(x), w, kind="merge") + b


def shifted_pass(x: Tensor, p: MhaParams, k: int, t: int):
    """Roll by ``t``, attend within windows of ``k``, roll back.

    ``x`` is ``(B, n, d)``.  With ``t = 0`` this is a plain windowed pass.
    Returns tokens (original order) and per-window weights of the rolled sequence.
    """
    if not 0 <= t < k:
        raise ConfigError(f"shift {t} must lie in [0, {k})")
    if t:
        x = ad.roll(x, t, axis=1)
    y, weights = windowed_attention(x, p, k)
    if t:
        y = ad.roll(y, -t, axis=1)
    return y, weights


def swin1d_forward(
    x: Tensor,
    p: Swin1dParams,
    c: Swin1dConfig,
    capture: bool = False,
    layer: int = 1,
):
    """Apply one 1D-Swin block to ``(n, d)`` or ``(B, n, d)`` tokens.

    Returns ``(tokens, records)``.  Records (one per slot and window) are only
    produced when ``capture`` is set and the input holds a single sequence.
    """
    batched = x.ndim == 3
    if not batched:
        x = ad.reshape(x, (1,) + x.shape)
    n, d = x.shape[1], x.shape[2]
    if n < 2:
        raise ContractError(f"a 1D-Swin block needs at least 2 tokens, got {n}")
    c.out_width(d)
    if capture and x.shape[0] != 1:
        raise ContractError("attention capture needs a single sequence")
    h, w1 = shifted_pass(x, p.mha1, c.window, 0)
    h, w2 = shifted_pass(h, p.mha2, c.window, c.shift)
    if n % 2:
        h = ad.getitem(h, (slice(None), slice(0, n - 1)))
    y = token_merge(h, p.merge_w, p.merge_b)
    records = []
    if capture:
        for slot, ws in ((1, w1), (2, w2)):
            records.extend(AttentionRecord(layer, slot, i, np.array(w[0])) for i, w in enumerate(ws))
    if not batched:
        y = ad.reshape(y, y.shape[1:])
    return y, records


def block_madds(n: int, d: int, c: Swin1dConfig, batch: int = 1) -> Counter:
    """Analytic multiply-add breakdown for one block (keys: proj, score, mix, ffn, merge)."""
    lengths = window_lengths(n, c.window)
    per_slot = Counter(
        proj=4 * n * d * d,
        score=d * sum(L * L for L in lengths),
        mix=d * sum(L * L for L in lengths),
    )
    if c.ff:
        per_slot["ffn"] = 4 * n * d * d
    out = Counter()
    for key, v in per_slot.items():
        out[key] = 2 * v * batch
    out["merge"] = batch * (n // 2) * 2 * d * c.out_width(d)
    return out
