"""The Genomic Interpreter network.

    h_0 = embed(x)                       linear d_in -> d_0, per nucleotide
    h_l = swin_l(h_{l-1})                l = 1..K, halves tokens each time
    h_c = crop(h_K)                      centred, down to m tokens
    y   = softplus(heads(final(h_c)))    dense block with relative bias, m x T
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionRecord, MhaParams, attend, init_mha, window_lengths
from .autodiff import Rng, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .swin import Swin1dConfig, Swin1dParams, block_madds, init_swin, swin1d_forward


@dataclass
class InterpreterConfig:
    n: int
    m: int
    tracks: int
    layers: list[Swin1dConfig]
    d_in: int = 4
    d_model: int = 16
    final_heads: int = 2
    final_blocks: int = 1
    final_ff: bool = True
    softplus: bool = True
    track_groups: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.track_groups:
            self.track_groups = ["DNase"] * self.tracks

    @property
    def depth(self) -> int:
        return len(self.layers)

    def token_counts(self) -> list[int]:
        counts = [self.n]
        for _ in self.layers:
            counts.append(counts[-1] // 2)
        return counts

    def widths(self) -> list[int]:
        widths = [self.d_model]
        for i, layer in enumerate(self.layers):
            try:
                widths.append(layer.out_width(widths[-1]))
            except ConfigError as exc:
                raise ConfigError(f"layer {i + 1}: {exc}") from None
        return widths

    def validate(self) -> None:
        if min(self.n, self.m, self.tracks, self.d_in, self.d_model) < 1:
            raise ConfigError("n, m, tracks, d_in and d_model must be positive")
        if len(self.track_groups) != self.tracks:
            raise ConfigError(f"{len(self.track_groups)} track groups for {self.tracks} tracks")
        widths = self.widths()
        tokens = self.token_counts()
        for i, layer in enumerate(self.layers):
            if tokens[i] < 2:
                raise ConfigError(f"layer {i + 1} receives {tokens[i]} tokens; at least 2 needed")
            if widths[i] % layer.heads:
                raise ConfigError(f"layer {i + 1}: width {widths[i]} not divisible by {layer.heads} heads")
        if tokens[-1] < self.m:
            raise ConfigError(
                f"n / 2^K = {self.n} / 2^{self.depth} = {tokens[-1]} tokens is fewer than m = {self.m} bins"
            )
        if widths[-1] % self.final_heads:
            raise ConfigError(f"final width {widths[-1]} not divisible by {self.final_heads} heads")

    def to_dict(self) -> dict:
        return {
            "n": self.n, "m": self.m, "tracks": self.tracks, "d_in": self.d_in,
            "d_model": self.d_model, "final_heads": self.final_heads,
            "final_blocks": self.final_blocks, "final_ff": self.final_ff,
            "softplus": self.softplus, "track_groups": list(self.track_groups),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterpreterConfig":
        d = dict(d)
        d["layers"] = [Swin1dConfig(**layer) for layer in d["layers"]]
        return cls(**d)


def choose_depth(n: int, m: int) -> int:
    """Number of halvings that keeps at least ``m`` tokens: floor(log2(n / m))."""
    if n < m:
        raise ConfigError(f"sequence length {n} is shorter than {m} output bins")
    k = int(math.floor(math.log2(n / m)))
    while (n >> (k + 1)) >= m:
        k += 1
    while k > 0 and (n >> k) < m:
        k -= 1
    return k


def make_config(
    n: int,
    m: int,
    tracks: int,
    d_model: int = 16,
    window: int = 4,
    shift: int | None = None,
    heads: int = 2,
    width_cap: int = 32,
    depth: int | None = None,
    ff: bool = True,
    rel_bias: bool = True,
    track_groups: list[str] | None = None,
    d_in: int = 4,
) -> InterpreterConfig:
    """Config with the default width schedule: double until ``width_cap``, then hold."""
    depth = choose_depth(n, m) if depth is None else depth
    layers, d = [], d_model
    for _ in range(depth):
        alpha = 1 if 2 * d <= width_cap else 2
        layers.append(Swin1dConfig(window, shift, alpha, heads, ff, rel_bias))
        d = 2 * d // alpha
    cfg = InterpreterConfig(
        n=n, m=m, tracks=tracks, layers=layers, d_in=d_in, d_model=d_model,
        final_heads=heads, final_ff=ff, track_groups=list(track_groups or []),
    )
    cfg.validate()
    return cfg


@dataclass
class InterpreterParams:
    embed_w: Tensor
    embed_b: Tensor
    swin: list[Swin1dParams]
    final: list[MhaParams]
    head_w: Tensor
    head_b: Tensor

    def flat(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, blk in enumerate(self.swin):
            out.update({f"swin.{i}.{k}": v for k, v in blk.named().items()})
        for i, blk in enumerate(self.final):
            out.update({f"final.{i}.{k}": v for k, v in blk.named().items()})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_flat(cls, config: InterpreterConfig, flat: dict[str, Tensor]) -> "InterpreterParams":
        def group(prefix):
            return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}

        return cls(
            flat["embed.w"],
            flat["embed.b"],
            [Swin1dParams.from_named(group(f"swin.{i}."), c.heads) for i, c in enumerate(config.layers)],
            [MhaParams.from_named(group(f"final.{i}."), config.final_heads) for i in range(config.final_blocks)],
            flat["head.w"],
            flat["head.b"],
        )


def build(config: InterpreterConfig, seed: int, dtype=np.float64) -> InterpreterParams:
    """Deterministic initialisation from ``seed``."""
    config.validate()
    rng = Rng(seed)
    widths = config.widths()
    embed_w = Tensor(rng.normal((config.d_in, widths[0]), 1.0 / np.sqrt(config.d_in)).astype(dtype), requires_grad=True)
    embed_b = Tensor(np.zeros(widths[0], dtype=dtype), requires_grad=True)
    swin = [init_swin(widths[i], c, rng, dtype) for i, c in enumerate(config.layers)]
    d = widths[-1]
    final = [
        init_mha(d, config.final_heads, rng, window=config.m, ff=config.final_ff, dtype=dtype)
        for _ in range(config.final_blocks)
    ]
    head_w = Tensor(rng.normal((d, config.tracks), 1.0 / np.sqrt(d)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(config.tracks, dtype=dtype), requires_grad=True)
    return InterpreterParams(embed_w, embed_b, swin, final, head_w, head_b)


def crop(h: Tensor, m: int) -> Tensor:
    """Keep the central ``m`` tokens: floor((L-m)/2) dropped in front, the rest at the back."""
    length = h.shape[-2]
    if length < m:
        raise ContractError(f"cannot crop {length} tokens to {m}")
    if length == m:
        return h
    start = (length - m) // 2
    return ad.getitem(h, (..., slice(start, start + m), slice(None)))


def final_transformer_block(h: Tensor, p: MhaParams) -> Tensor:
    """Dense attention + feed-forward over all ``m`` positions with relative bias."""
    y, _ = attend(h, p)
    return y


@dataclass
class LayerInfo:
    tokens: int
    span: int
    window: int
    windows: int
    heads: int
    width: int


@dataclass
class AttentionAtlas:
    """Captured attention of every swin layer, slot, window and head."""

    layers: list[LayerInfo]
    records: list[AttentionRecord]

    def layer_records(self, layer: int) -> list[AttentionRecord]:
        return [r for r in self.records if r.layer == layer]


def _atlas_layers(config: InterpreterConfig) -> list[LayerInfo]:
    tokens, widths = config.token_counts(), config.widths()
    return [
        LayerInfo(
            tokens=tokens[i], span=2**i, window=c.window,
            windows=len(window_lengths(tokens[i], c.window)), heads=c.heads, width=widths[i],
        )
        for i, c in enumerate(config.layers)
    ]


def forward(x, p: InterpreterParams, config: InterpreterConfig, capture: bool = False):
    """Predict ``(m, T)`` (or ``(B, m, T)``) values from one-hot input.

    Returns ``(y, atlas)``; ``atlas`` is None unless ``capture``.
    """
    x = ad.as_tensor(x)
    batched = x.ndim == 3
    if x.shape[-2:] != (config.n, config.d_in):
        raise DimensionError(f"input shape {x.shape} does not end with ({config.n}, {config.d_in})")
    if not batched:
        x = ad.reshape(x, (1,) + x.shape)
    with ad.madd_scope("embed"):
        h = ad.matmul(x, p.embed_w, kind="proj") + p.embed_b
    records = []
    with ad.madd_scope("swin"):
        for i, (blk, c) in enumerate(zip(p.swin, config.layers)):
            h, recs = swin1d_forward(h, blk, c, capture=capture, layer=i + 1)
            records.extend(recs)
    h = crop(h, config.m)
    with ad.madd_scope("final"):
        for blk in p.final:
            h = final_transformer_block(h, blk)
    with ad.madd_scope("head"):
        y = ad.matmul(h, p.head_w, kind="proj") + p.head_b
    if config.softplus:
        y = ad.softplus(y)
    if not batched:
        y = ad.reshape(y, y.shape[1:])
    atlas = AttentionAtlas(_atlas_layers(config), records) if capture else None
    return y, atlas


def count_madds(config: InterpreterConfig, n: int | None = None, batch: int = 1) -> Counter:
    """Closed-form multiply-add breakdown of :func:`forward`, keyed like the tape.

    Keys are ``scope.kind`` (``swin.score``, ``final.proj``, ...).  ``n``
    overrides ``config.n``.  Must equal ``Tape.madds`` of a real pass exactly.
    """
    n = config.n if n is None else n
    widths = config.widths()
    out = Counter({"embed.proj": batch * n * config.d_in * widths[0]})
    tokens = n
    for c, d in zip(config.layers, widths):
        for key, v in block_madds(tokens, d, c, batch).items():
            out[f"swin.{key}"] += v
        tokens //= 2
    d, m = widths[-1], config.m
    for _ in range(config.final_blocks):
        out["final.proj"] += batch * 4 * m * d * d
        out["final.score"] += batch * m * m * d
        out["final.mix"] += batch * m * m * d
        if config.final_ff:
            out["final.ffn"] += batch * 4 * m * d * d
    out["head.proj"] = batch * m * d * config.tracks
    return out
