"""Attention atlas export, SVG heatmaps, and the diagonality index.

Export directory layout::

    manifest.json
    layer_<l>/slot<s>_window<w>.bin     array block (H, L, L), see binio

Manifest fields: ``format``, ``version``, ``layers`` (per layer: ``layer``,
``tokens``, ``span_bp``, ``window``, ``windows``, ``heads``, ``width``) and
``records`` (``layer``, ``slot``, ``window``, ``heads``, ``length``, ``file``).

Heatmap colour ramp: linear from ``#ffffff`` (weight 0) to ``#00286e``
(weight 1 after normalisation); the encoded intensity of a cell is
``(255 - red) / 255``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .attention import AttentionRecord
from .binio import read_array, write_array
from .errors import FormatError
from .model import AttentionAtlas, LayerInfo

ATLAS_FORMAT = "genint-attention-atlas"
ATLAS_VERSION = 1


def _record_file(r: AttentionRecord) -> str:
    return f"layer_{r.layer}/slot{r.slot}_window{r.window}.bin"


def manifest(atlas: AttentionAtlas) -> dict:
    return {
        "format": ATLAS_FORMAT,
        "version": ATLAS_VERSION,
        "layers": [
            {
                "layer": i + 1, "tokens": li.tokens, "span_bp": li.span, "window": li.window,
                "windows": li.windows, "heads": li.heads, "width": li.width,
            }
            for i, li in enumerate(atlas.layers)
        ],
        "records": [
            {
                "layer": r.layer, "slot": r.slot, "window": r.window,
                "heads": r.heads, "length": r.length, "file": _record_file(r),
            }
            for r in atlas.records
        ],
    }


def export_atlas(atlas: AttentionAtlas, path) -> Path:
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for i in range(len(atlas.layers)):
            (root / f"layer_{i + 1}").mkdir(exist_ok=True)
        for r in atlas.records:
            with open(root / _record_file(r), "wb") as f:
                write_array(f, r.weights)
        (root / "manifest.json").write_text(json.dumps(manifest(atlas), indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write atlas to {root}: {exc}") from exc
    return root


def load_atlas(path) -> AttentionAtlas:
    root = Path(path)
    meta = json.loads((root / "manifest.json").read_text())
    if meta.get("format") != ATLAS_FORMAT:
        raise FormatError(f"{root}: not an attention atlas")
    layers = [
        LayerInfo(li["tokens"], li["span_bp"], li["window"], li["windows"], li["heads"], li["width"])
        for li in meta["layers"]
    ]
    records = []
    for rec in meta["records"]:
        with open(root / rec["file"], "rb") as f:
            records.append(AttentionRecord(rec["layer"], rec["slot"], rec["window"], read_array(f, rec["file"])))
    return AttentionAtlas(layers, records)


def diagonality_index(weights) -> float:
    """Mass-weighted closeness to the diagonal: sum w_ij (1 - |i-j|/(L-1)) / sum w_ij.

    1 when all mass is on the diagonal; 0 when it all sits in the two far corners.
    Defined as 1 for L = 1.
    """
    w = np.asarray(weights, dtype=np.float64)
    length = w.shape[-1]
    if w.shape != (length, length):
        raise ValueError(f"diagonality_index needs a square matrix, got {w.shape}")
    if length == 1:
        return 1.0
    i = np.arange(length)
    closeness = 1.0 - np.abs(i[:, None] - i[None, :]) / (length - 1)
    total = w.sum()
    return float((w * closeness).sum() / total) if total else 1.0


# ---------------------------------------------------------------------------
# SVG rendering

_LOW = np.array([255, 255, 255])
_HIGH = np.array([0, 40, 110])


@dataclass
class HeatmapStyle:
    cell_px: int = 12
    normalization: str = "row"  # "row" keeps the softmax weights, "global" divides by the max

    def __post_init__(self):
        if self.normalization not in ("row", "global"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


def cell_color(value: float) -> str:
    level = int(round(float(np.clip(value, 0.0, 1.0)) * 255))
    rgb = np.rint(_LOW + (_HIGH - _LOW) * level / 255).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def decode_intensity(color: str) -> float:
    return (255 - int(color[1:3], 16)) / 255


def _normalise(w: np.ndarray, style: HeatmapStyle) -> np.ndarray:
    if style.normalization == "global":
        peak = w.max()
        return w / peak if peak > 0 else w
    return w


def _matrix_group(w, x0, y0, style, span_bp, offset_tokens, title) -> list[str]:
    length = w.shape[0]
    c = style.cell_px
    parts = [f'<g transform="translate({x0},{y0})">', f'<text x="0" y="-22" font-size="10">{escape(title)}</text>']
    for i in range(length):
        for j in range(length):
            parts.append(
                f'<rect x="{j * c}" y="{i * c}" width="{c}" height="{c}" '
                f'fill="{cell_color(w[i, j])}" data-row="{i}" data-col="{j}"/>'
            )
    step = max(1, length // 4)
    for j in range(0, length, step):
        bp = (offset_tokens + j) * span_bp
        parts.append(f'<text x="{j * c}" y="-4" font-size="7" class="tick">{bp}</text>')
        parts.append(f'<text x="-4" y="{j * c + c - 2}" font-size="7" text-anchor="end" class="tick">{bp}</text>')
    parts.append(f'<rect x="0" y="0" width="{length * c}" height="{length * c}" fill="none" stroke="#888"/>')
    parts.append("</g>")
    return parts


def _svg(width, height, body, meta: dict) -> str:
    desc = escape(json.dumps(meta, sort_keys=True))
    return "\n".join(
        [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
            f"<desc>{desc}</desc>",
            *body,
            "</svg>",
            "",
        ]
    )


def render_heatmap(
    record: AttentionRecord,
    style: HeatmapStyle | None = None,
    path=None,
    head: int = 0,
    span_bp: int = 1,
    window_size: int | None = None,
) -> str:
    """SVG of one head of one window; row i / column j cell shade follows the weight.

    Tick labels give token start positions in bp within the layer.  Returns the
    SVG text and writes it to ``path`` when given.
    """
    style = style or HeatmapStyle()
    w = _normalise(np.asarray(record.weights[head]), style)
    length = w.shape[0]
    offset = record.window * (window_size or length)
    body = _matrix_group(
        w, 40, 40, style, span_bp, offset,
        f"layer {record.layer} slot {record.slot} window {record.window} head {head + 1}",
    )
    size = 40 + length * style.cell_px + 10
    meta = {"normalization": style.normalization, "layer": record.layer, "slot": record.slot,
            "window": record.window, "head": head, "span_bp": span_bp}
    svg = _svg(size, size, body, meta)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def render_grid(
    records: list[AttentionRecord],
    style: HeatmapStyle | None = None,
    path=None,
    span_bp: int = 1,
    window_size: int | None = None,
    heads: list[int] | None = None,
    title: str = "",
) -> str:
    """Tile records (rows) by heads (columns) into one SVG."""
    style = style or HeatmapStyle()
    if not records:
        raise ValueError("nothing to render")
    heads = list(range(records[0].heads)) if heads is None else heads
    tile = max(r.length for r in records) * style.cell_px + 50
    body = [f'<text x="10" y="14" font-size="12">{escape(title)}</text>']
    for row, r in enumerate(records):
        for col, h in enumerate(heads):
            w = _normalise(np.asarray(r.weights[h]), style)
            body.extend(
                _matrix_group(
                    w, 40 + col * tile, 60 + row * tile, style, span_bp,
                    r.window * (window_size or r.length), f"s{r.slot} w{r.window} h{h + 1}",
                )
            )
    meta = {"normalization": style.normalization, "span_bp": span_bp, "heads": heads}
    svg = _svg(40 + len(heads) * tile, 60 + len(records) * tile, body, meta)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def diagonality_table(atlas: AttentionAtlas) -> list[tuple[int, int, int, int, float]]:
    """(layer, slot, window, head, diagonality) for every captured matrix."""
    return [
        (r.layer, r.slot, r.window, h + 1, diagonality_index(r.weights[h]))
        for r in atlas.records
        for h in range(r.heads)
    ]


def layer_trend(atlas: AttentionAtlas) -> dict[int, float]:
    """Mean diagonality per layer (reported, not asserted)."""
    rows = diagonality_table(atlas)
    out = {}
    for layer in sorted({r[0] for r in rows}):
        out[layer] = float(np.mean([r[4] for r in rows if r[0] == layer]))
    return out
