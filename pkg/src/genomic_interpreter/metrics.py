"""Per-track Pearson correlation and grouped reporting."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

THREADS_ENV = "GENINT_THREADS"


def pearson(a, b) -> float | None:
    """Sample Pearson r, or None when either vector is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"pearson: length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise ContractError("pearson needs at least two values")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = da @ da, db @ db
    if saa == 0.0 or sbb == 0.0 or np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None
    # one square root of the product keeps exact cases exact
    return float(np.clip((da @ db) / np.sqrt(saa * sbb), -1.0, 1.0))


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


@dataclass
class MetricsReport:
    per_track: list[float | None]
    track_groups: list[str]
    group_means: dict[str, float | None]
    overall: float | None
    undefined: list[int]

    @classmethod
    def from_tracks(cls, per_track: list[float | None], groups: list[str]) -> "MetricsReport":
        defined = [r for r in per_track if r is not None]
        group_means = {}
        for g in dict.fromkeys(groups):
            group_means[g] = _mean_or_none([r for r, gg in zip(per_track, groups) if gg == g and r is not None])
        undefined = [i for i, r in enumerate(per_track) if r is None]
        return cls(list(per_track), list(groups), group_means, _mean_or_none(defined), undefined)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "groups": self.group_means,
            "tracks": [
                {"index": i, "group": g, "pearson": r}
                for i, (r, g) in enumerate(zip(self.per_track, self.track_groups))
            ],
            "undefined_tracks": self.undefined,
        }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["overall", "groups", "tracks", "undefined_tracks"],
    "properties": {
        "overall": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "groups": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        },
        "tracks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "group", "pearson"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "group": {"type": "string"},
                    "pearson": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                },
            },
        },
        "undefined_tracks": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def predict(params, config, onehot: np.ndarray, batch_size: int = 32, threads: int | None = None) -> np.ndarray:
    """Model outputs ``(N, m, T)`` for ``(N, n, 4)`` inputs, batches reassembled in order."""
    from .model import forward

    batches = [onehot[i:i + batch_size] for i in range(0, len(onehot), batch_size)]

    def run(xb):
        return forward(Tensor(xb), params, config)[0].data

    threads = threads or default_threads()
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, batches))
    else:
        outs = [run(b) for b in batches]
    if not outs:
        return np.zeros((0, config.m, config.tracks))
    return np.concatenate(outs, axis=0)


def report_from_predictions(pred: np.ndarray, targets: np.ndarray, groups: list[str]) -> MetricsReport:
    """Per track, correlate predictions and targets pooled over all records and bins."""
    if len(pred) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    if pred.shape != targets.shape:
        raise ContractError(f"prediction shape {pred.shape} vs target shape {targets.shape}")
    tracks = pred.shape[-1]
    per_track = [pearson(pred[..., t].ravel(), targets[..., t].ravel()) for t in range(tracks)]
    return MetricsReport.from_tracks(per_track, groups)


def evaluate(params, config, ds, batch_size: int = 32, threads: int | None = None) -> MetricsReport:
    if ds.count == 0:
        raise ContractError("cannot evaluate an empty dataset")
    if (ds.n, ds.m, ds.tracks) != (config.n, config.m, config.tracks):
        raise ContractError(
            f"dataset (n={ds.n}, m={ds.m}, T={ds.tracks}) does not fit the model "
            f"(n={config.n}, m={config.m}, T={config.tracks})"
        )
    pred = predict(params, config, ds.onehot, batch_size, threads)
    return report_from_predictions(pred, ds.targets, ds.track_groups)
