"""One-hot DNA, read binning, the synthetic motif task, and the dataset container.

Dataset container layout::

    line 1   b"GINT-ASSAY-DATASET <version>\\n"
    line 2   one-line JSON header: n, m, tracks, bin_width, count, ids,
             track_groups, payload_bytes, crc32
    payload  array block of one-hot inputs (count, n, 4), then
             array block of targets (count, m, tracks)

Array blocks use the layout in :mod:`genomic_interpreter.binio`; ``crc32`` is
zlib's CRC-32 of the payload bytes.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .binio import array_bytes, read_array
from .errors import (
    ChecksumError, ConfigError, ConsistencyError, ContractError, FormatError,
    ParseError, PayloadError, VersionError,
)

ALPHABET = "ACGT"
DATASET_MAGIC = "GINT-ASSAY-DATASET"
DATASET_VERSION = 1
SPLIT_BLOCK = 16

_LOOKUP = np.full(256, -1, dtype=np.int16)
for _i, _c in enumerate(ALPHABET):
    _LOOKUP[ord(_c)] = _LOOKUP[ord(_c.lower())] = _i
_LOOKUP[ord("N")] = _LOOKUP[ord("n")] = 4
_ONEHOT_ROWS = np.vstack([np.eye(4), np.full((1, 4), 0.25)])


def encode_codes(seq: str) -> np.ndarray:
    """Map a sequence to integer codes 0..3 for ACGT and 4 for N."""
    raw = np.frombuffer(seq.encode("latin-1", errors="replace"), dtype=np.uint8)
    codes = _LOOKUP[raw]
    bad = np.flatnonzero(codes < 0)
    if bad.size:
        pos = int(bad[0])
        raise ParseError(f"invalid nucleotide {seq[pos]!r} at position {pos}")
    return codes.astype(np.int64)


def one_hot_encode(seq: str) -> np.ndarray:
    """``(n, 4)`` one-hot matrix in A, C, G, T order; N becomes a uniform 0.25 row."""
    return _ONEHOT_ROWS[encode_codes(seq)]


def bin_reads(per_bp: np.ndarray, bin_width: int, m: int) -> np.ndarray:
    """Average per-base values over ``m`` bins of ``bin_width`` centred in the segment.

    Accepts ``(n,)`` or ``(n, T)`` input and returns ``(m,)`` or ``(m, T)``.
    """
    per_bp = np.asarray(per_bp, dtype=np.float64)
    n = per_bp.shape[0]
    if m * bin_width > n:
        raise ContractError(f"{m} bins of {bin_width} bp do not fit in {n} bp")
    start = (n - m * bin_width) // 2
    region = per_bp[start:start + m * bin_width]
    return region.reshape((m, bin_width) + per_bp.shape[1:]).mean(axis=1)


@dataclass
class InteractionPair:
    motif_a: str
    motif_b: str
    min_distance: int
    bonus: list[float]


@dataclass
class SyntheticTaskSpec:
    """Motif-planting task standing in for a real assay compendium.

    Ground-truth per-base rate for track t at position p::

        noise + sum over motif occurrences covering p of weights[t][motif]
              + sum over pairs of bonus[t] if p is covered by an occurrence of
                either motif that has a partner occurrence of the other motif
                whose start is more than ``min_distance`` bp away

    Occurrences are found by scanning the final sequence, so chance matches
    count as well as planted copies.  Labels are exact in floating point when
    weights, bonuses and noise are dyadic and ``bin_width`` is a power of two.
    """

    n: int
    m: int
    tracks: int
    bin_width: int
    motifs: dict[str, str] = field(default_factory=dict)
    weights: dict[str, list[float]] = field(default_factory=dict)
    pairs: list[InteractionPair] = field(default_factory=list)
    noise: float = 0.0
    max_copies: int = 2
    poisson: bool = False
    track_groups: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.track_groups:
            self.track_groups = ["DNase"] * self.tracks

    def validate(self) -> None:
        if self.m * self.bin_width > self.n:
            raise ConfigError(f"{self.m} bins of {self.bin_width} bp exceed n = {self.n}")
        if len(self.track_groups) != self.tracks:
            raise ConfigError(f"{len(self.track_groups)} track groups for {self.tracks} tracks")
        for name, seq in self.motifs.items():
            if len(seq) > self.n:
                raise ContractError(f"motif {name} ({len(seq)} bp) is longer than n = {self.n}")
            if not 4 <= len(seq) <= 8:
                raise ConfigError(f"motif {name} must be 4-8 bp, got {len(seq)}")
            if any(c not in ALPHABET for c in seq.upper()):
                raise ConfigError(f"motif {name} contains non-ACGT characters")
            if len(self.weights.get(name, [0.0] * self.tracks)) != self.tracks:
                raise ConfigError(f"motif {name} needs {self.tracks} weights")
        for pair in self.pairs:
            for name in (pair.motif_a, pair.motif_b):
                if name not in self.motifs:
                    raise ConfigError(f"pair refers to unknown motif {name}")
            if len(pair.bonus) != self.tracks:
                raise ConfigError(f"pair {pair.motif_a}/{pair.motif_b} needs {self.tracks} bonuses")
        if self.pairs and not any(p.min_distance > self.bin_width for p in self.pairs):
            raise ConfigError("at least one pair needs min_distance > bin_width")
        if self.noise < 0 or self.max_copies < 0:
            raise ConfigError("noise and max_copies must be non-negative")

    def weight_matrix(self) -> np.ndarray:
        """``(motifs, tracks)`` weights, zero for motifs without an entry."""
        return np.array(
            [self.weights.get(name, [0.0] * self.tracks) for name in self.motifs], dtype=np.float64
        ).reshape(len(self.motifs), self.tracks)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["task"] = {
            "n": str(self.n), "m": str(self.m), "tracks": str(self.tracks),
            "bin_width": str(self.bin_width), "noise": repr(self.noise),
            "max_copies": str(self.max_copies), "poisson": str(self.poisson).lower(),
            "track_groups": ", ".join(self.track_groups),
        }
        cp["motifs"] = dict(self.motifs)
        cp["weights"] = {k: ", ".join(repr(float(v)) for v in w) for k, w in self.weights.items()}
        cp["pairs"] = {
            f"pair{i}": ", ".join([p.motif_a, p.motif_b, str(p.min_distance)] + [repr(float(b)) for b in p.bonus])
            for i, p in enumerate(self.pairs)
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_task_spec(text: str) -> SyntheticTaskSpec:
    """Read a task spec from ``key = value`` text with [task], [motifs], [weights], [pairs]."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
        task = cp["task"]
        tracks = task.getint("tracks")
        groups = [g.strip() for g in task.get("track_groups", "").split(",") if g.strip()]
        motifs = {k: v.strip().upper() for k, v in cp["motifs"].items()} if cp.has_section("motifs") else {}
        weights = {}
        if cp.has_section("weights"):
            weights = {k: [float(x) for x in v.split(",")] for k, v in cp["weights"].items()}
        pairs = []
        if cp.has_section("pairs"):
            for v in cp["pairs"].values():
                a, b, dist, *bonus = [s.strip() for s in v.split(",")]
                pairs.append(InteractionPair(a, b, int(dist), [float(x) for x in bonus]))
        spec = SyntheticTaskSpec(
            n=task.getint("n"), m=task.getint("m"), tracks=tracks,
            bin_width=task.getint("bin_width"), motifs=motifs, weights=weights, pairs=pairs,
            noise=task.getfloat("noise", 0.0), max_copies=task.getint("max_copies", 2),
            poisson=task.getboolean("poisson", False), track_groups=groups,
        )
    except (configparser.Error, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad task spec: {exc}") from None
    spec.validate()
    return spec


def default_task_spec() -> SyntheticTaskSpec:
    """Desk-scale task: one local-motif track and one long-range interaction track.

    Homopolymer 6-mers planted up to 8 times each give the dense signal that a
    128-record training set needs to generalise.
    """
    return SyntheticTaskSpec(
        n=512, m=8, tracks=2, bin_width=64,
        motifs={"g6": "GGGGGG", "a6": "AAAAAA", "c6": "CCCCCC", "t6": "TTTTTT"},
        weights={"g6": [4.0, 0.0], "a6": [2.0, 0.0]},
        pairs=[InteractionPair("c6", "t6", 128, [0.0, 4.0])],
        max_copies=8,
        track_groups=["DNase", "CAGE"],
    )


def _occurrences(codes: np.ndarray, motif: np.ndarray) -> np.ndarray:
    if len(motif) > len(codes):
        return np.zeros(0, dtype=np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(codes, len(motif))
    return np.flatnonzero((windows == motif).all(axis=1))


def _coverage(starts: np.ndarray, length: int, n: int) -> np.ndarray:
    diff = np.zeros(n + 1, dtype=np.int64)
    np.add.at(diff, starts, 1)
    np.add.at(diff, starts + length, -1)
    return np.cumsum(diff[:n])


def label_rates(codes: np.ndarray, spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-base ground-truth rates ``(n, tracks)`` for an encoded sequence."""
    n = len(codes)
    motif_codes = {k: encode_codes(v) for k, v in spec.motifs.items()}
    occ = {k: _occurrences(codes, c) for k, c in motif_codes.items()}
    rates = np.full((n, spec.tracks), float(spec.noise))
    w = spec.weight_matrix()
    for j, name in enumerate(spec.motifs):
        if w[j].any():
            rates += _coverage(occ[name], len(motif_codes[name]), n)[:, None] * w[j]
    for pair in spec.pairs:
        a, b = occ[pair.motif_a], occ[pair.motif_b]
        far = np.abs(a[:, None] - b[None, :]) > pair.min_distance
        cov = _coverage(a[far.any(axis=1)], len(motif_codes[pair.motif_a]), n)
        cov = cov + _coverage(b[far.any(axis=0)], len(motif_codes[pair.motif_b]), n)
        rates += cov[:, None] * np.asarray(pair.bonus, dtype=np.float64)
    return rates


@dataclass
class AssayDataset:
    ids: list[str]
    onehot: np.ndarray
    targets: np.ndarray
    bin_width: int
    track_groups: list[str]

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return self.onehot.shape[1]

    @property
    def m(self) -> int:
        return self.targets.shape[1]

    @property
    def tracks(self) -> int:
        return self.targets.shape[2]

    def subset(self, indices) -> "AssayDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return AssayDataset(
            [self.ids[i] for i in indices], self.onehot[indices], self.targets[indices],
            self.bin_width, list(self.track_groups),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, AssayDataset):
            return NotImplemented
        return (
            self.ids == other.ids and self.bin_width == other.bin_width
            and self.track_groups == other.track_groups
            and self.onehot.shape == other.onehot.shape and self.targets.shape == other.targets.shape
            and np.array_equal(self.onehot, other.onehot) and np.array_equal(self.targets, other.targets)
        )


def empty_dataset(n: int, m: int, tracks: int, bin_width: int, groups: list[str]) -> AssayDataset:
    return AssayDataset([], np.zeros((0, n, 4)), np.zeros((0, m, tracks)), bin_width, list(groups))


def generate_record(spec: SyntheticTaskSpec, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Codes ``(n,)`` and targets ``(m, tracks)`` of record ``index``; own Philox stream per record."""
    rng = Rng(seed, stream=index + 1)
    codes = rng.integers(0, 4, size=spec.n)
    for name, motif in spec.motifs.items():
        mc = encode_codes(motif)
        for _ in range(int(rng.integers(0, spec.max_copies + 1))):
            pos = int(rng.integers(0, spec.n - len(mc) + 1))
            codes[pos:pos + len(mc)] = mc
    targets = bin_reads(label_rates(codes, spec), spec.bin_width, spec.m)
    if spec.poisson:
        targets = rng.poisson(targets * spec.bin_width) / spec.bin_width
    return codes, targets


def generate_synthetic(spec: SyntheticTaskSpec, count: int, seed: int) -> AssayDataset:
    spec.validate()
    if count < 0:
        raise ContractError("record count must be non-negative")
    ds = empty_dataset(spec.n, spec.m, spec.tracks, spec.bin_width, spec.track_groups)
    if count == 0:
        return ds
    onehot = np.zeros((count, spec.n, 4))
    targets = np.zeros((count, spec.m, spec.tracks))
    for i in range(count):
        codes, targets[i] = generate_record(spec, seed, i)
        onehot[i] = _ONEHOT_ROWS[codes]
    ids = [f"syn{seed}_{i:06d}" for i in range(count)]
    return AssayDataset(ids, onehot, targets, spec.bin_width, list(spec.track_groups))


# ---------------------------------------------------------------------------
# container


def save_dataset(ds: AssayDataset, path) -> None:
    payload = array_bytes(ds.onehot) + array_bytes(ds.targets)
    header = {
        "n": ds.n, "m": ds.m, "tracks": ds.tracks, "bin_width": ds.bin_width,
        "count": ds.count, "ids": ds.ids, "track_groups": ds.track_groups,
        "payload_bytes": len(payload), "crc32": zlib.crc32(payload),
    }
    with open(path, "wb") as f:
        f.write(f"{DATASET_MAGIC} {DATASET_VERSION}\n".encode())
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(payload)


def load_dataset(path) -> AssayDataset:
    with open(path, "rb") as f:
        magic = f.readline().decode("latin-1").split()
        if len(magic) != 2 or magic[0] != DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset container")
        if magic[1] != str(DATASET_VERSION):
            raise VersionError(f"{path}: dataset version {magic[1]}, expected {DATASET_VERSION}")
        try:
            header = json.loads(f.readline())
        except ValueError as exc:
            raise FormatError(f"{path}: unreadable header ({exc})") from None
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise PayloadError(f"{path}: payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    buf = io.BytesIO(payload)
    onehot = read_array(buf, "onehot")
    targets = read_array(buf, "targets")
    count, n, m, tracks = header["count"], header["n"], header["m"], header["tracks"]
    if onehot.shape != (count, n, 4):
        raise ConsistencyError(f"{path}: inputs {onehot.shape} vs header ({count}, {n}, 4)")
    if targets.shape != (count, m, tracks):
        raise ConsistencyError(f"{path}: targets {targets.shape} vs header ({count}, {m}, {tracks})")
    if len(header["ids"]) != count or len(header["track_groups"]) != tracks:
        raise ConsistencyError(f"{path}: id or track-group count disagrees with the header")
    return AssayDataset(list(header["ids"]), onehot, targets, header["bin_width"], list(header["track_groups"]))


def split_dataset(ds: AssayDataset, fractions, seed: int):
    """Assign shuffled blocks of 16 consecutive records to (train, val, test).

    Block counts per split follow ``fractions`` with largest-remainder rounding.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    blocks = -(-ds.count // SPLIT_BLOCK)
    raw = np.array(fractions) * blocks
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: blocks - sizes.sum()]:
        sizes[i] += 1
    order = Rng(seed).permutation(blocks)
    out, start = [], 0
    for frac, size in zip(fractions, sizes):
        chosen = np.sort(order[start:start + size])
        start += size
        idx = [i for b in chosen for i in range(b * SPLIT_BLOCK, min((b + 1) * SPLIT_BLOCK, ds.count))]
        if frac > 0 and not idx:
            raise ConfigError(f"split fraction {frac} produced an empty split for {ds.count} records")
        out.append(ds.subset(idx))
    return tuple(out)


# ---------------------------------------------------------------------------
# plain-text ingestion


def read_sequences(path) -> list[tuple[str, str]]:
    """Records from ``id<TAB>sequence`` lines; blank lines and ``#`` comments skipped."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'id<TAB>sequence'")
        records.append((parts[0], parts[1].strip()))
    return records


def read_targets_csv(path, ids: list[str], m: int, tracks: int) -> np.ndarray:
    """Targets from CSV rows ``record_id,track,bin,value``; missing cells are zero."""
    index = {rid: i for i, rid in enumerate(ids)}
    out = np.zeros((len(ids), m, tracks))
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                i, t, b = index[row["record_id"]], int(row["track"]), int(row["bin"])
                out[i, b, t] = float(row["value"])
            except (KeyError, IndexError, ValueError) as exc:
                raise ParseError(f"{path}: bad target row {row}: {exc}") from None
    if (out < 0).any():
        raise ParseError(f"{path}: negative target values")
    return out


def dataset_from_files(seq_path, targets_path, m: int, tracks: int, bin_width: int, groups=None) -> AssayDataset:
    records = read_sequences(seq_path)
    ids = [r[0] for r in records]
    onehot = np.stack([one_hot_encode(s) for _, s in records]) if records else np.zeros((0, 0, 4))
    if records and len({len(s) for _, s in records}) != 1:
        raise ParseError(f"{seq_path}: sequences differ in length")
    targets = read_targets_csv(targets_path, ids, m, tracks)
    return AssayDataset(ids, onehot, targets, bin_width, list(groups or ["DNase"] * tracks))
