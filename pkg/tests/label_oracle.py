"""Brute-force labeller used as an independent oracle for synthetic targets."""

ALPHABET = "ACGT"


def occurrences(seq: str, motif: str) -> list[int]:
    return [s for s in range(len(seq) - len(motif) + 1) if seq[s:s + len(motif)] == motif]


def brute_force_targets(seq: str, spec) -> list[list[float]]:
    """Targets ``[bin][track]`` by scanning every motif occurrence and pair directly."""
    n = len(seq)
    rate = [[spec.noise] * spec.tracks for _ in range(n)]
    occ = {name: occurrences(seq, motif) for name, motif in spec.motifs.items()}
    for name, motif in spec.motifs.items():
        w = spec.weights.get(name, [0.0] * spec.tracks)
        for s in occ[name]:
            for pos in range(s, s + len(motif)):
                for t in range(spec.tracks):
                    rate[pos][t] += w[t]
    for pair in spec.pairs:
        for mine, other in ((pair.motif_a, pair.motif_b), (pair.motif_b, pair.motif_a)):
            for s in occ[mine]:
                if any(abs(s - o) > pair.min_distance for o in occ[other]):
                    for pos in range(s, s + len(spec.motifs[mine])):
                        for t in range(spec.tracks):
                            rate[pos][t] += pair.bonus[t]
    start = (n - spec.m * spec.bin_width) // 2
    out = []
    for b in range(spec.m):
        lo = start + b * spec.bin_width
        out.append([sum(rate[p][t] for p in range(lo, lo + spec.bin_width)) / spec.bin_width for t in range(spec.tracks)])
    return out


def decode(onehot) -> str:
    return "".join(ALPHABET[int(row.argmax())] for row in onehot)
