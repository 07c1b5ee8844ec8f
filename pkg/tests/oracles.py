"""Brute-force references shared by the unit and acceptance tests."""

import numpy as np


def retrieval_oracle(dists, pl, gl, excl, ks=(1, 5)):
    """Sort (distance, index) pairs per probe and read every metric off the ranked list."""
    hits_k = {k: [] for k in ks}
    aps, inps, skipped = [], [], 0
    for i in range(len(pl)):
        ranked = sorted((dists[i][j], j) for j in range(len(gl)) if not excl[i][j])
        match = [gl[j] == pl[i] for _, j in ranked]
        if not any(match):
            skipped += 1
            continue
        positions = [r + 1 for r, m in enumerate(match) if m]
        for k in ks:
            hits_k[k].append(1.0 if any(match[:k]) else 0.0)
        aps.append(sum((n + 1) / r for n, r in enumerate(positions)) / len(positions))
        inps.append(len(positions) / positions[-1])
    out = {f"rank{k}": sum(v) / len(v) for k, v in hits_k.items()}
    out.update(map=sum(aps) / len(aps), minp=sum(inps) / len(inps), skipped=skipped)
    return out


def random_instance(seed, n_probe=20, n_gallery=50):
    r = np.random.default_rng(seed)
    C = int(r.integers(2, 8))
    pl = r.integers(0, C, n_probe)
    gl = r.integers(0, C, n_gallery)
    if seed % 3 == 0:
        dists = r.integers(0, 5, (n_probe, n_gallery)).astype(float)  # heavy ties
    else:
        dists = r.random((n_probe, n_gallery))
    excl = r.random((n_probe, n_gallery)) < (0.2 if seed % 2 else 0.0)
    excl[0] = gl != pl[0]  # leaves probe 0 with only positives, or none
    return dists, pl, gl, excl
