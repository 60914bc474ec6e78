"""Independent reference implementations used as test oracles."""

import math


def oracle_boundary(mask):
    h, w = mask.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            edge = False
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                        edge = True
            if edge:
                pts.append((r, c))
    return pts


def oracle_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def oracle_hd(a, b, q=95.0):
    pa, pb = oracle_boundary(a), oracle_boundary(b)

    def directed(src, dst):
        return [min(math.hypot(r - r2, c - c2) for r2, c2 in dst) for r, c in src]

    return max(oracle_percentile(directed(pa, pb), q), oracle_percentile(directed(pb, pa), q))


def random_mask(rng, size=16):
    m = rng.random((size, size)) < rng.uniform(0.1, 0.6)
    if not m.any():
        m[rng.integers(size), rng.integers(size)] = True
    return m


def oracle_dsc(a, b):
    pa = {(r, c) for r in range(a.shape[0]) for c in range(a.shape[1]) if a[r, c]}
    pb = {(r, c) for r in range(b.shape[0]) for c in range(b.shape[1]) if b[r, c]}
    if not pa and not pb:
        return 1.0
    return 2 * len(pa & pb) / (len(pa) + len(pb))


def oracle_prompts(mask):
    """Coordinate-mean point and min/max box of the nonzero pixels, by enumeration."""
    coords = [(r, c) for r in range(mask.shape[0]) for c in range(mask.shape[1]) if mask[r, c]]
    rows = [r for r, _ in coords]
    cols = [c for _, c in coords]
    point = (sum(rows) / len(coords), sum(cols) / len(coords))
    return point, (min(rows), min(cols), max(rows), max(cols))
