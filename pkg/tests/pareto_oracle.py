"""Brute-force O(n^2) dominance check."""


def dominates(p, q):
    return p[0] >= q[0] and p[1] >= q[1] and (p[0] > q[0] or p[1] > q[1])


def frontier(points):
    objs = [p.objectives for p in points]
    return [p for i, p in enumerate(points) if not any(dominates(objs[j], objs[i]) for j in range(len(points)) if j != i)]
