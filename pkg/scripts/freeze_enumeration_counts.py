#!/usr/bin/env python
"""Regenerate the frozen ancestral-graph counts used as regression constants.

Runs the full enumeration for n = 1..4 with both validity checks (the
reachability definition and the matrix-exponential form) and prints the
agreed counts. The numbers asserted in tests/test_oracle.py come from this
script's output; rerun it after any change to the validity logic.
"""

import itertools

from agflow.graphs import (
    AncestralGraph,
    is_ancestral,
    is_ancestral_algebraic,
    node_pairs,
)


def count_both_ways(n: int) -> int:
    pairs = node_pairs(n)
    count = 0
    for assignment in itertools.product((1, 2, 3, 4), repeat=len(pairs)):
        edges = [(u, v, f) for (u, v), f in zip(pairs, assignment) if f != 1]
        g = AncestralGraph.from_edges(n, edges)
        by_definition = is_ancestral(g)
        by_algebra = is_ancestral_algebraic(g)
        if by_definition != by_algebra:
            raise AssertionError(f"validity checks disagree on {g!r}")
        if by_definition:
            count += 1
    return count


if __name__ == "__main__":
    for n in range(1, 5):
        print(f"n={n}: {count_both_ways(n)} ancestral graphs")
