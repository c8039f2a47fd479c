"""Ancestral graphs: representation, validity, edge actions, and metrics.

A graph over ``n`` nodes is stored as two binary matrices. ``dir[i][j] = 1``
encodes the directed edge ``j -> i`` (column is the tail, row is the head,
so row ``i`` lists the parents of node ``i``). ``bidir`` is symmetric with a
zero diagonal and encodes confounding edges ``i <-> j``.

Every unordered pair ``(u, v)`` with ``u < v`` carries exactly one of four
features:

    1: no edge        2: u -> v        3: v -> u        4: u <-> v

Graphs are immutable after construction; edge operations return new values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .errors import ActionError, GraphStructureError, NotAncestralError

NO_EDGE = 1
ARROW_FWD = 2   # u -> v for a pair (u, v), u < v
ARROW_BACK = 3  # v -> u
CONFOUNDED = 4  # u <-> v

EDGE_FEATURES = (ARROW_FWD, ARROW_BACK, CONFOUNDED)
ALGEBRAIC_TOL = 1e-9


@lru_cache(maxsize=64)
def node_pairs(n: int) -> tuple[tuple[int, int], ...]:
    """All unordered pairs (u, v) with u < v, in lexicographic order."""
    return tuple((u, v) for u in range(n) for v in range(u + 1, n))


@lru_cache(maxsize=64)
def _pair_index_map(n: int) -> dict[tuple[int, int], int]:
    return {p: i for i, p in enumerate(node_pairs(n))}


def pair_index(n: int, u: int, v: int) -> int:
    return _pair_index_map(n)[(u, v)]


def num_actions(n: int) -> int:
    """Total action count per state: one action per pair and edge type, plus stop."""
    return 3 * len(node_pairs(n)) + 1


@dataclass(frozen=True)
class Action:
    """Either add one edge to a pair, or stop and emit the current graph."""

    kind: str  # "add" or "stop"
    u: int = -1
    v: int = -1
    feature: int = 0

    def __post_init__(self):
        if self.kind == "add":
            if not (0 <= self.u < self.v):
                raise ActionError(f"bad pair ({self.u}, {self.v})")
            if self.feature not in EDGE_FEATURES:
                raise ActionError(f"bad edge feature {self.feature}")
        elif self.kind != "stop":
            raise ActionError(f"unknown action kind {self.kind!r}")


STOP = Action("stop")


def add_action(u: int, v: int, feature: int) -> Action:
    return Action("add", u, v, feature)


def action_index(n: int, a: Action) -> int:
    """Map an action to its flat index: 3*pair + (feature-2); stop is last."""
    if a.kind == "stop":
        return 3 * len(node_pairs(n))
    return 3 * pair_index(n, a.u, a.v) + (a.feature - 2)


def action_from_index(n: int, idx: int) -> Action:
    stop_idx = 3 * len(node_pairs(n))
    if idx == stop_idx:
        return STOP
    if not 0 <= idx < stop_idx:
        raise ActionError(f"action index {idx} out of range for n={n}")
    u, v = node_pairs(n)[idx // 3]
    return Action("add", u, v, idx % 3 + 2)


class AncestralGraph:
    """Immutable mixed graph with directed and bidirected edges.

    The constructor checks matrix structure only (shape, binary entries,
    zero diagonals, symmetry of ``bidir``, one edge per pair). Use
    :func:`is_ancestral` for the acyclicity conditions.
    """

    __slots__ = ("dir", "bidir", "n", "_key")

    def __init__(self, dir: np.ndarray, bidir: np.ndarray, check: bool = True):
        # always copy: the inputs stay caller-owned and mutable
        dirm = np.array(dir, dtype=np.int8, order="C")
        bim = np.array(bidir, dtype=np.int8, order="C")
        if check:
            _check_structure(dirm, bim)
        dirm.flags.writeable = False
        bim.flags.writeable = False
        object.__setattr__(self, "dir", dirm)
        object.__setattr__(self, "bidir", bim)
        object.__setattr__(self, "n", dirm.shape[0])
        object.__setattr__(self, "_key", _feature_bytes(dirm, bim))

    def __setattr__(self, name, value):
        raise AttributeError("AncestralGraph is immutable")

    @classmethod
    def empty(cls, n: int) -> "AncestralGraph":
        z = np.zeros((n, n), dtype=np.int8)
        return cls(z, z.copy(), check=False)

    @classmethod
    def from_edges(cls, n: int, edges) -> "AncestralGraph":
        """Build from ``[(u, v, feature), ...]`` triples with u < v."""
        dirm = np.zeros((n, n), dtype=np.int8)
        bim = np.zeros((n, n), dtype=np.int8)
        seen = set()
        for u, v, f in edges:
            if not (0 <= u < v < n):
                raise GraphStructureError(f"bad pair ({u}, {v}) for n={n}")
            if (u, v) in seen:
                raise GraphStructureError(f"duplicate pair ({u}, {v})")
            seen.add((u, v))
            if f == ARROW_FWD:
                dirm[v, u] = 1
            elif f == ARROW_BACK:
                dirm[u, v] = 1
            elif f == CONFOUNDED:
                bim[u, v] = bim[v, u] = 1
            else:
                raise GraphStructureError(f"bad edge feature {f}")
        return cls(dirm, bim, check=False)

    @property
    def key(self) -> bytes:
        """Canonical per-pair feature encoding; equal graphs share keys."""
        return self._key

    def feature_vector(self) -> np.ndarray:
        """Features over node_pairs(n), as int8 values in {1, 2, 3, 4}."""
        return np.frombuffer(self._key, dtype=np.int8).copy()

    def num_edges(self) -> int:
        return int(self.dir.sum() + self.bidir.sum() // 2)

    def edge_list(self) -> list[tuple[int, int, int]]:
        """Present edges as sorted (u, v, feature) triples with u < v."""
        feats = self.feature_vector()
        return [
            (u, v, int(f))
            for (u, v), f in zip(node_pairs(self.n), feats)
            if f != NO_EDGE
        ]

    def __eq__(self, other):
        return isinstance(other, AncestralGraph) and self._key == other._key and self.n == other.n

    def __hash__(self):
        return hash((self.n, self._key))

    def __repr__(self):
        edges = ", ".join(
            {ARROW_FWD: f"{u}->{v}", ARROW_BACK: f"{v}->{u}", CONFOUNDED: f"{u}<->{v}"}[f]
            for u, v, f in self.edge_list()
        )
        return f"AncestralGraph(n={self.n}, [{edges}])"

    def to_json_obj(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edge_list()]}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AncestralGraph":
        return cls.from_edges(int(obj["n"]), [tuple(e) for e in obj["edges"]])


def _check_structure(dirm: np.ndarray, bim: np.ndarray) -> None:
    if dirm.ndim != 2 or dirm.shape[0] != dirm.shape[1]:
        raise GraphStructureError(f"dir must be square, got {dirm.shape}")
    if bim.shape != dirm.shape:
        raise GraphStructureError(f"shape mismatch: dir {dirm.shape}, bidir {bim.shape}")
    for name, m in (("dir", dirm), ("bidir", bim)):
        if not np.isin(m, (0, 1)).all():
            raise GraphStructureError(f"{name} must be binary")
        if m.diagonal().any():
            raise GraphStructureError(f"{name} must have a zero diagonal")
    if (bim != bim.T).any():
        raise GraphStructureError("bidir must be symmetric")
    if ((dirm + dirm.T + bim) > 1).any():
        raise GraphStructureError("at most one edge per unordered pair")


def _feature_bytes(dirm: np.ndarray, bim: np.ndarray) -> bytes:
    n = dirm.shape[0]
    pairs = node_pairs(n)
    feats = np.empty(len(pairs), dtype=np.int8)
    for i, (u, v) in enumerate(pairs):
        if dirm[v, u]:
            feats[i] = ARROW_FWD
        elif dirm[u, v]:
            feats[i] = ARROW_BACK
        elif bim[u, v]:
            feats[i] = CONFOUNDED
        else:
            feats[i] = NO_EDGE
    return feats.tobytes()


def ancestor_matrix(dirm: np.ndarray) -> np.ndarray:
    """Boolean matrix with entry (i, j) true iff a directed path j -> ... -> i exists."""
    reach = dirm.astype(bool)
    for _ in range(max(1, int(np.ceil(np.log2(max(2, dirm.shape[0])))))):
        nxt = reach | (reach @ reach)
        if (nxt == reach).all():
            break
        reach = nxt
    return reach


def _violates_conditions(dirm: np.ndarray, bim: np.ndarray) -> bool:
    reach = ancestor_matrix(dirm)
    if reach.diagonal().any():
        return True  # directed cycle
    # almost directed cycle: confounded pair with one endpoint ancestral to the other
    return bool((bim.astype(bool) & (reach | reach.T)).any())


def is_ancestral(g: AncestralGraph) -> bool:
    """True iff the graph has no directed cycle and no almost directed cycle.

    Uses exact reachability on the adjacency matrices; agrees with
    :func:`is_ancestral_algebraic` on all binary inputs.
    """
    return not _violates_conditions(np.asarray(g.dir), np.asarray(g.bidir))


def is_ancestral_algebraic(g: AncestralGraph, tol: float = ALGEBRAIC_TOL) -> bool:
    """Matrix-exponential form of the same check.

    Evaluates ``trace(exp(D)) - n + 1^T (exp(D) * B) 1`` and tests it
    against ``tol``; the quantity is zero exactly when no directed or
    almost directed cycle exists.
    """
    dirm = np.asarray(g.dir, dtype=float)
    bim = np.asarray(g.bidir, dtype=float)
    e = expm(dirm)
    value = float(np.trace(e)) - g.n + float(np.sum(e * bim))
    return abs(value) < tol


def relation_feature(g: AncestralGraph, pair: tuple[int, int]) -> int:
    u, v = pair
    if not 0 <= u < v < g.n:
        raise GraphStructureError(f"bad relation ({u}, {v}) for n={g.n}")
    if g.dir[v, u]:
        return ARROW_FWD
    if g.dir[u, v]:
        return ARROW_BACK
    if g.bidir[u, v]:
        return CONFOUNDED
    return NO_EDGE


def apply_action(g: AncestralGraph, a: Action) -> AncestralGraph:
    """Add one edge; the target pair must currently be empty."""
    if a.kind == "stop":
        raise ActionError("stop does not modify the graph")
    if a.v >= g.n:
        raise ActionError(f"pair ({a.u}, {a.v}) out of range for n={g.n}")
    if relation_feature(g, (a.u, a.v)) != NO_EDGE:
        raise ActionError(f"pair ({a.u}, {a.v}) already occupied")
    dirm = np.array(g.dir)
    bim = np.array(g.bidir)
    _set_pair(dirm, bim, a.u, a.v, a.feature)
    return AncestralGraph(dirm, bim, check=False)


def undo_action(g: AncestralGraph, a: Action) -> AncestralGraph:
    """Remove the edge that ``a`` added; it must be present with the same feature."""
    if a.kind == "stop":
        raise ActionError("stop does not modify the graph")
    if a.v >= g.n or relation_feature(g, (a.u, a.v)) != a.feature:
        raise ActionError(f"edge ({a.u}, {a.v}, {a.feature}) not present")
    dirm = np.array(g.dir)
    bim = np.array(g.bidir)
    _set_pair(dirm, bim, a.u, a.v, NO_EDGE)
    return AncestralGraph(dirm, bim, check=False)


def _set_pair(dirm: np.ndarray, bim: np.ndarray, u: int, v: int, feature: int) -> None:
    dirm[v, u] = dirm[u, v] = 0
    bim[u, v] = bim[v, u] = 0
    if feature == ARROW_FWD:
        dirm[v, u] = 1
    elif feature == ARROW_BACK:
        dirm[u, v] = 1
    elif feature == CONFOUNDED:
        bim[u, v] = bim[v, u] = 1


def valid_action_mask(g: AncestralGraph) -> np.ndarray:
    """Boolean mask over the flat action index set.

    An add action is valid when its pair is empty and the grown graph is
    still ancestral, checked by applying the edge, testing, and reverting.
    Stop is always valid.
    """
    n = g.n
    feats = g.feature_vector()
    mask = np.zeros(num_actions(n), dtype=bool)
    mask[-1] = True
    dirm = np.array(g.dir)
    bim = np.array(g.bidir)
    for p, (u, v) in enumerate(node_pairs(n)):
        if feats[p] != NO_EDGE:
            continue
        for f in EDGE_FEATURES:
            _set_pair(dirm, bim, u, v, f)
            if not _violates_conditions(dirm, bim):
                mask[3 * p + (f - 2)] = True
            _set_pair(dirm, bim, u, v, NO_EDGE)
    return mask


def valid_actions(g: AncestralGraph) -> list[Action]:
    """Valid actions in index order (lexicographic by pair and feature, stop last)."""
    if _violates_conditions(np.asarray(g.dir), np.asarray(g.bidir)):
        raise NotAncestralError("valid_actions requires an ancestral graph")
    mask = valid_action_mask(g)
    return [action_from_index(g.n, i) for i in np.flatnonzero(mask)]


def removal_mask(g: AncestralGraph) -> np.ndarray:
    """Boolean mask over the 3*C(n,2) removal slots: present edges only."""
    feats = g.feature_vector()
    mask = np.zeros(3 * len(feats), dtype=bool)
    for p, f in enumerate(feats):
        if f != NO_EDGE:
            mask[3 * p + (f - 2)] = True
    return mask


def shd(g1: AncestralGraph, g2: AncestralGraph) -> int:
    """Count of unordered pairs whose relation feature differs."""
    if g1.n != g2.n:
        raise GraphStructureError(f"node count mismatch: {g1.n} vs {g2.n}")
    return int((g1.feature_vector() != g2.feature_vector()).sum())
