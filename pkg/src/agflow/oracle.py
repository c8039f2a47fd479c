"""Brute-force ground truth for small graphs.

For n <= 4 nodes every assignment of the four pair features is materialized
and filtered by the ancestrality check, giving the complete graph space.
Exact normalized distributions, marginals, posteriors, and acquisition
values over that space back the statistical tests of the sampler and of the
importance-weighted belief machinery.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .elicitation import ANSWER_CLASSES, feature_posterior, likelihood_vector
from .errors import DegenerateEvidenceError, EnumerationLimitError
from .graphs import AncestralGraph, is_ancestral, node_pairs, pair_index
from .scoring import RewardSpec, log_reward

ENUMERATION_MAX_NODES = 4


def enumerate_ags(n: int) -> list[AncestralGraph]:
    """All ancestral graphs on n nodes, in lexicographic feature order."""
    if n < 1:
        raise ValueError("need n >= 1")
    if n > ENUMERATION_MAX_NODES:
        raise EnumerationLimitError(
            f"enumeration is limited to n <= {ENUMERATION_MAX_NODES}; got n={n}"
        )
    pairs = node_pairs(n)
    out = []
    for assignment in itertools.product((1, 2, 3, 4), repeat=len(pairs)):
        edges = [(u, v, f) for (u, v), f in zip(pairs, assignment) if f != 1]
        g = AncestralGraph.from_edges(n, edges)
        if is_ancestral(g):
            out.append(g)
    return out


@dataclass(frozen=True)
class EnumeratedSpace:
    """The complete scored graph space for one dataset and reward spec."""

    n: int
    graphs: tuple[AncestralGraph, ...]
    features: np.ndarray     # (G, C(n,2)) int8
    scores: np.ndarray       # (G,) U values
    log_rewards: np.ndarray  # (G,)
    reward_spec: RewardSpec

    @property
    def size(self) -> int:
        return len(self.graphs)

    def index_of(self, g: AncestralGraph) -> int:
        return _key_index(self)[g.key]

    @property
    def partition(self) -> float:
        return float(np.exp(self.log_rewards).sum())


_INDEX_CACHE: dict[int, dict[bytes, int]] = {}


def _key_index(space: EnumeratedSpace) -> dict[bytes, int]:
    cached = _INDEX_CACHE.get(id(space))
    if cached is None:
        cached = {g.key: i for i, g in enumerate(space.graphs)}
        _INDEX_CACHE[id(space)] = cached
    return cached


def score_space(n: int, score_fn, reward_spec: RewardSpec) -> EnumeratedSpace:
    """Enumerate and score the full space; ``score_fn(g) -> U``."""
    graphs = tuple(enumerate_ags(n))
    feats = np.stack([g.feature_vector() for g in graphs])
    scores = np.array([float(score_fn(g)) for g in graphs])
    log_r = np.array([log_reward(u, reward_spec) for u in scores])
    return EnumeratedSpace(
        n=n,
        graphs=graphs,
        features=feats,
        scores=scores,
        log_rewards=log_r,
        reward_spec=reward_spec,
    )


def _normalize_log(logp: np.ndarray) -> np.ndarray:
    peak = logp.max()
    if not np.isfinite(peak):
        raise DegenerateEvidenceError("no graph carries probability mass")
    p = np.exp(logp - peak)
    return p / p.sum()


def exact_distribution(space: EnumeratedSpace) -> np.ndarray:
    """p(G) = R(G)/Z over the full space; sums to 1."""
    return _normalize_log(space.log_rewards)


def exact_feature_marginals(space: EnumeratedSpace, probs: np.ndarray | None = None) -> np.ndarray:
    """Exact p(feature at pair = k), one 4-class simplex per pair."""
    p = exact_distribution(space) if probs is None else probs
    C = space.features.shape[1]
    m = np.empty((C, 4))
    for k in range(4):
        m[:, k] = p @ (space.features == k + 1)
    return m


def exact_posterior(space: EnumeratedSpace, feedbacks) -> np.ndarray:
    """Refined exact distribution after committing noisy answers.

    Each answer multiplies a graph's probability by the likelihood of that
    answer under the graph's feature at the queried pair; answers at
    reliability 1/4 therefore change nothing.
    """
    logp = space.log_rewards.astype(float).copy()
    with np.errstate(divide="ignore"):
        for fb in feedbacks:
            p = pair_index(space.n, *fb.relation)
            L = likelihood_vector(fb.answer, fb.reliability)
            logp += np.log(L)[space.features[:, p] - 1]
    return _normalize_log(logp)


def exact_posterior_log_density(space: EnumeratedSpace, feedbacks) -> np.ndarray:
    """log R plus committed posterior factors, the density scored by acquisition."""
    h = space.log_rewards.astype(float).copy()
    with np.errstate(divide="ignore"):
        for fb in feedbacks:
            p = pair_index(space.n, *fb.relation)
            post = feature_posterior(np.asarray(fb.rho), fb.answer, fb.reliability)
            h += np.log(post)[space.features[:, p] - 1]
    return h


def exact_acquisition(space: EnumeratedSpace, feedbacks, r, pi: float) -> float:
    """Full-summation counterpart of the sample-based acquisition score."""
    q = exact_posterior(space, feedbacks)
    h = exact_posterior_log_density(space, feedbacks)
    finite = np.isfinite(h)
    p_idx = pair_index(space.n, *r)
    feat_col = space.features[:, p_idx] - 1
    m = np.array([float(q @ (feat_col == k)) for k in range(4)])
    total = 0.0
    for j in ANSWER_CLASSES:
        pj = float(m @ likelihood_vector(j, pi))
        if pj <= 0.0:
            continue
        tilt = feature_posterior(m, j, pi)[feat_col]
        q_hyp = q * tilt
        q_hyp[~finite] = 0.0
        s = q_hyp.sum()
        if s <= 0.0:
            continue
        total += pj * float((q_hyp / s) @ np.where(finite, h, 0.0))
    return total


def exact_expected_score(space: EnumeratedSpace, probs: np.ndarray) -> float:
    return float(probs @ space.scores)


def exact_expected_shd(space: EnumeratedSpace, probs: np.ndarray,
                       true_graph: AncestralGraph) -> float:
    truth = true_graph.feature_vector()
    return float(probs @ (space.features != truth).sum(axis=1))


def sample_indices(space: EnumeratedSpace, count: int, seed: int = 0,
                   probs: np.ndarray | None = None) -> np.ndarray:
    """Draw graph indices i.i.d. from the exact distribution."""
    p = exact_distribution(space) if probs is None else probs
    rng = np.random.default_rng(seed)
    return rng.choice(space.size, size=count, p=p)


def dump_space(space: EnumeratedSpace, path) -> None:
    probs = exact_distribution(space)
    rewards = np.exp(space.log_rewards)
    with open(path, "w") as fh:
        for g, u, r, p in zip(space.graphs, space.scores, rewards, probs):
            fh.write(json.dumps({
                "graph": g.to_json_obj(),
                "U": float(u),
                "R": float(r),
                "p": float(p),
            }) + "\n")
