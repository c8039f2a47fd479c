"""Noisy-expert feedback over pairwise relations and belief refinement.

A belief holds a fixed set of sampled graphs with importance weights. An
expert answer about one pair multiplies each sample's weight by the answer
likelihood of that sample's feature (normalized by the answer's evidence),
so uninformative answers (reliability 1/4) leave the weights unchanged.

Query selection scores each candidate pair by the expected cross-entropy
between the hypothetically updated belief and the current one, where the
hypothetical reweighting uses the closed-form feature posterior seeded by
the current weighted marginal at that pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEvidenceError
from .graphs import AncestralGraph, node_pairs, pair_index, relation_feature

ANSWER_CLASSES = (1, 2, 3, 4)
ESS_WARN_THRESHOLD = 10.0
STRATEGIES = ("cross_entropy", "random")


def likelihood_vector(f: int, pi: float) -> np.ndarray:
    """P(answer=f | true feature), as a vector over the 4 features."""
    if f not in ANSWER_CLASSES:
        raise ValueError(f"answer must be in 1..4, got {f}")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"reliability must be in [0, 1], got {pi}")
    L = np.full(4, (1.0 - pi) / 3.0)
    L[f - 1] = pi
    return L


def feature_posterior(rho: np.ndarray, f: int, pi: float) -> np.ndarray:
    """Closed-form posterior over the 4 features given one noisy answer."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (4,) or (rho < 0).any() or abs(rho.sum() - 1.0) > 1e-8:
        raise ValueError(f"prior must be a 4-class simplex, got {rho}")
    L = likelihood_vector(f, pi)
    eta = float(rho @ L)
    if eta <= 0.0:
        raise DegenerateEvidenceError(
            f"answer {f} has zero prior evidence (pi={pi}, prior={rho})"
        )
    return rho * L / eta


@dataclass(frozen=True)
class FeedbackRecord:
    """One committed answer with the marginal snapshot taken at query time."""

    relation: tuple[int, int]
    answer: int
    reliability: float
    rho: tuple[float, float, float, float]

    def to_json_obj(self) -> dict:
        return {
            "relation": list(self.relation),
            "answer": self.answer,
            "reliability": self.reliability,
            "rho": list(self.rho),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FeedbackRecord":
        return cls(
            relation=tuple(obj["relation"]),
            answer=int(obj["answer"]),
            reliability=float(obj["reliability"]),
            rho=tuple(float(x) for x in obj["rho"]),
        )


@dataclass
class BeliefState:
    """Weighted sample approximation of the graph posterior.

    ``features[t, p]`` is the pair-p feature of sample t; ``log_rewards``
    and ``scores`` hold the samples' log R and U values. ``log_weights``
    start at zero and accumulate one likelihood-ratio term per feedback.
    Instances are treated as immutable; updates return new states sharing
    the sample arrays.
    """

    n: int
    features: np.ndarray      # (T, C(n,2)) int8 in {1..4}
    log_rewards: np.ndarray   # (T,)
    scores: np.ndarray        # (T,) U values
    log_weights: np.ndarray = field(default=None)  # type: ignore[assignment]
    feedbacks: tuple[FeedbackRecord, ...] = ()

    def __post_init__(self):
        T, C = self.features.shape
        if C != len(node_pairs(self.n)):
            raise ValueError(f"feature width {C} does not match n={self.n}")
        if T == 0:
            raise ValueError("belief needs at least one sample")
        if self.log_rewards.shape != (T,) or self.scores.shape != (T,):
            raise ValueError("per-sample array lengths disagree")
        if self.log_weights is None:
            self.log_weights = np.zeros(T)

    @classmethod
    def from_samples(cls, graphs, log_rewards, scores) -> "BeliefState":
        graphs = list(graphs)
        n = graphs[0].n
        feats = np.stack([g.feature_vector() for g in graphs])
        return cls(
            n=n,
            features=feats,
            log_rewards=np.asarray(log_rewards, dtype=float),
            scores=np.asarray(scores, dtype=float),
        )

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def queried(self) -> frozenset[tuple[int, int]]:
        return frozenset(fb.relation for fb in self.feedbacks)

    def sample_graph(self, t: int) -> AncestralGraph:
        edges = [
            (u, v, int(f))
            for (u, v), f in zip(node_pairs(self.n), self.features[t])
            if f != 1
        ]
        return AncestralGraph.from_edges(self.n, edges)


def normalized_weights(belief: BeliefState) -> np.ndarray:
    lw = belief.log_weights
    peak = lw.max()
    if not np.isfinite(peak):
        raise DegenerateEvidenceError("all sample weights vanished")
    w = np.exp(lw - peak)
    return w / w.sum()


def ess(belief: BeliefState) -> float:
    w = normalized_weights(belief)
    return float(1.0 / (w @ w))


def marginal_features(belief: BeliefState) -> np.ndarray:
    """Weighted feature frequencies, one 4-class simplex per pair."""
    w = normalized_weights(belief)
    C = belief.features.shape[1]
    m = np.empty((C, 4))
    for k in range(4):
        m[:, k] = w @ (belief.features == k + 1)
    return m


def _check_relation(n: int, r) -> tuple[int, int]:
    u, v = int(r[0]), int(r[1])
    if not 0 <= u < v < n:
        raise ValueError(f"bad relation ({u}, {v}) for n={n}")
    return (u, v)


def update_belief(
    belief: BeliefState,
    r,
    f: int,
    pi: float,
    allow_repeat: bool = False,
) -> BeliefState:
    """Commit one answer: weight each sample by its likelihood ratio.

    The multiplier for a sample with feature ``w`` at the queried pair is
    ``P(f | w) / P(f)``, with the evidence taken under the current weighted
    marginal. At reliability 1/4 every class has the same likelihood, so the
    multiplier is 1 and the update is a no-op.
    """
    r = _check_relation(belief.n, r)
    if not allow_repeat and r in belief.queried:
        raise ValueError(f"relation {r} was already queried")
    p = pair_index(belief.n, *r)
    rho = marginal_features(belief)[p]
    L = likelihood_vector(f, pi)
    # evidence under the renormalized marginal: at reliability 1/4 every
    # numerator term is exactly L_k * (denominator term), so eta == 1/4
    # bitwise and the factor below is identically zero
    eta = float((rho * L).sum()) / float(rho.sum())
    if eta <= 0.0:
        raise DegenerateEvidenceError(f"answer {f} at {r} has zero evidence")
    with np.errstate(divide="ignore"):
        log_factor = np.log(L / eta)
    new_lw = belief.log_weights + log_factor[belief.features[:, p] - 1]
    if not np.isfinite(new_lw).any():
        raise DegenerateEvidenceError(f"answer {f} at {r} is incompatible with every sample")
    record = FeedbackRecord(relation=r, answer=int(f), reliability=float(pi), rho=tuple(rho))
    return BeliefState(
        n=belief.n,
        features=belief.features,
        log_rewards=belief.log_rewards,
        scores=belief.scores,
        log_weights=new_lw,
        feedbacks=belief.feedbacks + (record,),
    )


def predictive(belief: BeliefState, r, pi: float) -> np.ndarray:
    """Probability of each possible answer under the current belief."""
    r = _check_relation(belief.n, r)
    m = marginal_features(belief)[pair_index(belief.n, *r)]
    return np.array([float(m @ likelihood_vector(j, pi)) for j in ANSWER_CLASSES])


def _posterior_log_density(belief: BeliefState) -> np.ndarray:
    """Per-sample log of the refined target: log R plus committed posterior factors."""
    h = belief.log_rewards.astype(float).copy()
    for fb in belief.feedbacks:
        post = feature_posterior(np.asarray(fb.rho), fb.answer, fb.reliability)
        p = pair_index(belief.n, *fb.relation)
        with np.errstate(divide="ignore"):
            h += np.log(post)[belief.features[:, p] - 1]
    return h


def acquisition(belief: BeliefState, r, pi: float) -> float:
    """Expected negative cross-entropy of the hypothetically updated belief.

    For each possible answer j, samples are reweighted by the closed-form
    feature posterior seeded by the current marginal at ``r``; the resulting
    weights score the current belief's log-density. Averaging over the
    predictive answer distribution gives the acquisition value; higher means
    the answer is expected to concentrate the belief on high-density graphs.
    """
    r = _check_relation(belief.n, r)
    e = ess(belief)
    if e < ESS_WARN_THRESHOLD:
        warnings.warn(f"effective sample size {e:.2f} < {ESS_WARN_THRESHOLD}; "
                      "acquisition estimates may be unstable")
    p = pair_index(belief.n, *r)
    w = normalized_weights(belief)
    h = _posterior_log_density(belief)
    finite = np.isfinite(h)
    m = marginal_features(belief)[p]
    feat_col = belief.features[:, p] - 1
    total = 0.0
    for j in ANSWER_CLASSES:
        pj = float(m @ likelihood_vector(j, pi))
        if pj <= 0.0:
            continue
        tilt = feature_posterior(m, j, pi)[feat_col]
        w_hyp = w * tilt
        w_hyp[~finite] = 0.0
        s = w_hyp.sum()
        if s <= 0.0:
            continue
        total += pj * float((w_hyp / s) @ np.where(finite, h, 0.0))
    return total


def select_query(
    belief: BeliefState,
    pi: float,
    strategy: str = "cross_entropy",
    rng: np.random.Generator | None = None,
):
    """Best next pair to ask about, or None when every pair has been asked."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; options: {STRATEGIES}")
    open_pairs = [rp for rp in node_pairs(belief.n) if rp not in belief.queried]
    if not open_pairs:
        return None
    if strategy == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return open_pairs[int(rng.integers(len(open_pairs)))]
    best, best_val = None, -np.inf
    for rp in open_pairs:  # lexicographic order; strict > keeps the first of a tie
        val = acquisition(belief, rp, pi)
        if val > best_val:
            best, best_val = rp, val
    return best


def simulated_expert(
    true_graph: AncestralGraph,
    r,
    pi: float,
    rng: np.random.Generator,
) -> int:
    """Truthful with probability pi, else uniform over the three wrong classes."""
    r = _check_relation(true_graph.n, r)
    truth = relation_feature(true_graph, r)
    if rng.random() < pi:
        return truth
    wrong = [f for f in ANSWER_CLASSES if f != truth]
    return wrong[int(rng.integers(3))]


def expected_score(belief: BeliefState) -> float:
    return float(normalized_weights(belief) @ belief.scores)


def expected_shd(belief: BeliefState, true_graph: AncestralGraph) -> float:
    truth = true_graph.feature_vector()
    per_sample = (belief.features != truth).sum(axis=1)
    return float(normalized_weights(belief) @ per_sample)


def _metrics(belief: BeliefState, true_graph) -> dict:
    out = {"expected_bic": expected_score(belief), "ess": ess(belief)}
    out["expected_shd"] = expected_shd(belief, true_graph) if true_graph is not None else None
    return out


def run_loop(
    belief: BeliefState,
    true_graph: AncestralGraph | None = None,
    answer_fn=None,
    pi: float = 0.9,
    strategy: str = "cross_entropy",
    budget: int | None = None,
    seed: int = 0,
) -> tuple[BeliefState, list[dict]]:
    """Iterated query/answer loop with per-step expectation tracking.

    Answers come from ``answer_fn(relation) -> f`` when given, otherwise from
    the simulated expert on ``true_graph``. The trace starts with the metrics
    of the initial belief (step 0) and appends one entry per committed answer.
    """
    if true_graph is None and answer_fn is None:
        raise ValueError("need a true graph or an answer callback")
    num_open = len(node_pairs(belief.n)) - len(belief.queried)
    if budget is None:
        budget = num_open
    if not 0 <= budget <= num_open:
        raise ValueError(f"budget {budget} outside 0..{num_open}")
    rng = np.random.default_rng(seed)
    trace = [{"step": 0, "query": None, "answer": None, **_metrics(belief, true_graph)}]
    for step in range(1, budget + 1):
        r = select_query(belief, pi, strategy=strategy, rng=rng)
        if r is None:
            break
        f = answer_fn(r) if answer_fn is not None else simulated_expert(true_graph, r, pi, rng)
        belief = update_belief(belief, r, f, pi)
        trace.append(
            {"step": step, "query": list(r), "answer": int(f), **_metrics(belief, true_graph)}
        )
    return belief, trace
