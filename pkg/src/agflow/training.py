"""Sequential construction sampler: rollouts, detailed-balance loss, training.

A trajectory starts at the empty graph and adds one edge per step until a
stop action. The sampler draws each step from a mixture of the learned
policy and the uniform distribution over valid actions (``alpha`` weighs
the learned part; alpha=1 at inference). Training minimizes, per observed
transition, the squared log detailed-balance residual

    log R(s') + log pi_B(s|s') + log pi_F(stop|s)
      - log R(s) - log pi_F(s'|s) - log pi_F(stop|s')

with one forward-side update (encoder + add/stop head) and one
removal-head update per batch. Rewards come from a score -> reward spec
calibrated on samples from the untrained (uniform) policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .errors import TrainingDivergedError
from .graphs import (
    AncestralGraph,
    STOP,
    action_from_index,
    action_index,
    apply_action,
    num_actions,
    removal_mask,
    valid_action_mask,
)
from .scoring import GraphScorer, RewardSpec, calibrate_reward, log_reward

TAPE_CHUNK = 64  # graphs per block-diagonal encoder chunk


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    alpha: float = 0.5
    lr: float = 1e-3
    seed: int = 0
    stop_loss: float = 0.1
    patience: int = 5
    temperature: float = 1.0
    calibration_samples: int = 1000
    embed_dim: int = pol.EMBED_DIM

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class Trajectory:
    """Construction path from the empty graph to a terminating graph."""

    states: list           # length T+1; states[-1] is the terminating graph
    actions: list          # length T+1; actions[-1] is Stop
    log_pf: list           # learned log pi_F(a_t | s_t), length T
    log_pb: list           # learned log pi_B(s_t | s_{t+1}), length T
    log_stop: list         # learned log pi_F(stop | s_t), length T+1

    @property
    def terminal(self) -> AncestralGraph:
        return self.states[-1]

    def validate(self) -> None:
        if not self.actions or self.actions[-1] != STOP:
            raise ValueError("trajectory must end with the stop action")
        if len(self.states) != len(self.actions):
            raise ValueError("need one action per state (last one stop)")
        for s, a, s_next in zip(self.states, self.actions, self.states[1:]):
            if apply_action(s, a).key != s_next.key:
                raise ValueError("consecutive states do not match the action")


class _PolicyCache:
    """Per-parameter-state memo of masked policies, keyed by graph bytes."""

    def __init__(self, params: pol.PolicyParams):
        self.params = params
        self._store: dict[bytes, tuple] = {}

    def lookup(self, g: AncestralGraph):
        hit = self._store.get(g.key)
        if hit is None:
            mask_f = valid_action_mask(g)
            mask_b = removal_mask(g)
            f, b = pol.plain_logits(self.params, [g])
            log_pf = pol.masked_log_softmax(f[0], mask_f)
            log_pb = (pol.masked_log_softmax(b[0], mask_b)
                      if mask_b.any() else np.full(mask_b.shape, -np.inf))
            hit = (mask_f, mask_b, log_pf, log_pb)
            self._store[g.key] = hit
        return hit


def _mixture_probs(log_pf: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    uniform = mask / mask.sum()
    probs = (1.0 - alpha) * uniform + alpha * np.exp(log_pf) * mask
    return probs / probs.sum()


def rollout(params: pol.PolicyParams, config: TrainConfig, n: int,
            rng: np.random.Generator, cache: _PolicyCache | None = None,
            alpha: float | None = None) -> Trajectory:
    """Sample one construction trajectory from the alpha-mixture policy."""
    if cache is None:
        cache = _PolicyCache(params)
    if alpha is None:
        alpha = config.alpha
    stop_idx = num_actions(n) - 1
    g = AncestralGraph.empty(n)
    states, actions = [g], []
    log_pf, log_pb, log_stop = [], [], []
    while True:
        mask_f, _, lpf, _ = cache.lookup(g)
        log_stop.append(float(lpf[stop_idx]))
        probs = _mixture_probs(lpf, mask_f.astype(np.float64), alpha)
        a_idx = int(rng.choice(probs.size, p=probs))
        if a_idx == stop_idx:
            actions.append(STOP)
            break
        action = action_from_index(n, a_idx)
        actions.append(action)
        log_pf.append(float(lpf[a_idx]))
        g = apply_action(g, action)
        states.append(g)
        _, _, _, lpb = cache.lookup(g)
        log_pb.append(float(lpb[a_idx]))  # removal slot shares the add index
    return Trajectory(states, actions, log_pf, log_pb, log_stop)


def db_residuals(log_r: np.ndarray, log_pf_action: np.ndarray,
                 log_stop_s: np.ndarray, log_stop_next: np.ndarray,
                 log_pb: np.ndarray) -> np.ndarray:
    """Per-transition log detailed-balance residuals; log_r has length T+1."""
    log_r = np.asarray(log_r, dtype=np.float64)
    return (log_r[1:] + np.asarray(log_pb) + log_stop_s
            - log_r[:-1] - np.asarray(log_pf_action) - log_stop_next)


def db_loss(traj: Trajectory, params: pol.PolicyParams, log_reward_fn) -> float:
    """Mean squared detailed-balance residual over a trajectory's transitions."""
    if len(traj.states) == 1:
        return 0.0
    cache = _PolicyCache(params)
    n = traj.states[0].n
    stop_idx = num_actions(n) - 1
    log_r = np.array([log_reward_fn(s) for s in traj.states])
    if not np.isfinite(log_r).all():
        raise ValueError("zero reward on a trajectory state")
    lpf, lpb, lstop = [], [], []
    for s, a in zip(traj.states[:-1], traj.actions[:-1]):
        mask_f, _, pf, _ = cache.lookup(s)
        lpf.append(pf[action_index(n, a)])
        lstop.append(pf[stop_idx])
    for s_next, a in zip(traj.states[1:], traj.actions[:-1]):
        _, _, pf, pb = cache.lookup(s_next)
        lpb.append(pb[action_index(n, a)])
    stop_next = [cache.lookup(s)[2][stop_idx] for s in traj.states[1:]]
    res = db_residuals(log_r, lpf, np.array(lstop), np.array(stop_next), lpb)
    return float(np.mean(res ** 2))


# ---------------------------------------------------------------------------
# batched training


def _batch_transitions(trajs: list[Trajectory], n: int):
    """Dedup states and transitions across a batch of trajectories.

    Returns (states, state_index, transition array, multiplicities) where each
    transition row is (s_idx, next_idx, action_idx).
    """
    state_by_key: dict[bytes, AncestralGraph] = {}
    counts: dict[tuple, int] = {}
    for traj in trajs:
        for s in traj.states:
            state_by_key.setdefault(s.key, s)
        for s, a, s_next in zip(traj.states, traj.actions, traj.states[1:]):
            counts[(s.key, s_next.key, action_index(n, a))] = \
                counts.get((s.key, s_next.key, action_index(n, a)), 0) + 1
    keys = sorted(state_by_key)  # stable order keeps runs reproducible
    index = {k: i for i, k in enumerate(keys)}
    states = [state_by_key[k] for k in keys]
    rows = sorted(counts)
    trans = np.array([[index[s], index[sp], a] for s, sp, a in rows],
                     dtype=int).reshape(-1, 3)
    mult = np.array([counts[r] for r in rows], dtype=np.float64)
    return states, index, trans, mult


def _stacked_log_policies(tensors, params, states, masks_f, masks_b):
    """Masked log-policies for every distinct state, chunked through the tape."""
    parts_f, parts_b = [], []
    for start in range(0, len(states), TAPE_CHUNK):
        chunk = states[start:start + TAPE_CHUNK]
        f, b = pol.tape_logits(tensors, params, chunk)
        parts_f.append(f)
        parts_b.append(b)
    logits_f = ad.concat(parts_f) if len(parts_f) > 1 else parts_f[0]
    logits_b = ad.concat(parts_b) if len(parts_b) > 1 else parts_b[0]
    log_pf = pol.tape_masked_log_softmax(logits_f, masks_f)
    # rows for edgeless states have no removal slots; mask them entirely and
    # never pick from them
    safe_b = masks_b.copy()
    empty_rows = ~masks_b.any(axis=1)
    safe_b[empty_rows, 0] = True
    log_pb = pol.tape_masked_log_softmax(logits_b, safe_b)
    return log_pf, log_pb


def _batch_loss(params, states, trans, mult, log_r, masks_f, masks_b):
    """Scalar tape loss: multiplicity-weighted mean squared DB residual."""
    tensors = pol.make_tensors(params)
    log_pf, log_pb = _stacked_log_policies(tensors, params, states, masks_f, masks_b)
    stop_idx = num_actions(params.n) - 1
    s_idx, sp_idx, a_idx = trans[:, 0], trans[:, 1], trans[:, 2]
    pf_a = ad.pick(log_pf, s_idx, a_idx)
    stop_s = ad.pick(log_pf, s_idx, np.full(len(s_idx), stop_idx))
    stop_sp = ad.pick(log_pf, sp_idx, np.full(len(sp_idx), stop_idx))
    pb = ad.pick(log_pb, sp_idx, a_idx)
    const_part = ad.const(log_r[sp_idx] - log_r[s_idx])
    res = ad.sub(ad.add(ad.add(const_part, pb), stop_s), ad.add(pf_a, stop_sp))
    w = ad.const(mult / mult.sum())
    loss = ad.tsum(ad.mul(w, ad.mul(res, res)))
    return loss, tensors


@dataclass
class TrainResult:
    params: pol.PolicyParams
    reward_spec: RewardSpec
    log: list = field(default_factory=list)
    stopped_early: bool = False
    config: TrainConfig | None = None


def _calibration_spec(n: int, scorer_score, config: TrainConfig,
                      rng: np.random.Generator) -> RewardSpec:
    """Score terminal graphs of the untrained (uniform) policy."""
    fresh = pol.PolicyParams.init(n, d=config.embed_dim, seed=config.seed)
    cache = _PolicyCache(fresh)
    scores = []
    for _ in range(config.calibration_samples):
        traj = rollout(fresh, config, n, rng, cache=cache, alpha=1.0)
        scores.append(scorer_score(traj.terminal))
    spec = calibrate_reward(scores)
    return replace(spec, temperature=config.temperature)


def train(data, config: TrainConfig, scorer: GraphScorer | None = None,
          progress=None) -> TrainResult:
    """Fit the construction policy to sample graphs proportionally to reward.

    ``progress``, when given, is called with each epoch record as it lands.
    """
    if scorer is None:
        scorer = GraphScorer(data)
    n = scorer.n
    if data.m < n + 1:
        raise ValueError(f"need at least {n + 1} rows, got {data.m}")
    rng = np.random.default_rng(config.seed)
    spec = _calibration_spec(n, scorer.score, config, rng)

    params = pol.PolicyParams.init(n, d=config.embed_dim, seed=config.seed)
    opt_f = ad.Adam(lr=config.lr)
    opt_b = ad.Adam(lr=config.lr)
    fwd_names = set(params.forward_names())
    bwd_names = set(params.backward_names())
    log_r_cache: dict[bytes, float] = {}

    def log_r_of(g: AncestralGraph) -> float:
        val = log_r_cache.get(g.key)
        if val is None:
            val = log_reward(scorer.score(g), spec)
            log_r_cache[g.key] = val
        return val

    records: list[dict] = []
    last_finite = params.copy()
    below = 0
    stopped = False
    for epoch in range(config.epochs):
        cache = _PolicyCache(params)
        trajs = [rollout(params, config, n, rng, cache=cache)
                 for _ in range(config.batch_size)]
        states, _, trans, mult = _batch_transitions(trajs, n)
        if len(trans) == 0:  # every rollout stopped immediately
            records.append({"epoch": epoch, "mean_loss": 0.0,
                            "mean_reward": float(np.mean(
                                [math.exp(min(log_r_of(t.terminal), 500.0))
                                 for t in trajs])),
                            "unique_graphs": 1})
            below += 1
            if below >= config.patience:
                stopped = True
                break
            continue
        masks_f = np.stack([valid_action_mask(s) for s in states])
        masks_b = np.stack([removal_mask(s) for s in states])
        log_r = np.array([log_r_of(s) for s in states])

        try:
            loss, tensors = _batch_loss(params, states, trans, mult,
                                        log_r, masks_f, masks_b)
            ad.grad(loss)
            mean_loss = float(loss.value)
            _step(opt_f, params, tensors, fwd_names)
            loss2, tensors2 = _batch_loss(params, states, trans, mult,
                                          log_r, masks_f, masks_b)
            ad.grad(loss2)
            _step(opt_b, params, tensors2, bwd_names)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"non-finite value at epoch {epoch}: {exc}",
                params=last_finite, log=records) from exc
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}", params=last_finite,
                log=records)
        last_finite = params.copy()

        terminals = [t.terminal for t in trajs]
        mean_reward = float(np.mean(
            [math.exp(min(log_r_of(g), 500.0)) for g in terminals]))
        records.append({
            "epoch": epoch,
            "mean_loss": mean_loss,
            "mean_reward": mean_reward,
            "unique_graphs": len({g.key for g in terminals}),
        })
        if progress is not None:
            progress(records[-1])
        below = below + 1 if mean_loss < config.stop_loss else 0
        if below >= config.patience:
            stopped = True
            break
    return TrainResult(params=params, reward_spec=spec, log=records,
                       stopped_early=stopped, config=config)


def _step(opt: ad.Adam, params: pol.PolicyParams, tensors, names: set) -> None:
    grads = {k: t.grad for k, t in tensors.items()
             if k in names and t.grad is not None}
    for g in grads.values():
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    opt.step(params.weights, grads)


def sample(params: pol.PolicyParams, log_reward_fn, count: int,
           seed: int) -> list[tuple[AncestralGraph, float]]:
    """Draw terminating graphs from the learned policy (alpha = 1)."""
    n = params.n
    config = TrainConfig(alpha=1.0, seed=seed)
    rng = np.random.default_rng(seed)
    cache = _PolicyCache(params)
    reward_cache: dict[bytes, float] = {}
    out = []
    for _ in range(count):
        traj = rollout(params, config, n, rng, cache=cache, alpha=1.0)
        g = traj.terminal
        lr = reward_cache.get(g.key)
        if lr is None:
            lr = float(log_reward_fn(g))
            reward_cache[g.key] = lr
        out.append((g, lr))
    return out


def empirical_distribution(samples, space) -> np.ndarray:
    """Frequency vector of sampled graphs over an enumerated space."""
    freq = np.zeros(space.size)
    for g, _ in samples:
        freq[space.index_of(g)] += 1.0
    return freq / freq.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
