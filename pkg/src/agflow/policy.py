"""Graph encoder and action heads for the sequential graph sampler.

Structure: node inputs are a one-hot id concatenated with three per-type
degree counts. Two message-passing rounds follow, each aggregating
neighbor features through per-edge-type linear transforms (forward along
directed edges, reverse, and bidirected) with a unit self term, then a
two-linear perceptron. Sum pooling gives one vector per graph, and two
three-layer perceptrons map it to action logits: one over the full add/stop
action set, one over edge-removal slots.

Every computation exists twice, deliberately: a fast plain-numpy path for
rollouts and a tape path (autodiff Tensors) for training. The two must stay
operation-for-operation identical — tests assert bit equality — so edit
both together.

Final head layers are zero-initialized, which makes the untrained policy
exactly uniform over valid actions; hidden layers use He-style scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import AncestralGraph, num_actions, removal_mask, valid_action_mask

EMBED_DIM = 256
MASK_SHIFT = -1e5
CHECKPOINT_VERSION = 1

_GIN_LAYERS = ("gin1", "gin2")
_HEADS = ("fhead", "bhead")


def _he(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class PolicyParams:
    """Named weight arrays plus the sizes needed to interpret them."""

    n: int
    d: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, n: int, d: int = EMBED_DIM, seed: int = 0) -> "PolicyParams":
        if n < 2:
            raise ValueError("need n >= 2")
        rng = np.random.default_rng(seed)
        din = n + 3
        a_out = num_actions(n)
        b_out = a_out - 1
        w: dict[str, np.ndarray] = {}
        for layer, size in (("gin1", din), ("gin2", d)):
            for t in ("fwd", "rev", "bi"):
                w[f"{layer}.{t}"] = _he(rng, size, (size, size))
            w[f"{layer}.w1"] = _he(rng, size, (size, d))
            w[f"{layer}.b1"] = np.zeros(d)
            w[f"{layer}.w2"] = _he(rng, d, (d, d))
            w[f"{layer}.b2"] = np.zeros(d)
        for head, out in (("fhead", a_out), ("bhead", b_out)):
            w[f"{head}.w1"] = _he(rng, d, (d, d))
            w[f"{head}.b1"] = np.zeros(d)
            w[f"{head}.w2"] = _he(rng, d, (d, d))
            w[f"{head}.b2"] = np.zeros(d)
            # zero final layer: untrained logits are identically zero
            w[f"{head}.w3"] = np.zeros((d, out))
            w[f"{head}.b3"] = np.zeros(out)
        return cls(n=n, d=d, weights=w)

    @property
    def num_forward_actions(self) -> int:
        return num_actions(self.n)

    def names(self) -> list[str]:
        return sorted(self.weights)

    def forward_names(self) -> list[str]:
        """Encoder plus add/stop head: the parameters of the forward policy."""
        return [k for k in self.names() if not k.startswith("bhead.")]

    def backward_names(self) -> list[str]:
        return [k for k in self.names() if k.startswith("bhead.")]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.n, self.d, {k: v.copy() for k, v in self.weights.items()})


def node_inputs(g: AncestralGraph, ablate_ids: bool = False) -> np.ndarray:
    """One-hot id columns followed by out-, in-, and bidirected-degree counts."""
    n = g.n
    dirm = np.asarray(g.dir, dtype=np.float64)
    bim = np.asarray(g.bidir, dtype=np.float64)
    ids = np.zeros((n, n)) if ablate_ids else np.eye(n)
    deg = np.column_stack([dirm.sum(axis=0), dirm.sum(axis=1), bim.sum(axis=1)])
    return np.column_stack([ids, deg])


def stacked_inputs(graphs: list[AncestralGraph], ablate_ids: bool = False):
    """Block-stack node inputs and block-diagonal adjacencies for a batch."""
    K = len(graphs)
    n = graphs[0].n
    X = np.vstack([node_inputs(g, ablate_ids) for g in graphs])
    A_f = np.zeros((K * n, K * n))
    A_r = np.zeros((K * n, K * n))
    A_b = np.zeros((K * n, K * n))
    for k, g in enumerate(graphs):
        s = slice(k * n, (k + 1) * n)
        A_f[s, s] = np.asarray(g.dir, dtype=np.float64)
        A_r[s, s] = np.asarray(g.dir, dtype=np.float64).T
        A_b[s, s] = np.asarray(g.bidir, dtype=np.float64)
    return X, A_f, A_r, A_b


def _lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, ad.LEAKY_SLOPE * x)


def plain_node_embeddings(params: PolicyParams, graphs, ablate_ids: bool = False) -> np.ndarray:
    """(K*n) x d node embeddings; mirror of the tape path below."""
    w = params.weights
    H, A_f, A_r, A_b = stacked_inputs(graphs, ablate_ids)
    for layer in _GIN_LAYERS:
        M = H + A_f @ (H @ w[f"{layer}.fwd"]) + A_r @ (H @ w[f"{layer}.rev"]) \
            + A_b @ (H @ w[f"{layer}.bi"])
        H = _lrelu(M @ w[f"{layer}.w1"] + w[f"{layer}.b1"]) @ w[f"{layer}.w2"] + w[f"{layer}.b2"]
    return H


def plain_logits(params: PolicyParams, graphs) -> tuple[np.ndarray, np.ndarray]:
    """Forward and removal logits for a batch of graphs, no tape."""
    w = params.weights
    K, n = len(graphs), params.n
    H = plain_node_embeddings(params, graphs)
    pooled = H.reshape(K, n, params.d).sum(axis=1)
    out = []
    for head in _HEADS:
        y = _lrelu(_lrelu(pooled @ w[f"{head}.w1"] + w[f"{head}.b1"])
                   @ w[f"{head}.w2"] + w[f"{head}.b2"]) @ w[f"{head}.w3"] + w[f"{head}.b3"]
        out.append(y)
    return out[0], out[1]


def encode(g: AncestralGraph, params: PolicyParams, ablate_ids: bool = False) -> np.ndarray:
    """n x d node embeddings for one graph."""
    return plain_node_embeddings(params, [g], ablate_ids)


def make_tensors(params: PolicyParams) -> dict[str, ad.Tensor]:
    return {k: ad.param(v) for k, v in params.weights.items()}


def tape_logits(tensors: dict[str, ad.Tensor], params: PolicyParams, graphs):
    """Tape twin of :func:`plain_logits`; keep the op order in sync."""
    K, n = len(graphs), params.n
    X, A_f, A_r, A_b = stacked_inputs(graphs)
    H = ad.const(X)
    cf, cr, cb = ad.const(A_f), ad.const(A_r), ad.const(A_b)
    for layer in _GIN_LAYERS:
        M = ad.add(
            ad.add(
                ad.add(H, ad.matmul(cf, ad.matmul(H, tensors[f"{layer}.fwd"]))),
                ad.matmul(cr, ad.matmul(H, tensors[f"{layer}.rev"])),
            ),
            ad.matmul(cb, ad.matmul(H, tensors[f"{layer}.bi"])),
        )
        inner = ad.leaky_relu(ad.add(ad.matmul(M, tensors[f"{layer}.w1"]), tensors[f"{layer}.b1"]))
        H = ad.add(ad.matmul(inner, tensors[f"{layer}.w2"]), tensors[f"{layer}.b2"])
    pooled = ad.tsum(ad.reshape(H, (K, n, params.d)), axis=1)
    out = []
    for head in _HEADS:
        h1 = ad.leaky_relu(ad.add(ad.matmul(pooled, tensors[f"{head}.w1"]), tensors[f"{head}.b1"]))
        h2 = ad.leaky_relu(ad.add(ad.matmul(h1, tensors[f"{head}.w2"]), tensors[f"{head}.b2"]))
        out.append(ad.add(ad.matmul(h2, tensors[f"{head}.w3"]), tensors[f"{head}.b3"]))
    return out[0], out[1]


def masked_logits(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask.astype(np.float64)
    return y * m + MASK_SHIFT * (1.0 - m)


def masked_softmax(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = masked_logits(y, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = masked_logits(y, mask)
    shift = z.max(axis=-1, keepdims=True)
    return z - (np.log(np.exp(z - shift).sum(axis=-1, keepdims=True)) + shift)


def tape_masked_log_softmax(y: ad.Tensor, masks: np.ndarray) -> ad.Tensor:
    m = masks.astype(np.float64)
    z = ad.add(ad.mul(y, ad.const(m)), ad.const(MASK_SHIFT * (1.0 - m)))
    return ad.log_softmax(z, axis=-1)


@dataclass(frozen=True)
class MaskedDistribution:
    probabilities: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        p, m = self.probabilities, self.mask.astype(bool)
        if p.shape != m.shape:
            raise ValueError("probability/mask shape mismatch")
        if abs(float(p.sum()) - 1.0) > 1e-8:
            raise ValueError(f"probabilities sum to {p.sum()}, not 1")
        if (p[~m] > 1e-30).any():
            raise ValueError("masked action carries probability mass")


def forward_policy(g: AncestralGraph, params: PolicyParams,
                   mask: np.ndarray | None = None) -> MaskedDistribution:
    """Action distribution over 3*C(n,2)+1 slots with invalid actions masked."""
    if mask is None:
        mask = valid_action_mask(g)
    if not mask.any():
        raise ValueError("mask must leave at least the stop action")
    y, _ = plain_logits(params, [g])
    return MaskedDistribution(masked_softmax(y[0], mask), mask)


def backward_policy(g: AncestralGraph, params: PolicyParams) -> MaskedDistribution:
    """Removal distribution over the graph's present edges."""
    mask = removal_mask(g)
    if not mask.any():
        raise ValueError("backward policy undefined on the empty graph")
    _, y = plain_logits(params, [g])
    return MaskedDistribution(masked_softmax(y[0], mask), mask)


def save_checkpoint(path, params: PolicyParams, meta: dict | None = None) -> None:
    """Single-file archive: weight arrays plus a JSON meta record."""
    payload = dict(params.weights)
    header = {"version": CHECKPOINT_VERSION, "n": params.n, "d": params.d}
    if meta:
        header["meta"] = meta
    payload["__meta__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with np.load(path) as archive:
        header = json.loads(bytes(archive["__meta__"].tobytes()).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        weights = {k: archive[k].astype(np.float64) for k in archive.files if k != "__meta__"}
    params = PolicyParams(n=int(header["n"]), d=int(header["d"]), weights=weights)
    return params, header.get("meta", {})
