"""Decoder-guided dynamic routing of source states into capsule groups.

Each source position competes for membership in Past (already translated),
Future (not yet translated) and Redundant (belongs to neither) capsules.
Assignment probabilities are refined over a fixed number of rounds; the
agreement score of every round is conditioned on the current decoder state,
so the same source sentence routes differently at every decoding step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, squash

__all__ = [
    "RoutingConfig",
    "RoutingWeights",
    "CapsuleBank",
    "AssignmentMatrix",
    "RoutingTrace",
    "squash",
    "compute_votes",
    "routing_round",
    "guided_dynamic_routing",
    "routing_forward",
    "category_mass",
]


@dataclass(frozen=True)
class RoutingConfig:
    """Capsule layout and iteration count.

    ``caps_per_category`` Past capsules, the same number of Future capsules,
    plus ``redundant_caps`` orphans, each of dimension ``capsule_dim``.
    """

    iterations: int = 3
    capsule_dim: int = 32
    caps_per_category: int = 2
    redundant_caps: int = 2

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.capsule_dim < 1:
            raise ValueError("capsule_dim must be >= 1")
        if self.caps_per_category < 1:
            raise ValueError("caps_per_category must be >= 1")
        if self.redundant_caps < 0:
            raise ValueError("redundant_caps must be >= 0")

    @property
    def total_caps(self) -> int:
        return 2 * self.caps_per_category + self.redundant_caps


class RoutingWeights:
    """Trainable routing parameters.

    * ``votes``: one d x d_c transformation per output capsule, shared across
      all source positions (J matrices total, stored as one (J, d, d_c) array).
    * ``guide``: maps the concatenation [decoder state; vote; capsule]
      (length d + 2 d_c) to d_c.
    * ``guide_v``: d_c vector turning the guide activation into a scalar
      logit increment.
    """

    def __init__(self, votes, guide, guide_v):
        self.votes = votes
        self.guide = guide
        self.guide_v = guide_v

    @classmethod
    def create(cls, store, rng, model_dim: int, cfg: RoutingConfig, prefix="routing"):
        j, dc = cfg.total_caps, cfg.capsule_dim
        votes = store.add(
            f"{prefix}.votes",
            T.xavier_uniform(rng, (j, model_dim, dc), model_dim, dc),
        )
        guide_in = model_dim + 2 * dc
        guide = store.add(
            f"{prefix}.guide", T.xavier_uniform(rng, (guide_in, dc), guide_in, dc)
        )
        # Zero logit vector: routing starts out uniform, the guide learns to
        # break the symmetry.
        guide_v = store.add(f"{prefix}.guide_v", np.zeros(dc))
        return cls(votes, guide, guide_v)


@dataclass
class CapsuleBank:
    """Final capsules of one decoding step, partitioned by category."""

    past: Tensor  # (n_per_category, d_c)
    future: Tensor  # (n_per_category, d_c)
    redundant: Tensor  # (redundant_caps, d_c)

    @property
    def all(self) -> Tensor:
        return T.concat([self.past, self.future, self.redundant], axis=0)


@dataclass
class AssignmentMatrix:
    """Routing result per source position: probabilities and raw logits.

    Rows of ``probs`` sum to 1 for unmasked positions and are zeroed for
    masked ones.
    """

    probs: np.ndarray  # (I, J)
    logits: np.ndarray  # (I, J)


@dataclass
class RoutingTrace:
    """Per-iteration snapshots for inspection dumps."""

    logits: list = field(default_factory=list)  # each (I, J)
    probs: list = field(default_factory=list)  # each (I, J)
    capsules: list = field(default_factory=list)  # each (J, d_c)

    def append(self, logits, probs, capsules):
        self.logits.append(np.array(logits))
        self.probs.append(np.array(probs))
        self.capsules.append(np.array(capsules))

    def __len__(self):
        return len(self.probs)


def compute_votes(h: Tensor, weights: RoutingWeights, mask=None) -> Tensor:
    """Vote of every source position for every capsule: v[i, j] = W_j h_i.

    ``h`` is (..., I, d); the result is (..., I, J, d_c).  Masked positions
    vote zero.
    """
    d = weights.votes.shape[1]
    if h.shape[-1] != d:
        raise T.ShapeError(
            f"source dim {h.shape[-1]} does not match vote matrices {weights.votes.shape}"
        )
    # (..., I, 1, 1, d) @ (J, d, dc) broadcasts to (..., I, J, 1, dc)
    expanded = T.reshape(h, h.shape[:-1] + (1, 1, d))
    votes = T.matmul(expanded, weights.votes.value)
    votes = T.reshape(votes, h.shape[:-1] + (weights.votes.shape[0], weights.votes.shape[2]))
    if mask is not None:
        votes = T.mul(votes, T.constant(mask[..., None, None]))
    return votes


def _masked_assignments(logits: Tensor, mask) -> Tensor:
    """Softmax over capsules, with masked source rows zeroed out."""
    probs = T.softmax(logits, axis=-1)
    if mask is not None:
        probs = T.mul(probs, T.constant(mask))
    return probs


def _routing_iteration(votes, logits, z, mask, weights):
    """One refinement round on batched shapes.

    votes  (B, I, J, dc), logits (B, S, I, J), z (B, S, d), mask (B, 1, I, 1)
    where S is the number of decoding steps routed simultaneously.
    Returns (probs, capsules, updated logits).
    """
    b_, s_, i_, j_ = logits.shape
    dc = votes.shape[-1]
    d = z.shape[-1]

    probs = _masked_assignments(logits, mask)

    # s_j = sum_i c_ij v_ij, done as one matmul per (batch, capsule):
    # (B, J, S, I) @ (B, J, I, dc) -> (B, J, S, dc)
    c_t = T.transpose(probs, (0, 3, 1, 2))
    v_t = T.transpose(votes, (0, 2, 1, 3))
    pooled = T.transpose(T.matmul(c_t, v_t), (0, 2, 1, 3))  # (B, S, J, dc)
    capsules = squash(pooled)

    # Agreement guided by the decoder state: b += v . tanh(W [z; vote; capsule])
    z_full = T.broadcast_to(T.reshape(z, (b_, s_, 1, 1, d)), (b_, s_, i_, j_, d))
    votes_full = T.broadcast_to(
        T.reshape(votes, (b_, 1, i_, j_, dc)), (b_, s_, i_, j_, dc)
    )
    caps_full = T.broadcast_to(
        T.reshape(capsules, (b_, s_, 1, j_, dc)), (b_, s_, i_, j_, dc)
    )
    joint = T.concat([z_full, votes_full, caps_full], axis=-1)
    hidden = T.tanh(T.matmul(joint, weights.guide.value))
    delta = T.matmul(hidden, T.reshape(weights.guide_v.value, (dc, 1)))
    new_logits = T.add(logits, T.reshape(delta, (b_, s_, i_, j_)))
    return probs, capsules, new_logits


def routing_round(votes: Tensor, logits: Tensor, z_t: Tensor, weights: RoutingWeights, mask=None):
    """Single unbatched round: votes (I, J, d_c), logits (I, J), z_t (d,).

    Returns (probs, capsules, updated logits) with shapes
    (I, J), (J, d_c), (I, J).
    """
    i_, j_, dc = votes.shape
    d = z_t.shape[-1]
    mask4 = None if mask is None else np.asarray(mask, dtype=float).reshape(1, 1, i_, 1)
    probs, capsules, new_logits = _routing_iteration(
        T.reshape(votes, (1, i_, j_, dc)),
        T.reshape(logits, (1, 1, i_, j_)),
        T.reshape(z_t, (1, 1, d)),
        mask4,
        weights,
    )
    return (
        T.reshape(probs, (i_, j_)),
        T.reshape(capsules, (j_, dc)),
        T.reshape(new_logits, (i_, j_)),
    )


def routing_forward(
    h: Tensor,
    src_mask,
    z: Tensor,
    weights: RoutingWeights,
    cfg: RoutingConfig,
    record_trace: bool = False,
):
    """Route a batch of source encodings for all decoding steps at once.

    h (B, I, d), src_mask (B, I) with 1 = real token, z (B, S, d).
    Returns (capsules (B, S, J, dc), probs (B, S, I, J), logits, traces)
    where traces is a per-iteration list of (logits, probs, capsules)
    numpy snapshots or None.
    """
    b_, i_, _ = h.shape
    s_ = z.shape[1]
    j_ = cfg.total_caps
    mask = None if src_mask is None else np.asarray(src_mask, dtype=h.data.dtype)
    if mask is not None and not mask.any():
        raise ValueError("routing requires at least one unmasked source position")
    mask4 = None if mask is None else mask.reshape(b_, 1, i_, 1)

    votes = compute_votes(h, weights, mask=mask)
    # Routing logits are transient state, reset to zero for every step.
    logits = T.constant(np.zeros((b_, s_, i_, j_), dtype=h.data.dtype))
    trace = [] if record_trace else None
    probs = capsules = None
    for _ in range(cfg.iterations):
        probs, capsules, logits = _routing_iteration(votes, logits, z, mask4, weights)
        if record_trace:
            trace.append((logits.data.copy(), probs.data.copy(), capsules.data.copy()))
    return capsules, probs, logits, trace


def guided_dynamic_routing(
    src,
    z_t,
    cfg: RoutingConfig,
    weights: RoutingWeights,
    record_trace: bool = False,
):
    """Route one source sentence for one decoding step.

    ``src`` is a SourceEncoding (or any object with ``states`` (I, d) and
    ``mask`` (I,)); ``z_t`` is the guiding decoder state (d,).  Runs
    ``cfg.iterations`` rounds from zero logits, votes computed once up
    front, and returns (CapsuleBank, AssignmentMatrix, RoutingTrace|None).
    """
    states = src.states if hasattr(src, "states") else src
    mask = getattr(src, "mask", None)
    states = states if isinstance(states, Tensor) else T.constant(states)
    z_t = z_t if isinstance(z_t, Tensor) else T.constant(z_t)
    i_, d = states.shape

    mask_arr = None if mask is None else np.asarray(mask, dtype=float)
    caps, probs, logits, trace = routing_forward(
        T.reshape(states, (1, i_, d)),
        None if mask_arr is None else mask_arr.reshape(1, i_),
        T.reshape(z_t, (1, 1, d)),
        weights,
        cfg,
        record_trace=record_trace,
    )
    j_, dc = cfg.total_caps, cfg.capsule_dim
    caps2 = T.reshape(caps, (j_, dc))
    n = cfg.caps_per_category
    bank = CapsuleBank(
        past=T.narrow(caps2, 0, 0, n),
        future=T.narrow(caps2, 0, n, n),
        redundant=T.narrow(caps2, 0, 2 * n, cfg.redundant_caps),
    )
    assign = AssignmentMatrix(
        probs=probs.data.reshape(i_, j_).copy(),
        logits=logits.data.reshape(i_, j_).copy(),
    )
    full_trace = None
    if record_trace:
        full_trace = RoutingTrace()
        for lg, pr, cp in trace:
            full_trace.append(lg.reshape(i_, j_), pr.reshape(i_, j_), cp.reshape(j_, dc))
    return bank, assign, full_trace


def category_mass(assign, cfg: RoutingConfig) -> np.ndarray:
    """Collapse per-capsule assignments to (I, 3) Past/Future/Redundant mass.

    Unmasked rows sum to 1; masked rows were already zeroed and stay zero.
    """
    probs = assign.probs if isinstance(assign, AssignmentMatrix) else np.asarray(assign)
    n = cfg.caps_per_category
    past = probs[..., :n].sum(axis=-1)
    future = probs[..., n : 2 * n].sum(axis=-1)
    redundant = probs[..., 2 * n :].sum(axis=-1)
    return np.stack([past, future, redundant], axis=-1)
