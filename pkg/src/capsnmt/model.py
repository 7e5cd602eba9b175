"""Full model: backbone + routing + holistic context + training objective.

The decoder state of every step routes the source encodings into Past,
Future and Redundant capsules; Past and Future aggregates join the decoder
state in a residual feed-forward block whose output feeds the softmax.
Two auxiliary losses supervise the capsules: a bag-of-words loss making
Past/Future predictive of the already/not-yet generated target words, and
a squared-error agreement loss tying them to averaged decoder states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, SourceEncoding
from .config import ModelConfig
from .data import ParallelBatch
from .routing import CapsuleBank, RoutingWeights, routing_forward
from .tensor import ParameterStore, Tensor


@dataclass
class LossBundle:
    """Scalar loss components; total = nll + l_bow * bow + l_bca * bca."""

    nll: Tensor
    bow: Tensor
    bca: Tensor
    total: Tensor
    lambda_bow: float
    lambda_bca: float

    def floats(self) -> dict:
        return {
            "nll": self.nll.item(),
            "bow": self.bow.item(),
            "bca": self.bca.item(),
            "total": self.total.item(),
        }


def total_loss(nll, bow, bca, lambda_bow: float, lambda_bca: float) -> LossBundle:
    if lambda_bow < 0 or lambda_bca < 0:
        raise ValueError("loss weights must be non-negative")
    total = T.add(nll, T.add(T.scale(bow, lambda_bow), T.scale(bca, lambda_bca)))
    return LossBundle(
        nll=nll, bow=bow, bca=bca, total=total,
        lambda_bow=lambda_bow, lambda_bca=lambda_bca,
    )


def nll_loss(probs: Tensor, gold, mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of the gold ids over unmasked positions.

    ``probs`` (..., V) must be valid distributions; with label smoothing s
    the target distribution is (1-s) one-hot + s/V uniform.
    """
    gold = np.asarray(gold)
    vocab = probs.shape[-1]
    if gold.min() < 0 or gold.max() >= vocab:
        raise ValueError(f"gold id out of range [0, {vocab})")
    if label_smoothing:
        logp = T.log(probs)
        picked = T.gather_last(logp, gold)
        uniform = T.reduce_mean(logp, axis=-1)
        per_pos = T.add(
            T.scale(picked, 1.0 - label_smoothing),
            T.scale(uniform, label_smoothing),
        )
    else:
        per_pos = T.log(T.gather_last(probs, gold))
    if mask is None:
        mask = np.ones(gold.shape)
    mask = np.asarray(mask, dtype=float)
    denom = float(mask.sum())
    if denom == 0:
        raise ValueError("nll_loss: empty mask")
    summed = T.reduce_sum(T.mul(per_pos, T.constant(mask)))
    return T.scale(summed, -1.0 / denom)


def _bag_counts(gold: np.ndarray, mask: np.ndarray, vocab: int, exclusive_past: bool):
    """Multiset counts of the preceding / subsequent target bags per step.

    Returns (pre, sub), each (B, T, V): pre[b, t, v] counts occurrences of v
    in y_1..y_t (or y_1..y_{t-1} when exclusive) and sub in y_t..y_T.
    """
    b, t = gold.shape
    onehot = np.zeros((b, t, vocab))
    np.put_along_axis(onehot, gold[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    pre = np.cumsum(onehot, axis=1)
    sub = pre[:, -1:, :] - pre + onehot
    if exclusive_past:
        pre = pre - onehot
    return pre, sub


class Model:
    """Routed sequence-to-sequence model over a pair of vocabularies."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.rcfg = cfg.routing()
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.params, rng, cfg)
        self.routing_weights = RoutingWeights.create(self.params, rng, cfg.dim, self.rcfg)

        d, v = cfg.dim, cfg.tgt_vocab
        agg = self.rcfg.caps_per_category * self.rcfg.capsule_dim
        self.agg_dim = agg
        joint = d + 2 * agg
        self.ctx_w1 = self.params.add(
            "holistic.w1", T.xavier_uniform(rng, (joint, cfg.ffn_dim), joint, cfg.ffn_dim)
        )
        self.ctx_b1 = self.params.add("holistic.b1", np.zeros(cfg.ffn_dim))
        self.ctx_w2 = self.params.add(
            "holistic.w2", T.xavier_uniform(rng, (cfg.ffn_dim, d), cfg.ffn_dim, d)
        )
        self.ctx_b2 = self.params.add("holistic.b2", np.zeros(d))
        if cfg.norm_after_routing:
            self.ctx_norm_gain = self.params.add("holistic.norm_gain", np.ones(d))
            self.ctx_norm_bias = self.params.add("holistic.norm_bias", np.zeros(d))
        self.out_w = self.params.add("output.w", T.xavier_uniform(rng, (d, v), d, v))
        self.out_b = self.params.add("output.b", np.zeros(v))
        self.bow_past = self.params.add(
            "bow.past", T.xavier_uniform(rng, (agg, d), agg, d)
        )
        self.bow_future = self.params.add(
            "bow.future", T.xavier_uniform(rng, (agg, d), agg, d)
        )
        self.bca_past = self.params.add(
            "bca.past", T.xavier_uniform(rng, (d, agg), d, agg)
        )
        self.bca_future = self.params.add(
            "bca.future", T.xavier_uniform(rng, (d, agg), d, agg)
        )

    # -- capsule plumbing ---------------------------------------------------

    def _aggregates(self, capsules: Tensor):
        """Concatenate each category's capsules: (B, S, J, dc) -> 2x (B, S, agg)."""
        b, s, _, dc = capsules.shape
        n = self.rcfg.caps_per_category
        past = T.reshape(T.narrow(capsules, 2, 0, n), (b, s, n * dc))
        future = T.reshape(T.narrow(capsules, 2, n, n), (b, s, n * dc))
        return past, future

    def _holistic(self, z: Tensor, capsules: Tensor) -> Tensor:
        """Residual feed-forward mixing z with Past/Future aggregates."""
        past, future = self._aggregates(capsules)
        joint = T.concat([z, past, future], axis=-1)
        hidden = T.tanh(T.add(T.matmul(joint, self.ctx_w1.value), self.ctx_b1.value))
        mixed = T.add(T.matmul(hidden, self.ctx_w2.value), self.ctx_b2.value)
        return T.add(mixed, z)

    def holistic_context(self, z_t, caps: CapsuleBank) -> Tensor:
        """Single-step surface: z_t (d,) with a CapsuleBank -> (d,).

        Redundant capsules are deliberately not part of the mix; they only
        shape the routing competition.
        """
        z_t = z_t if isinstance(z_t, Tensor) else T.constant(z_t)
        d = z_t.shape[-1]
        n, dc = self.rcfg.caps_per_category, self.rcfg.capsule_dim
        z4 = T.reshape(z_t, (1, 1, d))
        caps4 = T.reshape(T.concat([caps.past, caps.future], axis=0), (1, 1, 2 * n, dc))
        # _aggregates slices categories out of a full (.., J, dc) block; build
        # a block with just past+future so redundant entries cannot leak in.
        out = self._holistic(z4, caps4)
        return T.reshape(out, (d,))

    def _post_routing(self, o: Tensor) -> Tensor:
        if self.cfg.norm_after_routing:
            return T.layer_norm(o, self.ctx_norm_gain.value, self.ctx_norm_bias.value)
        return o

    def output_distribution(self, o) -> Tensor:
        """softmax of the learned projection of the holistic context."""
        o = o if isinstance(o, Tensor) else T.constant(o)
        squeeze = o.ndim == 1
        if squeeze:
            o = T.reshape(o, (1,) + o.shape)
        logits = T.add(T.matmul(o, self.out_w.value), self.out_b.value)
        probs = T.softmax(logits, axis=-1)
        return T.reshape(probs, probs.shape[1:]) if squeeze else probs

    # -- auxiliary losses ---------------------------------------------------

    def _bow_log_probs(self, aggregate: Tensor, head) -> Tensor:
        """Vocabulary log-probabilities scored by one bag-of-words head."""
        emb = self.backbone.tgt_embed.value
        proj = T.matmul(aggregate, head.value)  # (B, S, d)
        scores = T.matmul(proj, T.transpose(emb, (1, 0)))  # (B, S, V)
        return T.log_softmax(scores, axis=-1)

    def bow_loss(self, capsules: Tensor, gold, tgt_mask) -> Tensor:
        """Past capsules must predict the preceding target bag, Future the rest.

        For each step the bag log-likelihood is the count-weighted sum of the
        head's log-probabilities; sentences are averaged over their own
        length, then over the batch.
        """
        gold = np.asarray(gold)
        mask = np.asarray(tgt_mask, dtype=float)
        past, future = self._aggregates(capsules)
        logp_pre = self._bow_log_probs(past, self.bow_past)
        logp_sub = self._bow_log_probs(future, self.bow_future)
        pre_counts, sub_counts = _bag_counts(
            gold, mask, self.cfg.tgt_vocab, self.cfg.bow_exclusive_past
        )
        term_pre = T.reduce_sum(T.mul(logp_pre, T.constant(pre_counts)), axis=-1)
        term_sub = T.reduce_sum(T.mul(logp_sub, T.constant(sub_counts)), axis=-1)
        lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        weights = mask / lengths  # (B, T): 1/T_b on real steps
        per_sentence = T.reduce_sum(
            T.mul(T.add(term_pre, term_sub), T.constant(weights)), axis=1
        )
        return T.scale(T.reduce_mean(per_sentence), -1.0)

    def bca_loss(self, capsules: Tensor, z: Tensor, tgt_mask) -> Tensor:
        """Squared distance between capsule aggregates and projected means of
        the preceding / subsequent decoder states.

        The state means are constants: gradient flows into the capsules and
        the projections only, so the decoder is not pulled toward the capsules.
        """
        mask = np.asarray(tgt_mask, dtype=float)
        z_data = z.data * mask[..., None]
        pre_sum = np.cumsum(z_data, axis=1)
        counts = np.cumsum(mask, axis=1)
        pre_mean = pre_sum / np.maximum(counts, 1.0)[..., None]
        sub_sum = pre_sum[:, -1:, :] - pre_sum + z_data
        sub_counts = counts[:, -1:] - counts + mask
        sub_mean = sub_sum / np.maximum(sub_counts, 1.0)[..., None]

        past, future = self._aggregates(capsules)
        proj_pre = T.matmul(T.constant(pre_mean), self.bca_past.value)
        proj_sub = T.matmul(T.constant(sub_mean), self.bca_future.value)
        diff_p = T.sub(past, proj_pre)
        diff_f = T.sub(future, proj_sub)
        per_step = T.add(
            T.reduce_sum(T.mul(diff_p, diff_p), axis=-1),
            T.reduce_sum(T.mul(diff_f, diff_f), axis=-1),
        )
        lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        per_sentence = T.reduce_sum(T.mul(per_step, T.constant(mask / lengths)), axis=1)
        return T.reduce_mean(per_sentence)

    # -- full passes ----------------------------------------------------------

    def encode(self, src_ids, src_mask) -> SourceEncoding:
        return self.backbone.encode(src_ids, src_mask)

    def forward_states(self, batch: ParallelBatch):
        src_enc = self.backbone.encode(batch.src, batch.src_mask)
        dec_states = self.backbone.decode_states(
            batch.decoder_input(), batch.tgt_mask, src_enc
        )
        return src_enc, dec_states

    def forward_train(self, batch: ParallelBatch, record_routing: bool = False):
        """Differentiable pipeline from token ids to the LossBundle.

        Returns (bundle, info); info carries the routing assignments
        (B, T, I, J) and optional per-iteration traces for inspection.
        """
        src_enc, dec_states = self.forward_states(batch)
        info = {}
        if self.cfg.use_gdr:
            capsules, assign, _, trace = routing_forward(
                src_enc.states,
                src_enc.mask,
                dec_states.states,
                self.routing_weights,
                self.rcfg,
                record_trace=record_routing,
            )
            o = self._post_routing(self._holistic(dec_states.states, capsules))
            info["assignments"] = assign.data
            info["trace"] = trace
        else:
            capsules = None
            o = self._post_routing(dec_states.states)
        probs = self.output_distribution(o)
        info["probs"] = probs.data
        nll = nll_loss(probs, batch.tgt, batch.tgt_mask, self.cfg.label_smoothing)
        if capsules is not None:
            bow = self.bow_loss(capsules, batch.tgt, batch.tgt_mask)
            bca = self.bca_loss(capsules, dec_states.states, batch.tgt_mask)
        else:
            bow = T.constant(np.zeros(()))
            bca = T.constant(np.zeros(()))
        bundle = total_loss(nll, bow, bca, self.cfg.lambda_bow, self.cfg.lambda_bca)
        return bundle, info

    def step_distribution(self, src_enc: SourceEncoding, prefix_ids):
        """Next-token distribution for each prefix row during generation.

        ``prefix_ids`` (B, t) starts with BOS.  Routing runs with the live
        decoder state of the final position only.
        """
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids))
        b, t = prefix_ids.shape
        mask = np.ones((b, t))
        dec_states = self.backbone.decode_states(prefix_ids, mask, src_enc)
        z_last = T.narrow(dec_states.states, 1, t - 1, 1)  # (B, 1, d)
        if self.cfg.use_gdr:
            capsules, assign, _, trace = routing_forward(
                src_enc.states, src_enc.mask, z_last,
                self.routing_weights, self.rcfg,
            )
            o = self._post_routing(self._holistic(z_last, capsules))
            assign_data = assign.data[:, 0]
        else:
            o = self._post_routing(z_last)
            assign_data = None
        probs = self.output_distribution(o)
        return probs.data[:, 0, :], assign_data
