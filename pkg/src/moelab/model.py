"""Deterministic mixture-of-experts building blocks.

A model is an embedding table, a stack of MoE blocks (standardise,
route, gated expert mixture, residual add) and a linear class head.
Routing mechanisms are passed in as callables so this module stays
independent of how decisions are produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .exceptions import NumericError, ShapeError, UsageError
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden_dim: int        # D
    experts: int           # N
    active_experts: int    # K
    expert_hidden: int     # F, defaults to 2*D when built via `default`
    classes: int
    vocab: int

    def __post_init__(self):
        for name in ("layers", "hidden_dim", "experts", "active_experts", "expert_hidden", "classes", "vocab"):
            if getattr(self, name) <= 0:
                raise UsageError(f"ModelConfig.{name} must be positive")
        if self.active_experts > self.experts:
            raise UsageError("active_experts must not exceed experts")

    @classmethod
    def default(cls, layers=4, hidden_dim=32, experts=8, active_experts=2, classes=4, vocab=256, expert_hidden=None):
        return cls(layers, hidden_dim, experts, active_experts,
                   expert_hidden if expert_hidden is not None else 2 * hidden_dim, classes, vocab)


@dataclass
class ExpertFFN:
    w_up: Tensor     # D x F
    w_gate: Tensor   # D x F
    w_down: Tensor   # F x D

    @classmethod
    def init(cls, d: int, f: int, rng: Rng, track: bool = True) -> "ExpertFFN":
        return cls(
            Tensor(rng.normal((d, f)) / np.sqrt(d), track=track),
            Tensor(rng.normal((d, f)) / np.sqrt(d), track=track),
            Tensor(rng.normal((f, d)) / np.sqrt(f), track=track),
        )

    def params(self) -> list[Tensor]:
        return [self.w_up, self.w_gate, self.w_down]


@dataclass
class MoELayer:
    w_ec: Tensor               # D x N expert-centroid matrix, column i is centroid e_i
    experts: list[ExpertFFN]
    k: int

    def __post_init__(self):
        n = self.w_ec.shape[1]
        if not 1 <= self.k <= n:
            raise UsageError(f"k={self.k} must satisfy 1 <= k <= {n}")
        if len(self.experts) != n:
            raise UsageError(f"layer has {len(self.experts)} experts but {n} centroids")

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng) -> "MoELayer":
        w = Tensor(rng.child(0).normal((cfg.hidden_dim, cfg.experts)) / np.sqrt(cfg.hidden_dim), track=True)
        experts = [ExpertFFN.init(cfg.hidden_dim, cfg.expert_hidden, rng.child(1 + i)) for i in range(cfg.experts)]
        return cls(w, experts, cfg.active_experts)

    def params(self) -> list[Tensor]:
        out = [self.w_ec]
        for e in self.experts:
            out.extend(e.params())
        return out


@dataclass
class RoutingDecision:
    """Per-token routing outcome: logits, probabilities, Top-K set, gates."""

    logits: Tensor    # length-N
    probs: Tensor     # length-N simplex
    selected: tuple[int, ...]
    gates: Tensor     # length-N, nonzero exactly on selected, sums to 1

    def check(self) -> None:
        p = self.probs.data
        g = self.gates.data
        assert abs(p.sum() - 1.0) < 1e-10, "probs must sum to 1"
        assert abs(g.sum() - 1.0) < 1e-10, "gates must sum to 1"
        assert np.all(g >= 0), "gates must be nonnegative"
        support = tuple(int(i) for i in np.nonzero(g)[0])
        assert support == tuple(sorted(self.selected)), "gate support must equal the selected set"


class RouterFn(Protocol):
    def route(self, u: Tensor, rng: Rng | None, mode: str) -> RoutingDecision: ...


def score_experts(u: Tensor, layer: MoELayer) -> Tensor:
    """Expert logits l = u @ W_EC."""
    if not np.isfinite(u.data).all():
        raise NumericError("score_experts input is not finite")
    return T.matmul(u, layer.w_ec)


def topk_indices(values: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest values; ties break toward the lowest index."""
    order = np.argsort(-values, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def route_topk(probs: Tensor, k: int, logits: Tensor | None = None) -> RoutingDecision:
    """Hard Top-K selection with renormalised gates.

    When no logits are supplied the decision records log(probs), a logit
    vector consistent with the probabilities.
    """
    n = probs.shape[0]
    if k > n:
        raise UsageError(f"k={k} exceeds expert count {n}")
    selected = topk_indices(probs.data, k)
    sel_probs = T.take(probs, list(selected))
    denom = T.tsum(sel_probs)
    gates_sel = T.divide(sel_probs, denom)
    gates = T.scatter_rows(gates_sel, list(selected), n)
    if logits is None:
        logits = Tensor(np.log(np.maximum(probs.data, 1e-300)))
    return RoutingDecision(logits=logits, probs=probs, selected=selected, gates=gates)


def decision_from_selection(logits: Tensor, probs: Tensor, selected: Sequence[int]) -> RoutingDecision:
    """Decision for an externally chosen expert set; gates renormalise probs."""
    n = probs.shape[0]
    selected = tuple(sorted(int(i) for i in selected))
    sel_probs = T.take(probs, list(selected))
    denom = T.tsum(sel_probs)
    gates_sel = T.divide(sel_probs, denom)
    gates = T.scatter_rows(gates_sel, list(selected), n)
    return RoutingDecision(logits=logits, probs=probs, selected=selected, gates=gates)


def expert_forward(u: Tensor, e: ExpertFFN) -> Tensor:
    """SwiGLU expert: (sigmoid(u W_up) * (u W_gate)) W_down.

    Accepts a length-D vector or an (R x D) matrix of rows.
    """
    up = T.sigmoid(T.matmul(u, e.w_up))
    gate = T.matmul(u, e.w_gate)
    return T.matmul(T.multiply(up, gate), e.w_down)


def moe_forward(u: Tensor, layer: MoELayer, decision: RoutingDecision) -> Tensor:
    """Gate-weighted sum of the selected experts' outputs."""
    out = None
    for i in decision.selected:
        gi = T.take(decision.gates, [i])
        contrib = T.multiply(expert_forward(u, layer.experts[i]), gi)
        out = contrib if out is None else T.add(out, contrib)
    if out is None:
        raise UsageError("decision selects no experts")
    return out


def block_forward(u: Tensor, layer: MoELayer, router: RouterFn,
                  rng: Rng | None = None, mode: str = "infer",
                  trace: list | None = None) -> Tensor:
    """One MoE block: u + moe_forward(standardize(u))."""
    un = T.standardize(u)
    decision = router.route(un, rng, mode)
    if trace is not None:
        trace.append(decision)
    return T.add(u, moe_forward(un, layer, decision))


@dataclass
class MoEClassifier:
    config: ModelConfig
    embedding: Tensor            # vocab x D
    layers: list[MoELayer]
    head: Tensor                 # D x classes

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng) -> "MoEClassifier":
        emb = Tensor(rng.child(0).normal((cfg.vocab, cfg.hidden_dim)), track=True)
        layers = [MoELayer.init(cfg, rng.child(1 + i)) for i in range(cfg.layers)]
        head = Tensor(rng.child(1 + cfg.layers).normal((cfg.hidden_dim, cfg.classes)) / np.sqrt(cfg.hidden_dim), track=True)
        return cls(cfg, emb, layers, head)

    def params(self) -> list[Tensor]:
        out = [self.embedding]
        for layer in self.layers:
            out.extend(layer.params())
        out.append(self.head)
        return out

    def copy(self) -> "MoEClassifier":
        emb = Tensor(self.embedding.data.copy(), track=True)
        layers = []
        for layer in self.layers:
            experts = [ExpertFFN(Tensor(e.w_up.data.copy(), track=True),
                                 Tensor(e.w_gate.data.copy(), track=True),
                                 Tensor(e.w_down.data.copy(), track=True)) for e in layer.experts]
            layers.append(MoELayer(Tensor(layer.w_ec.data.copy(), track=True), experts, layer.k))
        head = Tensor(self.head.data.copy(), track=True)
        return MoEClassifier(self.config, emb, layers, head)


def model_forward(token_ids: Sequence[int], model: MoEClassifier, routers: Sequence[RouterFn],
                  rng: Rng | None = None, mode: str = "infer"):
    """Embed a token sequence, run the block stack, mean-pool, project to classes.

    Returns (class_logits, trace) where trace[layer][position] is the
    RoutingDecision made at that point.
    """
    cfg = model.config
    for t in token_ids:
        if not 0 <= int(t) < cfg.vocab:
            raise UsageError(f"token id {t} outside vocabulary of size {cfg.vocab}")
    if len(routers) != cfg.layers:
        raise UsageError(f"expected {cfg.layers} routers, got {len(routers)}")
    xs = [T.reshape(T.take_rows(model.embedding, [int(t)]), (cfg.hidden_dim,)) for t in token_ids]
    trace: list[list[RoutingDecision]] = []
    for li, layer in enumerate(model.layers):
        layer_trace: list[RoutingDecision] = []
        nxt = []
        for pos, x in enumerate(xs):
            r = rng.child(li).child(pos) if rng is not None else None
            nxt.append(block_forward(x, layer, routers[li], r, mode, layer_trace))
        xs = nxt
        trace.append(layer_trace)
    pooled = xs[0]
    for x in xs[1:]:
        pooled = T.add(pooled, x)
    pooled = T.scale(pooled, 1.0 / len(xs))
    logits = T.matmul(pooled, model.head)
    return logits, trace


def load_balance_loss(decisions: Sequence[RoutingDecision], n_experts: int) -> Tensor:
    """N * sum_i f_i P_i over a token batch.

    f_i is the fraction of selection slots holding expert i (so the f_i
    sum to one), P_i the mean routing probability of expert i.
    """
    if len(decisions) == 0:
        raise UsageError("load_balance_loss requires a nonempty batch")
    counts = np.zeros(n_experts)
    total_slots = 0
    p_sum = None
    for d in decisions:
        for i in d.selected:
            counts[i] += 1.0
        total_slots += len(d.selected)
        p_sum = d.probs if p_sum is None else T.add(p_sum, d.probs)
    f = Tensor(counts / total_slots)
    p_mean = T.scale(p_sum, 1.0 / len(decisions))
    return T.scale(T.tsum(T.multiply(f, p_mean)), float(n_experts))


def z_loss(logit_batch: Tensor) -> Tensor:
    """Mean squared log-sum-exp of router logits over a (T x N) batch."""
    if logit_batch.ndim != 2:
        raise ShapeError(f"z_loss expects a 2-D logit batch, got {logit_batch.shape}")
    lse = T.log_sum_exp(logit_batch, axis=1)
    return T.mean(T.multiply(lse, lse))
