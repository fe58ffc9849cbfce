"""Experiment protocols: stability, calibration, OoD detection, layer
selection, and the theoretical efficiency accounting.

Stability perturbs each block input with Gaussian noise scaled to the
layer's mean input norm and compares selected expert sets under paired
random streams, so at zero noise the decisions match exactly. The
efficiency formulas count additional parameters and FLOPs per token for
each method; an instrumented variant brackets the live flop counter
around exactly the components the formulas model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import UsageError
from .metrics import (
    CalibrationReport,
    InputEvidence,
    PredictionRecord,
    ScoredSample,
    UncertaintySignal,
    auprc,
    auroc,
    calibration_report,
    jaccard,
)
from .model import MoEClassifier, moe_forward
from .rng import Rng
from .routers import (
    FCVR,
    MCDR,
    MFVR,
    SWAGR,
    DER,
    VTSR,
    Deterministic,
    Router,
    RouterMethod,
    TempNet,
    TempSampling,
    VariationalRouterNet,
    mf_sample,
    variational_posterior,
    vtsr_temperature,
)
from .task import SyntheticTask
from .tensor import Tensor
from .training import BayesBundle


# ---------------------------------------------------------------------------
# shared evaluation forward


def forward_sample(tokens, model: MoEClassifier, routers: Sequence[Router], rng: Rng | None,
                   mode: str = "infer", want_evidence: bool = False,
                   want_block_inputs: bool = False):
    """Per-sample forward mirroring model_forward, with optional taps.

    Returns (class_probs, decisions, evidence_records, block_inputs):
    decisions and evidence are [layer][position]; block_inputs[layer][pos]
    is the raw residual-stream vector entering that block.
    """
    cfg = model.config
    xs = [T.reshape(T.take_rows(model.embedding, [int(t)]), (cfg.hidden_dim,)) for t in tokens]
    decisions, evidence, block_inputs = [], [], []
    for li, layer in enumerate(model.layers):
        layer_dec, layer_ev, layer_in = [], [], []
        nxt = []
        for pos, x in enumerate(xs):
            if want_block_inputs:
                layer_in.append(x.data.copy())
            un = T.standardize(x)
            r = rng.child(li).child(pos) if rng is not None else None
            if want_evidence:
                dec, ev = routers[li].route_full(un, r, mode)
                layer_ev.append(ev)
            else:
                dec = routers[li].route(un, r, mode)
            layer_dec.append(dec)
            nxt.append(T.add(x, moe_forward(un, layer, dec)))
        xs = nxt
        decisions.append(layer_dec)
        evidence.append(layer_ev)
        block_inputs.append(layer_in)
    pooled = xs[0]
    for x in xs[1:]:
        pooled = T.add(pooled, x)
    pooled = T.scale(pooled, 1.0 / len(xs))
    logits = T.matmul(pooled, model.head)
    probs = T.softmax(logits)
    return probs, decisions, evidence, block_inputs


# ---------------------------------------------------------------------------
# layer selection


@dataclass
class StabilityResult:
    """Jaccard scores per (layer, gamma) plus per-method aggregates."""

    method: str
    gammas: tuple[float, ...]
    layers: tuple[int, ...]
    scores: dict  # (layer, gamma) -> np.ndarray of per-token Jaccard values

    def layer_mean(self, layer: int, gamma: float) -> float:
        return float(np.mean(self.scores[(layer, gamma)]))

    def aggregate(self, gamma: float) -> float:
        return float(np.mean([self.layer_mean(layer, gamma) for layer in self.layers]))

    def layer_means_at(self, gamma: float) -> dict[int, float]:
        return {layer: self.layer_mean(layer, gamma) for layer in self.layers}


@dataclass(frozen=True)
class Susceptible:
    gamma: float = 0.01
    name = "susceptible"


@dataclass(frozen=True)
class LastOne:
    name = "last_one"


@dataclass(frozen=True)
class LastFive:
    name = "last_five"


@dataclass(frozen=True)
class Explicit:
    layers: tuple[int, ...] = ()
    name = "explicit"


LayerStrategy = Susceptible | LastOne | LastFive | Explicit


def strategy_from_config(value) -> LayerStrategy:
    if isinstance(value, str):
        table = {"susceptible": Susceptible(), "last_one": LastOne(), "last_five": LastFive()}
        if value not in table:
            raise UsageError(f"unknown layer strategy {value!r}")
        return table[value]
    if isinstance(value, (list, tuple)):
        return Explicit(tuple(int(i) for i in value))
    raise UsageError(f"layer_strategy must be a name or a layer list, got {value!r}")


def select_layers(strategy: LayerStrategy, stability: StabilityResult | None, n_layers: int) -> tuple[int, ...]:
    """Resolve a layer-selection strategy into concrete indices.

    Susceptible picks layers whose mean Jaccard at the reference gamma
    falls below the across-layer mean minus one standard deviation,
    falling back to the single most brittle layer.
    """
    if isinstance(strategy, LastOne):
        return (n_layers - 1,)
    if isinstance(strategy, LastFive):
        return tuple(range(max(0, n_layers - 5), n_layers))
    if isinstance(strategy, Explicit):
        for i in strategy.layers:
            if not 0 <= i < n_layers:
                raise UsageError(f"explicit layer {i} out of range")
        return tuple(sorted(strategy.layers))
    if isinstance(strategy, Susceptible):
        if stability is None:
            raise UsageError("the susceptible strategy needs a stability result")
        if strategy.gamma not in stability.gammas:
            raise UsageError(f"stability result lacks gamma={strategy.gamma}")
        means = stability.layer_means_at(strategy.gamma)
        values = np.array([means[layer] for layer in stability.layers])
        threshold = values.mean() - values.std()
        chosen = tuple(layer for layer in stability.layers if means[layer] < threshold)
        if not chosen:
            chosen = (min(stability.layers, key=lambda layer: means[layer]),)
        return chosen
    raise UsageError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# experiment 1: stability under perturbation


def run_stability(bundle: BayesBundle, task: SyntheticTask, gammas: Sequence[float],
                  n_tokens: int, rng: Rng, layers: Sequence[int] | None = None) -> StabilityResult:
    """Jaccard similarity of expert selections under paired-stream perturbation.

    For each target layer the block inputs of `n_tokens` test tokens are
    captured once; each gamma then adds noise sigma = gamma * mean input
    norm, routing the clean and perturbed inputs with identical random
    streams so only the perturbation differs.
    """
    model, routers = bundle.model, bundle.routers
    target_layers = tuple(layers) if layers is not None else tuple(range(model.config.layers))
    toks, _ = task.tokens_labels("test")
    per_layer_inputs: dict[int, list[np.ndarray]] = {layer: [] for layer in target_layers}
    with T.no_grad():
        si = 0
        while len(per_layer_inputs[target_layers[0]]) < n_tokens:
            sample_rng = rng.child(0).child(si)
            _, _, _, block_in = forward_sample(toks[si % toks.shape[0]], model, routers,
                                               sample_rng, want_block_inputs=True)
            for layer in target_layers:
                per_layer_inputs[layer].extend(block_in[layer])
            si += 1
    noise_rng = rng.child(1)
    route_rng = rng.child(2)
    scores: dict = {}
    with T.no_grad():
        for layer in target_layers:
            inputs = per_layer_inputs[layer][:n_tokens]
            mean_norm = float(np.mean([np.linalg.norm(x) for x in inputs]))
            for gi, gamma in enumerate(gammas):
                sigma = gamma * mean_norm
                vals = np.empty(len(inputs))
                for ti, x in enumerate(inputs):
                    eps = sigma * noise_rng.child(layer).child(gi).child(ti).normal(x.shape)
                    stream_a = route_rng.child(layer).child(gi).child(ti)
                    stream_b = Rng(stream_a.seed, stream_a.path)
                    dec_a = routers[layer].route(T.standardize(Tensor(x)), stream_a, "infer")
                    dec_b = routers[layer].route(T.standardize(Tensor(x + eps)), stream_b, "infer")
                    vals[ti] = jaccard(dec_a.selected, dec_b.selected)
                scores[(layer, float(gamma))] = vals
    return StabilityResult(method=bundle.method.name, gammas=tuple(float(g) for g in gammas),
                           layers=target_layers, scores=scores)


# ---------------------------------------------------------------------------
# experiment 2: in-distribution calibration


def evaluate_records(bundle: BayesBundle, task: SyntheticTask, split: str, rng: Rng,
                     limit: int | None = None) -> list[PredictionRecord]:
    toks, labels = task.tokens_labels(split)
    n = toks.shape[0] if limit is None else min(limit, toks.shape[0])
    records = []
    with T.no_grad():
        for i in range(n):
            probs, _, _, _ = forward_sample(toks[i], bundle.model, bundle.routers, rng.child(i))
            records.append(PredictionRecord.from_probs(probs.data, int(labels[i])))
    return records


def run_calibration(bundle: BayesBundle, task: SyntheticTask, s: int, seeds: Sequence[int],
                    bins: int = 10, limit: int | None = None):
    """CalibrationReport per inference seed plus across-seed mean and std.

    `s` overrides the method's sample count for posterior-predictive
    routing during this evaluation.
    """
    override = _with_samples(bundle, s)
    reports = []
    for seed in seeds:
        records = evaluate_records(override, task, "test", Rng(seed), limit=limit)
        reports.append(calibration_report(records, bins))
    agg = {}
    for name in ("accuracy", "nll", "ece", "mce"):
        vals = np.array([getattr(r, name) for r in reports])
        agg[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return reports, agg


def _with_samples(bundle: BayesBundle, s: int) -> BayesBundle:
    """Shallow rebundle with the inference sample count set to s."""
    from dataclasses import replace

    method = bundle.method
    if hasattr(method, "samples"):
        method = replace(method, samples=s)
    routers = []
    for r in bundle.routers:
        if type(r.method) is type(bundle.method) and hasattr(r.method, "samples"):
            routers.append(Router(method, r.layer, net=r.net, temp_net=r.temp_net,
                                  swag=r.swag, members=r.members))
        else:
            routers.append(r)
    return BayesBundle(bundle.model, routers, method, bundle.modified_layers, bundle.history)


# ---------------------------------------------------------------------------
# experiment 3: out-of-distribution detection


SIGNALS_3A = (UncertaintySignal.OUTPUT_ENTROPY,)
SIGNALS_3B = (UncertaintySignal.SELECTION_ENTROPY, UncertaintySignal.MC_LOGIT_VARIANCE,
              UncertaintySignal.INFERRED_LOGIT_VARIANCE, UncertaintySignal.INFERRED_TEMPERATURE)


def compatible_signals(method: RouterMethod) -> tuple[UncertaintySignal, ...]:
    base = [UncertaintySignal.OUTPUT_ENTROPY, UncertaintySignal.SELECTION_ENTROPY]
    if isinstance(method, (MCDR, SWAGR, DER)):
        base.append(UncertaintySignal.MC_LOGIT_VARIANCE)
    if isinstance(method, (MFVR, FCVR)):
        base.append(UncertaintySignal.INFERRED_LOGIT_VARIANCE)
    if isinstance(method, VTSR):
        base.append(UncertaintySignal.INFERRED_TEMPERATURE)
    return tuple(base)


def collect_evidence(bundle: BayesBundle, tokens_matrix: np.ndarray, rng: Rng,
                     limit: int | None = None) -> list[InputEvidence]:
    """Per-input evidence over the modified layers (all layers if none modified)."""
    layers = bundle.modified_layers or tuple(range(bundle.model.config.layers))
    n = tokens_matrix.shape[0] if limit is None else min(limit, tokens_matrix.shape[0])
    out = []
    with T.no_grad():
        for i in range(n):
            probs, _, evidence, _ = forward_sample(tokens_matrix[i], bundle.model, bundle.routers,
                                                   rng.child(i), want_evidence=True)
            records = [ev for li in layers for ev in evidence[li]]
            out.append(InputEvidence(final_probs=probs.data.copy(), records=records))
    return out


def run_ood(bundle: BayesBundle, task: SyntheticTask, signals: Sequence[UncertaintySignal],
            rng: Rng, limit: int | None = None):
    """AUROC/AUPRC per signal for the ID-test vs OoD split; incompatible
    signals are skipped with a note."""
    from .metrics import uncertainty_score

    id_toks, _ = task.tokens_labels("test")
    ood_toks, _ = task.tokens_labels("ood")
    id_ev = collect_evidence(bundle, id_toks, rng.child(0), limit=limit)
    ood_ev = collect_evidence(bundle, ood_toks, rng.child(1), limit=limit)
    ok = set(compatible_signals(bundle.method))
    results: dict = {}
    notes: dict = {}
    for signal in signals:
        if signal not in ok:
            notes[signal.value] = f"skipped: incompatible with {bundle.method.name}"
            continue
        samples = [ScoredSample(uncertainty_score(signal, ev), False) for ev in id_ev]
        samples += [ScoredSample(uncertainty_score(signal, ev), True) for ev in ood_ev]
        results[signal.value] = {"auroc": auroc(samples), "auprc": auprc(samples),
                                 "n_id": len(id_ev), "n_ood": len(ood_ev)}
    return results, notes


# ---------------------------------------------------------------------------
# efficiency accounting


def _method_tag(method) -> str:
    return method if isinstance(method, str) else method.name


def overhead_params(method, l: int, d: int, n: int, s: int = 35, m: int = 10, h: int = 384) -> int:
    """Additional activation-memory parameters per method, exact integers."""
    for name, v in (("l", l), ("d", d), ("n", n), ("s", s), ("m", m), ("h", h)):
        if v <= 0:
            raise UsageError(f"overhead argument {name} must be positive")
    tag = _method_tag(method)
    if tag in ("deterministic", "temp_sampling", "mcdr"):
        return 0
    if tag == "swagr":
        return l * (s - 1) * d * n
    if tag == "der":
        return l * (m - 1) * d * n
    if tag == "mfvr":
        return l * (d * h + 2 * h * n)
    if tag == "fcvr":
        return l * (d * h + h * n + h * (n * (n + 1) // 2))
    if tag == "vtsr":
        return l * (d * h + h)
    raise UsageError(f"unknown method {tag!r}")


def overhead_flops(method, l: int, d: int, n: int, s: int = 35, m: int = 10, h: int = 384) -> float:
    """Additional FLOPs per token: sampling passes plus auxiliary nets."""
    tag = _method_tag(method)
    if tag in ("deterministic", "temp_sampling"):
        return 0.0
    if tag in ("mcdr", "swagr"):
        return float(l * (s - 1) * 2 * d * n)
    if tag == "der":
        return float(l * (m - 1) * 2 * d * n)
    if tag == "mfvr":
        return float(l * (2 * d * h + 4 * h * n + 2 * s * n))
    if tag == "fcvr":
        return float(l * (2 * d * h + 2 * h * n + h * n * (n + 1) + 2 * s * n * n))
    if tag == "vtsr":
        return float(l * (2 * d * h + 2 * h + n))
    raise UsageError(f"unknown method {tag!r}")


def measure_overhead_flops(method, l: int, d: int, n: int, s: int = 35, h: int = 8,
                           seed: int = 0) -> int:
    """Live-counter measurement of the per-token overhead for one layer stack.

    Brackets the flop counter around exactly the components the closed
    formulas model: the auxiliary-net forward pass and the per-sample
    reparameterisation (MFVR) or temperature scaling (VTSR) arithmetic.
    """
    tag = _method_tag(method)
    if tag not in ("mfvr", "vtsr"):
        raise UsageError("instrumented measurement covers the mfvr and vtsr nets")
    rng = Rng(seed)
    u = Tensor(rng.child(0).normal((d,)))
    l_det = Tensor(rng.child(1).normal((n,)))
    total = 0
    with T.no_grad():
        for _ in range(l):
            if tag == "mfvr":
                net = VariationalRouterNet.init(d, n, h, full_cov=False, rng=rng.child(2))
                base = T.flops.total
                delta_mu, raw = net.forward(u)
                total += T.flops.total - base
                post = variational_posterior(u, l_det, net)
                base = T.flops.total
                for si in range(s):
                    mf_sample(post, rng.child(3).child(si))
                total += T.flops.total - base
            else:
                net = TempNet.init(d, h, rng.child(2))
                base = T.flops.total
                temp = vtsr_temperature(u, net)
                total += T.flops.total - base
                base = T.flops.total
                T.divide(l_det, temp)
                total += T.flops.total - base
    return total
