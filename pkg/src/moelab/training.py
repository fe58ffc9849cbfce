"""Two-stage training: MAP baseline, then per-method Bayesian fine-tuning.

Stage one trains every parameter of the classifier with deterministic
routing under task loss plus the auxiliary router losses. Stage two
starts from the converged MAP weights and updates only router-associated
parameters (the centroid matrices and any method nets) under the
method-specific objective. Batches run through a vectorised forward that
matches the per-token ops exactly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import NumericError, TrainingError, UsageError
from .model import MoEClassifier, MoELayer, ModelConfig, expert_forward
from .routers import (
    DER,
    FCVR,
    MCDR,
    MFVR,
    SWAGR,
    VTSR,
    Deterministic,
    Router,
    RouterMethod,
    TempSampling,
    build_routers,
    frobenius_sq,
    sample_k_without_replacement,
    swag_collect,
    temp_reg_loss,
)
from .rng import Rng
from .task import SyntheticTask
from .tensor import GradTape, Tensor, backward, use_tape


class CollapseWarning(UserWarning):
    """Learned uncertainty (sigma or temperature) has shrunk to nothing."""


@dataclass(frozen=True)
class TrainSettings:
    map_epochs: int = 30
    map_lr: float = 0.01
    bayes_epochs: int = 12
    bayes_lr: float = 0.01
    batch_size: int = 64
    aux_on: bool = True
    aux_balance: float = 0.02
    aux_z: float = 0.15
    swag_lr: float = 0.03
    scale_lr_mult: float = 5.0   # variational scale head trains faster than the mean head
    mu_lr_mult: float = 0.25     # residual-mean head trains slower, protecting routing stability
    offdiag_lr_mult: float = 0.1  # Cholesky off-diagonals learn slowly; correlations stay modest
    freeze_shared_hidden: bool = True  # keep variational-net features fixed (random projections)
    collapse_threshold: float = 1e-3

    def __post_init__(self):
        if self.map_epochs < 0 or self.bayes_epochs < 0:
            raise UsageError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 per_param_lr: list[float] | None = None):
        self.params = list(params)
        self.lrs = list(per_param_lr) if per_param_lr is not None else [lr] * len(self.params)
        if len(self.lrs) != len(self.params):
            raise UsageError("per_param_lr must match the parameter list")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, lr, m, v in zip(self.params, self.lrs, self.m, self.v):
            if p.grad is None:
                continue
            m[:] = self.beta1 * m + (1 - self.beta1) * p.grad
            v[:] = self.beta2 * v + (1 - self.beta2) * p.grad**2
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class SGD:
    """Plain constant-rate SGD; used for the SWAG collection phase."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


@dataclass
class BayesBundle:
    """A trained model plus its per-layer routing mechanisms."""

    model: MoEClassifier
    routers: list[Router]
    method: RouterMethod
    modified_layers: tuple[int, ...]
    history: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batched forward


def _topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def _gates_from(probs: Tensor, sel: np.ndarray) -> Tensor:
    sel_probs = T.take_cols_rowwise(probs, sel)
    denom = T.tsum(sel_probs, axis=1)
    return T.rowwise_mul(sel_probs, T.divide(1.0, denom))


def _batch_route_train(router: Router, xn: Tensor, rng: Rng):
    """Single-sample training-mode routing for a row batch.

    Returns (sel, gates_sel, aux) where aux carries the tensors the
    method loss needs: det logits, routing probs, kl term, temperatures.
    """
    m = router.method
    layer = router.layer
    k = layer.k
    l_det = T.matmul(xn, layer.w_ec)
    rows = xn.shape[0]
    n = layer.w_ec.shape[1]
    aux = {"logits": l_det, "kl": None, "temps": None}

    if isinstance(m, (Deterministic, SWAGR, DER)):
        probs = T.softmax(l_det, axis=1)
        sel = _topk_rows(probs.data, k)
    elif isinstance(m, TempSampling):
        probs = T.softmax(T.scale(l_det, 1.0 / m.temperature), axis=1)
        sel = np.stack([
            np.array(sample_k_without_replacement(probs.data[r], k, rng.child(r)), dtype=np.intp)
            for r in range(rows)
        ])
    elif isinstance(m, MCDR):
        mask = rng.child(0).bernoulli_keep(1.0 - m.p, xn.shape)
        dropped = T.scale(T.multiply(xn, Tensor(mask)), 1.0 / (1.0 - m.p))
        l = T.matmul(dropped, layer.w_ec)
        aux["logits"] = l
        probs = T.softmax(l, axis=1)
        sel = _topk_rows(probs.data, k)
    elif isinstance(m, MFVR):
        delta, raw = router.net.forward(xn)
        mu = T.add(l_det, delta)
        eps = rng.child(0).normal((rows, n))
        sigma = T.exp(raw)
        ls = T.add(mu, T.multiply(sigma, Tensor(eps)))
        probs = T.softmax(ls, axis=1)
        sel = _topk_rows(probs.data, k)
        two_raw = T.scale(raw, 2.0)
        inner = T.subtract(T.add(T.multiply(delta, delta), T.exp(two_raw)), T.add(two_raw, 1.0))
        aux["kl"] = T.scale(T.tsum(inner), 0.5 / rows)
        aux["sigma_mean"] = float(np.mean(sigma.data))
    elif isinstance(m, FCVR):
        delta, raw = router.net.forward(xn)
        mu = T.add(l_det, delta)
        eps = rng.child(0).normal((rows, n))
        ls = T.add(mu, T.fc_sample_rows(raw, eps, n))
        probs = T.softmax(ls, axis=1)
        sel = _topk_rows(probs.data, k)
        tri_r, tri_c = np.tril_indices(n)
        diag_cols = np.nonzero(tri_r == tri_c)[0]
        off_cols = np.nonzero(tri_r != tri_c)[0]
        diag_raw = T.take_cols_rowwise(raw, np.tile(diag_cols, (rows, 1)))
        trace = T.tsum(T.exp(T.scale(diag_raw, 2.0)))
        if off_cols.size:
            off_raw = T.take_cols_rowwise(raw, np.tile(off_cols, (rows, 1)))
            trace = T.add(trace, T.tsum(T.multiply(off_raw, off_raw)))
        quad = T.tsum(T.multiply(delta, delta))
        logdet = T.scale(T.tsum(diag_raw), 2.0)
        kl_total = T.scale(T.subtract(T.add(trace, quad), T.add(logdet, float(n * rows))), 0.5)
        aux["kl"] = T.scale(kl_total, 1.0 / rows)
        aux["sigma_mean"] = float(np.mean(np.exp(diag_raw.data)))
    elif isinstance(m, VTSR):
        hidden = T.silu(T.matmul(xn, router.temp_net.w1))
        temps = T.exp(T.reshape(T.matmul(hidden, router.temp_net.w_head), (rows,)))
        tau = m.tau
        g = rng.child(0).gumbel((rows, n))
        scaled = T.rowwise_mul(l_det, T.divide(1.0, temps))
        relaxed = T.softmax(T.scale(T.add(scaled, Tensor(g)), 1.0 / tau), axis=1)
        probs = relaxed
        sel = _topk_rows(relaxed.data, k)
        aux["temps"] = temps
    else:
        raise UsageError(f"no batched trainer for method {m!r}")

    aux["probs"] = probs
    return sel, _gates_from(probs, sel), aux


def _dispatch_experts(xn: Tensor, layer: MoELayer, sel: np.ndarray, gates_sel: Tensor) -> Tensor:
    rows = xn.shape[0]
    out = None
    for i in range(len(layer.experts)):
        r_idx, slot_idx = np.nonzero(sel == i)
        if r_idx.size == 0:
            continue
        xi = T.take_rows(xn, r_idx)
        yi = expert_forward(xi, layer.experts[i])
        g_rows = T.take_rows(gates_sel, r_idx)
        gi = T.reshape(T.take_cols_rowwise(g_rows, slot_idx[:, None]), (r_idx.size,))
        contrib = T.scatter_rows(T.rowwise_mul(yi, gi), r_idx, rows)
        out = contrib if out is None else T.add(out, contrib)
    return out


def forward_batch(model: MoEClassifier, routers: list[Router], tokens: np.ndarray, rng: Rng):
    """Training-mode batched forward over (B, seq_len) token ids.

    Returns (class_logits, layer_aux) with one aux dict per layer.
    """
    b, s = tokens.shape
    flat = tokens.reshape(-1)
    x = T.take_rows(model.embedding, flat)
    layer_aux = []
    for li, layer in enumerate(model.layers):
        xn = T.standardize(x, axis=1)
        sel, gates_sel, aux = _batch_route_train(routers[li], xn, rng.child(li))
        aux["sel"] = sel
        layer_aux.append(aux)
        x = T.add(x, _dispatch_experts(xn, layer, sel, gates_sel))
    pool = np.zeros((b, b * s))
    for i in range(b):
        pool[i, i * s:(i + 1) * s] = 1.0 / s
    pooled = T.matmul(Tensor(pool), x)
    return T.matmul(pooled, model.head), layer_aux


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    b = logits.shape[0]
    lse = T.log_sum_exp(logits, axis=1)
    picked = T.reshape(T.take_cols_rowwise(logits, labels.reshape(-1, 1)), (b,))
    return T.mean(T.subtract(lse, picked))


def _balance_loss_batched(probs: Tensor, sel: np.ndarray, n: int) -> Tensor:
    rows, k = sel.shape
    counts = np.bincount(sel.reshape(-1), minlength=n).astype(np.float64)
    f = Tensor(counts / (rows * k))
    ones = np.full((1, rows), 1.0 / rows)
    p_mean = T.reshape(T.matmul(Tensor(ones), probs), (n,))
    return T.scale(T.tsum(T.multiply(f, p_mean)), float(n))


def aux_loss(layer_aux: list, n_experts: int, cfg: TrainSettings, layers=None) -> Tensor | None:
    """Balance and z losses averaged over the given layers (default all)."""
    if not cfg.aux_on:
        return None
    idx = list(range(len(layer_aux))) if layers is None else list(layers)
    total = None
    for li in idx:
        aux = layer_aux[li]
        lb = _balance_loss_batched(aux["probs"], aux["sel"], n_experts)
        z = T.mean(T.multiply(T.log_sum_exp(aux["logits"], axis=1), T.log_sum_exp(aux["logits"], axis=1)))
        term = T.add(T.scale(lb, cfg.aux_balance), T.scale(z, cfg.aux_z))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(idx)) if total is not None else None


def _epoch_batches(task: SyntheticTask, split: str, batch: int, rng: Rng):
    toks, labels = task.tokens_labels(split)
    order = rng.permutation(toks.shape[0])
    for start in range(0, toks.shape[0] - batch + 1, batch):
        idx = order[start:start + batch]
        yield toks[idx], labels[idx]


def predict_batch(model: MoEClassifier, routers: list[Router], tokens: np.ndarray) -> np.ndarray:
    """Deterministic-mode class predictions for quick validation scoring."""
    with T.no_grad():
        logits, _ = forward_batch(model, routers, tokens, Rng(0))
    return np.argmax(logits.data, axis=1)


def majority_rate(labels: np.ndarray) -> float:
    return float(np.bincount(labels).max() / labels.size)


def train_map_baseline(task: SyntheticTask, model_cfg: ModelConfig, cfg: TrainSettings, seed: int):
    """Stage one: full-parameter fine-tuning with deterministic routing.

    Returns (model, history); history carries per-epoch losses, final
    validation accuracy and the majority-class rate.
    """
    root = Rng(seed)
    model = MoEClassifier.init(model_cfg, root.child(0))
    routers = [Router.build(Deterministic(), layer) for layer in model.layers]
    opt = Adam(model.params(), cfg.map_lr)
    tape = GradTape()
    history = {"train_loss": [], "balance_loss": []}
    with use_tape(tape):
        for epoch in range(cfg.map_epochs):
            epoch_rng = root.child(1).child(epoch)
            losses, balances = [], []
            for bi, (toks, labels) in enumerate(_epoch_batches(task, "train", cfg.batch_size, epoch_rng)):
                tape.clear()
                opt.zero_grad()
                try:
                    logits, layer_aux = forward_batch(model, routers, toks, epoch_rng.child(bi))
                    loss = cross_entropy(logits, labels)
                except NumericError as e:
                    raise TrainingError(
                        f"MAP training diverged at epoch {epoch} batch {bi}: {e}") from e
                extra = aux_loss(layer_aux, model_cfg.experts, cfg)
                if extra is not None:
                    loss = T.add(loss, extra)
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingError(
                        f"MAP training diverged: loss={val} at epoch {epoch} batch {bi}")
                losses.append(val)
                balances.append(_balance_loss_batched(layer_aux[0]["probs"], layer_aux[0]["sel"],
                                                      model_cfg.experts).item())
                backward(loss)
                opt.step()
            history["train_loss"].append(float(np.mean(losses)))
            history["balance_loss"].append(float(np.mean(balances)))
    tape.clear()
    val_toks, val_labels = task.tokens_labels("val")
    preds = predict_batch(model, routers, val_toks)
    history["val_accuracy"] = float(np.mean(preds == val_labels))
    history["majority_rate"] = majority_rate(val_labels)
    return model, history


def _trainable_for(method: RouterMethod, routers: list[Router], modified: tuple[int, ...]) -> list[Tensor]:
    params: list[Tensor] = []
    for li in modified:
        params.extend(routers[li].trainable_params())
    return params


def _mean_sigma(routers: list[Router], modified, task: SyntheticTask, model: MoEClassifier) -> float | None:
    """Mean learned sigma (variational) or temperature (VTSR) over a probe batch."""
    toks, _ = task.tokens_labels("val")
    probe = toks[: min(64, toks.shape[0])]
    flat = probe.reshape(-1)
    with T.no_grad():
        x = T.take_rows(model.embedding, flat)
        vals = []
        for li, layer in enumerate(model.layers):
            xn = T.standardize(x, axis=1)
            r = routers[li]
            if li in modified:
                if r.net is not None:
                    _, raw = r.net.forward(xn)
                    if r.net.full_cov:
                        n = layer.w_ec.shape[1]
                        tri_r, tri_c = np.tril_indices(n)
                        diag_cols = np.nonzero(tri_r == tri_c)[0]
                        vals.append(float(np.mean(np.exp(raw.data[:, diag_cols]))))
                    else:
                        vals.append(float(np.mean(np.exp(raw.data))))
                elif r.temp_net is not None:
                    hidden = T.silu(T.matmul(xn, r.temp_net.w1))
                    temps = np.exp(T.matmul(hidden, r.temp_net.w_head).data)
                    vals.append(float(np.mean(temps)))
            sel, gates_sel, _ = _batch_route_train(Router(Deterministic(), layer), xn, Rng(0))
            x = T.add(x, _dispatch_experts(xn, layer, sel, gates_sel))
    return float(np.mean(vals)) if vals else None


def train_bayes_router(map_model: MoEClassifier, method: RouterMethod, task: SyntheticTask,
                       cfg: TrainSettings, seed: int, modified_layers) -> BayesBundle:
    """Stage two: router-only fine-tuning under the method-specific loss."""
    modified = tuple(sorted(int(i) for i in modified_layers))
    for li in modified:
        if not 0 <= li < map_model.config.layers:
            raise UsageError(f"modified layer {li} out of range")
    root = Rng(seed)
    model = map_model.copy()
    routers = build_routers(method, model.layers, modified, root.child(0))
    history: dict = {"kl": [], "regulariser": [], "train_loss": []}

    if isinstance(method, (Deterministic, TempSampling)):
        # baselines carry no stage-two parameters
        return BayesBundle(model, routers, method, modified, history)

    if isinstance(method, DER):
        _train_der_members(model, routers, method, task, cfg, root, modified, history)
        return BayesBundle(model, routers, method, modified, history)

    params = _trainable_for(method, routers, modified)
    if isinstance(method, SWAGR):
        opt = SGD(params, cfg.swag_lr)
    elif isinstance(method, (MFVR, FCVR)):
        lrs = []
        for li in modified:
            net = routers[li].net
            for p in net.params():
                if p is net.w_scale:
                    lrs.append(cfg.bayes_lr * cfg.scale_lr_mult)
                elif p is net.w_mu:
                    lrs.append(cfg.bayes_lr * cfg.mu_lr_mult)
                else:
                    lrs.append(0.0 if cfg.freeze_shared_hidden else cfg.bayes_lr)
        opt = Adam(params, cfg.bayes_lr, per_param_lr=lrs)
    else:
        opt = Adam(params, cfg.bayes_lr)
    n_experts = model.config.experts
    tape = GradTape()
    step = 0
    with use_tape(tape):
        for epoch in range(cfg.bayes_epochs):
            epoch_rng = root.child(2).child(epoch)
            kl_vals, reg_vals, losses = [], [], []
            for bi, (toks, labels) in enumerate(_epoch_batches(task, "train", cfg.batch_size, epoch_rng)):
                tape.clear()
                opt.zero_grad()
                try:
                    logits, layer_aux = forward_batch(model, routers, toks, epoch_rng.child(bi))
                except NumericError as e:
                    raise TrainingError(
                        f"{method.name} training diverged at epoch {epoch} batch {bi}: {e}") from e
                loss = cross_entropy(logits, labels)
                extra = aux_loss(layer_aux, n_experts, cfg, layers=modified)
                if extra is not None:
                    loss = T.add(loss, extra)
                if isinstance(method, MCDR):
                    for li in modified:
                        loss = T.add(loss, T.scale(frobenius_sq(model.layers[li].w_ec), method.weight_decay))
                elif isinstance(method, (MFVR, FCVR)):
                    kl_total = None
                    for li in modified:
                        kl = layer_aux[li]["kl"]
                        kl_total = kl if kl_total is None else T.add(kl_total, kl)
                    if float(kl_total.item()) < -1e-9:
                        raise TrainingError(f"negative KL {kl_total.item()} at step {step}")
                    kl_vals.append(kl_total.item())
                    loss = T.add(loss, T.scale(kl_total, method.beta))
                elif isinstance(method, VTSR):
                    reg_total = None
                    for li in modified:
                        reg = temp_reg_loss(layer_aux[li]["temps"])
                        reg_total = reg if reg_total is None else T.add(reg_total, reg)
                    reg_vals.append(reg_total.item())
                    loss = T.add(loss, T.scale(reg_total, method.beta))
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingError(f"{method.name} training diverged at epoch {epoch} batch {bi}")
                losses.append(val)
                backward(loss)
                if isinstance(method, FCVR) and cfg.offdiag_lr_mult != 1.0:
                    n = model.config.experts
                    tri_r, tri_c = np.tril_indices(n)
                    off_cols = np.nonzero(tri_r != tri_c)[0]
                    for li in modified:
                        g = routers[li].net.w_scale.grad
                        if g is not None and off_cols.size:
                            g[:, off_cols] *= cfg.offdiag_lr_mult
                opt.step()
                step += 1
                if isinstance(method, SWAGR) and step % method.collect_every == 0:
                    for li in modified:
                        swag_collect(routers[li].swag, model.layers[li].w_ec.data)
            history["train_loss"].append(float(np.mean(losses)) if losses else 0.0)
            history["kl"].append(float(np.mean(kl_vals)) if kl_vals else 0.0)
            history["regulariser"].append(float(np.mean(reg_vals)) if reg_vals else 0.0)
    tape.clear()

    if isinstance(method, (MFVR, FCVR, VTSR)):
        spread = _mean_sigma(routers, modified, task, model)
        history["mean_sigma"] = spread
        if spread is not None and spread < cfg.collapse_threshold:
            warnings.warn(f"collapse: learned spread {spread:.2e} below "
                          f"{cfg.collapse_threshold}", CollapseWarning)
    return BayesBundle(model, routers, method, modified, history)


def _train_der_members(model, routers, method: DER, task, cfg, root, modified, history):
    """Each ensemble member fine-tunes its own centroid copies jointly across layers."""
    for li in modified:
        routers[li].members = []
    for member in range(method.members):
        member_tensors = {li: Tensor(model.layers[li].w_ec.data.copy(), track=True) for li in modified}
        scratch_layers = []
        for li, layer in enumerate(model.layers):
            if li in modified:
                scratch_layers.append(MoELayer(member_tensors[li], layer.experts, layer.k))
            else:
                scratch_layers.append(layer)
        scratch = MoEClassifier(model.config, model.embedding, scratch_layers, model.head)
        det_routers = [Router.build(Deterministic(), layer) for layer in scratch_layers]
        opt = Adam(list(member_tensors.values()), cfg.bayes_lr)
        tape = GradTape()
        member_rng = root.child(3).child(member)
        with use_tape(tape):
            for epoch in range(cfg.bayes_epochs):
                epoch_rng = member_rng.child(epoch)
                for bi, (toks, labels) in enumerate(_epoch_batches(task, "train", cfg.batch_size, epoch_rng)):
                    tape.clear()
                    opt.zero_grad()
                    logits, layer_aux = forward_batch(scratch, det_routers, toks, epoch_rng.child(bi))
                    loss = cross_entropy(logits, labels)
                    extra = aux_loss(layer_aux, model.config.experts, cfg, layers=modified)
                    if extra is not None:
                        loss = T.add(loss, extra)
                    if not math.isfinite(loss.item()):
                        raise TrainingError(f"DER member {member} diverged")
                    backward(loss)
                    opt.step()
        tape.clear()
        for li in modified:
            routers[li].members.append(Tensor(member_tensors[li].data.copy()))
    history["members_trained"] = method.members
