"""The eight routing mechanisms and their samplers and losses.

Weight-space methods (MCDR, SWAGR, DER) sample the expert-centroid
matrix; logit-space methods (MFVR, FCVR) learn an input-conditioned
Gaussian over the router logits via a residual-mean variational net;
VTSR learns an input-dependent temperature and samples the selection
directly. Deterministic and fixed-temperature sampling are baselines.

Every inference path integrates the posterior by averaging post-softmax
probabilities over S samples before the usual Top-K step; training paths
draw a single reparameterised sample per token.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .exceptions import NumericError, ShapeError, UsageError
from .model import (
    MoELayer,
    RoutingDecision,
    decision_from_selection,
    route_topk,
    score_experts,
    topk_indices,
)
from .rng import Rng
from .tensor import Tensor


# ---------------------------------------------------------------------------
# method configurations


@dataclass(frozen=True)
class Deterministic:
    name = "deterministic"


@dataclass(frozen=True)
class TempSampling:
    temperature: float = 0.3
    name = "temp_sampling"

    def __post_init__(self):
        if self.temperature <= 0:
            raise UsageError("TempSampling.temperature must be positive")


@dataclass(frozen=True)
class MCDR:
    p: float = 0.05
    weight_decay: float = 1e-4
    samples: int = 35
    name = "mcdr"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise UsageError("MCDR.p must lie in (0, 1)")
        if self.weight_decay < 0:
            raise UsageError("MCDR.weight_decay must be nonnegative")
        if self.samples < 1:
            raise UsageError("MCDR.samples must be >= 1")


@dataclass(frozen=True)
class SWAGR:
    samples: int = 35
    rank: int = 20
    collect_every: int = 1
    name = "swagr"

    def __post_init__(self):
        if self.samples < 1 or self.rank < 1 or self.collect_every < 1:
            raise UsageError("SWAGR hyperparameters must be positive")


@dataclass(frozen=True)
class DER:
    members: int = 10
    name = "der"

    def __post_init__(self):
        if self.members < 2:
            raise UsageError("DER.members must be >= 2")


@dataclass(frozen=True)
class MFVR:
    beta: float = 0.05
    samples: int = 35
    hidden: int = 8
    name = "mfvr"

    def __post_init__(self):
        if self.beta < 0 or self.samples < 1 or self.hidden < 1:
            raise UsageError("MFVR hyperparameters out of range")


@dataclass(frozen=True)
class FCVR:
    beta: float = 0.05
    samples: int = 35
    hidden: int = 8
    name = "fcvr"

    def __post_init__(self):
        if self.beta < 0 or self.samples < 1 or self.hidden < 1:
            raise UsageError("FCVR hyperparameters out of range")


@dataclass(frozen=True)
class VTSR:
    beta: float = 0.1
    hidden: int = 8
    tau: float = 0.5
    tau_final: float | None = None  # optional linear anneal target during training
    name = "vtsr"

    def __post_init__(self):
        if self.beta < 0 or self.hidden < 1 or self.tau <= 0:
            raise UsageError("VTSR hyperparameters out of range")
        if self.tau_final is not None and self.tau_final <= 0:
            raise UsageError("VTSR.tau_final must be positive")


RouterMethod = Union[Deterministic, TempSampling, MCDR, SWAGR, DER, MFVR, FCVR, VTSR]

METHOD_NAMES = ("deterministic", "temp_sampling", "mcdr", "swagr", "der", "mfvr", "fcvr", "vtsr")


def method_from_dict(d: dict) -> RouterMethod:
    """Build a method config from a plain dict (e.g. parsed config file)."""
    d = dict(d)
    name = d.pop("name", None)
    table = {
        "deterministic": Deterministic,
        "temp_sampling": TempSampling,
        "mcdr": MCDR,
        "swagr": SWAGR,
        "der": DER,
        "mfvr": MFVR,
        "fcvr": FCVR,
        "vtsr": VTSR,
    }
    if name not in table:
        raise UsageError(f"unknown router method name: {name!r}")
    try:
        return table[name](**d)
    except TypeError as e:
        raise UsageError(f"bad hyperparameters for method {name}: {e}") from e


# ---------------------------------------------------------------------------
# posteriors and auxiliary networks


@dataclass
class GaussianLogitPosterior:
    """Gaussian over router logits: mean plus either a diagonal scale or a Cholesky factor."""

    mean: Tensor
    diag_sigma: Tensor | None = None
    chol: Tensor | None = None

    def __post_init__(self):
        if (self.diag_sigma is None) == (self.chol is None):
            raise UsageError("posterior needs exactly one of diag_sigma or chol")
        if self.diag_sigma is not None and np.any(self.diag_sigma.data <= 0):
            raise UsageError("diag_sigma must be strictly positive")
        if self.chol is not None:
            L = self.chol.data
            if L.ndim != 2 or L.shape[0] != L.shape[1]:
                raise ShapeError(f"Cholesky factor must be square, got {L.shape}")
            if np.any(np.diagonal(L) <= 0):
                raise UsageError("Cholesky diagonal must be strictly positive")
            if np.any(np.triu(L, 1) != 0):
                raise UsageError("Cholesky factor must be lower-triangular")


@dataclass
class VariationalRouterNet:
    """One-hidden-layer net with a residual-mean head and a scale head.

    The scale head emits log-sigmas (mean-field) or the row-wise lower
    triangle of a Cholesky factor whose diagonal is exponentiated. Heads
    start at zero so the initial posterior is exactly N(l_det, I).
    """

    w1: Tensor        # D x H
    w_mu: Tensor      # H x N
    w_scale: Tensor   # H x N  or  H x N(N+1)/2
    full_cov: bool

    @classmethod
    def init(cls, d: int, n: int, h: int, full_cov: bool, rng: Rng) -> "VariationalRouterNet":
        m = n * (n + 1) // 2 if full_cov else n
        return cls(
            w1=Tensor(rng.normal((d, h)) / np.sqrt(d), track=True),
            w_mu=Tensor(np.zeros((h, n)), track=True),
            w_scale=Tensor(np.zeros((h, m)), track=True),
            full_cov=full_cov,
        )

    def params(self) -> list[Tensor]:
        return [self.w1, self.w_mu, self.w_scale]

    def forward(self, u: Tensor) -> tuple[Tensor, Tensor]:
        """Residual mean and raw scale-head output for a vector or row batch."""
        hidden = T.silu(T.matmul(u, self.w1))
        return T.matmul(hidden, self.w_mu), T.matmul(hidden, self.w_scale)


@dataclass
class TempNet:
    """Predicts log-temperature; zero head gives T = 1."""

    w1: Tensor       # D x H
    w_head: Tensor   # H x 1

    @classmethod
    def init(cls, d: int, h: int, rng: Rng) -> "TempNet":
        return cls(
            w1=Tensor(rng.normal((d, h)) / np.sqrt(d), track=True),
            w_head=Tensor(np.zeros((h, 1)), track=True),
        )

    def params(self) -> list[Tensor]:
        return [self.w1, self.w_head]


class SwagStats:
    """Running first/second weight moments plus a deviation ring buffer."""

    def __init__(self, shape: tuple[int, ...], rank: int = 20):
        self.shape = tuple(shape)
        self.rank = int(rank)
        self.count = 0
        self.mean = np.zeros(shape)
        self.sq_mean = np.zeros(shape)
        self.dev: deque[np.ndarray] = deque(maxlen=self.rank)

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(self.sq_mean - self.mean**2, 1e-12)


def swag_collect(stats: SwagStats, snapshot: np.ndarray) -> None:
    """Fold a weight snapshot into the running moments and deviation buffer."""
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if snapshot.shape != stats.shape:
        raise ShapeError(f"snapshot shape {snapshot.shape} != stats shape {stats.shape}")
    n = stats.count
    stats.mean = stats.mean * (n / (n + 1)) + snapshot / (n + 1)
    stats.sq_mean = stats.sq_mean * (n / (n + 1)) + snapshot**2 / (n + 1)
    stats.count = n + 1
    stats.dev.append(snapshot - stats.mean)


def swag_sample(stats: SwagStats, rng: Rng) -> np.ndarray:
    """Draw W = mean + diag(sqrt(var)) z1 / sqrt(2) + Dev z2 / sqrt(2(r-1)).

    r is the number of stored deviations; with a single deviation the
    low-rank denominator clamps at one.
    """
    if stats.count < 2 or len(stats.dev) == 0:
        raise UsageError("swag_sample needs count >= 2 and a nonempty deviation buffer")
    z1 = rng.normal(stats.shape)
    r = len(stats.dev)
    z2 = rng.normal((r,))
    # raw moments here so a degenerate posterior collapses to the mean exactly;
    # the floored .variance property serves consumers needing positivity
    raw_var = np.maximum(stats.sq_mean - stats.mean**2, 0.0)
    sample = stats.mean + np.sqrt(raw_var) * z1 / math.sqrt(2.0)
    low_rank = sum(stats.dev[i] * z2[i] for i in range(r))
    return sample + low_rank / math.sqrt(2.0 * max(r - 1, 1))


# ---------------------------------------------------------------------------
# samplers and losses


def mc_average_probs(sample_fn: Callable[[Rng], Tensor], s: int, rng: Rng) -> Tensor:
    """Posterior-predictive routing probabilities: (1/S) sum softmax(l^s)."""
    if s < 1:
        raise UsageError("sample count must be >= 1")
    acc = None
    for i in range(s):
        probs = T.softmax(sample_fn(rng.child(i)))
        acc = probs if acc is None else T.add(acc, probs)
    return T.scale(acc, 1.0 / s)


def mcdr_forward(u: Tensor, layer: MoELayer, p: float, rng: Rng) -> Tensor:
    """Inverted-dropout scoring: mask u, rescale by 1/(1-p), project."""
    if not 0.0 < p < 1.0:
        raise UsageError("dropout rate must lie in (0, 1)")
    mask = rng.bernoulli_keep(1.0 - p, u.shape)
    masked = T.multiply(u, Tensor(mask))
    return score_experts(T.scale(masked, 1.0 / (1.0 - p)), layer)


def frobenius_sq(w: Tensor) -> Tensor:
    return T.tsum(T.multiply(w, w))


def mcdr_loss(task_loss: Tensor, w_ec, weight_decay: float) -> Tensor:
    """task + lambda * ||W_EC||_F^2, summed over one or many centroid matrices."""
    if weight_decay < 0:
        raise UsageError("weight decay must be nonnegative")
    mats = [w_ec] if isinstance(w_ec, Tensor) else list(w_ec)
    loss = task_loss
    for w in mats:
        loss = T.add(loss, T.scale(frobenius_sq(w), weight_decay))
    return loss


def der_average(members: Sequence[Tensor], u: Tensor) -> Tensor:
    """Mean post-softmax routing distribution over ensemble members."""
    if len(members) < 2:
        raise UsageError("an ensemble needs at least two members")
    acc = None
    for w in members:
        probs = T.softmax(T.matmul(u, w))
        acc = probs if acc is None else T.add(acc, probs)
    return T.scale(acc, 1.0 / len(members))


def variational_posterior(u: Tensor, l_det: Tensor, net: VariationalRouterNet) -> GaussianLogitPosterior:
    """Residual-mean Gaussian posterior over logits for one token."""
    delta_mu, raw = net.forward(u)
    mean = T.add(l_det, delta_mu)
    n = l_det.shape[0]
    if net.full_cov:
        return GaussianLogitPosterior(mean=mean, chol=T.lower_triangular(raw, n))
    return GaussianLogitPosterior(mean=mean, diag_sigma=T.exp(raw))


def mf_sample(post: GaussianLogitPosterior, rng: Rng) -> Tensor:
    """Elementwise reparameterised draw: mean + sigma * eps."""
    if post.diag_sigma is None:
        raise UsageError("mf_sample requires a diagonal-scale posterior")
    eps = rng.normal(post.mean.shape)
    return T.add(post.mean, T.multiply(post.diag_sigma, Tensor(eps)))


def fc_sample(post: GaussianLogitPosterior, rng: Rng) -> Tensor:
    """Multivariate reparameterised draw: mean + L @ eps."""
    if post.chol is None:
        raise UsageError("fc_sample requires a Cholesky-scale posterior")
    eps = rng.normal(post.mean.shape)
    return T.add(post.mean, T.matmul(post.chol, Tensor(eps)))


def kl_mean_field(delta_mu: Tensor, sigma_sq: Tensor) -> Tensor:
    """KL(N(dmu, diag(s2)) || N(0, I)) = 0.5 sum(dmu^2 + s2 - log s2 - 1)."""
    if np.any(sigma_sq.data <= 0):
        raise UsageError("kl_mean_field requires strictly positive variances")
    inner = T.subtract(T.add(T.multiply(delta_mu, delta_mu), sigma_sq), T.add(T.log(sigma_sq), 1.0))
    return T.scale(T.tsum(inner), 0.5)


def kl_full_cov(delta_mu: Tensor, chol: Tensor) -> Tensor:
    """KL(N(dmu, L L^T) || N(0, I)) with the log-determinant read off the Cholesky diagonal."""
    d = chol.data
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"Cholesky factor must be square, got {d.shape}")
    if np.any(np.diagonal(d) <= 0):
        raise UsageError("kl_full_cov requires a positive Cholesky diagonal")
    n = d.shape[0]
    trace = frobenius_sq(chol)                      # tr(LL^T) = ||L||_F^2
    quad = T.tsum(T.multiply(delta_mu, delta_mu))
    logdet = T.scale(T.tsum(T.log(T.diag_part(chol))), 2.0)
    return T.scale(T.subtract(T.add(trace, quad), T.add(logdet, float(n))), 0.5)


def _kl_gaussians_general(mu_q: np.ndarray, cov_q: np.ndarray, mu_p: np.ndarray, cov_p: np.ndarray) -> float:
    """Generic two-Gaussian KL via linear algebra; used for the shift-identity check."""
    k = mu_q.shape[0]
    inv_p = np.linalg.inv(cov_p)
    _, logdet_p = np.linalg.slogdet(cov_p)
    _, logdet_q = np.linalg.slogdet(cov_q)
    diff = mu_p - mu_q
    return 0.5 * float(logdet_p - logdet_q - k + np.trace(inv_p @ cov_q) + diff @ inv_p @ diff)


def kl_shift_identity_check(mu0: np.ndarray, delta_mu: np.ndarray, scale) -> float:
    """|KL(N(mu0+dmu, S) || N(mu0, I)) - KL(N(dmu, S) || N(0, I))| via the general formula.

    `scale` is either a positive sigma vector (diagonal) or a lower-triangular
    Cholesky factor.
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    delta_mu = np.asarray(delta_mu, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    cov = np.diag(scale**2) if scale.ndim == 1 else scale @ scale.T
    eye = np.eye(mu0.shape[0])
    lhs = _kl_gaussians_general(mu0 + delta_mu, cov, mu0, eye)
    rhs = _kl_gaussians_general(delta_mu, cov, np.zeros_like(mu0), eye)
    return abs(lhs - rhs)


def variational_loss(task_loss: Tensor, kl: Tensor, beta: float) -> Tensor:
    if beta < 0:
        raise UsageError("beta must be nonnegative")
    return T.add(task_loss, T.scale(kl, beta))


def vtsr_temperature(u: Tensor, net: TempNet) -> Tensor:
    """Strictly positive input-dependent temperature exp(head(silu(u W1)))."""
    hidden = T.silu(T.matmul(u, net.w1))
    raw = T.matmul(hidden, net.w_head)  # shape (1,) for vectors, (R, 1) for batches
    return T.exp(raw)


def gumbel_softmax_relax(logits: Tensor, temperature, tau: float, rng: Rng) -> Tensor:
    """softmax((logits/T + g) / tau) with standard Gumbel noise g."""
    if tau <= 0:
        raise UsageError("tau must be positive")
    t = temperature if isinstance(temperature, Tensor) else Tensor(float(temperature))
    if np.any(t.data <= 0):
        raise UsageError("temperature must be positive")
    g = rng.gumbel(logits.shape)
    perturbed = T.add(T.divide(logits, t), Tensor(g))
    return T.softmax(T.scale(perturbed, 1.0 / tau))


def sample_k_without_replacement(probs, k: int, rng: Rng) -> tuple[int, ...]:
    """Sequential draws with renormalisation after each removal."""
    p = probs.data.copy() if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64).copy()
    n = p.shape[0]
    if k > n:
        raise UsageError(f"cannot sample {k} of {n} experts")
    if int(np.sum(p > 0)) < k:
        raise UsageError("fewer experts with positive mass than requested draws")
    chosen = []
    for _ in range(k):
        q = p / p.sum()
        i = rng.categorical(q)
        while p[i] == 0.0:  # guard: never select zero-mass leftovers
            i = (i + 1) % n
        chosen.append(i)
        p[i] = 0.0
    return tuple(sorted(chosen))


def temp_reg_loss(temps: Tensor) -> Tensor:
    """Mean negative log-temperature over a batch of positive scalars."""
    if np.any(temps.data <= 0):
        raise UsageError("temperatures must be positive")
    return T.scale(T.mean(T.log(temps)), -1.0)


# ---------------------------------------------------------------------------
# per-layer router objects


@dataclass
class RouteEvidence:
    """Raw material for router-level uncertainty signals at one decision."""

    probs: np.ndarray
    logit_samples: np.ndarray | None = None
    sigma: np.ndarray | None = None
    chol: np.ndarray | None = None
    temperature: float | None = None


class Router:
    """Routing state for one layer: a method tag plus whatever it needs.

    `route` produces a RoutingDecision; `route_full` additionally returns
    the evidence record used by the uncertainty signals.
    """

    def __init__(self, method: RouterMethod, layer: MoELayer,
                 net: VariationalRouterNet | None = None,
                 temp_net: TempNet | None = None,
                 swag: SwagStats | None = None,
                 members: list[Tensor] | None = None):
        self.method = method
        self.layer = layer
        self.net = net
        self.temp_net = temp_net
        self.swag = swag
        self.members = members

    @classmethod
    def build(cls, method: RouterMethod, layer: MoELayer, rng: Rng | None = None) -> "Router":
        d, n = layer.w_ec.shape
        if isinstance(method, (MFVR, FCVR)):
            if rng is None:
                raise UsageError("variational routers need an rng for net initialisation")
            net = VariationalRouterNet.init(d, n, method.hidden, isinstance(method, FCVR), rng)
            return cls(method, layer, net=net)
        if isinstance(method, VTSR):
            if rng is None:
                raise UsageError("VTSR needs an rng for net initialisation")
            return cls(method, layer, temp_net=TempNet.init(d, method.hidden, rng))
        if isinstance(method, SWAGR):
            return cls(method, layer, swag=SwagStats(layer.w_ec.shape, method.rank))
        if isinstance(method, DER):
            return cls(method, layer, members=[])
        return cls(method, layer)

    def trainable_params(self) -> list[Tensor]:
        m = self.method
        if isinstance(m, (MCDR, SWAGR)):
            return [self.layer.w_ec]
        if isinstance(m, (MFVR, FCVR)):
            return self.net.params()
        if isinstance(m, VTSR):
            return [self.layer.w_ec] + self.temp_net.params()
        return []

    def route(self, u: Tensor, rng: Rng | None = None, mode: str = "infer") -> RoutingDecision:
        return self.route_full(u, rng, mode)[0]

    def route_full(self, u: Tensor, rng: Rng | None = None, mode: str = "infer"):
        m = self.method
        layer = self.layer
        k = layer.k
        if mode not in ("train", "infer"):
            raise UsageError(f"unknown mode {mode!r}")
        if not isinstance(m, Deterministic) and rng is None:
            raise UsageError(f"{m.name} routing needs an rng")

        if isinstance(m, Deterministic):
            l = score_experts(u, layer)
            probs = T.softmax(l)
            dec = route_topk(probs, k, logits=l)
            return dec, RouteEvidence(probs=probs.data.copy())

        if isinstance(m, TempSampling):
            l = score_experts(u, layer)
            probs = T.softmax(T.scale(l, 1.0 / m.temperature))
            sel = sample_k_without_replacement(probs, k, rng)
            dec = decision_from_selection(l, probs, sel)
            return dec, RouteEvidence(probs=probs.data.copy())

        if isinstance(m, MCDR):
            if mode == "train":
                l = mcdr_forward(u, layer, m.p, rng)
                dec = route_topk(T.softmax(l), k, logits=l)
                return dec, RouteEvidence(probs=dec.probs.data.copy())
            samples = []

            def draw(r: Rng) -> Tensor:
                l = mcdr_forward(u, layer, m.p, r)
                samples.append(l.data.copy())
                return l

            probs = mc_average_probs(draw, m.samples, rng)
            l_det = score_experts(u, layer)
            dec = route_topk(probs, k, logits=l_det)
            return dec, RouteEvidence(probs=probs.data.copy(), logit_samples=np.stack(samples))

        if isinstance(m, SWAGR):
            if mode == "train":
                l = score_experts(u, layer)
                dec = route_topk(T.softmax(l), k, logits=l)
                return dec, RouteEvidence(probs=dec.probs.data.copy())
            samples = []

            def draw(r: Rng) -> Tensor:
                w = swag_sample(self.swag, r)
                l = T.matmul(u, Tensor(w))
                samples.append(l.data.copy())
                return l

            probs = mc_average_probs(draw, m.samples, rng)
            l_det = score_experts(u, layer)
            dec = route_topk(probs, k, logits=l_det)
            return dec, RouteEvidence(probs=probs.data.copy(), logit_samples=np.stack(samples))

        if isinstance(m, DER):
            if mode == "train" or not self.members:
                l = score_experts(u, layer)
                dec = route_topk(T.softmax(l), k, logits=l)
                return dec, RouteEvidence(probs=dec.probs.data.copy())
            probs = der_average(self.members, u)
            samples = np.stack([T.matmul(u, w).data for w in self.members])
            l_det = score_experts(u, layer)
            dec = route_topk(probs, k, logits=l_det)
            return dec, RouteEvidence(probs=probs.data.copy(), logit_samples=samples)

        if isinstance(m, (MFVR, FCVR)):
            l_det = score_experts(u, layer)
            post = variational_posterior(u, l_det, self.net)
            sampler = mf_sample if isinstance(m, MFVR) else fc_sample
            if mode == "train":
                ls = sampler(post, rng)
                dec = route_topk(T.softmax(ls), k, logits=ls)
            else:
                probs = mc_average_probs(lambda r: sampler(post, r), m.samples, rng)
                dec = route_topk(probs, k, logits=post.mean)
            ev = RouteEvidence(
                probs=dec.probs.data.copy(),
                sigma=post.diag_sigma.data.copy() if post.diag_sigma is not None else None,
                chol=post.chol.data.copy() if post.chol is not None else None,
            )
            return dec, ev

        if isinstance(m, VTSR):
            l = score_experts(u, layer)
            temp = vtsr_temperature(u, self.temp_net)
            if mode == "train":
                relaxed = gumbel_softmax_relax(l, temp, m.tau, rng)
                sel = topk_indices(relaxed.data, k)
                dec = decision_from_selection(l, relaxed, sel)
            else:
                probs = T.softmax(T.divide(l, temp))
                sel = sample_k_without_replacement(probs, k, rng)
                dec = decision_from_selection(l, probs, sel)
            return dec, RouteEvidence(probs=dec.probs.data.copy(), temperature=float(temp.data.reshape(-1)[0]))

        raise UsageError(f"unknown router method: {m!r}")


def build_routers(method: RouterMethod, model_layers: Sequence[MoELayer],
                  modified: Sequence[int], rng: Rng) -> list[Router]:
    """Per-layer router list: `method` on modified layers, deterministic elsewhere."""
    routers = []
    for i, layer in enumerate(model_layers):
        if i in set(modified):
            routers.append(Router.build(method, layer, rng.child(i)))
        else:
            routers.append(Router.build(Deterministic(), layer))
    return routers
