"""Synthetic classification tasks for the experiment harness.

Tokens are emitted by Gaussian clusters living in a generator-side
embedding space: a sample picks a cluster, draws points around its
center, and quantises each point to the nearest vocabulary vector. The
label is the cluster's class. Out-of-distribution sets come from the
same vocabulary but radially displaced cluster centers; the generator
scales the displacement until the realised mean token-embedding shift
reaches the requested magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import TrainingError, UsageError
from .rng import Rng

__all__ = ["TaskSpec", "SyntheticTask", "generate_task", "class_balance_deviation"]


@dataclass(frozen=True)
class TaskSpec:
    vocab: int = 256
    seq_len: int = 4
    clusters: int = 8
    classes: int = 4
    emb_dim: int = 8
    center_radius: float = 3.0
    cluster_spread: float = 0.8
    spread_max: float | None = None  # per-cluster spreads ramp from cluster_spread up to this
    train_size: int = 1024
    val_size: int = 256
    test_size: int = 512
    ood_size: int = 512
    ood_shift: float = 3.0

    def __post_init__(self):
        if self.classes > self.clusters:
            raise UsageError("need at least one cluster per class")
        if self.ood_shift < 0:
            raise UsageError("ood_shift must be nonnegative")
        if self.spread_max is not None and self.spread_max < self.cluster_spread:
            raise UsageError("spread_max must be >= cluster_spread")
        for name in ("vocab", "seq_len", "clusters", "classes", "emb_dim",
                     "train_size", "val_size", "test_size", "ood_size"):
            if getattr(self, name) <= 0:
                raise UsageError(f"TaskSpec.{name} must be positive")


@dataclass
class SyntheticTask:
    spec: TaskSpec
    vocab_vectors: np.ndarray          # V x E generator-side embedding
    centers: np.ndarray                # clusters x E
    ood_centers: np.ndarray
    class_of_cluster: np.ndarray       # clusters,
    splits: dict                       # name -> list[(tokens tuple, label int)]
    split_clusters: dict               # name -> list[int], the emitting cluster per sample
    realized_shift: float

    def tokens_labels(self, split: str):
        data = self.splits[split]
        toks = np.array([t for t, _ in data], dtype=np.intp)
        labels = np.array([l for _, l in data], dtype=np.intp)
        return toks, labels


def _nearest_token(z: np.ndarray, vocab: np.ndarray) -> int:
    d = ((vocab - z) ** 2).sum(axis=1)
    return int(np.argmin(d))


def cluster_spreads(spec: TaskSpec) -> np.ndarray:
    """Per-cluster emission spreads; a ramp when spread_max is set."""
    if spec.spread_max is None:
        return np.full(spec.clusters, spec.cluster_spread)
    return np.linspace(spec.cluster_spread, spec.spread_max, spec.clusters)


def _draw_sample(rng: Rng, centers: np.ndarray, class_of_cluster: np.ndarray,
                 vocab: np.ndarray, spec: TaskSpec):
    spreads = cluster_spreads(spec)
    c = int(rng.integers(0, spec.clusters))
    z = centers[c] + spreads[c] * rng.normal((spec.seq_len, spec.emb_dim))
    tokens = tuple(_nearest_token(z[t], vocab) for t in range(spec.seq_len))
    return (tokens, int(class_of_cluster[c])), c


def _draw_split(rng: Rng, n: int, centers, class_of_cluster, vocab, spec,
                taken: set) -> list:
    """Draw n samples avoiding sequences already owned by earlier splits."""
    out, clusters = [], []
    for i in range(n):
        for attempt in range(200):
            sample, c = _draw_sample(rng.child(i).child(attempt), centers, class_of_cluster, vocab, spec)
            if sample not in taken:
                break
        else:
            raise TrainingError("could not draw a sequence disjoint from earlier splits; "
                                "increase vocab or seq_len")
        out.append(sample)
        clusters.append(c)
    return out, clusters


def _per_cluster_displacement(id_split, id_clusters, ood_split, ood_clusters,
                              vocab: np.ndarray, n_clusters: int) -> float:
    """Mean over clusters of the token-embedding mean shift between splits."""
    def cluster_means(split, clusters):
        means = {}
        for (seq, _), c in zip(split, clusters):
            means.setdefault(c, []).extend(seq)
        return {c: vocab[np.array(toks, dtype=np.intp)].mean(axis=0) for c, toks in means.items()}

    id_means = cluster_means(id_split, id_clusters)
    ood_means = cluster_means(ood_split, ood_clusters)
    shared = sorted(set(id_means) & set(ood_means))
    if not shared:
        return 0.0
    return float(np.mean([np.linalg.norm(ood_means[c] - id_means[c]) for c in shared]))


def _build_vocab(spec: TaskSpec, centers: np.ndarray, dirs: np.ndarray, rng: Rng) -> np.ndarray:
    """Vocabulary vectors covering the cluster regions, their shifted
    counterparts, and a diffuse background.

    Seeding tokens around every emission site keeps per-cluster token
    diversity high (so sequences rarely collide) and guarantees the OoD
    region quantises onto distinct vocabulary entries.
    """
    shifted = centers + dirs * spec.ood_shift
    sites = np.concatenate([centers, shifted], axis=0)
    n_sites = sites.shape[0]
    per_site = (3 * spec.vocab // 4) // n_sites
    chunks = []
    spreads = np.concatenate([cluster_spreads(spec), cluster_spreads(spec)])
    for s in range(n_sites):
        local = rng.child(s).normal((per_site, spec.emb_dim)) * 1.2 * spreads[s]
        chunks.append(sites[s] + local)
    n_bg = spec.vocab - per_site * n_sites
    # background covers the ID region only; the shifted sites carry their own tokens
    top_spread = spec.spread_max if spec.spread_max is not None else spec.cluster_spread
    bg_scale = (spec.center_radius + 2.0 * top_spread) / np.sqrt(spec.emb_dim)
    chunks.append(rng.child(n_sites).normal((n_bg, spec.emb_dim)) * bg_scale)
    return np.concatenate(chunks, axis=0)


def generate_task(spec: TaskSpec, rng: Rng) -> SyntheticTask:
    """Reproducible task build; same (spec, seed) gives identical datasets."""
    dirs = rng.child(1).normal((spec.clusters, spec.emb_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = dirs * spec.center_radius
    class_of_cluster = np.arange(spec.clusters) % spec.classes
    vocab = _build_vocab(spec, centers, dirs, rng.child(0))

    taken: set = set()
    splits = {}
    split_clusters = {}
    for name, size, child in (("train", spec.train_size, 2), ("val", spec.val_size, 3),
                              ("test", spec.test_size, 4)):
        # disjointness is across splits; duplicates inside one split are fine
        splits[name], split_clusters[name] = _draw_split(
            rng.child(child), size, centers, class_of_cluster, vocab, spec, taken)
        taken.update(splits[name])

    ood_centers = centers
    realized = 0.0
    if spec.ood_shift == 0.0:
        splits["ood"], split_clusters["ood"] = _draw_split(
            rng.child(5), spec.ood_size, centers, class_of_cluster, vocab, spec, taken)
        realized = _per_cluster_displacement(splits["train"], split_clusters["train"],
                                             splits["ood"], split_clusters["ood"],
                                             vocab, spec.clusters)
    else:
        # scale the radial displacement until the realised per-cluster
        # token-embedding shift reaches the requested magnitude despite
        # vocabulary quantisation
        scale = 1.0
        for attempt in range(14):
            ood_centers = centers + dirs * spec.ood_shift * scale
            candidate, cand_clusters = _draw_split(rng.child(5).child(attempt), spec.ood_size,
                                                   ood_centers, class_of_cluster, vocab, spec, taken)
            realized = _per_cluster_displacement(splits["train"], split_clusters["train"],
                                                 candidate, cand_clusters, vocab, spec.clusters)
            if realized >= spec.ood_shift:
                splits["ood"] = candidate
                split_clusters["ood"] = cand_clusters
                break
            scale *= 1.35
        else:
            raise TrainingError(
                f"could not realise an OoD shift of {spec.ood_shift} "
                f"(best {realized:.3f}); enlarge the vocabulary scale")
    taken.update(splits["ood"])

    return SyntheticTask(
        spec=spec,
        vocab_vectors=vocab,
        centers=centers,
        ood_centers=ood_centers,
        class_of_cluster=class_of_cluster,
        splits=splits,
        split_clusters=split_clusters,
        realized_shift=realized,
    )


def class_balance_deviation(task: SyntheticTask, split: str) -> float:
    """Max absolute deviation of class frequencies from uniform."""
    _, labels = task.tokens_labels(split)
    freq = np.bincount(labels, minlength=task.spec.classes) / labels.size
    return float(np.max(np.abs(freq - 1.0 / task.spec.classes)))
