"""Flat binary/JSON hybrid checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header (config, method, tensor manifest), then the tensor payloads as
little-endian float64 in manifest order. Router checkpoints extend the
model format with a method tag and method-specific tensor sections;
ensembles store one named section per member.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .exceptions import UsageError
from .model import ExpertFFN, ModelConfig, MoEClassifier, MoELayer
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
    SwagStats,
    TempNet,
    TempSampling,
    VariationalRouterNet,
    method_from_dict,
)
from .rng import Rng
from .tensor import Tensor
from .training import BayesBundle

MAGIC = b"MOELABv1"


def method_to_dict(method: RouterMethod) -> dict:
    d = asdict(method)
    d["name"] = method.name
    return d


def _model_manifest(model: MoEClassifier) -> list[tuple[str, np.ndarray]]:
    entries = [("embedding", model.embedding.data), ("head", model.head.data)]
    for li, layer in enumerate(model.layers):
        entries.append((f"layer{li}/w_ec", layer.w_ec.data))
        for ei, e in enumerate(layer.experts):
            entries.append((f"layer{li}/expert{ei}/w_up", e.w_up.data))
            entries.append((f"layer{li}/expert{ei}/w_gate", e.w_gate.data))
            entries.append((f"layer{li}/expert{ei}/w_down", e.w_down.data))
    return entries


def _router_manifest(bundle: BayesBundle) -> tuple[list[tuple[str, np.ndarray]], dict]:
    entries: list[tuple[str, np.ndarray]] = []
    state: dict = {}
    for li in bundle.modified_layers:
        r = bundle.routers[li]
        prefix = f"router{li}"
        if r.net is not None:
            entries.append((f"{prefix}/net/w1", r.net.w1.data))
            entries.append((f"{prefix}/net/w_mu", r.net.w_mu.data))
            entries.append((f"{prefix}/net/w_scale", r.net.w_scale.data))
        if r.temp_net is not None:
            entries.append((f"{prefix}/temp/w1", r.temp_net.w1.data))
            entries.append((f"{prefix}/temp/w_head", r.temp_net.w_head.data))
        if r.swag is not None:
            entries.append((f"{prefix}/swag/mean", r.swag.mean))
            entries.append((f"{prefix}/swag/sq_mean", r.swag.sq_mean))
            for di, dev in enumerate(r.swag.dev):
                entries.append((f"{prefix}/swag/dev{di}", dev))
            state[str(li)] = {"count": r.swag.count, "n_dev": len(r.swag.dev), "rank": r.swag.rank}
        if r.members:
            for mi, w in enumerate(r.members):
                entries.append((f"{prefix}/member{mi}/w_ec", w.data))
    return entries, state


def _write(path: Path, header: dict, entries: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["tensors"] = [{"name": name, "shape": list(arr.shape)} for name, arr in entries]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise UsageError(f"{path} is not a moelab checkpoint")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, tensors


def save_model(path, model: MoEClassifier, extra_header: dict | None = None) -> None:
    header = {"kind": "model", "config": asdict(model.config)}
    if extra_header:
        header.update(extra_header)
    _write(Path(path), header, _model_manifest(model))


def load_model(path) -> MoEClassifier:
    header, tensors = _read(Path(path))
    return _model_from(header, tensors)


def _model_from(header: dict, tensors: dict) -> MoEClassifier:
    cfg = ModelConfig(**header["config"])
    layers = []
    for li in range(cfg.layers):
        experts = [ExpertFFN(
            Tensor(tensors[f"layer{li}/expert{ei}/w_up"], track=True),
            Tensor(tensors[f"layer{li}/expert{ei}/w_gate"], track=True),
            Tensor(tensors[f"layer{li}/expert{ei}/w_down"], track=True),
        ) for ei in range(cfg.experts)]
        layers.append(MoELayer(Tensor(tensors[f"layer{li}/w_ec"], track=True), experts, cfg.active_experts))
    return MoEClassifier(cfg, Tensor(tensors["embedding"], track=True), layers,
                         Tensor(tensors["head"], track=True))


def save_bundle(path, bundle: BayesBundle, extra_header: dict | None = None) -> None:
    """Router checkpoint: the model plus method tag and method tensors."""
    router_entries, swag_state = _router_manifest(bundle)
    header = {
        "kind": "router",
        "config": asdict(bundle.model.config),
        "method": method_to_dict(bundle.method),
        "modified_layers": list(bundle.modified_layers),
        "swag_state": swag_state,
    }
    if extra_header:
        header.update(extra_header)
    _write(Path(path), header, _model_manifest(bundle.model) + router_entries)


def load_bundle(path) -> BayesBundle:
    header, tensors = _read(Path(path))
    if header.get("kind") != "router":
        raise UsageError(f"{path} is not a router checkpoint")
    model = _model_from(header, tensors)
    method = method_from_dict(header["method"])
    modified = tuple(header["modified_layers"])
    routers: list[Router] = []
    for li, layer in enumerate(model.layers):
        if li not in modified:
            routers.append(Router(Deterministic(), layer))
            continue
        prefix = f"router{li}"
        if isinstance(method, (MFVR, FCVR)):
            net = VariationalRouterNet(
                w1=Tensor(tensors[f"{prefix}/net/w1"], track=True),
                w_mu=Tensor(tensors[f"{prefix}/net/w_mu"], track=True),
                w_scale=Tensor(tensors[f"{prefix}/net/w_scale"], track=True),
                full_cov=isinstance(method, FCVR),
            )
            routers.append(Router(method, layer, net=net))
        elif isinstance(method, VTSR):
            net = TempNet(
                w1=Tensor(tensors[f"{prefix}/temp/w1"], track=True),
                w_head=Tensor(tensors[f"{prefix}/temp/w_head"], track=True),
            )
            routers.append(Router(method, layer, temp_net=net))
        elif isinstance(method, SWAGR):
            st = header["swag_state"][str(li)]
            swag = SwagStats(layer.w_ec.shape, rank=st["rank"])
            swag.count = st["count"]
            swag.mean = tensors[f"{prefix}/swag/mean"]
            swag.sq_mean = tensors[f"{prefix}/swag/sq_mean"]
            for di in range(st["n_dev"]):
                swag.dev.append(tensors[f"{prefix}/swag/dev{di}"])
            routers.append(Router(method, layer, swag=swag))
        elif isinstance(method, DER):
            members = []
            mi = 0
            while f"{prefix}/member{mi}/w_ec" in tensors:
                members.append(Tensor(tensors[f"{prefix}/member{mi}/w_ec"]))
                mi += 1
            routers.append(Router(method, layer, members=members))
        else:
            routers.append(Router(method, layer))
    return BayesBundle(model, routers, method, modified, history={})
