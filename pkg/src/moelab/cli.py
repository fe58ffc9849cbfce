"""Command-line entry points for the experiment harness.

Every experiment subcommand reads one JSON config, writes line-delimited
JSON records and CSV summaries under the output directory, and prints a
one-line summary. Reruns with the same config and seed produce
byte-identical artifacts: checkpoints cache on a config digest and all
records carry no timestamps.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_bundle, load_model, save_bundle, save_model
from .config import ExperimentConfig, config_digest, load_config
from .exceptions import TrainingError, UsageError
from .experiments import (
    Susceptible,
    UncertaintySignal,
    overhead_flops,
    overhead_params,
    run_calibration,
    run_ood,
    run_stability,
    select_layers,
)
from .metrics import reliability_csv, report_to_json
from .model import ModelConfig
from .rng import Rng
from .routers import Deterministic, Router
from .task import class_balance_deviation, generate_task
from .training import BayesBundle, train_bayes_router, train_map_baseline

ALL_SIGNALS = tuple(UncertaintySignal)


def _out_dir(cfg: ExperimentConfig | None, args) -> Path:
    if getattr(args, "out", None):
        root = args.out
    elif cfg is not None and cfg.out_dir:
        root = cfg.out_dir
    else:
        root = os.environ.get("MOELAB_OUT", "moelab_out")
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _seeds(cfg: ExperimentConfig, args) -> tuple[int, ...]:
    if getattr(args, "seed", None) is not None:
        return (int(args.seed),)
    return cfg.experiment.seeds


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _task_for(cfg: ExperimentConfig, seed: int):
    return generate_task(cfg.task, Rng(seed).child(100))


def _map_path(out: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return out / "checkpoints" / f"map_{config_digest(cfg)}_s{seed}.ckpt"


def _bayes_path(out: Path, cfg: ExperimentConfig, seed: int, strategy_tag: str | None = None) -> Path:
    tag = f"_{strategy_tag}" if strategy_tag else ""
    return out / "checkpoints" / f"{cfg.method.name}_{config_digest(cfg)}{tag}_s{seed}.ckpt"


def prepare_map(cfg: ExperimentConfig, seed: int, out: Path):
    path = _map_path(out, cfg, seed)
    if path.exists():
        return load_model(path)
    task = _task_for(cfg, seed)
    model, history = train_map_baseline(task, cfg.model, cfg.training, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, model, extra_header={"seed": seed, "digest": config_digest(cfg)})
    hist_path = out / "history" / f"map_{config_digest(cfg)}_s{seed}.json"
    _write_text(hist_path, json.dumps(history, sort_keys=True))
    return model


def _resolve_layers(cfg: ExperimentConfig, seed: int, model, task, strategy=None) -> tuple[int, ...]:
    strategy = strategy if strategy is not None else cfg.experiment.strategy()
    stability = None
    if isinstance(strategy, Susceptible):
        det = BayesBundle(model, [Router.build(Deterministic(), layer) for layer in model.layers],
                          Deterministic(), ())
        gammas = (strategy.gamma,)
        stability = run_stability(det, task, gammas, cfg.experiment.stability_tokens,
                                  Rng(seed).child(200))
    return select_layers(strategy, stability, cfg.model.layers)


def prepare_bundle(cfg: ExperimentConfig, seed: int, out: Path, strategy=None,
                   strategy_tag: str | None = None) -> BayesBundle:
    path = _bayes_path(out, cfg, seed, strategy_tag)
    if path.exists():
        return load_bundle(path)
    model = prepare_map(cfg, seed, out)
    task = _task_for(cfg, seed)
    layers = _resolve_layers(cfg, seed, model, task, strategy)
    bundle = train_bayes_router(model, cfg.method, task, cfg.training, seed, layers)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(path, bundle, extra_header={"seed": seed, "digest": config_digest(cfg)})
    hist_path = out / "history" / f"{cfg.method.name}_{config_digest(cfg)}_s{seed}.json"
    _write_text(hist_path, json.dumps(bundle.history, sort_keys=True))
    return bundle


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_task(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    seed = _seeds(cfg, args)[0]
    task = _task_for(cfg, seed)
    records = []
    for split in ("train", "val", "test", "ood"):
        toks, labels = task.tokens_labels(split)
        records.append({
            "split": split,
            "size": int(toks.shape[0]),
            "balance_deviation": class_balance_deviation(task, split),
        })
    summary = {
        "seed": seed,
        "realized_shift": task.realized_shift,
        "requested_shift": cfg.task.ood_shift,
        "splits": records,
    }
    _write_text(out / "task" / f"task_s{seed}.json", json.dumps(summary, sort_keys=True))
    lines = []
    for split in ("train", "val", "test", "ood"):
        for (toks, label) in task.splits[split]:
            lines.append(json.dumps({"split": split, "tokens": list(toks), "label": label},
                                    sort_keys=True))
    _write_text(out / "task" / f"data_s{seed}.jsonl", "\n".join(lines) + "\n")
    print(f"gen-task: seed {seed} shift {task.realized_shift:.3f} "
          f"(requested {cfg.task.ood_shift}) -> {out / 'task'}")
    return 0


def cmd_train_map(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    accs = []
    for seed in _seeds(cfg, args):
        task = _task_for(cfg, seed)
        model = prepare_map(cfg, seed, out)
        from .routers import Router
        routers = [Router.build(Deterministic(), layer) for layer in model.layers]
        from .training import predict_batch
        toks, labels = task.tokens_labels("val")
        accs.append(float(np.mean(predict_batch(model, routers, toks) == labels)))
    print(f"train-map: {len(accs)} seed(s), val accuracy mean {np.mean(accs):.3f}")
    return 0


def cmd_train_bayes(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    done = []
    for seed in _seeds(cfg, args):
        bundle = prepare_bundle(cfg, seed, out)
        done.append(bundle.modified_layers)
    print(f"train-bayes: method {cfg.method.name}, {len(done)} seed(s), "
          f"modified layers {sorted(set(done))}")
    return 0


def cmd_stability(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    gammas = cfg.experiment.noise_grid
    records = []
    for seed in _seeds(cfg, args):
        bundle = prepare_bundle(cfg, seed, out)
        task = _task_for(cfg, seed)
        result = run_stability(bundle, task, gammas, cfg.experiment.stability_tokens,
                               Rng(seed).child(300))
        for layer in result.layers:
            for gamma in result.gammas:
                records.append({
                    "method": cfg.method.name, "seed": seed, "layer": layer, "gamma": gamma,
                    "jaccard_mean": result.layer_mean(layer, gamma),
                    "n_tokens": int(result.scores[(layer, gamma)].size),
                    "selected": layer in bundle.modified_layers,
                })
    _write_text(out / "stability" / f"{cfg.method.name}_{config_digest(cfg)}.jsonl", _jsonl(records))
    rows = []
    for gamma in gammas:
        cells = [r["jaccard_mean"] for r in records if r["gamma"] == gamma]
        rows.append([f"{gamma:g}", f"{np.mean(cells):.6f}"])
    _write_text(out / "stability" / f"{cfg.method.name}_{config_digest(cfg)}_sweep.csv",
                _csv_text(["gamma", "jaccard_mean"], rows))
    sel = [r["jaccard_mean"] for r in records if r["selected"]] or [r["jaccard_mean"] for r in records]
    print(f"stability: {cfg.method.name} mean Jaccard {np.mean(sel):.3f} over "
          f"{len(records)} cells")
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    rows = []
    for seed in _seeds(cfg, args):
        bundle = prepare_bundle(cfg, seed, out)
        task = _task_for(cfg, seed)
        reports, _ = run_calibration(bundle, task, cfg.experiment.s_inference, [seed],
                                     bins=cfg.experiment.bins, limit=cfg.experiment.eval_limit)
        rep = reports[0]
        rows.append([cfg.method.name, seed, f"{rep.accuracy:.6f}", f"{rep.nll:.6f}",
                     f"{rep.ece:.6f}", f"{rep.mce:.6f}"])
        _write_text(out / "calibration" / f"{cfg.method.name}_{config_digest(cfg)}_s{seed}.json",
                    report_to_json(rep))
        _write_text(out / "calibration" / f"{cfg.method.name}_{config_digest(cfg)}_s{seed}_bins.csv",
                    reliability_csv(rep))
    header = ["method", "seed", "accuracy", "nll", "ece", "mce"]
    accs = [float(r[2]) for r in rows]
    eces = [float(r[4]) for r in rows]
    rows.append([cfg.method.name, "mean", f"{np.mean(accs):.6f}", "",
                 f"{np.mean(eces):.6f}", ""])
    _write_text(out / "calibration" / f"{cfg.method.name}_{config_digest(cfg)}_summary.csv",
                _csv_text(header, rows))
    print(f"calibrate: {cfg.method.name} accuracy {np.mean(accs):.3f} ece {np.mean(eces):.4f} "
          f"over {len(accs)} seed(s)")
    return 0


def cmd_ood(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    records = []
    for seed in _seeds(cfg, args):
        bundle = prepare_bundle(cfg, seed, out)
        task = _task_for(cfg, seed)
        results, notes = run_ood(bundle, task, ALL_SIGNALS, Rng(seed).child(400),
                                 limit=cfg.experiment.eval_limit)
        for signal, vals in sorted(results.items()):
            records.append({"method": cfg.method.name, "seed": seed, "signal": signal, **vals})
        for signal, note in sorted(notes.items()):
            records.append({"method": cfg.method.name, "seed": seed, "signal": signal, "note": note})
    _write_text(out / "ood" / f"{cfg.method.name}_{config_digest(cfg)}.jsonl", _jsonl(records))
    rows = []
    for signal in sorted({r["signal"] for r in records if "auroc" in r}):
        vals = [r["auroc"] for r in records if r.get("signal") == signal and "auroc" in r]
        pvals = [r["auprc"] for r in records if r.get("signal") == signal and "auprc" in r]
        rows.append([cfg.method.name, signal, f"{np.mean(vals):.6f}", f"{np.mean(pvals):.6f}", len(vals)])
    _write_text(out / "ood" / f"{cfg.method.name}_{config_digest(cfg)}_summary.csv",
                _csv_text(["method", "signal", "auroc_mean", "auprc_mean", "seeds"], rows))
    shown = ", ".join(f"{r[1]}={r[2]}" for r in rows) or "no compatible signals"
    print(f"ood: {cfg.method.name} {shown}")
    return 0


def cmd_ablate_layers(args) -> int:
    from .experiments import LastFive, LastOne

    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    strategies = [("susceptible", Susceptible()), ("last_one", LastOne()), ("last_five", LastFive())]
    rows = []
    ref_gamma = 0.01
    for tag, strategy in strategies:
        for seed in _seeds(cfg, args):
            bundle = prepare_bundle(cfg, seed, out, strategy=strategy, strategy_tag=tag)
            task = _task_for(cfg, seed)
            layers = bundle.modified_layers
            stab = run_stability(bundle, task, (ref_gamma,), cfg.experiment.stability_tokens,
                                 Rng(seed).child(300), layers=layers)
            reports, _ = run_calibration(bundle, task, cfg.experiment.s_inference, [seed],
                                         bins=cfg.experiment.bins, limit=cfg.experiment.eval_limit)
            ood_res, _ = run_ood(bundle, task, (UncertaintySignal.OUTPUT_ENTROPY,),
                                 Rng(seed).child(400), limit=cfg.experiment.eval_limit)
            rows.append([cfg.method.name, tag, seed, ",".join(map(str, layers)),
                         f"{stab.aggregate(ref_gamma):.6f}",
                         f"{reports[0].ece:.6f}",
                         f"{ood_res['output_entropy']['auroc']:.6f}"])
    _write_text(out / "ablation" / f"{cfg.method.name}_{config_digest(cfg)}.csv",
                _csv_text(["method", "strategy", "seed", "layers", "jaccard", "ece", "auroc"], rows))
    print(f"ablate-layers: {cfg.method.name} wrote {len(rows)} cells")
    return 0


def cmd_overhead(args) -> int:
    kwargs = dict(l=args.L, d=args.D, n=args.N, s=args.S, m=args.M, h=args.H)
    if args.flops:
        value = overhead_flops(args.method, **kwargs)
        print(f"{value:g}")
    else:
        value = overhead_params(args.method, **kwargs)
        print(value)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        record = {"method": args.method, **{k.upper(): v for k, v in kwargs.items()},
                  "params" if not args.flops else "flops": value}
        _write_text(out / f"overhead_{args.method}.json", json.dumps(record, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    out = _out_dir(None, args)
    merged = {"calibration": [], "ood": [], "stability": []}
    for sub, pattern in (("calibration", "*_summary.csv"), ("ood", "*_summary.csv"),
                         ("stability", "*_sweep.csv")):
        folder = out / sub
        if not folder.exists():
            continue
        for path in sorted(folder.glob(pattern)):
            lines = path.read_text().strip().split("\n")
            merged[sub].extend([f"# {path.name}"] + lines)
    wrote = []
    for sub, lines in merged.items():
        if lines:
            _write_text(out / f"report_{sub}.csv", "\n".join(lines) + "\n")
            wrote.append(sub)
    print(f"report: merged {', '.join(wrote) if wrote else 'nothing'} under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab",
                                description="Bayesian MoE routing experiments at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_cmd(name, fn, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", required=True, help="path to the JSON experiment config")
        c.add_argument("--seed", type=int, default=None, help="override the config seed list")
        c.add_argument("--out", default=None, help="output directory (else config/out_dir or $MOELAB_OUT)")
        c.set_defaults(fn=fn)
        return c

    add_config_cmd("gen-task", cmd_gen_task, "generate the synthetic task and write split records")
    add_config_cmd("train-map", cmd_train_map, "train the deterministic MAP baseline")
    add_config_cmd("train-bayes", cmd_train_bayes, "fine-tune the configured Bayesian router")
    add_config_cmd("stability", cmd_stability, "perturbation stability (Jaccard) sweep")
    add_config_cmd("calibrate", cmd_calibrate, "in-distribution calibration metrics")
    add_config_cmd("ood", cmd_ood, "out-of-distribution detection metrics")
    add_config_cmd("ablate-layers", cmd_ablate_layers, "compare layer-selection strategies")

    o = sub.add_parser("overhead", help="theoretical parameter/FLOP overhead")
    o.add_argument("--method", required=True)
    o.add_argument("--L", type=int, required=True)
    o.add_argument("--D", type=int, required=True)
    o.add_argument("--N", type=int, required=True)
    o.add_argument("--S", type=int, default=35)
    o.add_argument("--M", type=int, default=10)
    o.add_argument("--H", type=int, default=384)
    o.add_argument("--flops", action="store_true", help="print FLOPs instead of parameters")
    o.add_argument("--out", default=None)
    o.set_defaults(fn=cmd_overhead)

    r = sub.add_parser("report", help="merge result records into summary CSVs")
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
