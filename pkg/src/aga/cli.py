"""``aga`` command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every command takes ``--seed``; when it is absent the ``AGA_SEED``
environment variable is used, then the config file's seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .analysis import (
    AnalysisReport,
    BackwardConfig,
    ForwardProbe,
    backward_analysis,
    forward_analysis,
    gate_trace,
    guidance_comparison,
    robustness_sweep,
    write_plot_data,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, build_task, load_run_config
from .data import generate_dataset, load_embedding_file, save_embedding_file
from .errors import (
    AgaError,
    CheckpointError,
    ConfigError,
    FormatError,
    GuidanceError,
    ParameterError,
    ShapeError,
)
from .experiments import parse_values, run_sweep
from .metrics import summarize
from .model import GUIDANCE_MODES, AgaModel
from .train import TrainState, collect_predictions, train

log = logging.getLogger("aga")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
_VALIDATION_ERRORS = (ConfigError, ParameterError, ShapeError, FormatError, CheckpointError, GuidanceError)


class UsageError(Exception):
    """Bad command-line input; maps to exit code 2."""


# -- helpers -----------------------------------------------------------------------------
def resolve_seed(flag: Optional[int], fallback: Optional[int] = None) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get("AGA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"AGA_SEED must be an integer, got {env!r}") from exc
    return fallback


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_data(path: str, model_cfg=None, t_a: int = 1):
    p = _existing(path, "data file")
    d = None if model_cfg is None else model_cfg.d_backbone
    t_a = t_a if model_cfg is None else model_cfg.t_a
    episodes = load_embedding_file(p, t_a=t_a, d_backbone=d)
    if not episodes:
        raise UsageError(f"data file {p} holds no episodes")
    if model_cfg is not None:
        top = max((int(ep.actions.max()) for ep in episodes if ep.actions is not None), default=-1)
        if top >= model_cfg.n_classes:
            raise UsageError(f"data file {p} has label {top} but the model has {model_cfg.n_classes} classes")
    return episodes


def _int_list(text: str, what: str) -> List[int]:
    try:
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} must be a comma-separated list of integers: {text!r}") from exc
    if not out:
        raise UsageError(f"{what} is empty")
    return out


def _run_config(args) -> RunConfig:
    cfg = load_run_config(_existing(args.config, "config file"))
    seed = resolve_seed(args.seed, cfg.seed)
    if seed != cfg.seed:
        cfg = RunConfig.from_dict(cfg.to_dict(), seed=seed)
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg


# -- commands --------------------------------------------------------------------------------
def cmd_generate_data(args) -> int:
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    spec_path = _existing(args.spec, "task spec file")
    spec = build_task(_read_task(spec_path), seed=0)
    seed = resolve_seed(args.seed, 0)
    episodes = generate_dataset(spec, args.episodes, seed=seed)
    save_embedding_file(args.out, episodes, with_labels=not args.no_labels)
    print(f"wrote {len(episodes)} episodes (T={spec.T}, d={spec.d_backbone}, classes={spec.n_classes}) to {args.out}")
    return EXIT_OK


def _read_task(path: Path) -> dict:
    from .config import tomllib

    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return dict(raw.get("task", raw))


def cmd_train(args) -> int:
    cfg = _run_config(args)
    episodes = _load_data(args.data, cfg.model)
    val = _load_data(args.val_data, cfg.model) if args.val_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    resume: Optional[TrainState] = None
    if args.resume:
        ckpt = load_checkpoint(_existing(args.resume, "checkpoint"))
        if ckpt.config.get("model") != cfg.model.to_dict():
            raise UsageError("resume checkpoint was written with a different model configuration")
        model = ckpt.build_model()
        resume = ckpt.train_state()
    else:
        model = AgaModel(cfg.model, seed=cfg.seed)

    def save_epoch(model, state, record):
        save_checkpoint(out / f"epoch_{state.epoch:03d}.ckpt", Checkpoint.from_model(model, snapshot, state))
        print(json.dumps(record, sort_keys=True), flush=True)

    holder = {}

    def keep(model, state, record):
        holder["state"] = state

    report = train(model, episodes, cfg.train, val_episodes=val, callbacks=[save_epoch, keep], resume=resume)
    final_state = holder.get("state", resume)
    save_checkpoint(out / "final.ckpt", Checkpoint.from_model(model, snapshot, final_state))
    (out / "report.jsonl").write_text(report.to_lines())
    print(f"initial loss {report.initial_loss:.4f}, final loss {report.final_loss:.4f}; checkpoints in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(_existing(args.checkpoint, "checkpoint")).build_model()
    episodes = _load_data(args.data, model.cfg)
    ks = _int_list(args.topk, "--topk")
    metrics = summarize(collect_predictions(model, episodes, args.point), ks)
    for k in ks:
        print(f"top{k}_acc\t{metrics[f'top{k}_acc']:.4f}")
        print(f"mt{k}r\t{metrics[f'mt{k}r']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    values = parse_values(args.param, args.values)
    seeds = _int_list(args.seeds, "--seeds") if args.seeds else [cfg.seed]
    train_eps = _load_data(args.data, cfg.model)
    val_eps = _load_data(args.val_data, cfg.model)
    rows = run_sweep(args.param, values, cfg.model, cfg.train, train_eps, val_eps, seeds)
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _parse_probe_line(line: str) -> ForwardProbe:
    try:
        query, cands = line.split(";")
        return ForwardProbe([int(s) for s in query.split(",")], [int(s) for s in cands.split(",")])
    except ValueError as exc:
        raise UsageError(f"probe rows look like '3,5;1,2,7', got {line!r}") from exc


def cmd_analyze(args) -> int:
    kind = args.kind
    seed = resolve_seed(args.seed, 0)
    if kind == "guidance":
        return _analyze_guidance(args, seed)
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    model = ckpt.build_model()
    prov = {"checkpoint": str(args.checkpoint), "model_checksum": model.checksum(), "seed": seed}
    if kind == "forward":
        if not args.probe:
            raise UsageError("analyze forward needs --probe")
        lines = [l.strip() for l in _existing(args.probe, "probe file").read_text().splitlines()]
        rows = []
        for line in lines:
            if not line or line.startswith("#"):
                continue
            probe = _parse_probe_line(line)
            mean, heads = forward_analysis(model, probe, per_head=True)
            rows.append({"query": probe.query_actions, "candidates": probe.candidate_actions, "weights": mean, "per_head": heads})
        report = AnalysisReport("forward", {"rows": rows}, prov)
        for r in rows:
            print(" ".join(f"{w:.6f}" for w in r["weights"]))
    else:
        episodes = _load_data(_require(args.data, "--data"), model.cfg)
        if kind == "backward":
            ep = _episode(episodes, args.episode)
            if args.target is None:
                raise UsageError("analyze backward needs --target")
            bcfg = BackwardConfig(args.target, args.eta, args.eps, args.iter)
            labels = ep.actions if model.cfg.guidance_infer == "ground_truth_onehot" else None
            result = backward_analysis(model, ep.embeddings, bcfg, t=args.t, labels=labels)
            report = AnalysisReport("backward", result.to_payload(), {**prov, "episode": args.episode})
            print(f"target {bcfg.target}: rank {result.initial_rank} -> {result.final_rank} after {result.iterations} iterations ({result.stop_reason})")
            if args.plot_data:
                write_plot_data(args.plot_data, {"iteration": list(range(len(result.losses))), "loss": result.losses})
        elif kind == "gate-trace":
            ep = _episode(episodes, args.episode)
            rows = gate_trace(model, ep)
            report = AnalysisReport("gate_trace", {"rows": rows}, {**prov, "episode": args.episode})
            for r in rows:
                print(f"{r['t']}\t{r['action']}\t{r['gate']:.6f}")
            if args.plot_data:
                write_plot_data(args.plot_data, {k: [r[k] for r in rows] for k in ("t", "action", "gate")})
        else:
            rows = robustness_sweep(model, episodes, seed=seed)
            report = AnalysisReport("robustness", {"rows": rows}, prov)
            for r in rows:
                print(f"{r['k']}\t{r['mt5r']:.4f}")
            if args.plot_data:
                write_plot_data(args.plot_data, {"k": [r["k"] for r in rows], "mt5r": [r["mt5r"] for r in rows]})
    if args.out:
        report.save(args.out)
    return EXIT_OK


def _analyze_guidance(args, seed: int) -> int:
    if not args.config:
        raise UsageError("analyze guidance needs --config")
    args.seed = seed
    cfg = _run_config(args)
    train_eps = _load_data(_require(args.data, "--data"), cfg.model)
    val_eps = _load_data(_require(args.val_data, "--val-data"), cfg.model)
    pairs = []
    for item in (args.pairs or "self_pred_full:self_pred_full").split(","):
        parts = item.split(":")
        if len(parts) != 2 or any(p not in GUIDANCE_MODES for p in parts):
            raise UsageError(f"guidance pairs look like 'self_pred_full:self_pred_top1_onehot', got {item!r}")
        pairs.append(tuple(parts))
    rows = guidance_comparison(train_eps, val_eps, cfg.model, cfg.train, pairs, seed=cfg.seed)
    for r in rows:
        print(f"{r['train']}\t{r['infer']}\t{r['mt5r']:.4f}")
    if args.out:
        AnalysisReport("guidance", {"rows": rows}, {"seed": cfg.seed}).save(args.out)
    return EXIT_OK


def _require(value, flag: str):
    if not value:
        raise UsageError(f"this analysis needs {flag}")
    return value


def _episode(episodes, index: int):
    if not 0 <= index < len(episodes):
        raise UsageError(f"--episode {index} outside [0, {len(episodes)})")
    return episodes[index]


# -- parser -------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aga", description="Action-guided attention: data, training, evaluation and analyses.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic AGAE embedding file")
    g.add_argument("--spec", required=True, help="TOML task description ([task] table or top-level keys)")
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-labels", action="store_true", help="omit per-frame labels")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model, checkpointing every epoch")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--val-data")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy and mean top-k recall of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--topk", default="1,5")
    e.add_argument("--point", choices=("last", "all"), default="last", help="score the last supervised frame or every one")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train one model per parameter value and seed")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val-data", required=True)
    s.add_argument("--param", choices=("alpha", "queue"), required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")
    s.add_argument("--out", help="write the JSONL rows here as well")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="forward, backward, gate-trace, robustness or guidance analysis")
    a.add_argument("kind", choices=("forward", "backward", "gate-trace", "robustness", "guidance"))
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--val-data")
    a.add_argument("--config")
    a.add_argument("--probe", help="file of 'query actions;candidate actions' rows")
    a.add_argument("--episode", type=int, default=0)
    a.add_argument("--target", type=int)
    a.add_argument("--t", type=int, help="frame to explain (default: last)")
    a.add_argument("--eta", type=float, default=1e2)
    a.add_argument("--eps", type=float, default=1e-6)
    a.add_argument("--iter", type=int, default=5000)
    a.add_argument("--pairs", help="comma-separated train:infer guidance pairs")
    a.add_argument("--out", help="write the JSON report here")
    a.add_argument("--plot-data", help="write tab-separated plot columns here")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze" and args.kind != "guidance" and not args.checkpoint:
            raise UsageError(f"analyze {args.kind} needs --checkpoint")
        return args.func(args)
    except UsageError as exc:
        print(f"aga: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _VALIDATION_ERRORS as exc:
        print(f"aga: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AgaError, IndexError, OSError) as exc:
        print(f"aga: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
