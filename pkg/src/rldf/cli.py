"""Command-line entry point: ``rldf {pretrain,train-rl,eval,analyze}``.

Every command exits 0 on success.  On failure it prints one JSON object on
stderr (``{"error": ..., "message": ..., "keys": [...]}``) and exits nonzero:
2 for configuration errors, 3 for checkpoint version mismatches, 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis
from . import config as config_mod
from .checkpoint import load_checkpoint, load_train_state, save_checkpoint, save_train_state
from .diffusion import read_trajectories, write_trajectories
from .errors import CheckpointVersionError, ConfigError
from .model import DenoiserModel
from .streams import subseed, substream
from .tasks import dataset_manifest, generate_tasks
from .trainer import evaluate, pretrain, train

log = logging.getLogger("rldf")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    cfg = config_mod.load(args.config) if args.config else config_mod.from_dict()
    if args.seed is not None:
        cfg = config_mod.with_seed(cfg, args.seed)
    return cfg


def _datasets(cfg: dict, out: Path):
    fam, seed = cfg["task"]["family"], cfg["run"]["seed"]
    train_tasks = generate_tasks(fam, cfg["task"]["train_size"], substream(seed, "data", "train"))
    eval_tasks = generate_tasks(fam, cfg["task"]["eval_size"], substream(seed, "data", "eval"))
    _dump(out / "datasets.json", [dataset_manifest(fam, cfg["task"]["train_size"], seed, "train"),
                                  dataset_manifest(fam, cfg["task"]["eval_size"], seed, "eval")])
    return train_tasks, eval_tasks


def _manifest(out: Path, command: str, cfg: dict, artifacts: dict) -> dict:
    """Written once, before any work starts; completion goes to ``run_end.json``."""
    man = {
        "command": command,
        "config": config_mod.to_json(cfg),
        "seed": cfg["run"]["seed"],
        "code_version": __version__,
        "started_at": _now(),
        "artifacts": artifacts,
    }
    _dump(out / "manifest.json", man)
    return man


def _finish(out: Path, **extra) -> None:
    _dump(out / "run_end.json", {"ended_at": _now(), **extra})


def cmd_pretrain(args) -> dict:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest(out, "pretrain", cfg, {"checkpoint": "model.ckpt", "metrics": "pretrain_metrics.jsonl",
                                     "datasets": "datasets.json"})
    train_tasks, _ = _datasets(cfg, out)
    seed = cfg["run"]["seed"]
    if args.resume:
        model, _ = load_checkpoint(args.resume)
    else:
        model = DenoiserModel(config_mod.model_config(cfg, subseed(seed, "model")))
    losses = pretrain(model, train_tasks, config_mod.pretrain_config(cfg))
    with open(out / "pretrain_metrics.jsonl", "w") as fh:
        for step, loss in enumerate(losses):
            fh.write(json.dumps({"step": step, "mlm_loss": loss}) + "\n")
    save_checkpoint(out / "model.ckpt", model, {"kind": "pretrain", "steps": len(losses), "seed": seed})
    _finish(out, steps=len(losses))
    return {"checkpoint": str(out / "model.ckpt"), "steps": len(losses)}


def cmd_train_rl(args) -> dict:
    cfg = _load_config(args)
    if not (args.checkpoint or args.resume):
        raise ConfigError("train-rl needs --checkpoint (starting weights) or --resume", ["--checkpoint"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest(out, "train-rl", cfg, {"metrics": "metrics.jsonl", "trajectories": "trajectories.jsonl",
                                     "checkpoints": "ckpt_*.ckpt", "final": "final.ckpt",
                                     "datasets": "datasets.json"})
    train_tasks, _ = _datasets(cfg, out)
    tcfg = config_mod.train_config(cfg)
    state, _ = load_train_state(args.resume or args.checkpoint, tcfg)
    if not args.resume:
        state.step = 0
    every = cfg["run"]["checkpoint_every"]
    log_traj = cfg["run"]["log_trajectories"]
    append = bool(args.resume)
    remaining = max(tcfg.total_steps - state.step, 0)
    with open(out / "metrics.jsonl", "a" if append else "w") as mfh:
        if log_traj and not append:
            (out / "trajectories.jsonl").write_text("")
        for rec in train(state, train_tasks, tcfg, steps=remaining):
            mfh.write(json.dumps(rec) + "\n")
            mfh.flush()
            if log_traj:
                write_trajectories(out / "trajectories.jsonl",
                                   [tr for g in state.last_groups for tr in g.trajectories], append=True)
            if state.step % every == 0:
                save_train_state(out / f"ckpt_{state.step:06d}.ckpt", state, {"kind": "train-rl"})
    save_train_state(out / "final.ckpt", state, {"kind": "train-rl"})
    _finish(out, steps=state.step)
    return {"checkpoint": str(out / "final.ckpt"), "steps": state.step}


def cmd_eval(args) -> dict:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint", ["--checkpoint"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(args.checkpoint)
    _, eval_tasks = _datasets(cfg, out)
    mults = cfg["eval"]["step_multipliers"]
    res = evaluate(model, eval_tasks, config_mod.decode_config(cfg), substream(cfg["run"]["seed"], "eval"), mults)
    rows = [{"family": fam, "step_multiplier": m, "mean_reward": r, "n": len(eval_tasks)}
            for fam, by in res["by_family"].items() for m, r in by.items()]
    analysis.write_csv(out / "rewards.csv", rows, ["family", "step_multiplier", "mean_reward", "n"])
    return {"rewards": str(out / "rewards.csv"), "mean_reward": res["mean_reward"]}


def _utility_rows(metrics_path: Path) -> list[dict]:
    man_path = metrics_path.parent / "manifest.json"
    train_cfg = json.loads(man_path.read_text())["config"]["train"] if man_path.exists() else {}
    target = train_cfg.get("target", "x0")
    clipped = target == "x0" and train_cfg.get("clip_threshold", 0.2) > 0
    reports = []
    for line in metrics_path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("steps_sampled"):
            reports.append(analysis.LossReport(target, clipped, rec["loss"], rec["kl"], rec["grad_norm"],
                                               rec["token_utility"], rec["step"]))
    return analysis.utility_report(reports)


def cmd_analyze(args) -> dict:
    if not args.trajectories:
        raise ConfigError("analyze needs --trajectories", ["--trajectories"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trajs = read_trajectories(args.trajectories)
    stats = analysis.token_stats(trajs)
    r, rho = analysis.correlate(stats)
    hist = analysis.bin_probabilities(stats)
    analysis.write_csv(out / "correlation.csv", [{"n": len(stats), "pearson": r, "spearman": rho,
                                                  "high_confidence_fraction": hist.high_fraction}])
    edges = hist.edges
    analysis.write_csv(out / "prob_histogram.csv",
                       [{"lo": edges[i], "hi": edges[i + 1], "count": c} for i, c in enumerate(hist.counts)])
    analysis.write_csv(out / "confidence_profile.csv", analysis.confidence_profile(trajs))
    written = ["correlation.csv", "prob_histogram.csv", "confidence_profile.csv"]
    if args.metrics:
        analysis.write_csv(out / "utility.csv", _utility_rows(Path(args.metrics)),
                           ["target", "clipped", "n", "mean_grad_norm", "mean_loss", "mean_token_utility"])
        written.append("utility.csv")
    return {"pearson": r, "spearman": rho, "tokens": len(stats), "written": written}


COMMANDS = {"pretrain": cmd_pretrain, "train-rl": cmd_train_rl, "eval": cmd_eval, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rldf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--resume", help="checkpoint to continue from")
        if name in ("train-rl", "eval"):
            p.add_argument("--checkpoint", help="model checkpoint to start from / evaluate")
        if name == "analyze":
            p.add_argument("--trajectories", help="trajectory log (JSONL)")
            p.add_argument("--metrics", help="metrics log for the utility table")
    return ap


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc).replace("\n", " ")}
    if isinstance(exc, ConfigError):
        err["keys"] = exc.keys
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except CheckpointVersionError as exc:
        return _fail(exc, 3)
    except Exception as exc:  # noqa: BLE001  (every failure becomes one JSON line)
        log.debug("command failed", exc_info=True)
        return _fail(exc, 1)
    print(json.dumps(result, default=lambda o: float(o) if isinstance(o, np.floating) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
