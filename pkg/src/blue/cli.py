"""Command-line interface.

Commands cover the whole workflow: generate or preprocess a corpus, pretrain
the representation, embed trajectories, finetune the task heads, and run the
retrieval benchmark. Settings come from a flat key=value config file plus
repeatable --set overrides; every key is section.field and maps one-to-one
onto the library's config dataclasses (model.*, train.*, preprocess.*,
synth.*, finetune.*, msts.*). Unknown keys are fatal. Commands that write
delimited output also render figures next to it unless --no-figures is
given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import figures
from .checkpoint import load_checkpoint
from .data import SyntheticSpec, generate_synthetic, load_jsonl, save_jsonl
from .encoding import DEFAULT_PRECISIONS, build_hierarchy
from .model import ModelConfig
from .preprocess import PreprocessConfig, clean_trajectory, filter_trajectories
from .tasks import (
    FinetuneConfig,
    build_msts_sets,
    eval_msts,
    finetune_classify,
    finetune_tte,
    regression_metrics,
)
from .train import TrainConfig, embed_trajectories, pretrain, split_trajectories

logger = logging.getLogger(__name__)


@dataclass
class MstsConfig:
    n_query: int = 50
    n_db: int = 200
    drop_ratio: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_query < 1 or self.n_db < 0:
            raise ValueError(f"bad retrieval sizes: n_query={self.n_query}, n_db={self.n_db}")
        if not 0 <= self.drop_ratio < 1:
            raise ValueError(f"drop_ratio must be in [0, 1), got {self.drop_ratio}")


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "preprocess": PreprocessConfig,
    "synth": SyntheticSpec,
    "finetune": FinetuneConfig,
    "msts": MstsConfig,
}


def _known_keys() -> dict[str, object]:
    """Every accepted config key mapped to its default value."""
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            keys[f"{section}.{f.name}"] = f.default
    return keys


def _parse_value(raw: str, default):
    """Convert a config string using the default value's type."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        conv = float if default and isinstance(default[0], float) else int
        return tuple(conv(p) for p in parts)
    return raw


def load_config_file(path) -> dict[str, str]:
    """Flat key = value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def gather_settings(args) -> dict[str, str]:
    merged: dict[str, str] = {}
    if args.config:
        merged.update(load_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        merged[key.strip()] = value.strip()
    known = _known_keys()
    unknown = sorted(set(merged) - set(known))
    if unknown:
        raise SystemExit(
            f"unknown config keys: {', '.join(unknown)} "
            f"(sections: {', '.join(sorted(_SECTIONS))})"
        )
    return merged


def build_section(section: str, settings: dict[str, str]):
    cls = _SECTIONS[section]
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{section}.{f.name}"
        if key in settings:
            try:
                kwargs[f.name] = _parse_value(settings[key], f.default)
            except ValueError as exc:
                raise SystemExit(f"bad value for {key}: {exc}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise SystemExit(f"bad {section} configuration: {exc}")


def _maybe_figure(args, render, *render_args) -> None:
    if args.no_figures:
        return
    path = render(*render_args)
    print(f"figure: {path}")


def _durations(trajs) -> np.ndarray:
    return np.array([t.points[-1].t - t.points[0].t for t in trajs], dtype=np.float64)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, settings) -> int:
    spec = build_section("synth", settings)
    seed = args.seed if args.seed is not None else 0
    trajs = generate_synthetic(spec, seed=seed)
    n = save_jsonl(trajs, args.out)
    print(f"wrote {n} synthetic trajectories to {args.out}")
    _maybe_figure(args, figures.plot_trajectories, trajs, Path(args.out).with_suffix(".png"))
    return 0


def cmd_preprocess(args, settings) -> int:
    cfg = build_section("preprocess", settings)
    trajs = load_jsonl(args.input, strict=not args.lenient)
    cleaned = [clean_trajectory(t, cfg) for t in trajs]
    kept = filter_trajectories(cleaned, cfg)
    save_jsonl(kept, args.out)
    print(f"kept {len(kept)} of {len(trajs)} trajectories -> {args.out}")
    if kept:
        _maybe_figure(args, figures.plot_trajectories, kept, Path(args.out).with_suffix(".png"))
    return 0


def cmd_encode_stats(args, settings) -> int:
    trajs = load_jsonl(args.input)
    if not trajs:
        raise SystemExit(f"no trajectories in {args.input}")
    names = [f"{p}dp" for p in DEFAULT_PRECISIONS]
    rows = []
    for traj in trajs:
        rows.append(build_hierarchy(traj, DEFAULT_PRECISIONS).level_lengths())
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"len_{n}" for n in names])
        for traj, lens in zip(trajs, rows):
            writer.writerow([traj.id] + list(lens))
    means = np.asarray(rows, dtype=np.float64).mean(axis=0)
    ratio = means[0] / means[-1] if means[-1] else float("nan")
    print(
        f"wrote level lengths for {len(trajs)} trajectories to {args.out} "
        f"(mean {means[0]:.1f} points -> {means[-1]:.1f} coarse patches, {ratio:.1f}x)"
    )
    _maybe_figure(
        args, figures.plot_level_lengths, rows, names, Path(args.out).with_suffix(".png")
    )
    return 0


def cmd_pretrain(args, settings) -> int:
    mcfg = build_section("model", settings)
    tcfg = build_section("train", settings)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    trajs = load_jsonl(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = pretrain(
        trajs, mcfg, tcfg,
        checkpoint_path=out_dir / "model.ckpt",
        history_path=out_dir / "history.csv",
    )
    last = result.history[-1]
    val_txt = "-" if last.val_loss is None else f"{last.val_loss:.6f}"
    print(
        f"pretrained {mcfg.d}-dim model for {tcfg.epochs} epochs: "
        f"train loss {last.train_loss:.6f}, val loss {val_txt}, "
        f"best epoch {result.best_epoch}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"history: {out_dir / 'history.csv'}")
    _maybe_figure(args, figures.plot_history, result.history, out_dir / "history.png")
    return 0


def cmd_embed(args, settings) -> int:
    model, box, _ = load_checkpoint(args.checkpoint)
    trajs = load_jsonl(args.input)
    if not trajs:
        raise SystemExit(f"no trajectories in {args.input}")
    emb = embed_trajectories(model, box, trajs)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"e{i}" for i in range(emb.shape[1])])
        for traj, row in zip(trajs, emb):
            writer.writerow([traj.id] + [f"{v:.8g}" for v in row])
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    labels = None
    if all(t.label is not None for t in trajs):
        labels = np.array([t.label for t in trajs])
    _maybe_figure(
        args, figures.plot_embedding_scatter, emb, labels, Path(args.out).with_suffix(".png")
    )
    return 0


def _finetune_common(args, settings):
    model, box, _ = load_checkpoint(args.checkpoint)
    fcfg = build_section("finetune", settings)
    tcfg = build_section("train", settings)
    if args.seed is not None:
        fcfg = dataclasses.replace(fcfg, seed=args.seed)
    trajs = load_jsonl(args.input)
    splits = split_trajectories(trajs, tcfg.fractions, fcfg.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return model, box, fcfg, splits, out_dir


def cmd_finetune_tte(args, settings) -> int:
    model, box, fcfg, (train_set, val_set, test_set), out_dir = _finetune_common(args, settings)
    result = finetune_tte(model, box, train_set, fcfg, val_trajs=val_set)
    eval_set = [t for t in (test_set or val_set or train_set) if len(t) >= 2]
    if not eval_set:
        raise SystemExit("no trajectories with at least 2 points to evaluate on")
    pred = result.predictor.predict(eval_set)
    true = _durations(eval_set)
    metrics = regression_metrics(pred, true)
    metrics["n_eval"] = len(eval_set)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "actual_s", "predicted_s"])
        for traj, t, p in zip(eval_set, true, pred):
            writer.writerow([traj.id, f"{t:.0f}", f"{p:.2f}"])
    print(
        f"travel-time estimation on {len(eval_set)} held-out trajectories: "
        f"MAE {metrics['mae']:.1f} s, RMSE {metrics['rmse']:.1f} s, "
        f"MAPE {100 * metrics['mape']:.1f}%"
    )
    print(f"metrics: {out_dir / 'metrics.json'}")
    _maybe_figure(args, figures.plot_duration_scatter, true, pred, out_dir / "predictions.png")
    return 0


def cmd_finetune_cls(args, settings) -> int:
    model, box, fcfg, (train_set, val_set, test_set), out_dir = _finetune_common(args, settings)
    result = finetune_classify(model, box, train_set, fcfg, val_trajs=val_set)
    eval_set = test_set or val_set or train_set
    metrics = result.predictor.evaluate(eval_set)
    metrics["n_eval"] = len(eval_set)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    pred = result.predictor.predict(eval_set)
    true = np.array([t.label for t in eval_set])
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "actual", "predicted"])
        for traj, p in zip(eval_set, pred):
            writer.writerow([traj.id, traj.label, int(p)])
    shown = ", ".join(f"{k} {v:.3f}" for k, v in metrics.items() if k != "n_eval")
    print(f"classification on {len(eval_set)} held-out trajectories: {shown}")
    print(f"metrics: {out_dir / 'metrics.json'}")
    _maybe_figure(
        args, figures.plot_confusion, true, pred, result.predictor.n_classes,
        out_dir / "confusion.png",
    )
    return 0


def cmd_eval_msts(args, settings) -> int:
    model, box, _ = load_checkpoint(args.checkpoint)
    mcfg = build_section("msts", settings)
    seed = args.seed if args.seed is not None else mcfg.seed
    trajs = load_jsonl(args.input)
    queries, database, truth = build_msts_sets(
        trajs, mcfg.n_query, mcfg.n_db, mcfg.drop_ratio, seed
    )
    report = eval_msts(model, box, queries, database, truth)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out_dir / "ranks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "rank"])
        for traj, rank in zip(queries, report.ranks):
            writer.writerow([traj.id, int(rank)])
    print(
        f"retrieval over {report.n_query} queries / {report.n_database} database entries: "
        f"HR@1 {report.hit_rate_1:.3f}, HR@5 {report.hit_rate_5:.3f}, "
        f"mean rank {report.mean_rank:.1f}"
    )
    print(f"report: {out_dir / 'report.json'}")
    _maybe_figure(args, figures.plot_rank_histogram, report.ranks, out_dir / "ranks.png")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blue",
        description="Pyramid trajectory representations from blurred GPS coordinates.",
    )
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one setting (repeatable), e.g. --set model.d=64",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the command's seed")
    parser.add_argument(
        "--log-level", default="warning", choices=["debug", "info", "warning", "error"]
    )
    parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trajectory corpus")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clean and filter a trajectory corpus")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--lenient", action="store_true", help="skip malformed lines")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("encode-stats", help="per-trajectory pyramid level lengths")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_encode_stats)

    p = sub.add_parser("pretrain", help="pretrain the representation model")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--out-dir", required=True, help="directory for checkpoint and history")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="embed trajectories with a pretrained model")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_embed)

    ft = sub.add_parser("finetune", help="train a task head on a pretrained model")
    ft_sub = ft.add_subparsers(dest="task", required=True)
    p = ft_sub.add_parser("tte", help="travel-time estimation")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune_tte)
    p = ft_sub.add_parser("cls", help="trajectory classification")
    p.add_argument("input", help="labeled input JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune_cls)

    ev = sub.add_parser("eval", help="evaluate a pretrained model")
    ev_sub = ev.add_subparsers(dest="benchmark", required=True)
    p = ev_sub.add_parser("msts", help="most-similar trajectory retrieval")
    p.add_argument("input", help="input JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval_msts)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    settings = gather_settings(args)
    return args.func(args, settings)


if __name__ == "__main__":
    sys.exit(main())
