"""Command-line entry point: ``promptadapt <command> ...``.

An experiment config is one ``key = value`` file. Keys are routed by prefix:

    data.*    dataset manifest (name, root, format, split_ratio, seed, ...)
    model.*   backend config (backend, input_size, feature_dim, mean, std, ...)
    train.*   TrainConfig fields (epochs, prompt_type, finetune_mode, ...)
    loss.*    LossConfig fields (lambda_focal, tau, use_anchor, ...)
    output_dir / run_name

Relative paths are resolved against the config file's directory. When
``PROMPTADAPT_RUN_ROOT`` is set, runs go to ``$PROMPTADAPT_RUN_ROOT/<run_name>``
instead of ``output_dir``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .adapt import TrainConfig, automated_masks, run_adaptation, train_supervised
from .data import (
    DatasetManifest,
    load_dataset,
    make_toy_domain,
    manifest_items,
    parse_manifest,
    save_mask_dirs,
    split,
    write_manifest,
)
from .errors import ConfigurationError, DegenerateInputError, TrainingFault
from .evaluate import cross_prompt_matrix, evaluate, format_table, read_reports, sample_rng, write_reports
from .lora import load_adapter_checkpoint, read_checkpoint_manifest
from .losses import LossConfig
from .model import BackendConfig, build_model, build_toy_model, parse_backend_config, read_key_values
from .prompts import PROMPT_TYPES, PromptSet, prompts_from_masks, write_prompt_file

logger = logging.getLogger("promptadapt")

RUN_ROOT_ENV = "PROMPTADAPT_RUN_ROOT"
EXIT_CONFIG, EXIT_IO, EXIT_TRAINING = 2, 3, 4


@dataclasses.dataclass
class ExperimentConfig:
    data: DatasetManifest
    backend: BackendConfig
    train: TrainConfig
    output_dir: Path
    source: Optional[Path] = None

    def to_pairs(self) -> Dict[str, str]:
        out: Dict[str, str] = {}
        for key, value in manifest_items(self.data):
            out[f"data.{key}"] = str(value)
        for key, value in dataclasses.asdict(self.backend).items():
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            out[f"model.{key}"] = str(value)
        train = self.train.to_dict()
        loss = train.pop("loss")
        for key, value in train.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(value)
            out[f"train.{key}"] = str(value)
        for key, value in loss.items():
            out[f"loss.{key}"] = str(value)
        out["output_dir"] = str(self.output_dir)
        return out


def _coerce(cls, pairs: Dict[str, str], section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in pairs.items():
        if key not in fields or key == "loss":
            raise ConfigurationError(f"unknown config key {section}.{key}")
        default = fields[key].default
        if key == "lora_targets":
            kw[key] = tuple(t.strip() for t in raw.split(",") if t.strip())
        elif key == "labeled_subset_size":
            kw[key] = None if raw.lower() in ("", "none", "all") else int(raw)
        elif isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ConfigurationError(f"{section}.{key} expects a boolean, got {raw!r}")
            kw[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kw[key] = int(raw)
        elif isinstance(default, float):
            kw[key] = float(raw)
        else:
            kw[key] = raw
    return kw


def _resolve(base: Path, value: Optional[str]) -> Optional[str]:
    if not value:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else (base / p).resolve())


def parse_experiment(pairs: Dict[str, str], base: Path = Path(".")) -> ExperimentConfig:
    sections: Dict[str, Dict[str, str]] = {"data": {}, "model": {}, "train": {}, "loss": {}}
    top: Dict[str, str] = {}
    for key, value in pairs.items():
        head, dot, rest = key.partition(".")
        if dot and head in sections:
            sections[head][rest] = value
        elif key in ("output_dir", "run_name"):
            top[key] = value
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    try:
        if "name" not in sections["data"]:
            sections["data"]["name"] = top.get("run_name", "dataset")
        manifest = parse_manifest(sections["data"], base=base)
        model_pairs = dict(sections["model"])
        if model_pairs.get("pretrained_weights_path"):
            model_pairs["pretrained_weights_path"] = _resolve(base, model_pairs["pretrained_weights_path"])
        backend = parse_backend_config(model_pairs)
        loss = LossConfig(**_coerce(LossConfig, sections["loss"], "loss"))
        train = TrainConfig(loss=loss, **_coerce(TrainConfig, sections["train"], "train"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc
    run_name = top.get("run_name", manifest.name)
    root = os.environ.get(RUN_ROOT_ENV)
    if root:
        out = Path(root) / run_name
    else:
        out = Path(_resolve(base, top.get("output_dir", f"runs/{run_name}")))
    return ExperimentConfig(manifest, backend, train, out)


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_experiment(read_key_values(path), base=path.parent.resolve())
    cfg.source = path
    return cfg


def write_experiment(cfg: ExperimentConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_pairs().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    train = {}
    loss = {}
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "subset_size", None) is not None:
        train["labeled_subset_size"] = args.subset_size
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "finetune_mode", None):
        train["finetune_mode"] = args.finetune_mode
    if getattr(args, "teacher_mode", None):
        train["teacher_mode"] = args.teacher_mode
    if getattr(args, "weak_sup", None):
        train["prompt_type"] = args.weak_sup
    if getattr(args, "no_anchor", False):
        loss["use_anchor"] = False
    if getattr(args, "no_contrastive", False):
        loss["use_contrastive"] = False
    if getattr(args, "no_selftrain", False):
        loss["use_selftrain"] = False
    if loss:
        train["loss"] = dataclasses.replace(cfg.train.loss, **loss)
    if train:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))
    return cfg


def _splits(cfg: ExperimentConfig):
    samples = load_dataset(cfg.data)
    if len(samples) < 2:
        raise ValueError(f"dataset {cfg.data.name!r} needs at least 2 samples, found {len(samples)}")
    return split(samples, cfg.data.split_ratio, cfg.data.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_adapt(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config), args)
    adapt_set, test_set = _splits(cfg)
    model = build_model(cfg.backend)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_experiment(cfg, out / "config.txt")
    logger.info("adapting on %d images, %d held out; run dir %s", len(adapt_set), len(test_set), out)
    result = run_adaptation(model, adapt_set, cfg.train, held_out=test_set, out_dir=out)
    weak = cfg.train.prompt_type
    test_prompt = weak if weak in PROMPT_TYPES else cfg.train.auto_prompt_type
    grid = {}
    for label, m in (("direct", model), (f"{weak} (last)", result.model), (f"{weak} (best)", result.best_model)):
        if m is not None:
            grid[(label, test_prompt)] = evaluate(m, test_set, test_prompt, cfg.train.seed, cfg.data.name, label)
    write_reports(grid, out)
    print(format_table(grid))
    return 0


def _load_for_eval(cfg: ExperimentConfig, checkpoint: Optional[str]):
    base = build_model(cfg.backend)
    if not checkpoint:
        return base, "none"
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    manifest = read_checkpoint_manifest(path)
    if manifest.get("backend") != base.backend:
        raise ConfigurationError(
            f"checkpoint manifest mismatch: backend {manifest.get('backend')!r} (checkpoint) != {base.backend!r} (config)"
        )
    return load_adapter_checkpoint(base, path), manifest.get("train_weak_sup", "unknown")


def cmd_evaluate(args) -> int:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    model, weak = _load_for_eval(cfg, args.checkpoint)
    _, test_set = _splits(cfg)
    seed = cfg.train.seed
    if args.cross_prompt:
        grid = cross_prompt_matrix({weak: model}, test_set, PROMPT_TYPES, seed, cfg.data.name)
    else:
        grid = {(weak, args.prompt): evaluate(model, test_set, args.prompt, seed, cfg.data.name, weak)}
    out = Path(args.out) if args.out else cfg.output_dir
    write_reports(grid, out, stem="eval")
    print(format_table(grid))
    return 0


def cmd_gen_prompts(args) -> int:
    if args.config:
        cfg = load_experiment(args.config)
        manifest, backend = cfg.data, cfg.backend
    else:
        manifest = parse_manifest(read_key_values(args.manifest), base=Path(args.manifest).resolve().parent)
        backend = BackendConfig()
    samples = load_dataset(manifest)
    records = []
    skipped = 0
    anchor = build_model(backend) if args.type == "automated" else None
    train = cfg.train if args.config else TrainConfig()
    for s in samples:
        rng = sample_rng(args.seed, s.id)
        if anchor is not None:
            masks = automated_masks(anchor, s.image, train.grid_stride, train.auto_iou_thresh, train.auto_stability_thresh)
            ps = prompts_from_masks(masks, args.auto_type, rng, source="automated") if masks else PromptSet([], args.auto_type)
        else:
            ps = prompts_from_masks(s.instances, args.type, rng)
        skipped += ps.skipped
        records.append((s.id, ps.prompts))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prompt_file(out, records)
    if skipped:
        print(f"warning: skipped {skipped} degenerate instance(s)", file=sys.stderr)
    print(f"wrote {sum(len(r[1]) for r in records)} prompts for {len(records)} images to {out}")
    return 0


def cmd_make_toy_data(args) -> int:
    samples = make_toy_domain(args.kind, args.n, args.seed, args.size)
    out = Path(args.out)
    save_mask_dirs(samples, out)
    name = args.name or f"toy-{args.kind}"
    write_manifest(DatasetManifest(name=name, root=".", format="mask-dirs", seed=args.seed), out / "manifest.txt")
    print(f"wrote {len(samples)} images to {out}")
    return 0


def cmd_pretrain_toy(args) -> int:
    clean = make_toy_domain("clean", args.n, args.seed)
    model = build_toy_model(args.seed, args.feature_dim)
    train_supervised(model, clean, args.steps, lr=args.lr, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out)
    held = make_toy_domain("clean", 50, args.seed + 1)
    print(f"wrote {out}; clean box mIoU {evaluate(model, held, 'box').miou:.3f}")
    return 0


def cmd_report(args) -> int:
    grid = {}
    for run in args.runs:
        path = Path(run)
        if path.is_dir():
            candidates = [path / "report.json", path / "eval.json"]
            found = [p for p in candidates if p.exists()]
            if not found:
                raise FileNotFoundError(f"no report.json or eval.json in {path}")
        elif path.exists():
            found = [path]
        else:
            raise FileNotFoundError(f"report not found: {path}")
        for p in found:
            grid.update(read_reports(p))
    if args.json:
        print(json.dumps([r.to_dict() | {"ious": len(r.ious)} for r in grid.values()], indent=1))
    else:
        print(format_table(grid))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptadapt", description="Weakly supervised self-training of promptable segmentation models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("adapt", help="adapt a model on a target dataset")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--subset-size", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--finetune-mode")
    a.add_argument("--teacher-mode", choices=("shared", "ema"))
    a.add_argument("--weak-sup", choices=PROMPT_TYPES + ("automated",), help="weak label type used as prompts")
    a.add_argument("--no-anchor", action="store_true")
    a.add_argument("--no-contrastive", action="store_true")
    a.add_argument("--no-selftrain", action="store_true")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="score a model (optionally with an adapter checkpoint)")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--prompt", choices=PROMPT_TYPES, default="box")
    e.add_argument("--cross-prompt", action="store_true")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-prompts", help="write simulated prompts for a dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--config")
    g.add_argument("--type", choices=PROMPT_TYPES + ("automated",), default="box")
    g.add_argument("--auto-type", choices=PROMPT_TYPES, default="box")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_prompts)

    m = sub.add_parser("make-toy-data", help="write a synthetic blob dataset as mask directories")
    m.add_argument("--kind", choices=("clean", "corrupted"), default="corrupted")
    m.add_argument("--n", type=int, default=100)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--name")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_toy_data)

    t = sub.add_parser("pretrain-toy", help="train a toy source model on clean synthetic blobs")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1500)
    t.add_argument("--n", type=int, default=400)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--feature-dim", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_pretrain_toy)

    r = sub.add_parser("report", help="print tables from run directories or report files")
    r.add_argument("runs", nargs="+")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingFault as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ValueError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
