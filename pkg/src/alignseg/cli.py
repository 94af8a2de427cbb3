"""Command-line surface: dataset synthesis, split creation, training,
evaluation, ablation grids, and overlay export.

Every command is deterministic given its inputs and seed; logs are emitted as
line-delimited JSON records on stdout. Exit codes: 0 success, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .checkpoint import CheckpointError, restore_model
from .config import (
    ConfigError,
    TrainConfig,
    apply_overrides,
    load_config,
    to_dict,
)
from .data import (
    DataError,
    Sample,
    SplitManifest,
    SyntheticSpec,
    generate_synthetic_glands,
    load_dataset,
    make_ssl_split,
    write_dataset,
)
from .evaluation import disagreement_count, evaluate, predict_forward, render_overlay, single_scale_infer
from .trainer import NumericError, Trainer

ENV_DATA_ROOT = "ALIGNSEG_DATA_ROOT"


def log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def code_version() -> str:
    """Content hash over the package sources, recorded in run manifests."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


@dataclass
class RunManifest:
    run_id: str
    code_version: str
    config: dict
    overrides: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(path.read_text()))


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    apply_overrides(cfg, getattr(args, "override", None) or [])
    root = getattr(args, "data_root", None) or os.environ.get(ENV_DATA_ROOT) or cfg.data.root
    cfg.data.root = root
    return cfg


def _require_root(cfg: TrainConfig) -> str:
    if not cfg.data.root:
        raise ConfigError(
            f"no data root configured (use --data-root, ${ENV_DATA_ROOT}, or data.root)"
        )
    return cfg.data.root


def _partition(samples: list[Sample], manifest: SplitManifest) -> tuple[list[Sample], list[Sample]]:
    by_id = {s.id: s for s in samples}
    for sid in manifest.labeled_ids + manifest.unlabeled_ids:
        if sid not in by_id:
            raise DataError(f"split id '{sid}' not present in the dataset")
    labeled = [by_id[i] for i in manifest.labeled_ids]
    unlabeled = [by_id[i] for i in manifest.unlabeled_ids]
    return labeled, unlabeled


def _run_id(cfg: TrainConfig, extra: str = "") -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _write_report(report, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.csv").write_text(report.to_csv())
    (out_dir / f"{stem}.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")


def run_training(
    cfg: TrainConfig,
    labeled: list[Sample],
    unlabeled: list[Sample],
    out_dir: Path,
    steps: int | None = None,
    resume: str | None = None,
    eval_samples: list[Sample] | None = None,
    eval_every: int = 0,
    overrides: list[str] | None = None,
    log_every: int = 10,
) -> tuple[Trainer, RunManifest]:
    """Shared by cmd_train and cmd_ablate so variant runs and standalone runs
    produce identical artifacts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, labeled, unlabeled)
    if resume:
        trainer.load(resume)
        log("resume", step=trainer.step, tau=trainer.threshold.tau)
    manifest = RunManifest(
        run_id=_run_id(cfg, extra=f"L{len(labeled)}U{len(unlabeled)}"),
        code_version=code_version(),
        config=to_dict(cfg),
        overrides=list(overrides or []),
    )
    log("config", run_id=manifest.run_id, config=manifest.config)
    ipe = trainer.iters_per_epoch

    def callback(step: int, report, tr: Trainer) -> None:
        if log_every and (step % log_every == 0 or step == tr.total_steps):
            log("step", step=step, lr=round(tr.optimizer.param_groups[0]["lr"], 10),
                tau=round(tr.threshold.tau, 6), **{k: round(v, 6) for k, v in report.as_dict().items()})
        if step % ipe == 0:
            epoch = step // ipe
            if eval_samples and eval_every and epoch % eval_every == 0:
                rep = evaluate(tr.model, eval_samples, cfg, mode="single")
                entry = {"epoch": epoch, "step": step,
                         "mean_dice": rep.mean_dice, "mean_jaccard": rep.mean_jaccard}
                manifest.history.append(entry)
                log("epoch_eval", **entry)

    trainer.run(num_steps=steps, callback=callback)
    if eval_samples:
        rep = evaluate(trainer.model, eval_samples, cfg, mode="single")
        entry = {"epoch": trainer.step // ipe, "step": trainer.step,
                 "mean_dice": rep.mean_dice, "mean_jaccard": rep.mean_jaccard}
        manifest.history.append(entry)
        log("final_eval", **entry)
    ckpt = trainer.save(out_dir / "checkpoint")
    manifest.save(out_dir / "manifest.json")
    log("saved", checkpoint=str(ckpt), step=trainer.step)
    return trainer, manifest


def cmd_split(args) -> int:
    cfg = _resolve_config(args)
    samples = load_dataset(_require_root(cfg), args.split, cfg.data.num_classes)
    manifest = make_ssl_split([s.id for s in samples], args.ratio, args.seed)
    manifest.save(args.out)
    log("split", labeled=len(manifest.labeled_ids), unlabeled=len(manifest.unlabeled_ids),
        out=args.out)
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_images=args.n_train, size=args.size, seed=args.seed)
    write_dataset(generate_synthetic_glands(spec), args.out, "train")
    if args.n_test > 0:
        test_spec = SyntheticSpec(n_images=args.n_test, size=args.size, seed=args.seed + 1)
        write_dataset(generate_synthetic_glands(test_spec), args.out, "test")
    log("synth", out=args.out, n_train=args.n_train, n_test=args.n_test, size=args.size)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    samples = load_dataset(_require_root(cfg), "train", cfg.data.num_classes)
    if args.split:
        labeled, unlabeled = _partition(samples, SplitManifest.load(args.split))
    else:
        labeled, unlabeled = samples, []
    eval_samples = None
    if args.eval_split:
        eval_samples = load_dataset(cfg.data.root, args.eval_split, cfg.data.num_classes)
    run_training(
        cfg,
        labeled,
        unlabeled,
        Path(args.out),
        steps=args.steps,
        resume=args.resume,
        eval_samples=eval_samples,
        eval_every=args.eval_every,
        overrides=args.override or [],
        log_every=args.log_every,
    )
    return 0


def cmd_eval(args) -> int:
    model, bundle = restore_model(args.checkpoint)
    cfg = bundle.cfg
    if args.data_root or os.environ.get(ENV_DATA_ROOT):
        cfg.data.root = args.data_root or os.environ[ENV_DATA_ROOT]
    samples = load_dataset(_require_root(cfg), args.split, cfg.data.num_classes)
    report = evaluate(model, samples, cfg, mode=args.mode, window=args.window, stride=args.stride)
    _write_report(report, Path(args.out), "report")
    log("eval", mode=args.mode, split=args.split, n_images=report.n_images,
        mean_dice=report.mean_dice, mean_jaccard=report.mean_jaccard)
    print(report.summary())
    return 0


ABLATION_GRIDS = {
    "branches": [
        ("neither", ["align.use_prototype=false", "align.use_text=false"]),
        ("text_only", ["align.use_prototype=false", "align.use_text=true"]),
        ("prototype_only", ["align.use_prototype=true", "align.use_text=false"]),
        ("both", ["align.use_prototype=true", "align.use_text=true"]),
    ],
    "tokens": [(f"m{m}", [f"align.num_context_tokens={m}"]) for m in (0, 2, 3, 4, 5)],
    "align": [(kind, [f"loss.align_kind={kind}"]) for kind in ("none", "cosine", "kl", "mse")],
    "encoder": [(f"toy_w{w}", [f"encoder.width={w}"]) for w in (384, 768)],
}


def cmd_ablate(args) -> int:
    base_cfg = _resolve_config(args)
    samples = load_dataset(_require_root(base_cfg), "train", base_cfg.data.num_classes)
    if args.split:
        labeled, unlabeled = _partition(samples, SplitManifest.load(args.split))
    else:
        labeled, unlabeled = samples, []
    eval_samples = load_dataset(base_cfg.data.root, args.eval_split, base_cfg.data.num_classes)
    rows = []
    for name, overrides in ABLATION_GRIDS[args.grid]:
        cfg = copy.deepcopy(base_cfg)
        apply_overrides(cfg, overrides)
        out_dir = Path(args.out) / "variants" / name
        log("variant_start", grid=args.grid, variant=name, overrides=overrides)
        trainer, _ = run_training(
            cfg, labeled, unlabeled, out_dir, steps=args.steps,
            overrides=(args.override or []) + overrides, log_every=args.log_every,
        )
        report = evaluate(trainer.model, eval_samples, cfg, mode="single")
        _write_report(report, out_dir, "report")
        rows.append((name, report.mean_dice, report.mean_jaccard))
        log("variant_done", variant=name, mean_dice=report.mean_dice,
            mean_jaccard=report.mean_jaccard)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["variant,mean_dice,mean_jaccard"]
    lines += [f"{n},{d!r},{j!r}" for n, d, j in rows]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    for n, d, j in rows:
        print(f"{n:>16s}  mDice {d:.4f}  mJaccard {j:.4f}")
    return 0


def cmd_overlay(args) -> int:
    import torch

    model, bundle = restore_model(args.checkpoint)
    cfg = bundle.cfg
    if args.data_root or os.environ.get(ENV_DATA_ROOT):
        cfg.data.root = args.data_root or os.environ[ENV_DATA_ROOT]
    samples = load_dataset(_require_root(cfg), args.split, cfg.data.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mean = torch.tensor(cfg.data.mean).view(1, 3, 1, 1)
    std = torch.tensor(cfg.data.std).view(1, 3, 1, 1)
    model.eval()
    with torch.no_grad():
        for sample in samples:
            image = torch.from_numpy(sample.image).float().unsqueeze(0)
            logits = single_scale_infer(lambda x: predict_forward(model, (x - mean) / std), image)
            pred = logits.argmax(dim=1).squeeze(0).numpy()
            overlay = render_overlay(sample.image.transpose(1, 2, 0), pred, sample.mask)
            Image.fromarray(overlay).save(out / f"{sample.id}.png")
            log("overlay", id=sample.id,
                disagreement=disagreement_count(pred, sample.mask))
    log("overlay_done", count=len(samples), out=str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alignseg",
        description="Semi-supervised segmentation with prototype/text semantic alignment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", default=None, help="YAML config file")
            p.add_argument("--override", action="append", default=[],
                           metavar="KEY=VALUE", help="dotted config override (repeatable)")
        p.add_argument("--data-root", default=None,
                       help=f"dataset root (falls back to ${ENV_DATA_ROOT}, then data.root)")

    p = sub.add_parser("split", help="create a labeled/unlabeled split manifest")
    add_common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate the synthetic gland dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run training")
    add_common(p)
    p.add_argument("--split", default=None, help="split manifest; omit to use all labels")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="cap on steps for this invocation")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--eval-split", default=None, choices=[None, "train", "test"])
    p.add_argument("--eval-every", type=int, default=0, metavar="EPOCHS")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", default="single", choices=["single", "sliding"])
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    add_common(p)
    p.add_argument("--grid", required=True, choices=sorted(ABLATION_GRIDS))
    p.add_argument("--split", default=None)
    p.add_argument("--eval-split", default="test", choices=["train", "test"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay", help="export prediction overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log("error", kind="config", message=str(exc))
        return 2
    except yaml.YAMLError as exc:
        log("error", kind="config", message=f"bad YAML: {exc}")
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        log("error", kind="data", message=str(exc))
        return 3
    except NumericError as exc:
        log("error", kind="numeric", message=str(exc), components=exc.components)
        return 4


if __name__ == "__main__":
    sys.exit(main())
