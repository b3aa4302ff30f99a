"""Command-line entry point: ``tshamo {synth,train,eval,sample,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .cotrain import write_epoch_csv
from .datakit import (SyntheticSpec, generate_synthetic_dataset, load_checkpoint, read_dataset,
                      save_checkpoint, write_dataset)
from .denoisers import AUX_KINDS, BACKBONES
from .diffusion import build_schedule
from .evalkit import ActionClassifier, evaluate, sample

log = logging.getLogger("tshamo")


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; missing keys take defaults")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.epochs=10 (repeatable)")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tshamo", description=__doc__, allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset", allow_abbrev=False)
    _add_common(p, data=False)

    p = sub.add_parser("train", help="co-train student and teacher", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="teacher guidance weight")
    p.add_argument("--cond-type", choices=("none",) + AUX_KINDS, help="teacher auxiliary kind")
    p.add_argument("--backbone", choices=BACKBONES)

    p = sub.add_parser("eval", help="evaluate a checkpoint's student", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--runs", type=int, help="evaluation runs (default 20)")
    p.add_argument("--sigma", type=float, help="guidance scale (default 10.0)")
    p.add_argument("--classifier", type=Path, help="saved classifier; trained on the fly if absent")

    p = sub.add_parser("sample", help="export generated motions", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--label", type=int, action="append", required=True, help="label id (repeatable)")
    p.add_argument("--count", type=int, default=1, help="samples per label")
    p.add_argument("--length", type=int, default=48, help="frames per sample")
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("ablate", help="auxiliary-kind or lambda sweep", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--kind", required=True, help="cond_type or lambda")
    p.add_argument("--grid", nargs="+", help="settings (default: full grid for the kind)")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds (default: --seed or config seed)")
    p.add_argument("--cond-type", choices=AUX_KINDS, help="teacher kind for the lambda sweep")
    p.add_argument("--lambda", dest="lam", type=float, help="guidance weight for the cond_type sweep")
    p.add_argument("--backbone", choices=BACKBONES)
    p.add_argument("--runs", type=int)
    p.add_argument("--sigma", type=float)
    return parser


def _setup_run(args) -> dict:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    overrides = list(args.override)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}"]
    for flag, key in (("lam", "train.lambda"), ("backbone", "model.backbone"),
                      ("runs", "eval.runs"), ("sigma", "eval.sigma")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    cond = getattr(args, "cond_type", None)
    if cond is not None:
        overrides.append(f"teacher.aux_kind={json.dumps(None if cond == 'none' else cond)}")
    try:
        cfg = ablation.resolve_config(args.config, overrides)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.info("command %s", args.command)
    return cfg


def _load_data(path: Path):
    if not (path / "manifest.json").exists():
        raise CliError(f"no dataset at {path}")
    return read_dataset(path)


def cmd_synth(args, cfg) -> None:
    try:
        spec = SyntheticSpec.from_dict(cfg["data"])
        ds = generate_synthetic_dataset(spec, cfg["train"]["seed"])
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    write_dataset(ds, args.out / "dataset")
    log.info("wrote %d sequences to %s", len(ds.records), args.out / "dataset")


def cmd_train(args, cfg) -> None:
    ds = _load_data(args.data)
    aux = cfg["teacher"]["aux_kind"]
    trainer = ablation.build_trainer(cfg, ds, aux)
    every = int(cfg["checkpoint_every"])
    ckpt_dir = args.out / "checkpoints"

    def on_epoch(tr, entry):
        log.info("epoch %d loss_s_gt=%.6f loss_s_t=%.6f loss_t_gt=%.6f", entry.epoch, entry.loss_s_gt,
                 entry.loss_s_t, entry.loss_t_gt)
        if every > 0 and entry.epoch % every == 0:
            save_checkpoint(ckpt_dir / f"epoch{entry.epoch:04d}.npz", tr.student, tr.teacher,
                            tr.optim_states(), tr.progress())

    logs = trainer.fit(on_epoch=on_epoch)
    write_epoch_csv(args.out / "losses.csv", logs)
    save_checkpoint(args.out / "final.npz", trainer.student, trainer.teacher, trainer.optim_states(),
                    trainer.progress())
    save_checkpoint(args.out / "student.npz", trainer.student)


def _classifier(args, cfg, ds) -> ActionClassifier:
    if getattr(args, "classifier", None) is not None:
        return ActionClassifier.load(args.classifier)
    clf = ablation.fit_classifier(cfg, ds)
    clf.save(args.out / "classifier.npz")
    return clf


def cmd_eval(args, cfg) -> None:
    ds = _load_data(args.data)
    if not args.checkpoint.exists():
        raise CliError(f"no checkpoint at {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    clf = _classifier(args, cfg, ds)
    e = cfg["eval"]
    sched = build_schedule(cfg["diffusion"]["T_max"], cfg["diffusion"]["schedule"])
    report = evaluate(ckpt.student, clf, ablation.test_set_for(ds, None), sched, ds.norm_stats,
                      runs=e["runs"], sigma=e["sigma"], seed=cfg["train"]["seed"], pair_count=e["pair_count"])
    (args.out / "report.json").write_text(report.to_json())
    report.write_csv(args.out / "report.csv")
    log.info("eval means %s", report.mean)


def cmd_sample(args, cfg) -> None:
    ds = _load_data(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    sched = build_schedule(cfg["diffusion"]["T_max"], cfg["diffusion"]["schedule"])
    labels = np.repeat(np.array(args.label), args.count)
    if labels.size and (labels.min() < 0 or labels.max() >= ds.manifest.num_classes):
        raise CliError("label id out of range")
    rng = np.random.default_rng(cfg["train"]["seed"])
    seqs = sample(ckpt.student, labels, cfg["eval"]["sigma"], sched, rng, ds.norm_stats,
                  lengths=np.full(len(labels), args.length))
    np.savez(args.out / "samples.npz", frames=np.stack([s.frames for s in seqs]) if seqs else np.zeros((0,)),
             labels=labels, lengths=np.full(len(labels), args.length))
    meta = [{"index": i, "label": int(s.label), "name": ds.manifest.label_names[s.label], "length": s.length}
            for i, s in enumerate(seqs)]
    (args.out / "samples.json").write_text(json.dumps(meta, indent=1) + "\n")


def cmd_ablate(args, cfg) -> None:
    if args.kind not in ("cond_type", "lambda"):
        raise CliError(f"unknown ablation kind {args.kind!r}; choose cond_type or lambda")
    ds = _load_data(args.data)
    if args.grid:
        grid = [float(g) for g in args.grid] if args.kind == "lambda" else list(args.grid)
    else:
        grid = list(ablation.LAMBDA_GRID if args.kind == "lambda" else ablation.COND_GRID)
    seeds = args.seeds or [cfg["train"]["seed"]]
    clf = _classifier(args, cfg, ds)
    cache = ablation.CellCache(cfg, ds, clf)
    try:
        rows = ablation.ablate(args.kind, grid, cache, seeds, cfg["teacher"]["aux_kind"] or "mano_plus_contact")
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    ablation.write_rows(args.out / f"ablate_{args.kind}.csv", rows)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _setup_run(args)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"tshamo {args.command}: error: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return 2
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)
    return 0


if __name__ == "__main__":
    sys.exit(main())
