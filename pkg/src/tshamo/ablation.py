"""Run configuration plus the auxiliary-kind and guidance-weight sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cotrain import CoTrainer, TrainConfig, fit_aux_normalizer, prepare_training_data
from .datakit import Dataset, SyntheticSpec
from .denoisers import AUX_KINDS, Denoiser, DenoiserConfig, encode_auxiliary_batch
from .diffusion import build_schedule
from .evalkit import ActionClassifier, EvalReport, TestSet, evaluate, train_classifier

log = logging.getLogger("tshamo")

DEFAULT_CONFIG = {
    "data": SyntheticSpec().to_dict(),
    "train": TrainConfig().to_dict(),
    "model": {"backbone": "transformer_encdec", "d_model": 128, "num_layers": 4, "num_heads": 4,
              "ff_mult": 2, "aux_channels": 16},
    "teacher": {"aux_kind": "mano_plus_contact"},
    "diffusion": {"T_max": 1000, "schedule": "linear"},
    "eval": {"runs": 20, "sigma": 10.0, "pair_count": 300, "classifier_epochs": 40, "classifier_seed": 0},
    "checkpoint_every": 50,
}

LAMBDA_GRID = (0.0, 0.1, 0.3, 0.5, 1.0)
COND_GRID = ("none",) + AUX_KINDS


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str) -> None:
    """Set ``a.b=value`` in a nested config; unknown keys are rejected."""
    if "=" not in dotted:
        raise ValueError(f"override {dotted!r} is not of the form key=value")
    key, text = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(text)


def resolve_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        user = json.loads(Path(path).read_text())
        for section, values in user.items():
            if section not in cfg:
                raise KeyError(f"unknown config section {section!r}")
            if isinstance(cfg[section], dict):
                for k, v in values.items():
                    if k not in cfg[section]:
                        raise KeyError(f"unknown config key {section}.{k}")
                    cfg[section][k] = v
            else:
                cfg[section] = values
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def model_configs(cfg: dict, num_labels: int, aux_kind: str | None, max_len: int):
    m = cfg["model"]
    common = dict(backbone=m["backbone"], num_labels=num_labels, d_model=m["d_model"],
                  num_layers=m["num_layers"], num_heads=m["num_heads"], max_len=max_len,
                  ff_mult=m["ff_mult"], aux_channels=m["aux_channels"])
    student = DenoiserConfig(role="student", **common)
    teacher = DenoiserConfig(role="teacher", aux_kind=aux_kind, **common) if aux_kind else None
    return student, teacher


def build_trainer(cfg: dict, dataset: Dataset, aux_kind: str | None, seed: int | None = None):
    """Fresh models and trainer for one run; ``aux_kind=None`` trains the student alone."""
    tcfg = TrainConfig.from_dict(cfg["train"])
    if seed is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "seed": seed})
    scfg, tcfg_model = model_configs(cfg, dataset.manifest.num_classes, aux_kind, dataset.manifest.max_frames)
    data = prepare_training_data(dataset, "train", aux_kind)
    student = Denoiser.create(scfg, 2 * tcfg.seed + 1)
    teacher = None
    if tcfg_model is not None:
        teacher = Denoiser.create(tcfg_model, 2 * tcfg.seed + 2)
        fit_aux_normalizer(teacher, data.aux)
    sched = build_schedule(cfg["diffusion"]["T_max"], cfg["diffusion"]["schedule"])
    return CoTrainer(student, teacher, sched, tcfg, data)


def test_set_for(dataset: Dataset, aux_kind: str | None, split: str = "test") -> TestSet:
    arrs = dataset.arrays(split)
    aux = encode_auxiliary_batch(arrs.frames, arrs.lengths, aux_kind, arrs.cameras) if aux_kind else None
    return TestSet(arrs.frames, arrs.lengths, arrs.labels, aux)


def fit_classifier(cfg: dict, dataset: Dataset) -> ActionClassifier:
    arrs = dataset.arrays("train")
    e = cfg["eval"]
    return train_classifier(arrs.frames, arrs.lengths, arrs.labels, dataset.manifest.num_classes,
                            dataset.norm_stats, epochs=e["classifier_epochs"], seed=e["classifier_seed"])


# ---------------------------------------------------------------- sweeps

@dataclass
class CellResult:
    aux_kind: str | None
    lam: float
    seed: int
    student: dict
    teacher: dict | None
    student_report: EvalReport | None = None
    teacher_report: EvalReport | None = None


def run_cell(cfg: dict, dataset: Dataset, classifier: ActionClassifier, aux_kind: str | None,
             lam: float, seed: int) -> CellResult:
    """Train one (aux kind, lambda, seed) setting and evaluate student and teacher."""
    local = copy.deepcopy(cfg)
    local["train"]["lambda"] = lam
    trainer = build_trainer(local, dataset, aux_kind, seed)
    log.info("cell aux=%s lambda=%s seed=%d: %d steps", aux_kind, lam, seed, trainer.total_steps)
    trainer.fit()
    e = local["eval"]
    stats = dataset.norm_stats
    ts = test_set_for(dataset, aux_kind)
    s_rep = evaluate(trainer.student, classifier, ts, trainer.sched, stats, e["runs"], e["sigma"], seed,
                     e["pair_count"])
    t_rep = None
    if trainer.teacher is not None:
        t_rep = evaluate(trainer.teacher, classifier, ts, trainer.sched, stats, e["runs"], e["sigma"], seed,
                         e["pair_count"])
    return CellResult(aux_kind, lam, seed, s_rep.mean, t_rep.mean if t_rep else None, s_rep, t_rep)


def sweep_cells(kind: str, grid, aux_kind: str = "mano_plus_contact") -> list[tuple]:
    """(setting label, aux kind, lambda) for each grid entry."""
    if kind == "cond_type":
        cells = []
        for g in grid:
            if g not in COND_GRID:
                raise ValueError(f"unknown condition type {g!r}; choose from {COND_GRID}")
            cells.append((g, None if g == "none" else g, 0.0 if g == "none" else None))
        return cells
    if kind == "lambda":
        return [(repr(float(g)), aux_kind, float(g)) for g in grid]
    raise ValueError(f"unknown sweep kind {kind!r}; choose cond_type or lambda")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TSHAMO_THREADS", "1")))
    except ValueError:
        return 1


class CellCache:
    """Memoizes cells so sweeps sharing a setting train it once.

    A lambda of 0 never feeds the teacher into the student, and the student's
    random streams are independent of the teacher, so those cells share the
    student-only baseline.
    """

    def __init__(self, cfg: dict, dataset: Dataset, classifier: ActionClassifier):
        self.cfg, self.dataset, self.classifier = cfg, dataset, classifier
        self._done: dict = {}

    @property
    def results(self) -> list[CellResult]:
        return list(self._done.values())

    def key(self, aux_kind, lam, seed):
        if lam == 0.0:
            return (None, 0.0, seed)
        return (aux_kind, lam, seed)

    def get(self, aux_kind, lam, seed) -> CellResult:
        k = self.key(aux_kind, lam, seed)
        if k not in self._done:
            self._done[k] = run_cell(self.cfg, self.dataset, self.classifier, k[0], k[1], seed)
        return self._done[k]

    def run_many(self, requests) -> list[CellResult]:
        pending = []
        for r in requests:
            k = self.key(*r)
            if k not in self._done and k not in pending:
                pending.append(k)
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            results = list(pool.map(lambda k: run_cell(self.cfg, self.dataset, self.classifier, *k), pending))
        self._done.update(zip(pending, results))
        return [self._done[self.key(*r)] for r in requests]


ROW_FIELDS = ("sweep", "setting", "aux_kind", "lambda", "seed",
              "student_acc@3", "student_kid_x5000", "student_diversity",
              "teacher_acc@3", "teacher_kid_x5000", "teacher_diversity")


def ablate(kind: str, grid, cache: CellCache, seeds, aux_kind: str = "mano_plus_contact") -> list[dict]:
    """One row per (setting, seed) with student and teacher metrics."""
    if not len(grid):
        raise ValueError("empty sweep grid")
    lam_default = float(cache.cfg["train"]["lambda"])
    cells = sweep_cells(kind, grid, aux_kind)
    requests = [(a, lam_default if lam is None else lam, s) for (_, a, lam) in cells for s in seeds]
    results = cache.run_many(requests)
    rows = []
    for (label, _, _), res in zip([c for c in cells for _ in seeds], results):
        row = {"sweep": kind, "setting": label, "aux_kind": res.aux_kind or "none", "lambda": res.lam,
               "seed": res.seed}
        for role, metrics in (("student", res.student), ("teacher", res.teacher)):
            for m in ("acc@3", "kid_x5000", "diversity"):
                row[f"{role}_{m}"] = metrics[m] if metrics else float("nan")
        rows.append(row)
    return rows


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def seed_table(rows: list[dict], metric: str = "student_acc@3") -> dict:
    """{seed: {setting: value}} for quick comparisons."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["seed"], {})[r["setting"]] = r[metric]
    return out


def summarize(rows: list[dict], metric: str) -> dict:
    by: dict = {}
    for r in rows:
        by.setdefault(r["setting"], []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in by.items()}
