"""Joint training of a text-only student and an auxiliary-conditioned teacher.

Student loss: ``mse(student, x0) + lam * mse(student, stop_grad(teacher))``.
Teacher loss: ``mse(teacher, x0)``, applied only when a countdown timer with
expected period ``t_cycle`` expires.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor, adam_init, adam_step
from .denoisers import (NULL_LABEL, AuxiliaryCondition, Denoiser, cfg_drop_mask,
                        encode_auxiliary_batch, student_forward, teacher_forward)
from .diffusion import NoiseSchedule, q_sample
from .motion import normalize


@dataclass
class TrainConfig:
    lam: float = 0.3
    t_cycle: float = 2.0
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    p_uncond: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.t_cycle < 1:
            raise ValueError("t_cycle must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


# ---------------------------------------------------------------- timer

def timer_reset(t_cycle: float, u: float) -> int:
    """Steps until the next teacher update: ``floor(t_cycle) + [u <= frac]``.

    An integer ``t_cycle`` always yields exactly ``t_cycle`` (the indicator
    is defined as zero when the fractional part is zero).
    """
    if t_cycle < 1:
        raise ValueError("t_cycle must be >= 1")
    base = math.floor(t_cycle)
    frac = t_cycle - base
    return base + int(frac > 0 and u <= frac)


def timer_reset_many(t_cycle: float, u: np.ndarray) -> np.ndarray:
    """Vectorized :func:`timer_reset`."""
    if t_cycle < 1:
        raise ValueError("t_cycle must be >= 1")
    base = math.floor(t_cycle)
    frac = t_cycle - base
    return base + ((np.asarray(u) <= frac) & (frac > 0)).astype(np.int64)


@dataclass
class TeacherTimer:
    t_cycle: float
    counter: int = 0

    def reset(self, rng: np.random.Generator) -> int:
        self.counter = timer_reset(self.t_cycle, rng.random())
        return self.counter

    def tick(self, rng: np.random.Generator) -> bool:
        """Advance one step; True when the teacher should update now."""
        self.counter -= 1
        if self.counter <= 0:
            self.reset(rng)
            return True
        return False


# ---------------------------------------------------------------- losses

def _weight(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim < len(shape):
        m = m.reshape(m.shape + (1,) * (len(shape) - m.ndim))
    return np.broadcast_to(m, shape)


def loss_to_gt(pred: Tensor, x0, mask) -> Tensor:
    """Masked mean squared error against clean frames."""
    if tuple(pred.shape) != np.shape(x0):
        raise dc.ShapeError(f"prediction {pred.shape} vs target {np.shape(x0)}")
    return dc.squared_error(pred, Tensor(np.asarray(x0, dtype=np.float64)), _weight(mask, pred.shape))


def loss_s_to_t(student_pred: Tensor, teacher_pred, mask) -> Tensor:
    """Masked MSE pulling the student toward a fixed teacher prediction."""
    target = teacher_pred.detach() if isinstance(teacher_pred, Tensor) else Tensor(teacher_pred)
    if tuple(student_pred.shape) != tuple(target.shape):
        raise dc.ShapeError(f"student {student_pred.shape} vs teacher {target.shape}")
    return dc.squared_error(student_pred, target, _weight(mask, student_pred.shape))


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    if total_steps <= 0:
        return lr_base
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, lr_base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


# ---------------------------------------------------------------- data

@dataclass
class TrainingData:
    """Normalized training tensors; ``aux`` holds raw auxiliary frames for the teacher."""

    x0: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    aux: AuxiliaryCondition | None = None

    def __len__(self) -> int:
        return len(self.labels)


def prepare_training_data(dataset, split: str = "train", aux_kind: str | None = None) -> TrainingData:
    arrs = dataset.arrays(split)
    x0 = normalize(arrs.frames, dataset.norm_stats)
    pad = np.arange(x0.shape[1])[None, :] >= arrs.lengths[:, None]
    x0[pad] = 0.0
    aux = None
    if aux_kind is not None:
        aux = encode_auxiliary_batch(arrs.frames, arrs.lengths, aux_kind, arrs.cameras)
    return TrainingData(x0, arrs.lengths, arrs.labels, aux)


def fit_aux_normalizer(teacher: Denoiser, aux: AuxiliaryCondition) -> None:
    flat = aux.frames.reshape(-1, aux.frames.shape[-1])
    std = flat.std(axis=0)
    teacher.set_aux_stats(flat.mean(axis=0), np.where(std > 1e-8, std, 1.0))


def trimmed_length(lengths, multiple: int = 4, cap: int | None = None) -> int:
    """Frames needed to cover every real frame in a batch, rounded up."""
    n = int(np.max(lengths))
    n = -(-n // multiple) * multiple
    return min(n, cap) if cap is not None else n


# ---------------------------------------------------------------- training loop

@dataclass
class StepReport:
    loss_s_gt: float
    loss_s_t: float
    loss_t_gt: float
    teacher_updated: bool
    lr: float


@dataclass
class EpochLog:
    epoch: int
    loss_s_gt: float
    loss_s_t: float
    loss_t_gt: float
    lr: float
    teacher_updates: int

    FIELDS = ("epoch", "loss_s_gt", "loss_s_t", "loss_t_gt", "lr", "teacher_updates")

    def row(self) -> list:
        return [self.epoch] + [repr(float(getattr(self, k))) for k in self.FIELDS[1:-1]] + [self.teacher_updates]


def _grads_by_name(params: dict, grads: dict) -> dict:
    return {k: grads[p] for k, p in params.items() if p in grads}


class CoTrainer:
    """Owns both models, their optimizers, the timer and all random streams.

    Randomness is split into three streams (batches/noise, student dropout,
    teacher dropout and timer) so that the student's trajectory does not
    depend on whether a teacher is present.
    """

    def __init__(self, student: Denoiser, teacher: Denoiser | None, sched: NoiseSchedule,
                 cfg: TrainConfig, data: TrainingData):
        if student.role != "student":
            raise ValueError("first model must be a student")
        if teacher is not None:
            if teacher.role != "teacher":
                raise ValueError("second model must be a teacher")
            if data.aux is None or data.aux.kind != teacher.config.aux_kind:
                raise ValueError("training data lacks auxiliary frames for the teacher's kind")
        if len(data) == 0:
            raise ValueError("empty training set")
        self.student, self.teacher, self.sched, self.cfg, self.data = student, teacher, sched, cfg, data
        ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng_data = np.random.default_rng(ss[0])
        self.rng_student = np.random.default_rng(ss[1])
        self.rng_teacher = np.random.default_rng(ss[2])
        self.opt_student = adam_init(student.params)
        self.opt_teacher = adam_init(teacher.params) if teacher is not None else None
        self.timer = TeacherTimer(cfg.t_cycle)
        if teacher is not None:
            self.timer.reset(self.rng_teacher)
        self.steps_per_epoch = -(-len(data) // cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.epoch = 0
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self.teacher_updates = 0
        self.trim_multiple = 4

    # -- batches
    def next_batch(self) -> np.ndarray:
        if self._cursor >= len(self._order):
            self._order = self.rng_data.permutation(len(self.data))
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + self.cfg.batch_size]
        self._cursor += len(idx)
        return idx

    def train_step(self, idx=None) -> StepReport:
        idx = self.next_batch() if idx is None else np.asarray(idx)
        cfg, d = self.cfg, self.data
        n = trimmed_length(d.lengths[idx], self.trim_multiple, d.x0.shape[1])
        x0 = d.x0[idx, :n]
        lengths, labels = d.lengths[idx], d.labels[idx]
        B = len(idx)
        t = self.rng_data.integers(1, self.sched.T_max + 1, size=B)
        eps = self.rng_data.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, self.sched)
        mask = np.arange(n)[None, :] < lengths[:, None]
        lr = cosine_lr(min(self.step, self.total_steps), self.total_steps, cfg.lr)

        s_labels = np.where(cfg_drop_mask(B, cfg.p_uncond, self.rng_student), NULL_LABEL, labels)

        t_pred = None
        l_t = float("nan")
        updated = False
        if self.teacher is not None:
            t_drop = cfg_drop_mask(B, cfg.p_uncond, self.rng_teacher)
            t_labels = np.where(t_drop, NULL_LABEL, labels)
            aux = d.aux.take(idx)
            updated = self.timer.tick(self.rng_teacher)
            if updated:
                with Tape() as tape:
                    t_pred = teacher_forward(self.teacher, x_t, t, t_labels, aux, lengths, t_drop)
                    loss_t = loss_to_gt(t_pred, x0, mask)
                grads = tape.backward(loss_t)
                adam_step(self.teacher.params, _grads_by_name(self.teacher.params, grads),
                          self.opt_teacher, lr)
                self.teacher_updates += 1
            else:
                t_pred = teacher_forward(self.teacher, x_t, t, t_labels, aux, lengths, t_drop)
                loss_t = loss_to_gt(t_pred, x0, mask)
            t_pred = t_pred.detach()
            l_t = loss_t.item()

        with Tape() as tape:
            s_pred = student_forward(self.student, x_t, t, s_labels, lengths)
            loss_gt = loss_to_gt(s_pred, x0, mask)
            loss_st = loss_s_to_t(s_pred, t_pred, mask) if t_pred is not None else None
            total = loss_gt + cfg.lam * loss_st if (loss_st is not None and cfg.lam > 0) else loss_gt
        grads = tape.backward(total)
        adam_step(self.student.params, _grads_by_name(self.student.params, grads), self.opt_student, lr)
        self.step += 1
        return StepReport(loss_gt.item(), loss_st.item() if loss_st is not None else float("nan"),
                          l_t, updated, lr)

    def run_epoch(self) -> EpochLog:
        reports = [self.train_step() for _ in range(self.steps_per_epoch)]
        self.epoch += 1
        mean = lambda k: float(np.mean([getattr(r, k) for r in reports]))  # noqa: E731
        return EpochLog(self.epoch, mean("loss_s_gt"), mean("loss_s_t"), mean("loss_t_gt"),
                        reports[-1].lr, int(sum(r.teacher_updated for r in reports)))

    def fit(self, epochs: int | None = None, on_epoch=None) -> list[EpochLog]:
        logs = []
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < target:
            log = self.run_epoch()
            logs.append(log)
            if on_epoch is not None:
                on_epoch(self, log)
        return logs

    # -- persistence
    def progress(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "teacher_updates": self.teacher_updates,
                "timer_counter": self.timer.counter, "cursor": self._cursor,
                "order": self._order.tolist(), "train_config": self.cfg.to_dict(),
                "rng": {k: getattr(self, f"rng_{k}").bit_generator.state
                        for k in ("data", "student", "teacher")}}

    def restore_progress(self, progress: dict, optim: dict) -> None:
        self.step = progress["step"]
        self.epoch = progress["epoch"]
        self.teacher_updates = progress["teacher_updates"]
        self.timer.counter = progress["timer_counter"]
        self._cursor = progress["cursor"]
        self._order = np.array(progress["order"], dtype=np.int64)
        for k, state in progress["rng"].items():
            getattr(self, f"rng_{k}").bit_generator.state = state
        if "student" in optim:
            self.opt_student = optim["student"]
        if self.teacher is not None and "teacher" in optim:
            self.opt_teacher = optim["teacher"]

    def optim_states(self) -> dict:
        out = {"student": self.opt_student}
        if self.opt_teacher is not None:
            out["teacher"] = self.opt_teacher
        return out


def write_epoch_csv(path, logs: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpochLog.FIELDS)
        for log in logs:
            w.writerow(log.row())
