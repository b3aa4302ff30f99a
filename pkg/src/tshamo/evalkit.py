"""Guided sampling, an action classifier, and generation metrics.

Metrics follow the usual text-to-motion protocol: top-k recognition accuracy
of a fixed classifier, KID between classifier features of real and generated
motions, and feature-space diversity, each averaged over repeated runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor, adam_init, adam_step
from .denoisers import NULL_LABEL, AuxiliaryCondition, Denoiser, denoise
from .diffusion import NoiseSchedule, posterior_step
from .motion import FRAME_DIM, MotionSequence, NormStats, decode_frames, denormalize, normalize

FEATURE_DIM = 64
METRICS = ("acc@1", "acc@2", "acc@3", "kid_x5000", "diversity")


# ---------------------------------------------------------------- sampling

def cfg_combine(f_uncond, f_cond, sigma: float) -> np.ndarray:
    """Guided prediction ``f_uncond + sigma (f_cond - f_uncond)``.

    Written as ``(1 - sigma) f_uncond + sigma f_cond`` so sigma in {0, 1}
    returns the corresponding input bit for bit.
    """
    u = np.asarray(getattr(f_uncond, "data", f_uncond))
    c = np.asarray(getattr(f_cond, "data", f_cond))
    if u.shape != c.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {c.shape}")
    return (1.0 - sigma) * u + sigma * c


def sample_frames(model: Denoiser, labels, lengths, sigma: float, sched: NoiseSchedule,
                  rng: np.random.Generator, aux: AuxiliaryCondition | None = None,
                  max_frames: int | None = None) -> np.ndarray:
    """Run the guided reverse chain; returns normalized x0 estimates (B, N, 166).

    Frames past each length are zero.  Works for a student (``aux=None``) or
    a teacher given batched auxiliary frames.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    B = len(labels)
    N = max_frames or model.config.max_len
    out = np.zeros((B, N, FRAME_DIM))
    if B == 0:
        return out
    n = int(np.max(lengths))
    n = min(-(-n // 4) * 4, N)
    null = np.full(B, NULL_LABEL)
    drop_all = np.ones(B, dtype=bool)
    x = rng.standard_normal((B, n, FRAME_DIM))
    for t in range(sched.T_max, 0, -1):
        steps = np.full(B, t)
        f_c = denoise(model, x, steps, labels, aux, lengths).data
        if sigma == 1.0:
            # the unconditional branch has weight exactly zero
            x0_hat = f_c
        else:
            f_u = denoise(model, x, steps, null, aux, lengths, drop_all if aux is not None else None).data
            x0_hat = cfg_combine(f_u, f_c, sigma)
        noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = posterior_step(x, x0_hat, t, noise, sched)
    out[:, :n] = x
    out[np.arange(N)[None, :] >= lengths[:, None]] = 0.0
    return out


def sample(model: Denoiser, labels, sigma: float, sched: NoiseSchedule, rng: np.random.Generator,
           stats: NormStats, lengths=None, n_samples: int | None = None,
           aux: AuxiliaryCondition | None = None) -> list[MotionSequence]:
    """Generate decoded motions for one label (repeated ``n_samples`` times) or a label list."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if n_samples is not None:
        labels = np.resize(labels, n_samples) if n_samples else np.zeros(0, dtype=np.int64)
    if lengths is None:
        lengths = np.full(len(labels), model.config.max_len)
    lengths = np.resize(np.asarray(lengths, dtype=np.int64), len(labels))
    raw = decode_frames(denormalize(sample_frames(model, labels, lengths, sigma, sched, rng, aux), stats),
                        lengths)
    return [MotionSequence(raw[i], int(labels[i]), int(lengths[i])) for i in range(len(labels))]


# ---------------------------------------------------------------- classifier

def _frame_inputs(x: np.ndarray, lengths) -> np.ndarray:
    """Per-frame inputs: normalized frame, its velocity, and a time phase."""
    B, n, _ = x.shape
    lengths = np.asarray(lengths)
    vel = np.zeros_like(x)
    vel[:, 1:] = x[:, 1:] - x[:, :-1]
    vel[np.arange(n)[None, :] >= lengths[:, None]] = 0.0
    phase = np.arange(n)[None, :] / np.maximum(lengths[:, None] - 1, 1)
    tfeat = np.stack([np.sin(np.pi * phase), np.cos(np.pi * phase)], -1)
    return np.concatenate([x, 4.0 * vel, tfeat], -1)


class ActionClassifier:
    """Frame MLP, masked mean pooling over time, bounded 64-d feature, label logits.

    Input motions are raw (decoded) frames; normalization happens inside.
    """

    def __init__(self, num_classes: int, stats: NormStats, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        d_in = 2 * FRAME_DIM + 2
        shapes = {"frame1": (d_in, hidden), "frame2": (hidden, hidden),
                  "feat": (hidden, FEATURE_DIM), "head": (FEATURE_DIM, num_classes)}
        self.params = {}
        for k, (i, o) in shapes.items():
            self.params[k + ".w"] = Tensor(rng.normal(0, 1 / np.sqrt(i), (i, o)), requires_grad=True)
            self.params[k + ".b"] = Tensor(np.zeros(o), requires_grad=True)
        self.num_classes = num_classes
        self.stats = stats

    def _lin(self, x, k):
        return x @ self.params[k + ".w"] + self.params[k + ".b"]

    def forward(self, frames, lengths) -> tuple[Tensor, Tensor]:
        frames = np.asarray(frames, dtype=np.float64)
        lengths = np.asarray(lengths)
        x = normalize(frames, self.stats)
        x[np.arange(x.shape[1])[None, :] >= lengths[:, None]] = 0.0
        h = dc.gelu(self._lin(Tensor(_frame_inputs(x, lengths)), "frame1"))
        h = dc.gelu(self._lin(h, "frame2"))
        w = (np.arange(x.shape[1])[None, :] < lengths[:, None]) / lengths[:, None]
        pooled = dc.sum(h * np.broadcast_to(w[:, :, None], h.shape).copy(), axis=1)
        feat = dc.tanh(self._lin(pooled, "feat"))
        return feat, self._lin(feat, "head")

    def features(self, frames, lengths) -> np.ndarray:
        return self.forward(frames, lengths)[0].data

    def logits(self, frames, lengths) -> np.ndarray:
        return self.forward(frames, lengths)[1].data

    def save(self, path) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        arrays.update({"stats.mean": self.stats.mean, "stats.std": self.stats.std,
                       "stats.scaled": self.stats.scaled})
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> ActionClassifier:
        with np.load(path) as z:
            stats = NormStats(z["stats.mean"], z["stats.std"], z["stats.scaled"])
            hidden = z["frame1.w"].shape[1]
            clf = cls(z["head.w"].shape[1], stats, hidden=hidden)
            for k in clf.params:
                clf.params[k].data = np.array(z[k])
        return clf


def train_classifier(frames, lengths, labels, num_classes: int, stats: NormStats, epochs: int = 60,
                     batch_size: int = 32, lr: float = 2e-3, seed: int = 0,
                     noise: float = 0.05) -> ActionClassifier:
    """Fit on ground-truth training motions.

    Small Gaussian input noise (in normalized units) keeps the classifier from
    relying on exact values that a generator would never reproduce.
    """
    clf = ActionClassifier(num_classes, stats, seed=seed)
    rng = np.random.default_rng(seed + 1)
    frames = np.asarray(frames, dtype=np.float64)
    lengths = np.asarray(lengths)
    labels = np.asarray(labels)
    state = adam_init(clf.params)
    scale = np.where(stats.scaled, stats.std, 1.0)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x = frames[idx] + noise * scale * rng.standard_normal(frames[idx].shape)
            with Tape() as tape:
                _, logits = clf.forward(x, lengths[idx])
                loss = dc.cross_entropy(logits, labels[idx])
            g = tape.backward(loss)
            adam_step(clf.params, {k: g[p] for k, p in clf.params.items() if p in g}, state, lr)
    return clf


# ---------------------------------------------------------------- metrics

def top_k_from_logits(logits, labels, k: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("no samples to score")
    if k < 1:
        raise ValueError("k must be >= 1")
    # stable sort on negated logits: equal scores keep ascending label order
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def top_k_accuracy(classifier: ActionClassifier, frames, lengths, labels, k: int) -> float:
    if len(labels) == 0:
        raise ValueError("no samples to score")
    return top_k_from_logits(classifier.logits(frames, lengths), labels, k)


def _poly_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** 3


def kid(features_real, features_gen) -> float:
    """Unbiased polynomial-kernel MMD^2, times 5000.

    Equal-size sets use the paired U-statistic (cross terms with matching row
    index are dropped too), which is exactly zero for identical sets.
    """
    x = np.asarray(features_real, dtype=np.float64)
    y = np.asarray(features_gen, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("KID needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature dimensions differ")
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if n == m:
        sxy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    else:
        sxy = kxy.sum() / (n * m)
    return float(5000.0 * (sxx + syy - 2.0 * sxy))


def diversity(features, pair_count: int = 300, rng: np.random.Generator | None = None) -> float:
    """Mean Euclidean distance over random distinct pairs (all pairs if fewer exist)."""
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    if n < 2:
        raise ValueError("diversity needs at least two samples")
    total = n * (n - 1) // 2
    if total <= pair_count:
        i, j = np.triu_indices(n, 1)
    else:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(total, size=pair_count, replace=False)
        i, j = np.triu_indices(n, 1)
        i, j = i[flat], j[flat]
    return float(np.mean(np.linalg.norm(f[i] - f[j], axis=1)))


# ---------------------------------------------------------------- protocol

@dataclass
class TestSet:
    """Ground-truth prompts: raw frames plus optional teacher auxiliary frames."""

    __test__ = False  # not a pytest class despite the name

    frames: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    aux: AuxiliaryCondition | None = None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EvalReport:
    per_run: dict
    runs: int
    mean: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, vals in self.per_run.items():
            v = np.asarray(vals, dtype=np.float64)
            self.mean[k] = float(v.mean())
            self.ci95[k] = float(1.96 * v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean, "ci95": self.ci95, "per_run": self.per_run}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write_csv(self, path) -> None:
        keys = list(self.per_run)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run"] + keys)
            for r in range(self.runs):
                w.writerow([r] + [repr(float(self.per_run[k][r])) for k in keys])
            w.writerow(["mean"] + [repr(self.mean[k]) for k in keys])
            w.writerow(["ci95"] + [repr(self.ci95[k]) for k in keys])


def score_generations(classifier: ActionClassifier, real_features: np.ndarray, frames, lengths,
                      labels, rng: np.random.Generator, pair_count: int = 300) -> dict:
    feats, logits = (a.data for a in classifier.forward(frames, lengths))
    out = {f"acc@{k}": top_k_from_logits(logits, labels, k) for k in (1, 2, 3)}
    out["kid_x5000"] = kid(real_features, feats)
    out["diversity"] = diversity(feats, pair_count, rng)
    return out


def evaluate_generator(generate, classifier: ActionClassifier, test_set: TestSet, runs: int = 20,
                       seed: int = 0, pair_count: int = 300) -> EvalReport:
    """``generate(rng) -> raw frames (S, N, 166)`` for the test prompts, once per run."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    real = classifier.features(test_set.frames, test_set.lengths)
    per_run = {k: [] for k in METRICS}
    for r in range(runs):
        rng = np.random.default_rng([seed, r])
        gen = generate(rng)
        scores = score_generations(classifier, real, gen, test_set.lengths, test_set.labels, rng, pair_count)
        for k in METRICS:
            per_run[k].append(scores[k])
    return EvalReport(per_run, runs)


def evaluate(model: Denoiser, classifier: ActionClassifier, test_set: TestSet, sched: NoiseSchedule,
             stats: NormStats, runs: int = 20, sigma: float = 10.0, seed: int = 0,
             pair_count: int = 300) -> EvalReport:
    """Sample one motion per test prompt per run and score it.

    A student needs only labels; a teacher also uses ``test_set.aux``.
    """
    aux = test_set.aux if model.role == "teacher" else None
    if model.role == "teacher" and aux is None:
        raise ValueError("teacher evaluation needs auxiliary frames in the test set")

    def generate(rng):
        x = sample_frames(model, test_set.labels, test_set.lengths, sigma, sched, rng, aux,
                          max_frames=test_set.frames.shape[1])
        return decode_frames(denormalize(x, stats), test_set.lengths)

    return evaluate_generator(generate, classifier, test_set, runs, seed, pair_count)
