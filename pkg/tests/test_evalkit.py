import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tshamo import evalkit
from tshamo.denoisers import NULL_LABEL, Denoiser, DenoiserConfig, denoise
from tshamo.diffusion import build_schedule, posterior_step
from tshamo.evalkit import (EvalReport, TestSet, cfg_combine, diversity, evaluate, evaluate_generator, kid,
                            sample, sample_frames, top_k_accuracy, top_k_from_logits, train_classifier)


@pytest.fixture(scope="module")
def classifier(small_dataset):
    a = small_dataset.arrays("train")
    return train_classifier(a.frames, a.lengths, a.labels, small_dataset.manifest.num_classes,
                            small_dataset.norm_stats, epochs=15, seed=0)


@pytest.fixture(scope="module")
def tiny_student(small_dataset):
    cfg = DenoiserConfig(role="student", num_labels=3, d_model=8, num_layers=1, num_heads=2,
                         max_len=small_dataset.manifest.max_frames)
    return Denoiser.create(cfg, 0)


def prompts(ds, split="test"):
    a = ds.arrays(split)
    return TestSet(a.frames, a.lengths, a.labels)


# ---------------------------------------------------------------- guidance

def test_cfg_combine_examples():
    r = np.random.default_rng(0)
    u, c = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    assert np.array_equal(cfg_combine(u, c, 1.0), c)
    assert np.array_equal(cfg_combine(u, c, 0.0), u)
    assert cfg_combine(np.zeros(1), np.full(1, 0.2), 10.0)[0] == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ValueError):
        cfg_combine(u, c[:2], 2.0)


@given(st.floats(-20, 20), st.floats(-20, 20))
@settings(max_examples=50, deadline=None)
def test_cfg_combine_is_affine(s1, s2):
    r = np.random.default_rng(1)
    u, c = r.standard_normal(8), r.standard_normal(8)
    for lam in (0.25, 0.5, 0.9):
        mix = cfg_combine(u, c, lam * s1 + (1 - lam) * s2)
        np.testing.assert_allclose(mix, lam * cfg_combine(u, c, s1) + (1 - lam) * cfg_combine(u, c, s2),
                                   atol=1e-12 * (1 + abs(s1) + abs(s2)))
    np.testing.assert_allclose(cfg_combine(u, c, s1), u + s1 * (c - u), atol=1e-12 * (1 + abs(s1)))


def _plain_chain(model, labels, lengths, sched, rng, n):
    """Reference sampler using a single forward per step."""
    x = rng.standard_normal((len(labels), n, 166))
    for t in range(sched.T_max, 0, -1):
        x0 = denoise(model, x, np.full(len(labels), t), labels, None, lengths).data
        noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = posterior_step(x, x0, t, noise, sched)
    return x


def test_sigma_one_is_plain_conditional_sampling(tiny_student):
    sched = build_schedule(8)
    labels, lengths = np.array([0, 2]), np.array([8, 5])
    got = sample_frames(tiny_student, labels, lengths, 1.0, sched, np.random.default_rng(3))
    ref = _plain_chain(tiny_student, labels, lengths, sched, np.random.default_rng(3), 8)
    ref[1, 5:] = 0.0
    assert np.array_equal(got[:, :8], ref)
    assert not got[:, 8:].any()


def test_sigma_zero_is_unconditional_sampling(tiny_student):
    sched = build_schedule(8)
    lengths = np.array([8, 8])
    got = sample_frames(tiny_student, [0, 2], lengths, 0.0, sched, np.random.default_rng(3))
    ref = _plain_chain(tiny_student, np.full(2, NULL_LABEL), lengths, sched, np.random.default_rng(3), 8)
    assert np.array_equal(got[:, :8], ref)


def test_sampler_determinism_and_empty(tiny_student, small_dataset):
    sched = build_schedule(6)
    a = sample(tiny_student, 1, 2.5, sched, np.random.default_rng(4), small_dataset.norm_stats, n_samples=3)
    b = sample(tiny_student, 1, 2.5, sched, np.random.default_rng(4), small_dataset.norm_stats, n_samples=3)
    assert len(a) == 3
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert sample(tiny_student, 1, 2.5, sched, np.random.default_rng(4), small_dataset.norm_stats,
                  n_samples=0) == []
    with pytest.raises(ValueError):
        sample_frames(tiny_student, [0], [4], -1.0, sched, np.random.default_rng(0))


def test_sampled_motions_follow_frame_conventions(tiny_student, small_dataset):
    seqs = sample(tiny_student, [0, 1], 10.0, build_schedule(5), np.random.default_rng(0),
                  small_dataset.norm_stats, lengths=[9, 12])
    for s in seqs:
        f = s.frames
        assert set(np.unique(f[:, [0, 83]])) <= {0.0, 1.0}
        contacts = np.concatenate([f[:, 62:83], f[:, 145:166]], 1)
        assert contacts.min() >= 0.0 and contacts.max() <= 1.0
        assert not f[s.length:].any()


def test_oracle_denoiser_recovers_fixed_target(monkeypatch):
    target = np.random.default_rng(5).standard_normal((1, 4, 166))

    def oracle(model, x, t, labels, aux=None, lengths=None, aux_null=None):
        return SimpleNamespace(data=np.broadcast_to(target, x.shape).copy())

    monkeypatch.setattr(evalkit, "denoise", oracle)
    model = SimpleNamespace(config=SimpleNamespace(max_len=4))
    out = sample_frames(model, np.zeros(1000, int), np.full(1000, 4), 10.0, build_schedule(50),
                        np.random.default_rng(6))
    mean = out.mean(axis=0)
    se = out.std(axis=0) / np.sqrt(len(out))
    assert np.all(np.abs(mean - target[0]) <= 3 * se + 1e-12)


# ---------------------------------------------------------------- KID

def test_kid_identical_sets():
    f = np.random.default_rng(0).standard_normal((50, 64))
    assert abs(kid(f, f)) <= 1e-9


def tanh_features(seed, n=1000):
    """Gaussian features squashed like the classifier's bounded feature layer."""
    return np.tanh(np.random.default_rng(seed).standard_normal((n, 64)))


def test_kid_iid_splits():
    f = tanh_features(0)
    assert abs(kid(f[:500], f[500:])) < 5


def test_kid_is_unbiased_over_replicates():
    vals = [kid(*np.split(np.random.default_rng([9, i]).standard_normal((1000, 64)), 2)) for i in range(50)]
    assert abs(np.mean(vals)) < 3 * np.std(vals, ddof=1) / np.sqrt(len(vals))


def test_kid_separates_shifted_distributions():
    r = np.random.default_rng(2)
    assert kid(r.standard_normal((200, 64)), r.standard_normal((200, 64)) + 0.5) > 50


def _k(a, b):
    return (a @ b / len(a) + 1.0) ** 3


def test_kid_two_by_two_hand_expansion():
    r = np.random.default_rng(3)
    x1, x2, y1, y2 = r.standard_normal((4, 64))
    hand = _k(x1, x2) + _k(y1, y2) - (_k(x1, y2) + _k(x2, y1))
    assert kid([x1, x2], [y1, y2]) == pytest.approx(5000 * hand, rel=1e-12)


def test_kid_unequal_sizes_hand_expansion():
    r = np.random.default_rng(4)
    x = r.standard_normal((2, 64))
    y = r.standard_normal((3, 64))
    sxx = _k(x[0], x[1])
    syy = (_k(y[0], y[1]) + _k(y[0], y[2]) + _k(y[1], y[2])) / 3
    sxy = sum(_k(a, b) for a in x for b in y) / 6
    assert kid(x, y) == pytest.approx(5000 * (sxx + syy - 2 * sxy), rel=1e-12)


def test_kid_symmetry_and_permutation():
    r = np.random.default_rng(5)
    a, b, c = r.standard_normal((40, 64)), r.standard_normal((40, 64)), r.standard_normal((30, 64))
    assert abs(kid(a, b) - kid(b, a)) <= 1e-12 * max(1.0, abs(kid(a, b)))
    p, q = r.permutation(40), r.permutation(30)
    assert kid(a[p], c[q]) == pytest.approx(kid(a, c), rel=1e-12, abs=1e-9)
    assert kid(a[p], b[p]) == pytest.approx(kid(a, b), rel=1e-12, abs=1e-9)


def test_kid_errors():
    with pytest.raises(ValueError):
        kid(np.zeros((1, 64)), np.zeros((3, 64)))
    with pytest.raises(ValueError):
        kid(np.zeros((3, 64)), np.zeros((3, 32)))


# ---------------------------------------------------------------- top-k and diversity

def test_top_k_examples():
    r = np.random.default_rng(0)
    logits = r.standard_normal((10, 5))
    labels = r.integers(0, 5, 10)
    assert top_k_from_logits(logits, labels, 5) == 1.0
    perfect = np.zeros((10, 5))
    perfect[np.arange(10), labels] = 1.0
    assert top_k_from_logits(perfect, labels, 1) == 1.0
    for k in (1, 2, 3):
        brute = np.mean([sum(logits[i, j] > logits[i, labels[i]] for j in range(5)) < k for i in range(10)])
        assert top_k_from_logits(logits, labels, k) == brute
    with pytest.raises(ValueError):
        top_k_from_logits(np.zeros((0, 5)), np.zeros(0, int), 1)
    with pytest.raises(ValueError):
        top_k_from_logits(logits, labels, 0)


def test_top_k_ties_break_by_label_id():
    logits = np.zeros((2, 4))
    assert top_k_from_logits(logits, np.array([1, 1]), 1) == 0.0
    assert top_k_from_logits(logits, np.array([0, 1]), 2) == 1.0
    assert top_k_from_logits(logits, np.array([2, 2]), 2) == 0.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_top_k_monotone(seed):
    r = np.random.default_rng(seed)
    logits = np.round(r.standard_normal((12, 6)), 1)
    labels = r.integers(0, 6, 12)
    accs = [top_k_from_logits(logits, labels, k) for k in (1, 2, 3)]
    assert accs[0] <= accs[1] <= accs[2]


def test_diversity_examples():
    assert diversity(np.ones((5, 64))) == 0.0
    assert diversity(np.array([[0.0, 0.0], [2.0, 0.0]])) == 2.0
    f = np.random.default_rng(1).standard_normal((10, 64))
    brute = np.mean([np.linalg.norm(f[i] - f[j]) for i, j in itertools.combinations(range(10), 2)])
    assert diversity(f, pair_count=300) == pytest.approx(brute, rel=1e-12)
    big = np.random.default_rng(2).standard_normal((100, 64))
    approx = diversity(big, pair_count=300, rng=np.random.default_rng(0))
    exact = diversity(big, pair_count=10_000)
    assert abs(approx - exact) < 0.05 * exact
    with pytest.raises(ValueError):
        diversity(np.zeros((1, 64)))


# ---------------------------------------------------------------- protocol

def test_eval_report_intervals():
    rep = EvalReport({"acc@1": [1.0, 2.0, 3.0]}, 3)
    assert rep.mean["acc@1"] == 2.0
    assert rep.ci95["acc@1"] == pytest.approx(1.96 / np.sqrt(3))
    assert EvalReport({"acc@1": [0.4]}, 1).ci95["acc@1"] == 0.0


def test_ground_truth_as_generation(classifier, small_dataset):
    ts = prompts(small_dataset)
    rep = evaluate_generator(lambda rng: ts.frames, classifier, ts, runs=3, seed=0)
    for k in (1, 2, 3):
        own = top_k_accuracy(classifier, ts.frames, ts.lengths, ts.labels, k)
        assert rep.per_run[f"acc@{k}"] == [own] * 3
    assert all(abs(v) < 5 for v in rep.per_run["kid_x5000"])
    assert rep.ci95["kid_x5000"] == 0.0


def test_evaluate_is_deterministic_and_ordered(classifier, tiny_student, small_dataset, tmp_path):
    ts, sched = prompts(small_dataset), build_schedule(5)
    a = evaluate(tiny_student, classifier, ts, sched, small_dataset.norm_stats, runs=2, sigma=10.0, seed=1)
    b = evaluate(tiny_student, classifier, ts, sched, small_dataset.norm_stats, runs=2, sigma=10.0, seed=1)
    assert a.to_json() == b.to_json()
    for r in range(2):
        assert a.per_run["acc@1"][r] <= a.per_run["acc@2"][r] <= a.per_run["acc@3"][r]
    a.write_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "run,acc@1,acc@2,acc@3,kid_x5000,diversity"
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "1", "mean", "ci95"]


def test_evaluate_rejects_empty_and_teacher_without_aux(classifier, small_dataset):
    ts = prompts(small_dataset)
    empty = TestSet(ts.frames[:0], ts.lengths[:0], ts.labels[:0])
    with pytest.raises(ValueError):
        evaluate_generator(lambda rng: empty.frames, classifier, empty, runs=1)
    teacher = Denoiser.create(DenoiserConfig(role="teacher", aux_kind="joints_3d", num_labels=3, d_model=8,
                                             num_layers=1, num_heads=2, max_len=16), 0)
    with pytest.raises(ValueError):
        evaluate(teacher, classifier, ts, build_schedule(3), small_dataset.norm_stats, runs=1)


def test_classifier_save_load(classifier, small_dataset, tmp_path):
    ts = prompts(small_dataset)
    classifier.save(tmp_path / "c.npz")
    back = evalkit.ActionClassifier.load(tmp_path / "c.npz")
    assert np.array_equal(back.features(ts.frames, ts.lengths), classifier.features(ts.frames, ts.lengths))
    assert classifier.features(ts.frames, ts.lengths).shape == (len(ts), 64)
