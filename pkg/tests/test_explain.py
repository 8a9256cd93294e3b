"""Signature closed form, Shapley axioms, sampling vs enumeration, repository."""

import numpy as np
import pytest

from vrguard.classifiers import build, desk_lstm
from vrguard.data import SynthConfig, fit_normalize_many, synth_generate, window
from vrguard.errors import ConfigError, ContractViolation, DuplicateSignatureError
from vrguard.explain import (
    AttributionVector,
    BackgroundSet,
    SignatureRepository,
    XaiSignature,
    global_importance,
    make_background,
    shap_input_exact,
    shap_input_sampled,
    signature,
    signature_efficiency_gap,
    signature_matrix,
)
from vrguard.numerics import SeededRng, Tensor, matmul, relu, reshape, softmax


class _Namespace:
    def __init__(self, **kw):
        self.__dict__.update(kw)


class _ToyHeadModel:
    """Penultimate = column means of the window; head is an explicit (P,C) matrix."""

    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float32)
        self.b = np.asarray(b, dtype=np.float32)
        self.fingerprint = "toyhead"
        self.spec = _Namespace(timestep=4, n_features=self.w.shape[0],
                               n_classes=self.w.shape[1])

    def penultimate_batch(self, x):
        return np.asarray(x, dtype=np.float32).mean(axis=1)

    def forward(self, x, training=False, rng=None):
        feat = x.mean(axis=1)
        logits = matmul(feat, Tensor(self.w)) + Tensor(self.b)
        return logits, feat

    def head_weights(self):
        return self.w, self.b


class _ConstantModel:
    def __init__(self, n_features, n_classes=2):
        self.fingerprint = "const"
        self.spec = _Namespace(timestep=4, n_features=n_features, n_classes=n_classes)
        self.logits = np.array([0.7, -0.2], dtype=np.float32)

    def forward(self, x, training=False, rng=None):
        out = Tensor(np.broadcast_to(self.logits, (x.shape[0], 2)).copy())
        return out, x

    def penultimate_batch(self, x):
        return np.asarray(x).reshape(len(x), -1)

    def head_weights(self):
        raise AttributeError("no head")


class _NonlinearToy:
    """Small fixed nonlinear model over N=8 feature columns."""

    def __init__(self, seed=0):
        rng = SeededRng(seed)
        self.w1 = rng.normal((8, 6)).astype(np.float32)
        self.w2 = rng.normal((6, 2)).astype(np.float32)
        self.fingerprint = f"nltoy{seed}"
        self.spec = _Namespace(timestep=3, n_features=8, n_classes=2)

    def forward(self, x, training=False, rng=None):
        feat = x.mean(axis=1)                      # (B, 8) column means
        h = relu(matmul(feat, Tensor(self.w1)))
        logits = matmul(h, Tensor(self.w2))
        return logits, h


def _background_for(model, t, n, value=0.0):
    wins = np.full((3, t, n), value, dtype=np.float32)
    mean_h = model.penultimate_batch(wins).mean(axis=0).astype(np.float64)
    return BackgroundSet(windows=wins, mean_h=mean_h,
                         mean_columns=wins.mean(axis=0),
                         model_fingerprint=model.fingerprint)


# last-layer signatures ----------------------------------------------------

def test_signature_baseline_window_is_all_zero():
    model = _ToyHeadModel(np.ones((3, 2)), [0.0, 0.0])
    bg = _background_for(model, 4, 3, value=0.5)
    sig = signature(model, np.full((4, 3), 0.5, dtype=np.float32), bg)
    assert np.allclose(sig.values, 0.0, atol=1e-7)


def test_signature_toy_head_hand_values():
    # P=2, C=1 head with W=[2,-1]: h=[1,0], hbar=[0,0] -> phi = [2, 0]
    model = _ToyHeadModel([[2.0], [-1.0]], [0.0])
    bg = _background_for(model, 4, 2, value=0.0)
    win = np.zeros((4, 2), dtype=np.float32)
    win[:, 0] = 1.0
    sig = signature(model, win, bg)
    assert np.allclose(sig.values, [2.0, 0.0], atol=1e-6)


def test_signature_efficiency_identity_on_real_model():
    model = build(desk_lstm(timestep=10, n_features=4), seed=3)
    rng = SeededRng(4)
    pool = [rng.uniform((10, 4)).astype(np.float32) for _ in range(30)]
    bg = make_background(model, pool, k=20, seed=1)
    for i in range(100):
        win = rng.uniform((10, 4)).astype(np.float32)
        assert signature_efficiency_gap(model, win, bg) < 1e-4


def test_signature_is_class_major():
    w = np.array([[1.0, 10.0], [2.0, 20.0]], dtype=np.float32)  # (P=2, C=2)
    model = _ToyHeadModel(w, [0.0, 0.0])
    bg = _background_for(model, 4, 2, value=0.0)
    win = np.ones((4, 2), dtype=np.float32)
    sig = signature(model, win, bg)   # h = [1,1]
    assert np.allclose(sig.values, [1.0, 2.0, 10.0, 20.0])


def test_signature_predicted_class_only_mode():
    w = np.array([[1.0, 10.0], [2.0, 20.0]], dtype=np.float32)
    model = _ToyHeadModel(w, [0.0, 0.0])
    bg = _background_for(model, 4, 2, value=0.0)
    win = np.ones((4, 2), dtype=np.float32)   # logits [3, 30] -> predicted class 1
    sig = signature(model, win, bg, predicted_only=True)
    assert np.allclose(sig.values, [10.0, 20.0])


def test_signature_missing_head_is_architecture_error():
    model = _ConstantModel(3)
    bg = _background_for(_ToyHeadModel(np.ones((12, 2)), [0, 0]), 4, 3)
    with pytest.raises(ContractViolation):
        signature(model, np.zeros((4, 3), dtype=np.float32), bg)


# input-level Shapley --------------------------------------------------------

def test_constant_model_zero_attributions():
    model = _ConstantModel(4)
    bg = _background_for(model, 4, 4, value=0.3)
    att = shap_input_exact(model, np.random.default_rng(0).random((4, 4)).astype(np.float32),
                           bg, class_index=0)
    assert np.allclose(att.values, 0.0, atol=1e-7)
    att_s = shap_input_sampled(model, np.zeros((4, 4), dtype=np.float32), bg, 0, n_perm=20)
    assert np.allclose(att_s.values, 0.0, atol=1e-7)


def test_linear_model_closed_form_exact():
    # z = sum_i w_i * mean_i(x); baseline b_i -> phi_i = w_i * (mean_i - b_i)
    w = np.array([[1.5], [-2.0], [0.5]], dtype=np.float32)
    model = _ToyHeadModel(w, [0.0])
    bg = _background_for(model, 4, 3, value=0.25)
    win = np.stack([np.full(4, 0.8), np.full(4, 0.1), np.full(4, 0.5)], axis=1).astype(np.float32)
    att = shap_input_exact(model, win, bg, class_index=0)
    expected = w[:, 0] * (win.mean(axis=0) - 0.25)
    assert np.allclose(att.values, expected, atol=1e-6)


def test_sampled_matches_exhaustive_within_three_se():
    model = _NonlinearToy(seed=2)
    rng = SeededRng(8)
    bg_windows = rng.uniform((5, 3, 8)).astype(np.float32)
    bg = BackgroundSet(windows=bg_windows, mean_h=np.zeros(6),
                       mean_columns=bg_windows.mean(axis=0),
                       model_fingerprint=model.fingerprint)
    win = rng.uniform((3, 8)).astype(np.float32)
    exact = shap_input_exact(model, win, bg, class_index=1)
    sampled = shap_input_sampled(model, win, bg, class_index=1, n_perm=2000, seed=5)
    for i in range(8):
        band = 3 * max(sampled.std_error[i], 1e-9)
        assert abs(sampled.values[i] - exact.values[i]) <= band + 1e-9


def test_exact_efficiency_sum():
    model = _NonlinearToy(seed=6)
    rng = SeededRng(9)
    bg_windows = rng.uniform((4, 3, 8)).astype(np.float32)
    bg = BackgroundSet(windows=bg_windows, mean_h=np.zeros(6),
                       mean_columns=bg_windows.mean(axis=0),
                       model_fingerprint=model.fingerprint)
    win = rng.uniform((3, 8)).astype(np.float32)
    att = shap_input_exact(model, win, bg, class_index=0)
    v_fn = lambda x: float(model.forward(Tensor(x[None]))[0].data[0, 0])
    full = v_fn(win)
    empty = v_fn(bg.mean_columns)
    assert abs(att.values.sum() - (full - empty)) < 1e-5


def test_symmetry_duplicate_features():
    # features 0 and 1 identical in window, background, and weights
    w = np.array([[1.0], [1.0], [-0.5]], dtype=np.float32)
    model = _ToyHeadModel(w, [0.0])
    bg = _background_for(model, 4, 3, value=0.2)
    win = np.stack([np.full(4, 0.9), np.full(4, 0.9), np.full(4, 0.4)], axis=1).astype(np.float32)
    att = shap_input_sampled(model, win, bg, class_index=0, n_perm=500, seed=2)
    band = 3 * (att.std_error[0] + att.std_error[1]) + 1e-9
    assert abs(att.values[0] - att.values[1]) <= band


def test_dummy_feature_zero_in_enumeration():
    w = np.array([[2.0], [0.0], [1.0]], dtype=np.float32)  # feature 1 has zero fan-in
    model = _ToyHeadModel(w, [0.5])
    bg = _background_for(model, 4, 3, value=0.3)
    win = SeededRng(3).uniform((4, 3)).astype(np.float32)
    att = shap_input_exact(model, win, bg, class_index=0)
    assert att.values[1] == pytest.approx(0.0, abs=1e-7)


def test_sampled_requires_positive_permutations():
    model = _ToyHeadModel(np.ones((2, 1)), [0.0])
    bg = _background_for(model, 4, 2)
    with pytest.raises(ConfigError):
        shap_input_sampled(model, np.zeros((4, 2), dtype=np.float32), bg, 0, n_perm=0)


# global importance ----------------------------------------------------------

def test_global_importance_single_sample():
    ranked = global_importance([np.array([0.5, -1.0])])
    assert ranked == [(1, 1.0), (0, 0.5)]


def test_global_importance_all_zero_keeps_index_order():
    ranked = global_importance([np.zeros(3), np.zeros(3)])
    assert [i for i, _ in ranked] == [0, 1, 2]


def test_global_importance_tie_breaks_by_index():
    ranked = global_importance([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert ranked == [(0, 0.5), (1, 0.5)]


def test_global_importance_inconsistent_lengths():
    with pytest.raises(ContractViolation):
        global_importance([np.zeros(3), np.zeros(4)])


# repository -------------------------------------------------------------------

def _sig(i, label=0, split="train", fp="m1"):
    return XaiSignature(values=np.array([float(i), -1.0]), model_fingerprint=fp,
                        window_id=f"w{i}", label=label, split=split)


def test_repo_append_extract_round_trip():
    repo = SignatureRepository()
    repo.append([_sig(0), _sig(1, label=1), _sig(2)])
    x, y, ids = repo.dataset("train")
    assert ids == ["w0", "w1", "w2"]
    assert y.tolist() == [0, 1, 0]
    assert np.allclose(x[:, 0], [0.0, 1.0, 2.0])


def test_repo_duplicate_rejected_with_offenders():
    repo = SignatureRepository()
    repo.append(_sig(0))
    with pytest.raises(DuplicateSignatureError) as err:
        repo.append(_sig(0))
    assert ("w0", "m1") in err.value.offenders


def test_repo_empty_extraction_is_not_an_error():
    x, y, ids = SignatureRepository().dataset("test")
    assert x.size == 0 and y.size == 0 and ids == []


def test_repo_mixed_fingerprints_rejected_on_extraction():
    repo = SignatureRepository()
    repo.append([_sig(0, fp="m1"), _sig(1, fp="m2")])
    with pytest.raises(ContractViolation):
        repo.dataset("train")


def test_repo_jsonl_round_trip(tmp_path):
    repo = SignatureRepository()
    repo.append([_sig(0), _sig(1, label=1, split="test")])
    path = tmp_path / "repo.jsonl"
    repo.save(path)
    back = SignatureRepository.rebuild(path)
    assert len(back) == 2
    x, y, ids = back.dataset("train")
    assert ids == ["w0"]
    x2, y2, _ = back.dataset("test")
    assert y2.tolist() == [1]


def test_repo_self_labeled_excluded_by_default():
    repo = SignatureRepository()
    repo.append(_sig(0))
    auto = _sig(1, label=1)
    auto.self_labeled = True
    repo.append(auto)
    x, y, ids = repo.dataset("train")
    assert ids == ["w0"]
    x2, y2, ids2 = repo.dataset("train", include_self_labeled=True)
    assert ids2 == ["w0", "w1"]


def test_background_is_seeded_and_cached():
    model = build(desk_lstm(timestep=8, n_features=3), seed=2)
    rng = SeededRng(1)
    pool = [rng.uniform((8, 3)).astype(np.float32) for _ in range(40)]
    a = make_background(model, pool, k=10, seed=9)
    b = make_background(model, pool, k=10, seed=9)
    assert np.array_equal(a.windows, b.windows)
    assert np.allclose(a.mean_h, model.penultimate_batch(a.windows).mean(axis=0))
