"""White-box adversarial window crafting (FGSM, PGD, C&W), stealth metrics,
under-attack evaluation, and black-box transfer matrices.

All attacks operate on normalized windows in [0, 1]; epsilon and alpha are
in those normalized units.  Crafting against a model never mutates it: its
parameters are temporarily frozen so the backward pass only tracks the
input.  Untargeted success means the perturbed prediction differs from the
true label; targeted success means the target class is reached.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from .classifiers import classification_metrics
from .data import TimeSeriesWindow, windows_to_arrays
from .errors import ConfigError, ContractViolation, NumericError
from .numerics import (
    Adam,
    SeededRng,
    Tensor,
    backward,
    cross_entropy,
    mul,
    parameter,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
    tanh,
)

KINDS = ("fgsm", "pgd", "cw")


@dataclass
class AttackConfig:
    kind: str
    epsilon: float = 0.1
    alpha: float = 0.01
    iterations: int = 20
    confidence: float = 0.0            # C&W kappa
    trade_off: float = 1.0             # C&W c
    binary_search_steps: int = 5
    inner_iterations: int = 1000
    inner_learning_rate: float = 0.01
    target: int | None = None
    clip_min: float = 0.0
    clip_max: float = 1.0
    random_start: bool = False
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.kind == "pgd" and self.alpha <= 0:
            raise ConfigError("pgd needs alpha > 0")
        if self.kind == "cw":
            if self.inner_iterations < 1:
                raise ConfigError("cw needs inner_iterations >= 1")
            if self.binary_search_steps < 1:
                raise ConfigError("cw needs binary_search_steps >= 1")
            if self.trade_off < 0:
                raise ConfigError("cw trade-off constant must be >= 0")
        if self.clip_min >= self.clip_max:
            raise ConfigError("clip range must satisfy clip_min < clip_max")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()


@dataclass
class AdversarialWindow:
    original: np.ndarray
    values: np.ndarray
    kind: str
    config_hash: str
    success: bool
    linf: float
    l2: float
    true_label: int
    adversarial_label: int
    window_id: str | None = None
    target: int | None = None
    degenerate_gradient: bool = False


@dataclass
class BudgetStats:
    mean_linf: float
    max_linf: float
    mean_l2: float
    max_l2: float
    mean_pcc: float
    success_rate: float

    def to_json(self):
        return asdict(self)


@contextmanager
def _frozen_params(model):
    """Disable gradient tracking for model parameters while crafting."""
    saved = [(p, p.requires_grad) for p in model.params.values()]
    try:
        for p, _ in saved:
            p.requires_grad = False
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _onehot(y, n):
    out = np.zeros((len(y), n), dtype=np.float32)
    out[np.arange(len(y)), y] = 1.0
    return out


def _input_grad(model, x_np, labels, n_classes):
    """d/dX of the summed cross-entropy of f(X) against `labels`."""
    x = parameter(x_np.astype(np.float32))
    logits, _ = model.forward(x)
    loss = cross_entropy(logits, Tensor(_onehot(labels, n_classes)), reduction="sum")
    grads = backward(loss)
    return grads[x].data, logits.data


def _predict_labels(model, x_np):
    return model.predict_batch(x_np).argmax(axis=1)


def _as_batch(window):
    if isinstance(window, TimeSeriesWindow):
        return window.values[None].astype(np.float32), window.window_id
    arr = np.asarray(window, dtype=np.float32)
    return (arr[None], None) if arr.ndim == 2 else (arr, None)


def _wrap_results(x0, adv, cfg, y, adv_labels, success, window_ids, degenerate=None):
    out = []
    for i in range(len(x0)):
        diff = (adv[i].astype(np.float64) - x0[i].astype(np.float64)).ravel()
        out.append(AdversarialWindow(
            original=x0[i], values=adv[i], kind=cfg.kind, config_hash=cfg.config_hash,
            success=bool(success[i]), linf=float(np.abs(diff).max(initial=0.0)),
            l2=float(np.sqrt((diff ** 2).sum())), true_label=int(y[i]),
            adversarial_label=int(adv_labels[i]),
            window_id=None if window_ids is None else f"{window_ids[i]}#{cfg.kind}",
            target=cfg.target,
            degenerate_gradient=bool(degenerate[i]) if degenerate is not None else False))
    return out


def craft_fgsm_batch(model, x0, y, cfg: AttackConfig, window_ids=None):
    cfg.validate()
    n_classes = model.spec.n_classes
    y = np.asarray(y)
    if cfg.epsilon == 0.0:
        labels = _predict_labels(model, x0)
        return _wrap_results(x0, x0.copy(), cfg, y, labels,
                             np.zeros(len(x0), bool), window_ids)
    with _frozen_params(model):
        if cfg.target is None:
            grad, _ = _input_grad(model, x0, y, n_classes)
            step = cfg.epsilon * np.sign(grad)
        else:
            tgt = np.full(len(x0), cfg.target)
            grad, _ = _input_grad(model, x0, tgt, n_classes)
            step = -cfg.epsilon * np.sign(grad)
    degenerate = np.abs(grad).reshape(len(x0), -1).max(axis=1) == 0.0
    adv = np.clip(x0 + step.astype(np.float32), cfg.clip_min, cfg.clip_max)
    adv[degenerate] = x0[degenerate]
    adv_labels = _predict_labels(model, adv)
    success = (adv_labels == cfg.target) if cfg.target is not None else (adv_labels != y)
    success &= ~degenerate
    return _wrap_results(x0, adv, cfg, y, adv_labels, success, window_ids, degenerate)


def craft_pgd_batch(model, x0, y, cfg: AttackConfig, window_ids=None):
    cfg.validate()
    n_classes = model.spec.n_classes
    y = np.asarray(y)
    adv = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = SeededRng(cfg.seed)
        jitter = rng.uniform(x0.shape, -cfg.epsilon, cfg.epsilon).astype(np.float32)
        adv = np.clip(x0 + jitter, cfg.clip_min, cfg.clip_max)
    lo = np.maximum(x0 - cfg.epsilon, cfg.clip_min)
    hi = np.minimum(x0 + cfg.epsilon, cfg.clip_max)
    tgt = None if cfg.target is None else np.full(len(x0), cfg.target)
    degenerate = np.zeros(len(x0), bool)
    with _frozen_params(model):
        for it in range(cfg.iterations):
            if cfg.epsilon == 0.0:
                break
            if cfg.target is None:
                grad, _ = _input_grad(model, adv, y, n_classes)
                adv = adv + cfg.alpha * np.sign(grad).astype(np.float32)
            else:
                grad, _ = _input_grad(model, adv, tgt, n_classes)
                adv = adv - cfg.alpha * np.sign(grad).astype(np.float32)
            if it == 0:
                degenerate = np.abs(grad).reshape(len(x0), -1).max(axis=1) == 0.0
            adv = np.clip(adv, lo, hi)
    adv_labels = _predict_labels(model, adv)
    success = (adv_labels == cfg.target) if cfg.target is not None else (adv_labels != y)
    if cfg.iterations == 0 or cfg.epsilon == 0.0:
        success = np.zeros(len(x0), bool)
        adv = x0.copy()
        adv_labels = _predict_labels(model, adv)
    return _wrap_results(x0, adv, cfg, y, adv_labels, success, window_ids, degenerate)


def craft_cw_batch(model, x0, y, cfg: AttackConfig, window_ids=None):
    """L2-minimizing attack through the tanh change of variables.

    Minimizes ||X'-X||_2^2 + c * g(X') with Adam, where g is the logit
    margin hinged at -kappa; binary search halves c on success and doubles
    it on failure, keeping the smallest-L2 success per window.
    """
    cfg.validate()
    n_classes = model.spec.n_classes
    y = np.asarray(y)
    B = len(x0)
    span = cfg.clip_max - cfg.clip_min
    x_unit = np.clip((x0 - cfg.clip_min) / span, 1e-6, 1.0 - 1e-6)
    w0 = np.arctanh(2.0 * x_unit - 1.0).astype(np.float32)
    y_onehot = _onehot(y, n_classes)
    if cfg.target is not None:
        t_onehot = _onehot(np.full(B, cfg.target), n_classes)

    c_vec = np.full(B, cfg.trade_off, dtype=np.float64)
    best_adv = x0.copy()
    best_l2 = np.full(B, np.inf)
    ever_success = np.zeros(B, bool)
    last_adv = x0.copy()
    kappa = float(cfg.confidence)

    with _frozen_params(model):
        for _ in range(cfg.binary_search_steps):
            w = parameter(w0.copy())
            optim = Adam({"w": w}, lr=cfg.inner_learning_rate)
            step_success = np.zeros(B, bool)
            for _ in range(cfg.inner_iterations):
                x_adv = mul(tanh(w), 0.5) + 0.5
                if span != 1.0 or cfg.clip_min != 0.0:
                    x_adv = mul(x_adv, span) + cfg.clip_min
                diff = reshape(x_adv - Tensor(x0), (B, -1))
                dist = reduce_sum(mul(diff, diff), axis=1)          # (B,)
                logits, _ = model.forward(x_adv)
                if cfg.target is None:
                    z_true = reduce_sum(mul(logits, Tensor(y_onehot)), axis=1)
                    z_other = reduce_max(logits + Tensor(y_onehot * -1e4), axis=1)
                    margin = z_true - z_other
                else:
                    z_tgt = reduce_sum(mul(logits, Tensor(t_onehot)), axis=1)
                    z_other = reduce_max(logits + Tensor(t_onehot * -1e4), axis=1)
                    margin = z_other - z_tgt
                hinge = relu(margin + kappa) - kappa                 # max(margin, -kappa)
                obj = reduce_sum(dist + mul(hinge, Tensor(c_vec.astype(np.float32))))
                if not np.isfinite(obj.data):
                    raise NumericError("C&W objective became non-finite")
                optim.step(backward(obj))

                adv_np = x_adv.data
                labels = logits.data.argmax(axis=1)
                ok = (labels == cfg.target) if cfg.target is not None else (labels != y)
                if ok.any():
                    l2 = np.sqrt(((adv_np - x0).reshape(B, -1).astype(np.float64) ** 2).sum(axis=1))
                    better = ok & (l2 < best_l2)
                    best_adv[better] = adv_np[better]
                    best_l2[better] = l2[better]
                    step_success |= ok
                last_adv = adv_np
            ever_success |= step_success
            c_vec = np.where(step_success, c_vec / 2.0, c_vec * 2.0)

    adv = np.where(ever_success[:, None, None], best_adv, last_adv).astype(np.float32)
    adv = np.clip(adv, cfg.clip_min, cfg.clip_max)
    adv_labels = _predict_labels(model, adv)
    success = (adv_labels == cfg.target) if cfg.target is not None else (adv_labels != y)
    success &= ever_success
    return _wrap_results(x0, adv, cfg, y, adv_labels, success, window_ids)


_BATCHERS = {"fgsm": craft_fgsm_batch, "pgd": craft_pgd_batch, "cw": craft_cw_batch}


def _craft_single(model, window, cfg, true_label=None):
    x0, window_id = _as_batch(window)
    if true_label is None:
        if isinstance(window, TimeSeriesWindow):
            true_label = window.label
        else:
            true_label = int(_predict_labels(model, x0)[0])
    ids = None if window_id is None else [window_id]
    return _BATCHERS[cfg.kind](model, x0, [true_label], cfg, window_ids=ids)[0]


def craft_fgsm(model, window, cfg: AttackConfig, true_label=None) -> AdversarialWindow:
    if cfg.kind != "fgsm":
        raise ContractViolation(f"craft_fgsm called with kind={cfg.kind!r}")
    return _craft_single(model, window, cfg, true_label)


def craft_pgd(model, window, cfg: AttackConfig, true_label=None) -> AdversarialWindow:
    if cfg.kind != "pgd":
        raise ContractViolation(f"craft_pgd called with kind={cfg.kind!r}")
    return _craft_single(model, window, cfg, true_label)


def craft_cw(model, window, cfg: AttackConfig, true_label=None) -> AdversarialWindow:
    if cfg.kind != "cw":
        raise ContractViolation(f"craft_cw called with kind={cfg.kind!r}")
    return _craft_single(model, window, cfg, true_label)


def craft_batch(model, windows, cfg: AttackConfig):
    """Craft one adversarial window per labeled window, batched."""
    x, y = windows_to_arrays(windows)
    ids = [w.window_id for w in windows]
    return _BATCHERS[cfg.kind](model, x, y, cfg, window_ids=ids)


# stealth metrics -------------------------------------------------------------

def perturbation_stats(original, adversarial) -> dict:
    """L-infinity, L2, and Pearson correlation of the flattened window pair."""
    a = np.asarray(original, dtype=np.float64).ravel()
    b = np.asarray(adversarial, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = b - a
    da = a - a.mean()
    db = b - b.mean()
    va = (da ** 2).sum()
    vb = (db ** 2).sum()
    if va == 0.0 or vb == 0.0:
        raise ContractViolation("PCC undefined: one of the windows has zero variance")
    return {
        "linf": float(np.abs(diff).max(initial=0.0)),
        "l2": float(np.sqrt((diff ** 2).sum())),
        "pcc": float((da * db).sum() / np.sqrt(va * vb)),
    }


# evaluation -------------------------------------------------------------------

def evaluate_under_attack(model, windows, cfg: AttackConfig):
    """Craft adversarial versions of every window and evaluate the same model.

    Returns (ClassificationMetrics, BudgetStats, list of AdversarialWindow).
    """
    if not windows:
        raise ContractViolation("cannot evaluate under attack on an empty set")
    results = craft_batch(model, windows, cfg)
    y_true = np.array([r.true_label for r in results])
    y_pred = np.array([r.adversarial_label for r in results])
    metrics = classification_metrics(y_true, y_pred, model.spec.n_classes)
    linf = np.array([r.linf for r in results])
    l2 = np.array([r.l2 for r in results])
    pccs = []
    for r in results:
        try:
            pccs.append(perturbation_stats(r.original, r.values)["pcc"])
        except ContractViolation:
            pass  # constant window: PCC undefined, excluded from the mean
    budget = BudgetStats(
        mean_linf=float(linf.mean()), max_linf=float(linf.max()),
        mean_l2=float(l2.mean()), max_l2=float(l2.max()),
        mean_pcc=float(np.mean(pccs)) if pccs else float("nan"),
        success_rate=float(np.mean([r.success for r in results])))
    return metrics, budget, results


@dataclass
class TransferMatrix:
    model_names: list
    kinds: list
    accuracy: np.ndarray    # (source, target, kind)

    def to_rows(self):
        rows = []
        for i, src in enumerate(self.model_names):
            for j, tgt in enumerate(self.model_names):
                for k, kind in enumerate(self.kinds):
                    rows.append({"source": src, "target": tgt, "attack": kind,
                                 "accuracy": float(self.accuracy[i, j, k])})
        return rows


def transfer_matrix(models: dict, windows, cfgs) -> TransferMatrix:
    """Craft white-box per source model, evaluate every model on the result.

    Diagonal entries are the white-box under-attack accuracies; off-diagonal
    entries are the black-box transfer accuracies.
    """
    if not models:
        raise ContractViolation("transfer_matrix needs at least one model")
    names = list(models)
    shapes = {(m.spec.timestep, m.spec.n_features, m.spec.n_classes) for m in models.values()}
    if len(shapes) != 1:
        raise ContractViolation(f"models disagree on input shape/labels: {shapes}")
    kinds = [cfg.kind for cfg in cfgs]
    x, y = windows_to_arrays(windows)
    acc = np.zeros((len(names), len(names), len(cfgs)))
    for k, cfg in enumerate(cfgs):
        for i, src in enumerate(names):
            crafted = _BATCHERS[cfg.kind](models[src], x, y, cfg)
            adv = np.stack([r.values for r in crafted])
            for j, tgt in enumerate(names):
                preds = _predict_labels(models[tgt], adv)
                acc[i, j, k] = float((preds == y).mean())
    return TransferMatrix(model_names=names, kinds=kinds, accuracy=acc)
