"""Shapley-value attributions and the labeled signature repository.

Two attribution surfaces:

* ``signature`` — exact Shapley values of the penultimate units toward each
  class logit.  The final dense layer is linear in those units, so the value
  is closed-form: phi[j, c] = W[j, c] * (h[j] - hbar[j]) against the
  background mean activation.  Concatenated class-major, these vectors are
  the features the attack detectors train on.

* ``shap_input_sampled`` — Monte-Carlo permutation Shapley over the N input
  feature columns (masking a column swaps in the background's mean column),
  with exhaustive subset enumeration when N <= 12.

The repository is an append-only labeled store of signatures (0 benign,
1 adversarial) with disjoint split tags, persisted as JSON-lines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import TimeSeriesWindow
from .errors import ConfigError, ContractViolation, DuplicateSignatureError
from .numerics import SeededRng, Tensor


def _logits_batch(model, x: np.ndarray) -> np.ndarray:
    logits, _ = model.forward(Tensor(np.asarray(x, dtype=np.float32)))
    return logits.data


@dataclass
class BackgroundSet:
    """Reference windows plus cached activations for one model."""

    windows: np.ndarray            # (K, T, N)
    mean_h: np.ndarray             # (P,) mean penultimate activation
    mean_columns: np.ndarray       # (T, N) per-cell mean, used for input masking
    model_fingerprint: str

    @property
    def k(self) -> int:
        return len(self.windows)


def make_background(model, windows, k: int = 100, seed: int = 0) -> BackgroundSet:
    """Draw K reference windows (seeded) and cache the mean penultimate activation."""
    if not windows:
        raise ContractViolation("background needs at least one window")
    values = np.stack([w.values if isinstance(w, TimeSeriesWindow) else np.asarray(w)
                       for w in windows]).astype(np.float32)
    k = min(k, len(values))
    idx = SeededRng(seed).choice(len(values), k)
    chosen = values[idx]
    mean_h = model.penultimate_batch(chosen).mean(axis=0)
    return BackgroundSet(windows=chosen, mean_h=mean_h.astype(np.float64),
                         mean_columns=chosen.mean(axis=0).astype(np.float32),
                         model_fingerprint=model.fingerprint)


@dataclass
class XaiSignature:
    values: np.ndarray             # (P*C,) class-major signed attributions
    model_fingerprint: str
    window_id: str
    label: int                     # 0 benign, 1 adversarial
    split: str = ""
    self_labeled: bool = False


def _head(model):
    try:
        return model.head_weights()
    except (AttributeError, KeyError):
        raise ContractViolation("model lacks a final dense layer; cannot form signatures")


def signature_matrix(model, values: np.ndarray, background: BackgroundSet,
                     predicted_only: bool = False) -> np.ndarray:
    """Signatures for a batch (B,T,N) -> (B, P*C), class-major.

    With predicted_only=True each row keeps only the attribution block of
    its own predicted class (length P instead of P*C).
    """
    if background.model_fingerprint != model.fingerprint:
        raise ContractViolation("background was built for a different model")
    w, _ = _head(model)                                   # (P, C)
    h = model.penultimate_batch(values).astype(np.float64)
    phi = w[None, :, :] * (h - background.mean_h[None, :])[:, :, None]   # (B,P,C)
    full = np.ascontiguousarray(phi.transpose(0, 2, 1).reshape(len(values), -1))
    if not predicted_only:
        return full
    preds = _logits_batch(model, values).argmax(axis=1)
    p = w.shape[0]
    return np.stack([full[i, c * p:(c + 1) * p] for i, c in enumerate(preds)])


def signature(model, window, background: BackgroundSet, label: int = 0,
              window_id: str | None = None, split: str = "",
              predicted_only: bool = False) -> XaiSignature:
    """Exact last-layer Shapley signature of one window; label set by the caller."""
    if isinstance(window, TimeSeriesWindow):
        values, wid = window.values, window.window_id
    else:
        values, wid = np.asarray(window, dtype=np.float32), window_id or "window"
    if window_id is not None:
        wid = window_id
    vec = signature_matrix(model, values[None], background, predicted_only)[0]
    return XaiSignature(values=vec, model_fingerprint=model.fingerprint,
                        window_id=wid, label=int(label), split=split)


def signature_efficiency_gap(model, values: np.ndarray, background: BackgroundSet) -> float:
    """Max |sum_j phi[j,c] - (z_c(h) - z_c(hbar))| over classes; 0 in exact arithmetic."""
    w, _ = _head(model)
    p, c = w.shape
    vec = signature_matrix(model, values[None], background)[0].reshape(c, p)
    h = model.penultimate_batch(values[None])[0].astype(np.float64)
    gap = (h - background.mean_h) @ w          # (C,) logit difference, bias cancels
    return float(np.abs(vec.sum(axis=1) - gap).max())


# input-level sampled Shapley -------------------------------------------------

@dataclass
class AttributionVector:
    values: np.ndarray             # (N,) signed Shapley estimates
    class_index: int
    n_permutations: int            # 0 for exact enumeration
    std_error: np.ndarray          # (N,) zero in exact mode
    mode: str                      # "exact" | "sampled"


def _masked_value_fn(model, values, background, class_index):
    """v(S): class logit with feature columns outside S replaced by the
    background mean column.  Memoized by subset bitmask."""
    t, n = values.shape
    cache = {}

    def v_many(masks):
        missing = [m for m in masks if m not in cache]
        if missing:
            batch = np.empty((len(missing), t, n), dtype=np.float32)
            for i, m in enumerate(missing):
                x = background.mean_columns.copy()
                for j in range(n):
                    if m >> j & 1:
                        x[:, j] = values[:, j]
                batch[i] = x
            logits = _logits_batch(model, batch)[:, class_index]
            for m, z in zip(missing, logits):
                cache[m] = float(z)
        return [cache[m] for m in masks]

    return v_many


def shap_input_exact(model, window, background: BackgroundSet, class_index: int) -> AttributionVector:
    """Exhaustive Shapley over feature columns; only feasible for N <= 12."""
    values = window.values if isinstance(window, TimeSeriesWindow) else np.asarray(window, dtype=np.float32)
    n = values.shape[1]
    if n > 12:
        raise ConfigError(f"exact enumeration over {n} features is infeasible; use sampling")
    v_many = _masked_value_fn(model, values, background, class_index)
    all_masks = list(range(1 << n))
    v = dict(zip(all_masks, v_many(all_masks)))
    phi = np.zeros(n)
    fact = math.factorial
    for i in range(n):
        for mask in all_masks:
            if mask >> i & 1:
                continue
            s = bin(mask).count("1")
            weight = fact(s) * fact(n - s - 1) / fact(n)
            phi[i] += weight * (v[mask | (1 << i)] - v[mask])
    return AttributionVector(values=phi, class_index=class_index, n_permutations=0,
                             std_error=np.zeros(n), mode="exact")


def shap_input_sampled(model, window, background: BackgroundSet, class_index: int,
                       n_perm: int = 200, seed: int = 0) -> AttributionVector:
    """Permutation-sampling Shapley estimate with per-feature standard errors."""
    if n_perm < 1:
        raise ConfigError("n_perm must be >= 1")
    values = window.values if isinstance(window, TimeSeriesWindow) else np.asarray(window, dtype=np.float32)
    n = values.shape[1]
    v_many = _masked_value_fn(model, values, background, class_index)
    rng = SeededRng(seed)
    contribs = np.zeros((n_perm, n))
    for p in range(n_perm):
        order = rng.permutation(n)
        masks = [0]
        m = 0
        for j in order:
            m |= 1 << int(j)
            masks.append(m)
        vals = v_many(masks)
        for pos, j in enumerate(order):
            contribs[p, int(j)] = vals[pos + 1] - vals[pos]
    phi = contribs.mean(axis=0)
    se = contribs.std(axis=0, ddof=1) / np.sqrt(n_perm) if n_perm > 1 else np.zeros(n)
    return AttributionVector(values=phi, class_index=class_index, n_permutations=n_perm,
                             std_error=se, mode="sampled")


def global_importance(attributions):
    """Rank features by mean |attribution| descending; ties break by index."""
    if not attributions:
        raise ContractViolation("global_importance needs at least one attribution")
    rows = [a.values if isinstance(a, AttributionVector) else np.asarray(a, dtype=np.float64)
            for a in attributions]
    n = len(rows[0])
    if any(len(r) != n for r in rows):
        raise ContractViolation("attributions have inconsistent feature counts")
    mean_abs = np.abs(np.stack(rows)).mean(axis=0)
    order = sorted(range(n), key=lambda i: (-mean_abs[i], i))
    return [(i, float(mean_abs[i])) for i in order]


# repository ------------------------------------------------------------------

class SignatureRepository:
    """Append-only store of labeled signatures keyed by (window id, model)."""

    def __init__(self):
        self.records: list[XaiSignature] = []
        self._keys = set()

    def __len__(self):
        return len(self.records)

    def append(self, signatures) -> None:
        if isinstance(signatures, XaiSignature):
            signatures = [signatures]
        offenders = []
        for sig in signatures:
            key = (sig.window_id, sig.model_fingerprint)
            if key in self._keys:
                offenders.append(key)
        if offenders:
            raise DuplicateSignatureError(
                f"{len(offenders)} duplicate (window id, model) pair(s)", offenders)
        for sig in signatures:
            if sig.label not in (0, 1):
                raise ContractViolation(f"signature label must be 0 or 1, got {sig.label}")
            self.records.append(sig)
            self._keys.add((sig.window_id, sig.model_fingerprint))

    def dataset(self, split: str, include_self_labeled: bool = False):
        """Labeled matrix for one split tag, in insertion order."""
        chosen = [r for r in self.records
                  if r.split == split and (include_self_labeled or not r.self_labeled)]
        if not chosen:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), []
        prints = {r.model_fingerprint for r in chosen}
        if len(prints) > 1:
            raise ContractViolation(
                f"split {split!r} mixes signatures from {len(prints)} models")
        x = np.stack([r.values for r in chosen]).astype(np.float64)
        y = np.array([r.label for r in chosen], dtype=np.int64)
        ids = [r.window_id for r in chosen]
        return x, y, ids

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({
                    "id": r.window_id,
                    "model_fingerprint": r.model_fingerprint,
                    "label": r.label,
                    "split": r.split,
                    "self_labeled": r.self_labeled,
                    "values": [float(v) for v in r.values],
                }, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "SignatureRepository":
        repo = SignatureRepository()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                repo.append(XaiSignature(values=np.asarray(doc["values"], dtype=np.float64),
                                         model_fingerprint=doc["model_fingerprint"],
                                         label=int(doc["label"]), split=doc.get("split", ""),
                                         self_labeled=bool(doc.get("self_labeled", False)),
                                         window_id=doc["id"]))
        return repo

    @staticmethod
    def rebuild(path) -> "SignatureRepository":
        """Compact a repository file: reload, re-verify invariants, rewrite."""
        repo = SignatureRepository.load(path)
        repo.save(path)
        return repo
