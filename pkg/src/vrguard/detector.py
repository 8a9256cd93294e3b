"""Binary attack detectors over explanation signatures: random forest,
gradient-boosted trees, and a feed-forward network.

Scoring semantics are fixed by contract: RF score is the fraction of trees
voting "attack"; GBT score is the sigmoid of the boosted sum (base-rate
log-odds plus learning-rate-scaled leaf values); FFNN score is its sigmoid
output.  A verdict flags attack iff score > tau, with a score of exactly
tau resolving to normal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateTrainingError,
)
from .explain import SignatureRepository, XaiSignature
from .numerics import (
    Adam,
    SeededRng,
    Tensor,
    backward,
    log,
    matmul,
    mul,
    reduce_sum,
    relu,
    sigmoid,
)
from .serialize import block_to_array, read_container, write_container

DETECTOR_MAGIC = b"VRGD"

KINDS = ("rf", "gbt", "ffnn")


@dataclass
class DetectorSpec:
    kind: str
    rf_trees: int = 30
    rf_max_depth: int = 16
    gbt_estimators: int = 40
    gbt_learning_rate: float = 0.05
    gbt_max_depth: int = 3
    ffnn_hidden: tuple = (64, 64)
    ffnn_learning_rate: float = 0.001
    ffnn_epochs: int = 100
    ffnn_batch: int = 64
    threshold: float = 0.5
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown detector kind {self.kind!r}; expected one of {KINDS}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("threshold must lie strictly inside (0, 1)")
        if self.kind == "rf" and (self.rf_trees < 1 or self.rf_max_depth < 1):
            raise ConfigError("rf needs >= 1 tree and positive depth")
        if self.kind == "gbt":
            if self.gbt_estimators < 1:
                raise ConfigError("gbt needs >= 1 estimator")
            if self.gbt_learning_rate <= 0 or self.gbt_max_depth < 1:
                raise ConfigError("gbt learning rate and depth must be positive")
        if self.kind == "ffnn":
            if not self.ffnn_hidden or any(w < 1 for w in self.ffnn_hidden):
                raise ConfigError("ffnn hidden widths must be positive")
            if min(self.ffnn_learning_rate, self.ffnn_epochs, self.ffnn_batch) <= 0:
                raise ConfigError("ffnn hyperparameters must be positive")

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(doc):
        doc = dict(doc)
        doc["ffnn_hidden"] = tuple(doc["ffnn_hidden"])
        return DetectorSpec(**doc)


# decision trees --------------------------------------------------------------

@dataclass
class _Tree:
    feature: np.ndarray     # int32, -1 at leaves
    threshold: np.ndarray   # float32
    left: np.ndarray        # int32, -1 at leaves
    right: np.ndarray       # int32
    value: np.ndarray       # float32 leaf payload (vote or regression value)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(len(x), dtype=np.float64)
        for i, row in enumerate(x):
            node = 0
            while self.feature[node] >= 0:
                node = self.left[node] if row[self.feature[node]] <= self.threshold[node] \
                    else self.right[node]
            out[i] = self.value[node]
        return out


def _best_split(x, targets, idx, feature_ids, classification, counts_or_sums):
    """Best (feature, threshold, improvement) over candidate features at a node.

    Classification maximizes Gini decrease on binary labels; regression
    maximizes the variance-reduction surrogate sum^2/n.  Ties keep the first
    candidate encountered, so tree construction is deterministic.
    """
    n = len(idx)
    best = (None, 0.0, -np.inf)
    y = targets[idx]
    for f in feature_ids:
        v = x[idx, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sy = y[order]
        distinct = np.nonzero(sv[:-1] < sv[1:])[0]
        if len(distinct) == 0:
            continue
        nl = distinct + 1.0
        nr = n - nl
        if classification:
            c1 = np.cumsum(sy)[distinct]
            parent = counts_or_sums * (n - counts_or_sums) / n  # n * gini / 2 up to scale
            childl = c1 * (nl - c1) / nl
            childr = (counts_or_sums - c1) * (nr - (counts_or_sums - c1)) / nr
            gain = parent - childl - childr
        else:
            cs = np.cumsum(sy)[distinct]
            total = counts_or_sums
            gain = cs ** 2 / nl + (total - cs) ** 2 / nr - total ** 2 / n
        k = int(np.argmax(gain))
        if gain[k] > best[2] + 1e-12:
            cut = distinct[k]
            best = (f, float((sv[cut] + sv[cut + 1]) / 2.0), float(gain[k]))
    return best


def _grow_tree(x, targets, max_depth, rng, n_candidate_features, classification,
               leaf_fn):
    feature, threshold, left, right, value = [], [], [], [], []
    d = x.shape[1]
    stack = [(np.arange(len(x)), 0, -1, "root")]
    while stack:
        idx, depth, parent, side = stack.pop()
        node_id = len(feature)
        if parent >= 0:
            (left if side == "l" else right)[parent] = node_id
        y = targets[idx]
        stat = float(y.sum())
        pure = stat in (0.0, float(len(idx))) if classification else np.allclose(y, y[0])
        if depth >= max_depth or len(idx) < 2 or pure:
            feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1)
            value.append(leaf_fn(idx))
            continue
        if n_candidate_features >= d:
            cand = np.arange(d)
        else:
            cand = rng.choice(d, n_candidate_features)
        f, thr, gain = _best_split(x, targets, idx, cand, classification, stat)
        if f is None or gain <= 1e-12:
            feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1)
            value.append(leaf_fn(idx))
            continue
        feature.append(f); threshold.append(thr); left.append(-1); right.append(-1)
        value.append(0.0)
        mask = x[idx, f] <= thr
        # push right first so the left child is materialized next (stable ids)
        stack.append((idx[~mask], depth + 1, node_id, "r"))
        stack.append((idx[mask], depth + 1, node_id, "l"))
    return _Tree(feature=np.asarray(feature, np.int32),
                 threshold=np.asarray(threshold, np.float32),
                 left=np.asarray(left, np.int32),
                 right=np.asarray(right, np.int32),
                 value=np.asarray(value, np.float32))


# detector model ----------------------------------------------------------------

@dataclass
class AttackDetectorModel:
    spec: DetectorSpec
    input_dim: int
    fingerprint: str
    trees: list = field(default_factory=list)        # rf votes or gbt regressors
    base_score: float = 0.0                          # gbt initial log-odds
    ffnn_params: dict = field(default_factory=dict)  # name -> np.ndarray

    def score_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.input_dim:
            raise ContractViolation(
                f"signature dimension {x.shape[1]} != detector input {self.input_dim}")
        if self.spec.kind == "rf":
            votes = np.stack([t.predict(x) for t in self.trees])
            return votes.mean(axis=0)
        if self.spec.kind == "gbt":
            f = np.full(len(x), self.base_score)
            for t in self.trees:
                f += self.spec.gbt_learning_rate * t.predict(x)
            return 1.0 / (1.0 + np.exp(-f))
        p = self.ffnn_params
        h = (x - p["mu"]) / p["sd"]
        for i in range(len(self.spec.ffnn_hidden)):
            h = np.maximum(h @ p[f"w{i}"] + p[f"b{i}"], 0.0)
        z = h @ p["wout"] + p["bout"]
        return (1.0 / (1.0 + np.exp(-z)))[:, 0]


@dataclass
class DetectionVerdict:
    flag: bool           # True = attack
    score: float
    signature_id: str


def _as_matrix(s_tr):
    if isinstance(s_tr, tuple):
        x, y = s_tr[0], s_tr[1]
    else:
        x, y = s_tr
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ContractViolation(f"expected (n,d) signatures with n labels, got {x.shape}, {y.shape}")
    return x, y


def _fingerprint(spec, x, y):
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(spec.to_json(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()


def train_detector(s_tr, spec: DetectorSpec) -> AttackDetectorModel:
    """Fit one detector on the labeled signature matrix (features, 0/1 labels)."""
    spec.validate()
    x, y = _as_matrix(s_tr)
    if len(np.unique(y)) < 2:
        raise DegenerateTrainingError("training signatures contain a single class")
    model = AttackDetectorModel(spec=spec, input_dim=x.shape[1],
                                fingerprint=_fingerprint(spec, x, y))
    rng = SeededRng(spec.seed)

    if spec.kind == "rf":
        n_feat = max(1, int(np.sqrt(x.shape[1])))
        for t in range(spec.rf_trees):
            child = rng.split(t)
            rows = child.integers(0, len(x), shape=len(x))
            xb, yb = x[rows], y[rows]
            tree = _grow_tree(xb, yb.astype(np.float64), spec.rf_max_depth, child,
                              n_feat, classification=True,
                              leaf_fn=lambda idx: float(yb[idx].mean() > 0.5))
            model.trees.append(tree)
        return model

    if spec.kind == "gbt":
        p_base = y.mean()
        model.base_score = float(np.log(p_base / (1.0 - p_base)))
        f = np.full(len(x), model.base_score)
        for _ in range(spec.gbt_estimators):
            p = 1.0 / (1.0 + np.exp(-f))
            residual = y - p
            hess = p * (1.0 - p)

            def newton_leaf(idx):
                return float(residual[idx].sum() / (hess[idx].sum() + 1e-12))

            tree = _grow_tree(x, residual, spec.gbt_max_depth, rng, x.shape[1],
                              classification=False, leaf_fn=newton_leaf)
            model.trees.append(tree)
            f += spec.gbt_learning_rate * tree.predict(x)
        return model

    # ffnn: standardized inputs, ReLU hidden stack, sigmoid output, BCE + Adam
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    xs = ((x - mu) / sd).astype(np.float32)
    yv = y.astype(np.float32)[:, None]
    widths = [x.shape[1]] + list(spec.ffnn_hidden)
    params = {}
    for i in range(len(spec.ffnn_hidden)):
        bound = 1.0 / np.sqrt(widths[i])
        params[f"w{i}"] = Tensor(rng.uniform((widths[i], widths[i + 1]), -bound, bound)
                                 .astype(np.float32), requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(widths[i + 1], np.float32), requires_grad=True)
    bound = 1.0 / np.sqrt(widths[-1])
    params["wout"] = Tensor(rng.uniform((widths[-1], 1), -bound, bound).astype(np.float32),
                            requires_grad=True)
    params["bout"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
    optim = Adam(params, lr=spec.ffnn_learning_rate)
    for _ in range(spec.ffnn_epochs):
        perm = rng.permutation(len(xs))
        for start in range(0, len(perm), spec.ffnn_batch):
            idx = perm[start:start + spec.ffnn_batch]
            h = Tensor(xs[idx])
            for i in range(len(spec.ffnn_hidden)):
                h = relu(matmul(h, params[f"w{i}"]) + params[f"b{i}"])
            prob = sigmoid(matmul(h, params["wout"]) + params["bout"])
            target = Tensor(yv[idx])
            eps = 1e-7  # keeps log() away from 0 on saturated sigmoids
            p_clip = mul(prob, 1.0 - 2 * eps) + eps
            bce = -(target * log(p_clip) + (1.0 - target) * log(1.0 - p_clip))
            loss = reduce_sum(bce) * (1.0 / len(idx))
            optim.step(backward(loss))
    model.ffnn_params = {k: v.data.copy() for k, v in params.items()}
    model.ffnn_params["mu"] = mu
    model.ffnn_params["sd"] = sd
    return model


def detect(model: AttackDetectorModel, sig) -> DetectionVerdict:
    """Score one signature; flag attack iff score > tau (ties resolve to normal)."""
    if isinstance(sig, XaiSignature):
        values, sig_id = sig.values, sig.window_id
    else:
        values, sig_id = np.asarray(sig, dtype=np.float64), "signature"
    score = float(model.score_batch(values[None])[0])
    return DetectionVerdict(flag=score > model.spec.threshold, score=score,
                            signature_id=sig_id)


@dataclass
class DetectionMetrics:
    accuracy: float
    f1_normal: float
    f1_attack: float
    confusion: np.ndarray    # rows true (normal, attack), cols predicted

    def to_json(self):
        return {"accuracy": self.accuracy, "f1_normal": self.f1_normal,
                "f1_attack": self.f1_attack, "confusion": self.confusion.tolist()}


def evaluate_detector(model: AttackDetectorModel, s_ts) -> DetectionMetrics:
    """Binary accuracy plus per-class (normal/attack) F1 on held-out signatures."""
    x, y = _as_matrix(s_ts)
    if len(x) == 0:
        raise ContractViolation("cannot evaluate a detector on an empty set")
    if len(np.unique(y)) < 2:
        raise ContractViolation("evaluation set must contain both classes")
    scores = model.score_batch(x)
    pred = (scores > model.spec.threshold).astype(np.int64)
    conf = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(y, pred):
        conf[t, p] += 1
    f1 = []
    for c in (0, 1):
        tp = conf[c, c]
        prec = tp / conf[:, c].sum() if conf[:, c].sum() else 0.0
        rec = tp / conf[c, :].sum() if conf[c, :].sum() else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return DetectionMetrics(accuracy=float((pred == y).mean()),
                            f1_normal=float(f1[0]), f1_attack=float(f1[1]),
                            confusion=conf)


def threshold_sweep(scores, labels):
    """Exact accuracy as a function of tau, from sorted scores alone.

    Returns (taus, accuracies) where taus are the candidate thresholds
    (0, each distinct score, 1).  flag = score > tau.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    taus = np.concatenate([[0.0], np.unique(scores), [1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    n = len(scores)
    attacks_total = int(labels.sum())
    cum_normal = np.cumsum(l_sorted == 0)
    cum_attack = np.cumsum(l_sorted == 1)
    accs = np.empty(len(taus))
    for i, tau in enumerate(taus):
        k = int(np.searchsorted(s_sorted, tau, side="right"))  # scores <= tau -> normal
        normals_right = cum_normal[k - 1] if k > 0 else 0
        attacks_flagged = attacks_total - (cum_attack[k - 1] if k > 0 else 0)
        accs[i] = (normals_right + attacks_flagged) / n
    return taus, accs


def update_repository(repo: SignatureRepository, sig: XaiSignature,
                      verdict: DetectionVerdict, enabled: bool = False) -> bool:
    """Online repository growth on detected attacks.

    Disabled by default because self-labeled updates feed the detector its
    own verdicts; when enabled, records are tagged self_labeled and excluded
    from evaluation extractions.
    """
    if not enabled or not verdict.flag:
        return False
    tagged = XaiSignature(values=sig.values, model_fingerprint=sig.model_fingerprint,
                          window_id=sig.window_id, label=1, split=sig.split,
                          self_labeled=True)
    repo.append(tagged)
    return True


# serialization ------------------------------------------------------------------

def save_detector(model: AttackDetectorModel, path, extra_meta: dict | None = None) -> None:
    descriptor = {
        "kind": "detector",
        "spec": model.spec.to_json(),
        "input_dim": model.input_dim,
        "fingerprint": model.fingerprint,
        "base_score": model.base_score,
    }
    if extra_meta:
        descriptor["meta"] = extra_meta
    blocks = []
    if model.spec.kind in ("rf", "gbt"):
        descriptor["tree_sizes"] = [len(t.feature) for t in model.trees]
        for t in model.trees:
            blocks.extend([t.feature, t.threshold, t.left, t.right, t.value])
    else:
        names = sorted(model.ffnn_params)
        descriptor["ffnn_blocks"] = [{"name": n, "shape": list(model.ffnn_params[n].shape),
                                      "dtype": str(model.ffnn_params[n].dtype)}
                                     for n in names]
        blocks.extend(model.ffnn_params[n] for n in names)
    write_container(path, DETECTOR_MAGIC, descriptor, blocks)


def load_detector(path) -> AttackDetectorModel:
    descriptor, blocks = read_container(path, DETECTOR_MAGIC)
    spec = DetectorSpec.from_json(descriptor["spec"])
    model = AttackDetectorModel(spec=spec, input_dim=descriptor["input_dim"],
                                fingerprint=descriptor["fingerprint"],
                                base_score=descriptor.get("base_score", 0.0))
    if spec.kind in ("rf", "gbt"):
        sizes = descriptor["tree_sizes"]
        dtypes = ("int32", "float32", "int32", "int32", "float32")
        pos = 0
        for n in sizes:
            arrs = [block_to_array(blocks[pos + i], dtypes[i], (n,)) for i in range(5)]
            model.trees.append(_Tree(*arrs))
            pos += 5
    else:
        for meta, raw in zip(descriptor["ffnn_blocks"], blocks):
            model.ffnn_params[meta["name"]] = block_to_array(raw, meta["dtype"], meta["shape"])
    return model
