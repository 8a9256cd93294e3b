"""Severity classifiers: build, train, evaluate, and serialize LSTM / GRU /
CNN-LSTM models over normalized sensor windows.

Desk-scale presets (1 recurrent layer, width 32, T=30) keep everything CPU
friendly; the full-size presets mirror the deployed architectures and are
exercised by a construct-and-step scale check rather than full training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import layers
from .data import TimeSeriesWindow, windows_to_arrays
from .errors import ConfigError, ContractViolation, DivergenceError
from .numerics import Adam, SeededRng, Tensor, backward, cross_entropy, relu, softmax
from .serialize import block_to_array, read_container, write_container

MODEL_MAGIC = b"VRGG"

FAMILIES = ("lstm", "gru", "cnn_lstm")


@dataclass(frozen=True)
class ArchSpec:
    family: str
    timestep: int
    n_features: int
    recurrent_widths: tuple
    dense_widths: tuple = (32,)
    conv_filters: tuple = ()
    kernel_size: int = 3
    pool_size: int = 2
    recurrent_dropout: float = 0.0
    layer_dropout: float = 0.0      # between stacked recurrent layers
    head_dropout: float = 0.0       # on the recurrent output, before the head
    n_classes: int = 4

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.timestep < 1 or self.n_features < 1:
            raise ConfigError("timestep and n_features must be >= 1")
        if not self.recurrent_widths or any(w < 1 for w in self.recurrent_widths):
            raise ConfigError("recurrent_widths must be non-empty and positive")
        if any(w < 1 for w in self.dense_widths):
            raise ConfigError("dense_widths must be positive")
        if self.n_classes != 4:
            raise ConfigError("severity classifiers are 4-way")
        for rate in (self.recurrent_dropout, self.layer_dropout, self.head_dropout):
            if not (0.0 <= rate < 1.0):
                raise ConfigError("dropout rates must lie in [0, 1)")
        if self.family == "cnn_lstm":
            if not self.conv_filters:
                raise ConfigError("cnn_lstm needs at least one conv stage")
            t = self.timestep
            for _ in self.conv_filters:
                if self.kernel_size > t:
                    raise ConfigError(f"kernel size {self.kernel_size} exceeds remaining "
                                      f"sequence length {t}")
                t = t - self.kernel_size + 1
            if t // self.pool_size < 1:
                raise ConfigError("sequence fully consumed before the recurrent stage")
        elif self.conv_filters:
            raise ConfigError(f"conv_filters only apply to cnn_lstm, not {self.family}")

    def param_shapes(self):
        """Ordered (name, shape) pairs; this order is the serialization order."""
        self.validate()
        shapes = []
        feat = self.n_features
        if self.family == "cnn_lstm":
            for i, f in enumerate(self.conv_filters):
                shapes.append((f"conv{i}.w", (self.kernel_size, feat, f)))
                shapes.append((f"conv{i}.b", (f,)))
                feat = f
        gates = 3 if self.family == "gru" else 4
        for i, width in enumerate(self.recurrent_widths):
            shapes.append((f"rnn{i}.wx", (feat, gates * width)))
            shapes.append((f"rnn{i}.wh", (width, gates * width)))
            shapes.append((f"rnn{i}.b", (gates * width,)))
            feat = width
        for i, width in enumerate(self.dense_widths):
            shapes.append((f"dense{i}.w", (feat, width)))
            shapes.append((f"dense{i}.b", (width,)))
            feat = width
        shapes.append(("out.w", (feat, self.n_classes)))
        shapes.append(("out.b", (self.n_classes,)))
        return shapes

    @property
    def penultimate_width(self) -> int:
        return self.dense_widths[-1] if self.dense_widths else self.recurrent_widths[-1]

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "ArchSpec":
        doc = dict(doc)
        for key in ("recurrent_widths", "dense_widths", "conv_filters"):
            doc[key] = tuple(doc[key])
        return ArchSpec(**doc)


def desk_lstm(timestep=30, n_features=6) -> ArchSpec:
    return ArchSpec("lstm", timestep, n_features, recurrent_widths=(32,), dense_widths=(32,))


def desk_gru(timestep=30, n_features=6) -> ArchSpec:
    return ArchSpec("gru", timestep, n_features, recurrent_widths=(32,), dense_widths=(32,))


def desk_cnn_lstm(timestep=30, n_features=6) -> ArchSpec:
    return ArchSpec("cnn_lstm", timestep, n_features, recurrent_widths=(32,),
                    dense_widths=(32,), conv_filters=(8,), kernel_size=3, pool_size=2)


def paper_lstm(timestep=90, n_features=13) -> ArchSpec:
    """Six stacked LSTM layers of width 128 with 15% recurrent dropout."""
    return ArchSpec("lstm", timestep, n_features, recurrent_widths=(128,) * 6,
                    dense_widths=(64,), recurrent_dropout=0.15)


def paper_gru(timestep=90, n_features=13) -> ArchSpec:
    """GRU stack 32/64/128; each layer followed by 20% dropout."""
    return ArchSpec("gru", timestep, n_features, recurrent_widths=(32, 64, 128),
                    dense_widths=(64,), layer_dropout=0.20)


def paper_cnn_lstm(timestep=90, n_features=13) -> ArchSpec:
    """Two conv stages (64 filters, kernel 3), pool 2, LSTM 128, 15% dropout."""
    return ArchSpec("cnn_lstm", timestep, n_features, recurrent_widths=(128,),
                    dense_widths=(64,), conv_filters=(64, 64), kernel_size=3,
                    pool_size=2, head_dropout=0.15)


def _init_params(spec: ArchSpec, seed: int, dtype=np.float32) -> dict:
    """Uniform fan-in initialization; LSTM forget-gate bias starts at 1."""
    rng = SeededRng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
            if spec.family != "gru" and name.startswith("rnn"):
                h = shape[0] // 4
                data[h:2 * h] = 1.0
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[0] * shape[1]
            data = layers.uniform_init(rng, shape, fan_in, dtype)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    return params


@dataclass
class ClassifierModel:
    spec: ArchSpec
    params: dict                      # name -> leaf Tensor
    seed: int
    stats_id: str | None = None
    train_config_hash: str = "untrained"

    @property
    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(json.dumps(self.spec.to_json(), sort_keys=True).encode())
        h.update(str(self.seed).encode())
        h.update((self.stats_id or "").encode())
        h.update(self.train_config_hash.encode())
        return h.hexdigest()

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, x: Tensor, training: bool = False, rng: SeededRng | None = None):
        """Full forward pass on a (B,T,N) tensor; returns (logits, penultimate)."""
        spec = self.spec
        p = self.params
        out = x
        if spec.family == "cnn_lstm":
            ws = [p[f"conv{i}.w"] for i in range(len(spec.conv_filters))]
            bs = [p[f"conv{i}.b"] for i in range(len(spec.conv_filters))]
            out = layers.conv_block(out, ws, bs, spec.pool_size)
        step = layers.gru_sequence if spec.family == "gru" else layers.lstm_sequence
        n_layers = len(spec.recurrent_widths)
        h = None
        for i in range(n_layers):
            last = i == n_layers - 1
            seq, h = step(out, p[f"rnn{i}.wx"], p[f"rnn{i}.wh"], p[f"rnn{i}.b"],
                          recurrent_dropout=spec.recurrent_dropout, rng=rng,
                          training=training, return_sequence=not last)
            if not last:
                out = layers.sequence_dropout(seq, spec.layer_dropout, rng, training)
        feat = layers.dropout(h, spec.head_dropout, rng, training)
        for i in range(len(spec.dense_widths)):
            feat = relu(layers.dense(feat, p[f"dense{i}.w"], p[f"dense{i}.b"]))
        logits = layers.dense(feat, p["out.w"], p["out.b"])
        return logits, feat

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.spec.timestep or x.shape[2] != self.spec.n_features:
            raise ContractViolation(
                f"window shape {x.shape[1:]} does not match spec "
                f"({self.spec.timestep}, {self.spec.n_features})")
        return x

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities, shape (B, 4)."""
        logits, _ = self.forward(Tensor(self._check_batch(x)))
        return softmax(logits).data

    def predict(self, window) -> np.ndarray:
        values = window.values if isinstance(window, TimeSeriesWindow) else window
        return self.predict_batch(values)[0]

    def predict_label(self, window) -> int:
        return int(np.argmax(self.predict(window)))  # argmax ties resolve to the lower index

    def penultimate_batch(self, x: np.ndarray) -> np.ndarray:
        _, feat = self.forward(Tensor(self._check_batch(x)))
        return feat.data

    def head_weights(self):
        """Weights and bias of the final dense-softmax layer: (P,C), (C,)."""
        return self.params["out.w"].data, self.params["out.b"].data

    def params_as(self, dtype) -> dict:
        return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype)
                for k, v in self.params.items()}

    def clone_params(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_data(self, data: dict) -> None:
        for k, v in data.items():
            self.params[k].data = v.copy()


def build(spec: ArchSpec, seed: int = 0) -> ClassifierModel:
    spec.validate()
    return ClassifierModel(spec=spec, params=_init_params(spec, seed), seed=seed)


# training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 256
    patience: int = 30
    seed: int = 0

    def validate(self):
        if min(self.learning_rate, self.epochs, self.batch_size, self.patience) <= 0:
            raise ConfigError("all training hyperparameters must be positive")
        if self.patience > self.epochs:
            raise ConfigError("patience cannot exceed epochs")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def _onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes), dtype=np.float32)
    out[np.arange(len(y)), y] = 1.0
    return out


def _loss_and_acc(model: ClassifierModel, x: np.ndarray, y: np.ndarray,
                  batch_size: int = 512):
    total_nll, correct = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits, _ = model.forward(Tensor(xb))
        z = logits.data.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_nll += -logp[np.arange(len(yb)), yb].sum()
        correct += int((z.argmax(axis=1) == yb).sum())
    return total_nll / len(x), correct / len(x)


def train(model: ClassifierModel, train_windows, val_windows, cfg: TrainConfig):
    """Minimize categorical cross-entropy with Adam and patience-based early
    stopping on validation loss; returns (model, per-epoch history) with the
    best-validation-loss parameters restored.
    """
    cfg.validate()
    if not train_windows or not val_windows:
        raise ContractViolation("train() requires non-empty train and validation splits")
    x_tr, y_tr = windows_to_arrays(train_windows)
    x_val, y_val = windows_to_arrays(val_windows)
    for arr in (x_tr, x_val):
        if arr.shape[1:] != (model.spec.timestep, model.spec.n_features):
            raise ContractViolation(f"window shape {arr.shape[1:]} does not match spec")

    rng = SeededRng(cfg.seed)
    optim = Adam(model.params, lr=cfg.learning_rate)
    onehot = _onehot(y_tr, model.spec.n_classes)
    history = []
    best_val = np.inf
    best_params = model.clone_params()
    best_epoch = -1
    stall = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x_tr))
        epoch_nll, epoch_correct = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits, _ = model.forward(Tensor(x_tr[idx]), training=True, rng=rng)
            loss = cross_entropy(logits, Tensor(onehot[idx]))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}", epoch)
            epoch_nll += loss_val * len(idx)
            epoch_correct += int((logits.data.argmax(axis=1) == y_tr[idx]).sum())
            optim.step(backward(loss))
        val_loss, val_acc = _loss_and_acc(model, x_val, y_val)
        history.append(EpochStats(epoch=epoch,
                                  train_loss=epoch_nll / len(x_tr),
                                  train_accuracy=epoch_correct / len(x_tr),
                                  val_loss=float(val_loss),
                                  val_accuracy=float(val_acc)))
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.clone_params()
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    model.load_param_data(best_params)
    model.train_config_hash = cfg.config_hash
    return model, history, best_epoch


# metrics ---------------------------------------------------------------------

@dataclass
class ClassificationMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    absent_classes: tuple = ()

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_f1": self.macro_f1,
                "confusion": self.confusion.tolist(),
                "absent_classes": list(self.absent_classes)}


def classification_metrics(y_true, y_pred, n_classes: int = 4) -> ClassificationMetrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if len(y_true) == 0:
        raise ContractViolation("cannot compute metrics on an empty set")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[t, p] += 1
    diag = np.diag(conf).astype(np.float64)
    col = conf.sum(axis=0).astype(np.float64)
    row = conf.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros(n_classes), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(n_classes), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    absent = tuple(int(c) for c in range(n_classes) if row[c] == 0)
    return ClassificationMetrics(accuracy=float(diag.sum() / len(y_true)),
                                 macro_precision=float(precision.mean()),
                                 macro_recall=float(recall.mean()),
                                 macro_f1=float(f1.mean()),
                                 confusion=conf,
                                 absent_classes=absent)


def evaluate(model: ClassifierModel, windows, batch_size: int = 512) -> ClassificationMetrics:
    """Macro-averaged metrics of a model over labeled windows."""
    if not windows:
        raise ContractViolation("cannot evaluate on an empty set")
    x, y = windows_to_arrays(windows)
    preds = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        probs = model.predict_batch(x[start:start + batch_size])
        preds[start:start + len(probs)] = probs.argmax(axis=1)
    return classification_metrics(y, preds, model.spec.n_classes)


# serialization ---------------------------------------------------------------

def save(model: ClassifierModel, path, extra_meta: dict | None = None) -> None:
    names = [name for name, _ in model.spec.param_shapes()]
    descriptor = {
        "kind": "classifier",
        "arch": model.spec.to_json(),
        "seed": model.seed,
        "stats_id": model.stats_id,
        "train_config_hash": model.train_config_hash,
        "fingerprint": model.fingerprint,
        "params": [{"name": n, "shape": list(model.params[n].shape), "dtype": "float32"}
                   for n in names],
    }
    if extra_meta:
        descriptor["meta"] = extra_meta
    write_container(path, MODEL_MAGIC, descriptor,
                    [model.params[n].data.astype(np.float32) for n in names])


def load(path) -> ClassifierModel:
    descriptor, blocks = read_container(path, MODEL_MAGIC)
    spec = ArchSpec.from_json(descriptor["arch"])
    model = ClassifierModel(spec=spec, params={}, seed=descriptor["seed"],
                            stats_id=descriptor.get("stats_id"),
                            train_config_hash=descriptor.get("train_config_hash", "untrained"))
    params = {}
    for meta, raw in zip(descriptor["params"], blocks):
        arr = block_to_array(raw, meta["dtype"], meta["shape"])
        params[meta["name"]] = Tensor(arr, requires_grad=True, name=meta["name"])
    expected = {name: tuple(shape) for name, shape in spec.param_shapes()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise ContractViolation("parameter blocks do not match the architecture descriptor")
    model.params = params
    return model
