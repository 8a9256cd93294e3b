"""Layer math for the recurrent classifiers: LSTM/GRU cells, 1-D conv stacks,
and dense heads, all expressed over the autodiff tensor ops.

Stacked recurrent layers pass full sequences; only the last layer's final
hidden state feeds the dense head.  Recurrent dropout uses one mask per
sequence (drawn once per layer per forward pass) on the hidden state that
feeds the gates.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    SeededRng,
    Tensor,
    concat,
    conv1d,
    dropout,
    matmul,
    maxpool1d,
    mul,
    relu,
    sigmoid,
    tanh,
)


def uniform_init(rng: SeededRng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(shape, -bound, bound).astype(dtype)


def _seq_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return Tensor(((rng.uniform(shape) < keep) / keep).astype(dtype))


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
                  recurrent_dropout: float = 0.0, rng: SeededRng | None = None,
                  training: bool = False, return_sequence: bool = True):
    """Run an LSTM over (B,T,N); returns (hidden sequence (B,T,H) or None, final h (B,H)).

    Gate layout in the fused weight matrices is [input, forget, cell, output].
    """
    B, T, _ = x.shape
    H = wh.shape[0]
    dtype = x.data.dtype
    zx = matmul(x, wx)  # (B,T,4H) — one big matmul instead of T small ones
    h = Tensor(np.zeros((B, H), dtype=dtype))
    c = Tensor(np.zeros((B, H), dtype=dtype))
    mask = None
    if training and recurrent_dropout > 0.0:
        mask = _seq_mask(rng, (B, H), recurrent_dropout, dtype)
    outputs = []
    for t in range(T):
        h_in = mul(h, mask) if mask is not None else h
        z = zx[:, t] + matmul(h_in, wh) + b
        i = sigmoid(z[:, 0:H])
        f = sigmoid(z[:, H:2 * H])
        g = tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * tanh(c)
        if return_sequence:
            outputs.append(h)
    seq = concat([o.reshape(B, 1, H) for o in outputs], axis=1) if return_sequence else None
    return seq, h


def gru_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
                 recurrent_dropout: float = 0.0, rng: SeededRng | None = None,
                 training: bool = False, return_sequence: bool = True):
    """GRU over (B,T,N); gate layout [update, reset, candidate], one bias per gate."""
    B, T, _ = x.shape
    H = wh.shape[0]
    dtype = x.data.dtype
    zx = matmul(x, wx)  # (B,T,3H)
    h = Tensor(np.zeros((B, H), dtype=dtype))
    mask = None
    if training and recurrent_dropout > 0.0:
        mask = _seq_mask(rng, (B, H), recurrent_dropout, dtype)
    outputs = []
    for t in range(T):
        h_in = mul(h, mask) if mask is not None else h
        hh = matmul(h_in, wh)  # (B,3H)
        zxt = zx[:, t]
        z = sigmoid(zxt[:, 0:H] + hh[:, 0:H] + b[0:H])
        r = sigmoid(zxt[:, H:2 * H] + hh[:, H:2 * H] + b[H:2 * H])
        n = tanh(zxt[:, 2 * H:3 * H] + r * hh[:, 2 * H:3 * H] + b[2 * H:3 * H])
        h = (1.0 - z) * n + z * h
        if return_sequence:
            outputs.append(h)
    seq = concat([o.reshape(B, 1, H) for o in outputs], axis=1) if return_sequence else None
    return seq, h


def conv_block(x: Tensor, weights, biases, pool_size: int) -> Tensor:
    """conv -> ReLU per stage, then one max pool over time."""
    out = x
    for w, b in zip(weights, biases):
        out = relu(conv1d(out, w, b))
    return maxpool1d(out, pool_size)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def sequence_dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inter-layer dropout on a (B,T,H) sequence with one mask per sequence."""
    if not training or rate <= 0.0:
        return x
    B, _, H = x.shape
    keep = 1.0 - rate
    mask = ((rng.uniform((B, 1, H)) < keep) / keep).astype(x.data.dtype)
    return mul(x, Tensor(mask))


__all__ = ["uniform_init", "lstm_sequence", "gru_sequence", "conv_block",
           "dense", "sequence_dropout", "dropout"]
