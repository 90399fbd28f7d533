"""Differentiable building blocks: GRU cell, attention, MLP, dropout.

Each function works on either recorded tensors or raw arrays; see
:mod:`dgirl.numerics.tensor`.  Inputs are batch-first ``(B, d)`` matrices;
a single ``(d,)`` vector is accepted and the result is returned unbatched.
"""

import math

import numpy as np

from ..errors import ContractViolation, EmptyContextError
from . import tensor as T


def _rows(x):
    """Promote a vector to a 1-row matrix; report whether we did."""
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


def init_gru(store, prefix, input_size, hidden_size):
    store.add(prefix + "W_x", (input_size, 3 * hidden_size))
    store.add(prefix + "W_h", (hidden_size, 3 * hidden_size))
    store.add(prefix + "b_x", (3 * hidden_size,))
    store.add(prefix + "b_h", (3 * hidden_size,))


def gru_cell(x, h_prev, p):
    """One gated-recurrent-unit update.

    r = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
    z = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
    c = tanh(x W_xc + b_xc + r * (h W_hc + b_hc))
    h' = (1 - z) * h + z * c
    """
    w_x, w_h = p["W_x"], p["W_h"]
    in_size, three_h = w_x.shape
    hidden = three_h // 3
    if x.shape[-1] != in_size:
        raise ContractViolation(f"gru input has dim {x.shape[-1]}, expected {in_size}")
    if h_prev.shape[-1] != hidden:
        raise ContractViolation(f"gru hidden has dim {h_prev.shape[-1]}, expected {hidden}")
    x, squeeze = _rows(x)
    h_prev, _ = _rows(h_prev)
    gx = x @ w_x + p["b_x"]
    gh = h_prev @ w_h + p["b_h"]
    r = T.sigmoid(gx[:, :hidden] + gh[:, :hidden])
    z = T.sigmoid(gx[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    cand = T.tanh(gx[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    h_new = h_prev + z * (cand - h_prev)
    return h_new[0] if squeeze else h_new


def gru_stack_step(x, hiddens, params, n_layers, dropout=0.0, rng=None):
    """Advance a stack of GRU layers by one input; returns the new hidden list."""
    out = []
    inp = x
    for layer in range(n_layers):
        if dropout > 0.0 and rng is not None:
            inp = inverted_dropout(inp, dropout, rng)
        h = gru_cell(inp, hiddens[layer], params[layer])
        out.append(h)
        inp = h
    return out


def gru_encode(inputs, mask, layers, hidden, h0=None, dropout=0.0, rng=None):
    """Run a GRU stack over per-step inputs ``[(B, I)] * T`` with a ``(B, T)`` mask.

    Rows whose mask is False at step t keep their previous state, so padded
    (or entirely empty) rows end where their real input ended.  Returns
    ``(top_states, final_hidden)``: a list of ``(B, H)`` top-layer states,
    one per step, and the per-layer final states.
    """
    n_layers = len(layers)
    b = mask.shape[0]
    hid = list(h0) if h0 is not None else [np.zeros((b, hidden)) for _ in range(n_layers)]
    top = []
    for t, x in enumerate(inputs):
        new = gru_stack_step(x, hid, layers, n_layers, dropout, rng)
        m = mask[:, t]
        if m.all():
            hid = new
        elif not m.any():
            pass
        else:
            keep = m[:, None].astype(np.float64)
            hid = [h + keep * (n - h) for h, n in zip(hid, new)]
        top.append(hid[-1])
    return top, hid


def attention(decoder_state, encoder_states, mask=None):
    """Scaled dot-product attention.

    ``decoder_state`` is ``(B, H)`` and ``encoder_states`` ``(B, T, H)``
    (or ``(H,)`` and ``(T, H)``).  ``mask`` is a boolean ``(B, T)`` array of
    valid positions.  Returns ``(context, weights)``.
    """
    if encoder_states.shape[-2] == 0:
        raise EmptyContextError("attention over zero encoder states")
    if decoder_state.shape[-1] != encoder_states.shape[-1]:
        raise ContractViolation(
            f"decoder dim {decoder_state.shape[-1]} != encoder dim {encoder_states.shape[-1]}")
    squeeze = decoder_state.ndim == 1
    if squeeze:
        decoder_state = T.reshape(decoder_state, (1,) + tuple(decoder_state.shape))
        encoder_states = T.reshape(encoder_states, (1,) + tuple(encoder_states.shape))
        if mask is not None:
            mask = np.asarray(mask)[None, :]
    b, steps, hidden = encoder_states.shape
    query = T.reshape(decoder_state, (b, 1, hidden))
    scores = T.sum_(encoder_states * query, axis=-1) * (1.0 / math.sqrt(hidden))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise EmptyContextError("attention row with no valid encoder state")
        scores = scores + np.where(mask, 0.0, -np.inf)
    weights = T.softmax(scores, axis=-1)
    context = T.sum_(encoder_states * T.reshape(weights, (b, steps, 1)), axis=1)
    if squeeze:
        return context[0], weights[0]
    return context, weights


def init_mlp(store, prefix, sizes):
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}W{i}", (d_in, d_out))
        store.add(f"{prefix}b{i}", (d_out,))


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "sigmoid": T.sigmoid, "linear": None}


def mlp_forward(x, layers, activation="tanh", final_activation="linear"):
    """Affine map + nonlinearity per layer; the last layer uses ``final_activation``."""
    n = sum(1 for k in layers if k.startswith("W"))
    if n == 0:
        raise ContractViolation("mlp has no layers")
    x, squeeze = _rows(x)
    for i in range(n):
        w = layers[f"W{i}"]
        if x.shape[-1] != w.shape[0]:
            raise ContractViolation(
                f"mlp layer {i} expects dim {w.shape[0]}, got {x.shape[-1]}")
        x = x @ w + layers[f"b{i}"]
        act = _ACTIVATIONS[activation if i < n - 1 else final_activation]
        if act is not None:
            x = act(x)
    return x[0] if squeeze else x


def inverted_dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep
