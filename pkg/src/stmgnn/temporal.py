"""Multivariate-temporal convolution over the merged time x category axis.

Time and category are folded into one axis (time outer, category inner) and
each layer maps a region's ``w_in * C`` vector to ``w_out * C`` values with a
dense filter shared by every region and batch element:

    plain:  out = f(h @ gamma.T + bias)
    gated:  out = (h @ gamma.T + bias) * sigmoid(h @ gamma_gate.T + bias_gate)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .graph import Activation, activate, activation_grad


def merge_time_category(x):
    """``(..., N, T, C) -> (..., N, T*C)`` with column ``t*C + c``."""
    x = np.asarray(x)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def split_time_category(h, channels):
    h = np.asarray(h)
    return h.reshape(*h.shape[:-1], h.shape[-1] // channels, channels)


@dataclass(frozen=True)
class MtcnLayerSpec:
    w_in: int
    w_out: int
    channels_per_step: int
    gate: bool = True
    out_channels_per_step: int | None = None
    activation: Activation = Activation.TANH  # used when gate is off

    def __post_init__(self):
        if min(self.w_in, self.w_out, self.channels_per_step) < 1:
            raise ValueError("widths and channel counts must be positive")
        if self.w_out > self.w_in:
            raise ValueError(
                f"width grows from {self.w_in} to {self.w_out}; unpadded layers cannot widen"
            )

    @property
    def c_out(self):
        return self.out_channels_per_step or self.channels_per_step

    @property
    def in_features(self):
        return self.w_in * self.channels_per_step

    @property
    def out_features(self):
        return self.w_out * self.c_out


def mtcn_layer_forward(h, spec, gamma, bias, gamma_gate=None, bias_gate=None):
    """Apply one layer to ``h`` of shape ``(..., N, w_in*C)``.

    Returns ``(output, cache)``.
    """
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != spec.in_features:
        raise ValueError(f"expected {spec.in_features} merged features, got {h.shape[-1]}")
    if gamma.shape != (spec.out_features, spec.in_features):
        raise ValueError(
            f"filter shape {gamma.shape} != {(spec.out_features, spec.in_features)}"
        )
    value = h @ gamma.T + bias
    if spec.gate:
        if gamma_gate is None or bias_gate is None:
            raise ValueError("gated layer needs gate weights")
        gate = expit(h @ gamma_gate.T + bias_gate)
        return value * gate, (h, spec, gamma, gamma_gate, value, gate)
    out = activate(value, spec.activation)
    return out, (h, spec, gamma, None, value, out)


def mtcn_layer_backward(upstream, cache):
    """Gradients ``(d_h, d_gamma, d_bias, d_gamma_gate, d_bias_gate)``.

    The gate terms are None for plain layers.
    """
    h, spec, gamma, gamma_gate, value, extra = cache
    flat_h = h.reshape(-1, h.shape[-1])
    axes = tuple(range(upstream.ndim - 1))
    if spec.gate:
        gate = extra
        d_value = upstream * gate
        d_pre_gate = upstream * value * gate * (1.0 - gate)
        d_gamma = d_value.reshape(-1, d_value.shape[-1]).T @ flat_h
        d_gamma_gate = d_pre_gate.reshape(-1, d_pre_gate.shape[-1]).T @ flat_h
        d_h = d_value @ gamma + d_pre_gate @ gamma_gate
        return d_h, d_gamma, d_value.sum(axis=axes), d_gamma_gate, d_pre_gate.sum(axis=axes)
    d_value = upstream * activation_grad(value, extra, spec.activation)
    d_gamma = d_value.reshape(-1, d_value.shape[-1]).T @ flat_h
    return d_value @ gamma, d_gamma, d_value.sum(axis=axes), None, None


def check_schedule(specs, window, horizon):
    if not specs:
        raise ValueError("empty layer schedule")
    if specs[0].w_in != window:
        raise ValueError(f"first layer reads {specs[0].w_in} steps, window is {window}")
    for prev, nxt in zip(specs, specs[1:]):
        if nxt.w_in != prev.w_out or nxt.channels_per_step != prev.c_out:
            raise ValueError("consecutive layer shapes do not chain")
    if specs[-1].w_out != horizon:
        raise ValueError(f"final width {specs[-1].w_out} != horizon {horizon}")


def mtcn_stack_forward(x, specs, weights, horizon=None):
    """Merge ``x`` ``(..., N, T, C)`` and run the layers in order.

    ``weights`` is a list of dicts with keys ``gamma``, ``bias`` and, for
    gated layers, ``gamma_gate`` and ``bias_gate``.  Returns
    ``(output, caches)``.
    """
    x = np.asarray(x, dtype=float)
    check_schedule(specs, x.shape[-2], specs[-1].w_out if horizon is None else horizon)
    h = merge_time_category(x)
    caches = []
    for spec, wts in zip(specs, weights):
        h, cache = mtcn_layer_forward(
            h, spec, wts["gamma"], wts["bias"], wts.get("gamma_gate"), wts.get("bias_gate")
        )
        caches.append(cache)
    return h, caches
