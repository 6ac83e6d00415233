"""Two-branch spatial-temporal model with a distribution head.

The spatial branch runs a DGCN stack on the flattened ``(N, T*C)`` history;
the temporal branch runs the MTCN stack on the same merged axis.  Each emits
``K`` raw channels per (region, horizon step, category), where ``K`` is the
head's parameter count.  The two raw embeddings are multiplied elementwise
and only then pushed through the head activations, so each fused parameter is
free to take any value in its domain.

The last temporal layer starts with a bias of one, which makes the fusion a
pass-through of the spatial embedding at initialization.  With all-zero
biases an all-zero history window would sit on an exact saddle of the
product and never receive a gradient.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import CLAMP_EPS, HeadKind, head_family
from .errors import ConfigError, DataError, NumericalError
from .graph import Activation, GraphSpec, dgcn_layer_backward, dgcn_layer_forward, transition_matrix
from .seeding import substream
from .temporal import (
    MtcnLayerSpec,
    check_schedule,
    merge_time_category,
    mtcn_layer_backward,
    mtcn_layer_forward,
)

MAGIC = "STMGNN-WEIGHTS 1"
END = "END"

_ACTIVATION_NOTES = {
    "sigmoid": "clip(sigmoid(raw),eps,1-eps) d/draw=s*(1-s) (0 when clipped)",
    "softplus": "max(softplus(raw),eps) d/draw=sigmoid(raw) (0 when clipped)",
    "identity": "raw d/draw=1",
}


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int
    window: int = 30
    horizon: int = 1
    categories: int = 1
    head: HeadKind = HeadKind.ZINB
    dgcn_hidden: tuple = (64,)
    mtcn_widths: tuple = (8,)
    gate: bool = True
    dgcn_bias: bool = True
    seed: int = 0
    clamp_eps: float = CLAMP_EPS

    def __post_init__(self):
        object.__setattr__(self, "head", HeadKind(self.head))
        object.__setattr__(self, "dgcn_hidden", tuple(int(v) for v in self.dgcn_hidden))
        object.__setattr__(self, "mtcn_widths", tuple(int(v) for v in self.mtcn_widths))
        sizes = (self.n_regions, self.window, self.horizon, self.categories, *self.dgcn_hidden)
        if min(sizes) < 1:
            raise ConfigError("model sizes must be positive")
        schedule = self.width_schedule
        if any(b > a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError(f"temporal width schedule {schedule} must not increase")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError("clamp_eps must lie in (0, 0.5)")

    @property
    def width_schedule(self):
        return (self.window, *self.mtcn_widths, self.horizon)

    @property
    def n_params(self):
        return head_family(self.head).n_params

    def head_impl(self):
        return head_family(self.head, self.clamp_eps)

    def temporal_specs(self):
        widths = self.width_schedule
        c, k = self.categories, self.n_params
        specs = []
        for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            specs.append(
                MtcnLayerSpec(
                    w_in,
                    w_out,
                    c,
                    gate=self.gate and not last,
                    out_channels_per_step=c * k if last else c,
                    activation=Activation.IDENTITY if last else Activation.TANH,
                )
            )
        return specs

    def spatial_sizes(self):
        return (
            self.window * self.categories,
            *self.dgcn_hidden,
            self.horizon * self.categories * self.n_params,
        )

    def echo(self):
        """Canonical ``key=value`` lines; part of the weights manifest."""
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, HeadKind):
                value = value.value
            elif isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            out.append(f"{f.name}={value}")
        return out


def weight_layout(config):
    """``(name, role, shape, init)`` for every learnable array, in storage order."""
    layout = []
    sizes = config.spatial_sizes()
    for l, (f_in, f_out) in enumerate(zip(sizes, sizes[1:])):
        layout.append((f"spatial.{l}.W", f"spatial layer {l} propagation weights", (f_in, f_out), "xavier"))
        layout.append((f"spatial.{l}.B", f"spatial layer {l} self-projection", (f_in, f_out), "xavier"))
        if config.dgcn_bias:
            layout.append((f"spatial.{l}.bias", f"spatial layer {l} additive bias", (f_out,), "zeros"))
    specs = config.temporal_specs()
    for l, spec in enumerate(specs):
        shape = (spec.out_features, spec.in_features)
        last = l == len(specs) - 1
        path = "value path " if spec.gate else ""
        layout.append((f"temporal.{l}.gamma", f"temporal layer {l} {path}filter", shape, "xavier"))
        layout.append(
            (f"temporal.{l}.bias", f"temporal layer {l} {path}bias", (spec.out_features,), "ones" if last else "zeros")
        )
        if spec.gate:
            layout.append((f"temporal.{l}.gamma_gate", f"temporal layer {l} gate path filter", shape, "xavier"))
            layout.append((f"temporal.{l}.bias_gate", f"temporal layer {l} gate path bias", (spec.out_features,), "zeros"))
    return layout


def xavier_limit(shape):
    return float(np.sqrt(6.0 / (shape[0] + shape[1])))


@dataclass
class ModelWeights:
    arrays: dict
    roles: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelWeights({k: v.copy() for k, v in self.arrays.items()}, dict(self.roles))

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_weights(config, seed=None):
    """Xavier-uniform matrices, zero biases (the final temporal bias is one)."""
    rng = substream(config.seed if seed is None else seed, "init")
    arrays, roles = {}, {}
    for name, role, shape, init in weight_layout(config):
        if init == "xavier":
            lim = xavier_limit(shape)
            arrays[name] = rng.uniform(-lim, lim, size=shape)
        elif init == "ones":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
        roles[name] = role
    return ModelWeights(arrays, roles)


@dataclass
class HeadOutput:
    """Head parameters, each ``(..., N, Q, C)``, plus the fused raw tensor."""

    kind: HeadKind
    params: tuple
    raw: np.ndarray

    def __getattr__(self, name):
        params = self.__dict__.get("params")
        if params is not None and name in params._fields:
            return getattr(params, name)
        raise AttributeError(name)


def _transition(graph):
    return transition_matrix(graph) if isinstance(graph, GraphSpec) else np.asarray(graph, float)


def _check_branch(h, branch, layer):
    if not np.all(np.isfinite(h)):
        raise NumericalError(f"non-finite output in {branch} branch layer {layer}")


def _branches(x, transition, weights, config):
    q, c, k = config.horizon, config.categories, config.n_params
    h0 = merge_time_category(x)
    h = h0
    spatial_caches = []
    n_spatial = len(config.spatial_sizes()) - 1
    for l in range(n_spatial):
        act = Activation.IDENTITY if l == n_spatial - 1 else Activation.RELU
        h, cache = dgcn_layer_forward(
            h,
            transition,
            weights[f"spatial.{l}.W"],
            weights[f"spatial.{l}.B"],
            act,
            weights.arrays.get(f"spatial.{l}.bias"),
        )
        _check_branch(h, "spatial", l)
        spatial_caches.append(cache)
    spatial = h.reshape(*h.shape[:-1], q, c, k)

    h = h0
    temporal_caches = []
    for l, spec in enumerate(config.temporal_specs()):
        h, cache = mtcn_layer_forward(
            h,
            spec,
            weights[f"temporal.{l}.gamma"],
            weights[f"temporal.{l}.bias"],
            weights.arrays.get(f"temporal.{l}.gamma_gate"),
            weights.arrays.get(f"temporal.{l}.bias_gate"),
        )
        _check_branch(h, "temporal", l)
        temporal_caches.append(cache)
    temporal = h.reshape(*h.shape[:-1], q, c, k)
    return spatial, temporal, spatial_caches, temporal_caches


def _check_input(x, config):
    x = np.asarray(x, dtype=float)
    expected = (config.n_regions, config.window, config.categories)
    if x.shape[-3:] != expected:
        raise DataError(f"input shape {x.shape[-3:]} does not match config {expected}")
    return x


def fuse(spatial_raw, temporal_raw):
    return spatial_raw * temporal_raw


def forward_with_cache(x, graph, weights, config):
    """Forward pass on ``x`` ``(..., N, T, C)``; returns ``(HeadOutput, cache)``."""
    x = _check_input(x, config)
    transition = _transition(graph)
    spatial, temporal, s_caches, t_caches = _branches(x, transition, weights, config)
    raw = fuse(spatial, temporal)
    head = config.head_impl()
    output = HeadOutput(config.head, head.activate(raw), raw)
    cache = {"spatial": spatial, "temporal": temporal, "s_caches": s_caches, "t_caches": t_caches}
    return output, cache


def forward(x, graph, weights, config):
    return forward_with_cache(x, graph, weights, config)[0]


def backward_raw(cache, d_raw, config):
    """Weight gradients given the gradient w.r.t. the fused raw tensor."""
    if cache is None:
        raise ValueError("backward needs the cache from forward_with_cache")
    grads = {}
    d_spatial = d_raw * cache["temporal"]
    d_temporal = d_raw * cache["spatial"]

    d_h = d_temporal.reshape(*d_temporal.shape[:-3], -1)
    for l in reversed(range(len(cache["t_caches"]))):
        d_h, d_gamma, d_bias, d_gamma_gate, d_bias_gate = mtcn_layer_backward(d_h, cache["t_caches"][l])
        grads[f"temporal.{l}.gamma"] = d_gamma
        grads[f"temporal.{l}.bias"] = d_bias
        if d_gamma_gate is not None:
            grads[f"temporal.{l}.gamma_gate"] = d_gamma_gate
            grads[f"temporal.{l}.bias_gate"] = d_bias_gate

    d_h = d_spatial.reshape(*d_spatial.shape[:-3], -1)
    for l in reversed(range(len(cache["s_caches"]))):
        d_h, d_w, d_b, d_bias = dgcn_layer_backward(d_h, cache["s_caches"][l])
        grads[f"spatial.{l}.W"] = d_w
        grads[f"spatial.{l}.B"] = d_b
        if d_bias is not None:
            grads[f"spatial.{l}.bias"] = d_bias
    return grads


def backward(cache, param_grads, output, config):
    """Weight gradients from gradients w.r.t. the constrained head parameters.

    ``param_grads`` holds one array per head parameter (same order as the
    head's parameter tuple).  The activation chain rule is applied here.
    """
    _, derivs = config.head_impl()._activate(output.raw)
    d_raw = np.stack([g * d for g, d in zip(param_grads, derivs)], axis=-1)
    return backward_raw(cache, d_raw, config)


@dataclass
class DistributionSummary:
    kind: HeadKind
    params: tuple
    mean: np.ndarray
    q10: np.ndarray
    q90: np.ndarray

    def rows(self):
        """``(region, step, category, *params, mean, q10, q90)`` for one window."""
        if self.mean.ndim != 3:
            raise ValueError("rows() needs a single window (N, Q, C)")
        n, q, c = self.mean.shape
        for i in range(n):
            for s in range(q):
                for j in range(c):
                    yield (i, s, j, *(float(v[i, s, j]) for v in self.params),
                           float(self.mean[i, s, j]), self.q10[i, s, j], self.q90[i, s, j])


def summarize(output, config, lo=0.10, hi=0.90):
    head = config.head_impl()
    lower, upper = head.interval(output.params, lo, hi)
    return DistributionSummary(config.head, output.params, head.mean(output.params), lower, upper)


def predict_distribution(x, graph, weights, config):
    """Parameters, mean and 10%/90% quantiles for every (region, step, category)."""
    return summarize(forward(x, graph, weights, config), config)


# ---------------------------------------------------------------------------
# Serialization


def render_manifest(config, weights=None):
    lines = [MAGIC]
    lines += [f"config {item}" for item in config.echo()]
    head = config.head_impl()
    for name, act in zip(head.param_names, head.activations):
        lines.append(f"head {name} {_ACTIVATION_NOTES[act]}")
    for name, role, shape, _ in weight_layout(config):
        if weights is not None and weights[name].shape != shape:
            raise ConfigError(f"array {name} has shape {weights[name].shape}, config expects {shape}")
        lines.append(f"array {name} shape={'x'.join(str(s) for s in shape)} role={role}")
    lines.append(END)
    return "\n".join(lines) + "\n"


def save_weights(path, weights, config):
    manifest = render_manifest(config, weights).encode()
    body = b"".join(
        np.ascontiguousarray(weights[name], dtype="<f8").tobytes() for name, *_ in weight_layout(config)
    )
    Path(path).write_bytes(manifest + body)


def load_weights(path, config):
    """Load a weights file, insisting its manifest matches ``config`` exactly."""
    blob = Path(path).read_bytes()
    expected = render_manifest(config).encode()
    if blob[: len(expected)] != expected:
        stored = blob.split(b"\n" + END.encode() + b"\n", 1)[0].decode(errors="replace")
        want = expected.decode().splitlines()
        diff = [line for line in stored.splitlines() if line not in want][:3]
        raise ConfigError(f"weights manifest does not match config (first differences: {diff})")
    offset = len(expected)
    arrays, roles = {}, {}
    for name, role, shape, _ in weight_layout(config):
        count = int(np.prod(shape))
        chunk = blob[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise DataError(f"weights file truncated at array {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(float).reshape(shape)
        roles[name] = role
        offset += 8 * count
    if offset != len(blob):
        raise DataError("trailing bytes after the last weights array")
    return ModelWeights(arrays, roles)
