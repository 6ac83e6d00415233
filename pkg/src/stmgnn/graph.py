"""Region graphs over a rectangular km grid and the diffusion graph convolution.

A DGCN layer computes

    H_out = act(D^-1 A H W + H B [+ bias])

where ``D^-1 A`` is the row-normalized adjacency (a random-walk transition
matrix), ``W`` the propagation weights and ``B`` a learned self-projection
that keeps each node's own features in play.  Features may carry any number
of leading batch axes: ``H`` is ``(..., N, F_in)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid; region index is ``row * cols + col``, row 0 southmost."""

    rows: int
    cols: int
    cell_km: float = 3.0
    origin: tuple = (0.0, 0.0)  # (latitude, longitude) of the south-west corner

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if not self.cell_km > 0:
            raise ValueError("cell_km must be positive")

    @property
    def n_regions(self):
        return self.rows * self.cols

    def region(self, row, col):
        return row * self.cols + col

    def cell_of(self, region):
        return divmod(region, self.cols)


@dataclass
class GraphSpec:
    adjacency: np.ndarray
    degree: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if np.any(a < 0):
            raise ValueError("adjacency weights must be non-negative")
        self.adjacency = a
        self.degree = a.sum(axis=1)

    @property
    def n_regions(self):
        return self.adjacency.shape[0]


class Neighborhood(str, enum.Enum):
    ROOK4 = "rook4"
    QUEEN8 = "queen8"


def build_grid_adjacency(grid, scheme=Neighborhood.QUEEN8, self_loops=True):
    """Unit-weight grid graph; ROOK4 joins edge-sharing cells, QUEEN8 adds corners."""
    scheme = Neighborhood(scheme)
    if scheme is Neighborhood.ROOK4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    n = grid.n_regions
    a = np.zeros((n, n))
    for row in range(grid.rows):
        for col in range(grid.cols):
            i = grid.region(row, col)
            if self_loops:
                a[i, i] = 1.0
            for dr, dc in offsets:
                rr, cc = row + dr, col + dc
                if 0 <= rr < grid.rows and 0 <= cc < grid.cols:
                    a[i, grid.region(rr, cc)] = 1.0
    return GraphSpec(a)


def transition_matrix(graph):
    """``D^-1 A``; every row sums to one."""
    zero = np.flatnonzero(graph.degree <= 0)
    if zero.size:
        raise DataError(f"node {int(zero[0])} has zero degree; add self-loops")
    return graph.adjacency / graph.degree[:, None]


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"


def activate(z, kind):
    kind = Activation(kind)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def activation_grad(z, out, kind):
    kind = Activation(kind)
    if kind is Activation.RELU:
        return (z > 0).astype(float)
    if kind is Activation.TANH:
        return 1.0 - out * out
    return np.ones_like(z)


def dgcn_layer_forward(h, transition, w, b, activation=Activation.RELU, bias=None):
    """One diffusion graph convolution.

    Args:
        h: node features ``(..., N, F_in)``.
        transition: ``D^-1 A`` from :func:`transition_matrix` (or a GraphSpec).
        w: propagation weights ``(F_in, F_out)``.
        b: self-projection ``(F_in, F_out)``.
        activation: elementwise nonlinearity.
        bias: optional additive ``(F_out,)`` term inside the activation.

    Returns:
        ``(output, cache)``; the cache feeds :func:`dgcn_layer_backward`.
    """
    if isinstance(transition, GraphSpec):
        transition = transition_matrix(transition)
    h = np.asarray(h, dtype=float)
    n = transition.shape[0]
    if h.shape[-2] != n:
        raise ValueError(f"features have {h.shape[-2]} nodes, graph has {n}")
    if w.shape != b.shape or w.shape[0] != h.shape[-1]:
        raise ValueError(
            f"weight shapes {w.shape}/{b.shape} do not fit {h.shape[-1]} input features"
        )
    propagated = transition @ h
    z = propagated @ w + h @ b
    if bias is not None:
        z = z + bias
    out = activate(z, activation)
    return out, (h, propagated, transition, w, b, z, out, Activation(activation), bias is not None)


def dgcn_layer_backward(upstream, cache):
    """Gradients ``(d_h, d_w, d_b, d_bias)``; ``d_bias`` is None without a bias."""
    h, propagated, transition, w, b, z, out, activation, has_bias = cache
    dz = upstream * activation_grad(z, out, activation)
    flat_dz = dz.reshape(-1, dz.shape[-1])
    d_w = propagated.reshape(-1, propagated.shape[-1]).T @ flat_dz
    d_b = h.reshape(-1, h.shape[-1]).T @ flat_dz
    d_h = transition.T @ (dz @ w.T) + dz @ b.T
    d_bias = dz.sum(axis=tuple(range(dz.ndim - 1))) if has_bias else None
    return d_h, d_w, d_b, d_bias


def write_edge_list(graph, path):
    """Header ``n_regions`` then ``i j weight`` for every nonzero entry, row-major."""
    a = graph.adjacency
    lines = [str(graph.n_regions)]
    for i, j in zip(*np.nonzero(a)):
        lines.append(f"{i} {j} {float(a[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path):
    lines = Path(path).read_text().split("\n")
    try:
        n = int(lines[0])
        a = np.zeros((n, n))
        for line in lines[1:]:
            if line.strip():
                i, j, weight = line.split()
                a[int(i), int(j)] = float(weight)
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed edge list {path}: {exc}") from exc
    return GraphSpec(a)

