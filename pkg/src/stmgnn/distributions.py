"""Count and continuous distribution heads.

Four output families are supported: zero-inflated negative binomial (ZINB),
negative binomial (NB), Gaussian and a Gaussian truncated to ``[0, inf)``.

The NB part follows the orientation

    P(Y = y) = Gamma(y + r) / (Gamma(r) Gamma(y + 1)) * p**y * (1 - p)**r

so that the mean is ``r p / (1 - p)``.  With ``scipy.stats.nbinom`` this is
``nbinom(n=r, p=1 - p)``.

Every head exposes the same surface (``nll``, ``nll_grad``, ``nll_grad_raw``,
``mean``, ``quantile``, ``sample``, ``pmf_table``) so the model does not care
which family it is fitting.  "Raw" coordinates are the unconstrained network
outputs; ``activate`` maps them onto the parameter domain:

    probability  -> clip(sigmoid(raw), eps, 1 - eps)
    positive     -> max(softplus(raw), eps)
    real         -> raw
"""

from __future__ import annotations

import enum
import math
from typing import NamedTuple

import numpy as np
from scipy import special, stats

from .errors import NumericalError, first_bad_index

CLAMP_EPS = 1e-6
# Slack when comparing a CDF against a quantile level; absorbs summation
# round-off at exact hits such as CDF(1) == 0.9.
CDF_SLACK = 1e-12
PMF_FLOOR = 1e-12


class ZinbParams(NamedTuple):
    pi: np.ndarray
    p: np.ndarray
    r: np.ndarray


class NbParams(NamedTuple):
    p: np.ndarray
    r: np.ndarray


class GaussianParams(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


class TruncNormalParams(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


def _as_float(params):
    return type(params)(*(np.asarray(v, dtype=float) for v in params))


def _check_open_unit(name, x):
    if np.any(~((x > 0) & (x < 1))):
        bad = np.argwhere(~((x > 0) & (x < 1)).reshape(np.shape(x) or (1,)))[0]
        raise ValueError(f"{name} must lie in (0, 1); offending index {tuple(bad)}")


def _check_positive(name, x):
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be positive")


def _check_counts(y):
    y = np.asarray(y)
    if y.dtype.kind not in "iub":
        yf = np.asarray(y, dtype=float)
        if np.any(~np.isfinite(yf)) or np.any(yf != np.round(yf)):
            raise ValueError("counts must be integers")
        y = yf
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    return np.asarray(y, dtype=float)


def validate_zinb(params):
    params = _as_float(params)
    _check_open_unit("pi", params.pi)
    _check_open_unit("p", params.p)
    _check_positive("r", params.r)
    return params


def validate_nb(params):
    params = _as_float(params)
    _check_open_unit("p", params.p)
    _check_positive("r", params.r)
    return params


def _check_nll(values):
    if not np.all(np.isfinite(values)):
        raise NumericalError(
            f"non-finite log-likelihood at index {first_bad_index(values)} "
            "(parameter underflow)"
        )
    return values


def _reduce(values, reduction):
    if reduction == "sum":
        return float(np.sum(values))
    if reduction == "mean":
        return float(np.mean(values))
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Negative binomial core (shared by ZINB and NB)


def nb_logpmf(y, params):
    y = np.asarray(y, dtype=float)
    p, r = params
    return (
        special.gammaln(y + r)
        - special.gammaln(r)
        - special.gammaln(y + 1.0)
        + y * np.log(p)
        + r * np.log1p(-p)
    )


def nb_cdf(y, params):
    """P(Y <= y) via the regularized incomplete beta function."""
    p, r = params
    y = np.floor(np.asarray(y, dtype=float))
    safe = np.where(y < 0, 0.0, y)
    return np.where(y < 0, 0.0, special.betainc(r, safe + 1.0, 1.0 - p))


def _nb_quantile(tau, p, r):
    """Smallest q >= 0 with NB CDF(q) >= tau, elementwise (tau may be <= 0)."""
    tau, p, r = np.broadcast_arrays(
        np.asarray(tau, float), np.asarray(p, float), np.asarray(r, float)
    )
    guess = stats.nbinom.ppf(np.clip(tau, 0.0, 1.0), r, 1.0 - p)
    q = np.where(tau <= 0, 0.0, np.nan_to_num(guess, nan=0.0, posinf=0.0))
    q = np.maximum(q, 0.0)
    # ppf is only approximately right at exact CDF hits; walk to the contract.
    for _ in range(1000):
        low = nb_cdf(q, (p, r)) < tau - CDF_SLACK
        high = (q > 0) & (nb_cdf(q - 1, (p, r)) >= tau - CDF_SLACK)
        if not (low.any() or high.any()):
            break
        q = q + low - high
    return q


def nb_mean(params):
    params = validate_nb(params)
    return params.r * params.p / (1.0 - params.p)


def nb_nll(y, params, reduction="sum"):
    y = _check_counts(y)
    params = validate_nb(params)
    return _reduce(_check_nll(-nb_logpmf(y, params)), reduction)


def nb_nll_grad(y, params):
    y = _check_counts(y)
    p, r = validate_nb(params)
    d_p = -(y / p - r / (1.0 - p))
    d_r = -(special.digamma(y + r) - special.digamma(r) + np.log1p(-p))
    return NbParams(d_p, d_r)


def nb_sample(params, rng, size=None):
    p, r = validate_nb(params)
    lam = rng.gamma(shape=r, scale=p / (1.0 - p), size=size)
    return rng.poisson(lam)


# ---------------------------------------------------------------------------
# Zero-inflated negative binomial


def zinb_logpmf(y, params):
    y = np.asarray(y, dtype=float)
    pi, p, r = params
    log_nb0 = r * np.log1p(-p)
    zero = np.logaddexp(np.log(pi), np.log1p(-pi) + log_nb0)
    positive = np.log1p(-pi) + nb_logpmf(np.maximum(y, 1.0), (p, r))
    return np.where(y == 0, zero, positive)


def zinb_pmf(y, params):
    """P(Y = y) for the zero-inflated negative binomial.

    Args:
        y: non-negative integer count(s).
        params: ``ZinbParams`` with ``0 < pi, p < 1`` and ``r > 0``.

    Returns:
        Probability with the broadcast shape of ``y`` and the parameters.
    """
    y = _check_counts(y)
    params = validate_zinb(params)
    out = np.exp(zinb_logpmf(y, params))
    return float(out) if np.ndim(out) == 0 else out


def zinb_cdf(y, params):
    pi, p, r = params
    y = np.asarray(y, dtype=float)
    return np.where(y < 0, 0.0, pi + (1.0 - pi) * nb_cdf(y, (p, r)))


def zinb_nll(y, params, reduction="sum"):
    """Negative log-likelihood, evaluated in log space.

    ``reduction`` is ``"sum"`` (default), ``"mean"`` or ``"none"`` for the
    elementwise array.
    """
    y = _check_counts(y)
    params = validate_zinb(params)
    return _reduce(_check_nll(-zinb_logpmf(y, params)), reduction)


def zinb_nll_grad(y, params):
    """Elementwise partial derivatives of the NLL w.r.t. (pi, p, r)."""
    y = _check_counts(y)
    pi, p, r = validate_zinb(params)
    log1m_p = np.log1p(-p)
    log_q = r * log1m_p
    q = np.exp(log_q)
    log_p0 = np.logaddexp(np.log(pi), np.log1p(-pi) + log_q)
    # share of the zero mass coming from the count component
    w = np.exp(np.log1p(-pi) + log_q - log_p0)
    zero = y == 0
    d_pi = np.where(zero, -(1.0 - q) / np.exp(log_p0), 1.0 / (1.0 - pi))
    d_p = np.where(zero, w * r / (1.0 - p), -(y / p - r / (1.0 - p)))
    d_r_pos = -(special.digamma(y + r) - special.digamma(r) + log1m_p)
    d_r = np.where(zero, -w * log1m_p, d_r_pos)
    return ZinbParams(d_pi, d_p, d_r)


def zinb_mean(params):
    pi, p, r = validate_zinb(params)
    return (1.0 - pi) * r * p / (1.0 - p)


def zinb_quantile(params, tau):
    """Smallest integer q with CDF(q) >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    pi, p, r = validate_zinb(params)
    tau_nb = (tau - pi) / (1.0 - pi)
    out = _nb_quantile(tau_nb, p, r).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def zinb_sample(params, rng, size=None):
    """Structural zero with probability pi, otherwise a gamma-Poisson NB draw."""
    pi, p, r = np.broadcast_arrays(*validate_zinb(params))
    shape = pi.shape if size is None else size
    structural = rng.random(size=shape) < pi
    counts = nb_sample(NbParams(p, r), rng, size=shape)
    return np.where(structural, 0, counts)


# ---------------------------------------------------------------------------
# Continuous heads


def _gauss_check(params):
    params = _as_float(params)
    _check_positive("sigma", params.sigma)
    return params


def gaussian_nll(y, params, reduction="sum"):
    mu, sigma = _gauss_check(params)
    z = (np.asarray(y, float) - mu) / sigma
    values = 0.5 * math.log(2 * math.pi) + np.log(sigma) + 0.5 * z * z
    return _reduce(_check_nll(values), reduction)


def gaussian_nll_grad(y, params):
    mu, sigma = _gauss_check(params)
    z = (np.asarray(y, float) - mu) / sigma
    return GaussianParams(-z / sigma, (1.0 - z * z) / sigma)


def gaussian_cdf(x, params):
    mu, sigma = params
    return special.ndtr((np.asarray(x, float) - mu) / sigma)


def _mills(a):
    """phi(a) / Phi(a), stable for very negative a."""
    return np.exp(stats.norm.logpdf(a) - special.log_ndtr(a))


def truncnorm_nll(y, params, reduction="sum"):
    mu, sigma = _gauss_check(params)
    y = np.asarray(y, float)
    if np.any(y < 0):
        raise ValueError("truncated normal support is [0, inf)")
    z = (y - mu) / sigma
    values = (
        0.5 * math.log(2 * math.pi)
        + np.log(sigma)
        + 0.5 * z * z
        + special.log_ndtr(mu / sigma)
    )
    return _reduce(_check_nll(values), reduction)


def truncnorm_nll_grad(y, params):
    mu, sigma = _gauss_check(params)
    z = (np.asarray(y, float) - mu) / sigma
    a = mu / sigma
    lam = _mills(a)
    return TruncNormalParams((lam - z) / sigma, (1.0 - z * z - lam * a) / sigma)


def truncnorm_mean(params):
    mu, sigma = _gauss_check(params)
    return mu + sigma * _mills(mu / sigma)


def truncnorm_cdf(x, params):
    mu, sigma = params
    x = np.asarray(x, float)
    z = (np.maximum(x, 0.0) - mu) / sigma
    survival = np.exp(special.log_ndtr(-z) - special.log_ndtr(mu / sigma))
    return np.where(x <= 0, 0.0, 1.0 - survival)


def truncnorm_quantile(params, tau, tol=1e-9, max_iter=200):
    """Invert the renormalized CDF by bisection to ``tol`` on the CDF."""
    mu, sigma = _gauss_check(params)
    mu, sigma = np.broadcast_arrays(mu, sigma)
    lo = np.zeros(mu.shape)
    hi = np.maximum(mu, 0.0) + 10.0 * sigma
    for _ in range(200):
        short = truncnorm_cdf(hi, (mu, sigma)) < tau
        if not short.any():
            break
        hi = np.where(short, 2.0 * hi, hi)
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        c = truncnorm_cdf(mid, (mu, sigma))
        if np.all(np.abs(c - tau) <= tol):
            break
        below = c < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return float(mid) if mid.ndim == 0 else mid


# ---------------------------------------------------------------------------
# Activations


def _sigmoid_clamped(raw, eps):
    s = special.expit(raw)
    inside = (s > eps) & (s < 1.0 - eps)
    return np.clip(s, eps, 1.0 - eps), np.where(inside, s * (1.0 - s), 0.0)


def _softplus_clamped(raw, eps):
    sp = np.logaddexp(0.0, raw)
    return np.maximum(sp, eps), np.where(sp > eps, special.expit(raw), 0.0)


def _identity(raw, eps):
    return raw, np.ones_like(raw)


_ACTIVATIONS = {
    "sigmoid": _sigmoid_clamped,
    "softplus": _softplus_clamped,
    "identity": _identity,
}


# ---------------------------------------------------------------------------
# Head interface


class HeadKind(str, enum.Enum):
    ZINB = "zinb"
    NB = "nb"
    GAUSSIAN = "gaussian"
    TRUNC_NORMAL = "trunc_normal"


class DistributionHead:
    """Uniform distribution interface used by the model, training and metrics.

    Subclasses set ``kind``, ``params_type`` and ``activations`` (one
    activation name per parameter, in parameter order).
    """

    kind: HeadKind
    params_type: type
    activations: tuple
    discrete = True

    def __init__(self, eps=CLAMP_EPS):
        self.eps = eps

    @property
    def n_params(self):
        return len(self.params_type._fields)

    @property
    def param_names(self):
        return self.params_type._fields

    def activate(self, raw):
        """Map raw ``(..., K)`` network outputs onto the parameter domain."""
        values, _ = self._activate(raw)
        return self.params_type(*values)

    def _activate(self, raw):
        raw = np.asarray(raw, float)
        if raw.shape[-1] != self.n_params:
            raise ValueError(f"{self.kind.value} head expects {self.n_params} raw channels")
        values, derivs = [], []
        for k, name in enumerate(self.activations):
            v, d = _ACTIVATIONS[name](raw[..., k], self.eps)
            values.append(v)
            derivs.append(d)
        return values, derivs

    def nll_grad_raw(self, y, raw):
        """Gradient of the elementwise NLL w.r.t. raw outputs, shape ``(..., K)``."""
        values, derivs = self._activate(raw)
        grads = self.nll_grad(y, self.params_type(*values))
        return np.stack([g * d for g, d in zip(grads, derivs)], axis=-1)

    def interval(self, params, lo=0.10, hi=0.90):
        return self.quantile(params, lo), self.quantile(params, hi)

    def nll(self, y, params, reduction="sum"):
        raise NotImplementedError

    def nll_grad(self, y, params):
        raise NotImplementedError

    def mean(self, params):
        raise NotImplementedError

    def quantile(self, params, tau):
        raise NotImplementedError

    def sample(self, params, rng):
        raise NotImplementedError

    def pmf_table(self, params, y_max):
        """Probability of each count 0..y_max, shape ``(..., y_max + 1)``."""
        raise NotImplementedError


class ZinbHead(DistributionHead):
    kind = HeadKind.ZINB
    params_type = ZinbParams
    activations = ("sigmoid", "sigmoid", "softplus")

    def nll(self, y, params, reduction="sum"):
        return zinb_nll(y, params, reduction)

    def nll_grad(self, y, params):
        return zinb_nll_grad(y, params)

    def mean(self, params):
        return zinb_mean(params)

    def quantile(self, params, tau):
        return zinb_quantile(params, tau)

    def sample(self, params, rng):
        return zinb_sample(params, rng)

    def pmf_table(self, params, y_max):
        ys = np.arange(y_max + 1, dtype=float)
        expanded = ZinbParams(*(np.asarray(v, float)[..., None] for v in params))
        return np.exp(zinb_logpmf(ys, expanded))


class NbHead(DistributionHead):
    """ZINB with the inflation probability pinned to zero."""

    kind = HeadKind.NB
    params_type = NbParams
    activations = ("sigmoid", "softplus")

    def nll(self, y, params, reduction="sum"):
        return nb_nll(y, params, reduction)

    def nll_grad(self, y, params):
        return nb_nll_grad(y, params)

    def mean(self, params):
        return nb_mean(params)

    def quantile(self, params, tau):
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        p, r = validate_nb(params)
        return _nb_quantile(tau, p, r).astype(np.int64)

    def sample(self, params, rng):
        return nb_sample(params, rng)

    def pmf_table(self, params, y_max):
        ys = np.arange(y_max + 1, dtype=float)
        p, r = (np.asarray(v, float)[..., None] for v in params)
        return np.exp(nb_logpmf(ys, (p, r)))


class GaussianHead(DistributionHead):
    kind = HeadKind.GAUSSIAN
    params_type = GaussianParams
    activations = ("identity", "softplus")
    discrete = False

    def nll(self, y, params, reduction="sum"):
        return gaussian_nll(y, params, reduction)

    def nll_grad(self, y, params):
        return gaussian_nll_grad(y, params)

    def mean(self, params):
        return np.asarray(params.mu, float)

    def quantile(self, params, tau):
        mu, sigma = _gauss_check(params)
        return mu + sigma * special.ndtri(tau)

    def sample(self, params, rng):
        return rng.normal(params.mu, params.sigma)

    def pmf_table(self, params, y_max):
        # unit bins [y - 0.5, y + 0.5); the zero bin extends to -inf
        edges = np.arange(y_max + 2, dtype=float) - 0.5
        mu, sigma = (np.asarray(v, float)[..., None] for v in params)
        cdf = gaussian_cdf(edges, (mu, sigma))
        cdf[..., 0] = 0.0
        return np.diff(cdf, axis=-1)


class TruncNormalHead(DistributionHead):
    kind = HeadKind.TRUNC_NORMAL
    params_type = TruncNormalParams
    activations = ("identity", "softplus")
    discrete = False

    def nll(self, y, params, reduction="sum"):
        return truncnorm_nll(y, params, reduction)

    def nll_grad(self, y, params):
        return truncnorm_nll_grad(y, params)

    def mean(self, params):
        return truncnorm_mean(params)

    def quantile(self, params, tau):
        return truncnorm_quantile(params, tau)

    def sample(self, params, rng):
        mu, sigma = _gauss_check(params)
        return stats.truncnorm.rvs(
            -mu / sigma, np.inf, loc=mu, scale=sigma, random_state=rng
        )

    def pmf_table(self, params, y_max):
        # unit bins [y - 0.5, y + 0.5); the zero bin starts at 0
        edges = np.arange(y_max + 2, dtype=float) - 0.5
        mu, sigma = (np.asarray(v, float)[..., None] for v in params)
        return np.diff(truncnorm_cdf(edges, (mu, sigma)), axis=-1)


_HEADS = {
    HeadKind.ZINB: ZinbHead,
    HeadKind.NB: NbHead,
    HeadKind.GAUSSIAN: GaussianHead,
    HeadKind.TRUNC_NORMAL: TruncNormalHead,
}


def head_family(kind, eps=CLAMP_EPS):
    """Return the distribution head for ``kind`` (a ``HeadKind`` or its name)."""
    try:
        kind = HeadKind(kind.lower() if isinstance(kind, str) else kind)
    except ValueError:
        raise ValueError(f"unknown head kind {kind!r}") from None
    return _HEADS[kind](eps)
