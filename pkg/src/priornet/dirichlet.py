"""Dirichlet distribution over the probability simplex.

All quantities are in nats.  Functions take a :class:`DirichletParams`
or a raw concentration array; arrays may be batched over leading axes
with classes on the last axis, in which case the result is an array with
the class axis reduced.
"""

from dataclasses import dataclass

import numpy as np

from .special import digamma, ln_gamma

__all__ = [
    "DirichletParams",
    "Categorical",
    "log_pdf",
    "mean",
    "differential_entropy",
    "expected_data_entropy",
    "mutual_information",
    "kl_divergence",
    "categorical_entropy",
    "sample_log",
]


@dataclass(frozen=True)
class DirichletParams:
    """Concentration vector ``alpha`` of a K-class Dirichlet, K >= 2."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 2:
            raise ValueError("alpha must be a vector with at least 2 entries")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise ValueError("every concentration must be finite and > 0")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def num_classes(self):
        return self.alpha.size

    @property
    def precision(self):
        return float(self.alpha.sum())


@dataclass(frozen=True)
class Categorical:
    """Probability vector ``mu`` on the simplex."""

    mu: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector with at least 2 entries")
        if np.any(mu < 0.0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ValueError("mu must be non-negative and sum to 1")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)


def _alpha(d):
    if isinstance(d, DirichletParams):
        return d.alpha
    alpha = np.asarray(d, dtype=np.float64)
    if alpha.ndim == 0 or alpha.shape[-1] < 2:
        raise ValueError("concentrations need a class axis of size >= 2")
    if np.any(alpha <= 0.0) or not np.all(np.isfinite(alpha)):
        raise ValueError("every concentration must be finite and > 0")
    return alpha


def _probs(mu):
    if isinstance(mu, Categorical):
        return mu.mu
    return np.asarray(mu, dtype=np.float64)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _xlogy(a, b):
    # a * log(b) with 0 * log(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a == 0.0, 0.0, a * np.log(np.where(b == 0.0, 1.0, b)))


def log_pdf(d, mu):
    """Log density ``ln Dir(mu | alpha)``.

    Boundary convention for ``mu_c = 0``: the factor contributes 0 when
    ``alpha_c == 1`` and ``-inf`` when ``alpha_c > 1``.  ``alpha_c < 1``
    at the boundary is a divergent density and raises ``ValueError``.
    """
    alpha = _alpha(d)
    mu = _probs(mu)
    at_zero = mu == 0.0
    if np.any(at_zero & (alpha < 1.0)):
        raise ValueError("density diverges at mu_c = 0 when alpha_c < 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(at_zero & (alpha == 1.0), 0.0, (alpha - 1.0) * np.log(mu))
    norm = ln_gamma(alpha.sum(axis=-1)) - ln_gamma(alpha).sum(axis=-1)
    return _out(norm + terms.sum(axis=-1))


def mean(d):
    """Expected categorical, ``alpha / alpha_0``."""
    alpha = _alpha(d)
    m = alpha / alpha.sum(axis=-1, keepdims=True)
    if isinstance(d, DirichletParams):
        # division leaves the sum within K ulp of 1, well inside the 1e-12 check
        return Categorical(m)
    return m


def differential_entropy(d):
    alpha = _alpha(d)
    alpha0 = alpha.sum(axis=-1)
    psi0 = digamma(alpha0)
    ent = (
        ln_gamma(alpha).sum(axis=-1)
        - ln_gamma(alpha0)
        - ((alpha - 1.0) * (digamma(alpha) - np.expand_dims(psi0, -1))).sum(axis=-1)
    )
    return _out(ent)


def expected_data_entropy(d):
    """``E_{mu ~ Dir(alpha)} H[Cat(mu)]``, the expected entropy of a draw."""
    alpha = _alpha(d)
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    m = alpha / alpha0
    return _out(-(m * (digamma(alpha + 1.0) - digamma(alpha0 + 1.0))).sum(axis=-1))


def mutual_information(d):
    """Mutual information between the label and the categorical ``mu``.

    Equal to the entropy of the mean minus :func:`expected_data_entropy`.
    """
    alpha = _alpha(d)
    alpha0 = alpha.sum(axis=-1, keepdims=True)
    m = alpha / alpha0
    inner = np.log(m) - digamma(alpha + 1.0) + digamma(alpha0 + 1.0)
    return _out(-(m * inner).sum(axis=-1))


def kl_divergence(p, q):
    """``KL[Dir(p) || Dir(q)]``."""
    a = _alpha(p)
    b = _alpha(q)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    a0 = a.sum(axis=-1)
    b0 = b.sum(axis=-1)
    kl = (
        ln_gamma(a0)
        - ln_gamma(b0)
        + (ln_gamma(b) - ln_gamma(a)).sum(axis=-1)
        + ((a - b) * (digamma(a) - np.expand_dims(digamma(a0), -1))).sum(axis=-1)
    )
    return _out(kl)


def categorical_entropy(mu):
    """Shannon entropy ``-sum mu_c ln mu_c`` with ``0 ln 0 = 0``."""
    mu = _probs(mu)
    return _out(-_xlogy(mu, mu).sum(axis=-1))


def sample_log(d, size, rng):
    """Draw ``size`` samples of ``ln mu`` with ``mu ~ Dir(alpha)``.

    Works in log space so that tiny concentrations do not underflow to
    ``mu_c = 0``: a Gamma(a) variate is drawn as Gamma(a + 1) * U^(1/a).
    Returns an array of shape ``(size, K)``.
    """
    alpha = _alpha(d)
    if alpha.ndim != 1:
        raise ValueError("sample_log expects a single concentration vector")
    g = rng.standard_gamma(alpha + 1.0, size=(size, alpha.size))
    u = rng.random((size, alpha.size))
    log_g = np.log(g) + np.log1p(-u) / alpha
    top = log_g.max(axis=1, keepdims=True)
    return log_g - top - np.log(np.exp(log_g - top).sum(axis=1, keepdims=True))
