"""Uncertainty measures (Max.P, Ent., M.I., D.Ent.) for three prediction sources.

* DNN: a single categorical prediction.
* MCDP: an ensemble of categoricals from stochastic forward passes.
* DPN: a Dirichlet over categoricals.

The ``*_measures`` functions are batched and return a dict of arrays keyed
by measure name; ``scores_from_*`` wrap them for one input.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dirichlet as dir_
from .dirichlet import Categorical, DirichletParams

__all__ = [
    "MEASURES",
    "EnsemblePrediction",
    "UncertaintyScores",
    "categorical_measures",
    "ensemble_measures",
    "dirichlet_measures",
    "scores_from_categorical",
    "scores_from_ensemble",
    "scores_from_dirichlet",
]

MAX_PROB = "max_prob"
ENTROPY = "entropy"
MUTUAL_INFORMATION = "mutual_information"
DIFFERENTIAL_ENTROPY = "differential_entropy"

# table column order
MEASURES = (MAX_PROB, ENTROPY, MUTUAL_INFORMATION, DIFFERENTIAL_ENTROPY)


@dataclass(frozen=True)
class EnsemblePrediction:
    """``M`` categorical predictions for one input, shape ``(M, K)``."""

    members: np.ndarray

    def __post_init__(self):
        members = np.array(self.members, dtype=np.float64)
        if members.ndim != 2 or members.shape[0] < 1 or members.shape[1] < 2:
            raise ValueError("members must have shape (M >= 1, K >= 2)")
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def size(self):
        return self.members.shape[0]


@dataclass(frozen=True)
class UncertaintyScores:
    max_prob: float
    entropy: float
    mutual_information: Optional[float] = None
    differential_entropy: Optional[float] = None


def categorical_measures(probs):
    """Max.P and Ent. of categoricals ``probs`` with shape ``(..., K)``."""
    probs = np.asarray(probs, dtype=np.float64)
    return {
        MAX_PROB: probs.max(axis=-1),
        ENTROPY: dir_.categorical_entropy(probs),
    }


def ensemble_measures(member_probs):
    """Measures of an ensemble with member axis first: ``(M, ..., K)``.

    Mutual information is the entropy of the member average minus the
    average member entropy, clipped at 0 against rounding.
    """
    member_probs = np.asarray(member_probs, dtype=np.float64)
    # averaging M equal floats can move the last bit; agreeing members are exact
    agree = np.all(member_probs == member_probs[:1], axis=(0, -1))
    avg = np.where(agree[..., None], member_probs[0], member_probs.mean(axis=0))
    out = categorical_measures(avg)
    expected = np.mean(dir_.categorical_entropy(member_probs), axis=0)
    mi = np.where(agree, 0.0, np.maximum(out[ENTROPY] - expected, 0.0))
    out[MUTUAL_INFORMATION] = mi
    return out


def dirichlet_measures(alpha):
    """All four measures for concentrations ``alpha`` of shape ``(..., K)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = categorical_measures(dir_.mean(alpha))
    out[MUTUAL_INFORMATION] = dir_.mutual_information(alpha)
    out[DIFFERENTIAL_ENTROPY] = dir_.differential_entropy(alpha)
    return out


def _scores(values):
    return UncertaintyScores(**{k: float(v) for k, v in values.items()})


def scores_from_categorical(mu):
    if isinstance(mu, Categorical):
        mu = mu.mu
    return _scores(categorical_measures(mu))


def scores_from_ensemble(e):
    if not isinstance(e, EnsemblePrediction):
        e = EnsemblePrediction(e)
    return _scores(ensemble_measures(e.members))


def scores_from_dirichlet(d):
    if isinstance(d, DirichletParams):
        d = d.alpha
    return _scores(dirichlet_measures(d))
