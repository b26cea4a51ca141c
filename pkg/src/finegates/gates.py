"""Gaussian-relaxed stochastic gates and their expected-l0 sparsity penalty.

A gate is ``clamp01(0.5 + mu + eps)`` with ``eps ~ N(0, sigma^2)`` and a fixed
``sigma = 0.5``. The probability that it is nonzero has the closed form
``1/2 - 1/2 * erf(-(mu + 0.5) / (sqrt(2) * sigma))``, which is what the
sparsity penalty differentiates.
"""

import csv
import enum
import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

SIGMA = 0.5
MU_INIT = 0.5
MU_MIN, MU_MAX = -1.0, 1.0


class SparsityLossMode(str, enum.Enum):
    HINGE = "hinge"
    PAPER_LITERAL = "paper_literal"


class GateVector:
    """Trainable gate parameters ``mu`` for one side (rows or columns) of a matrix."""

    def __init__(self, d, mu=None, sigma=SIGMA, name=None):
        if mu is None:
            mu = np.full(d, MU_INIT)
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape != (d,):
            raise DimensionError(f"gate vector of length {d} given mu of shape {mu.shape}")
        self.mu = ad.Tensor(mu.copy(), requires_grad=True, name=name)
        self.sigma = float(sigma)
        self.name = name

    def __len__(self):
        return self.mu.shape[0]

    def __repr__(self):
        return f"GateVector(d={len(self)}, name={self.name!r})"

    def project(self):
        """Clip mu back onto [-1, 1] in place; run after every optimizer step."""
        np.clip(self.mu.data, MU_MIN, MU_MAX, out=self.mu.data)

    def draw_noise(self, rng):
        return rng.normal(0.0, self.sigma, size=len(self))


def sample_train_gates(g, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (len(g),):
        raise DimensionError(f"noise of shape {noise.shape} for gate vector of length {len(g)}")
    return ad.clamp01(g.mu + (0.5 + noise))


def eval_gates(g):
    return np.clip(0.5 + g.mu.data, 0.0, 1.0)


def open_probabilities(g):
    """Per-gate P(gate > 0) as a differentiable tensor."""
    z = (g.mu + 0.5) * (-1.0 / (math.sqrt(2.0) * g.sigma))
    return 0.5 - 0.5 * ad.erf_op(z)


def expected_open_fraction(g):
    return ad.mean(open_probabilities(g))


def sparsity_loss(g, s, mode=SparsityLossMode.HINGE):
    """Penalty on the expected open fraction of ``g`` for target zero-fraction ``s``.

    ``hinge`` is ``max(open - (1 - s), 0)`` and vanishes once the expected
    sparsity reaches ``s``. ``paper_literal`` is ``max(open, s)``.
    """
    if not 0.0 <= s < 1.0:
        raise ConfigError(f"target sparsity must lie in [0, 1), got {s}")
    mode = SparsityLossMode(mode)
    open_ = expected_open_fraction(g)
    if mode is SparsityLossMode.HINGE:
        return ad.maximum(open_ - (1.0 - s), 0.0)
    return ad.maximum(open_, s)


def hard_mask(g, threshold=0.0):
    return eval_gates(g) > threshold


REPORT_COLUMNS = ("layer", "gate_side", "index", "mu", "eval_gate", "kept")


def report_rows(layer, side, g, threshold=0.0):
    ev = eval_gates(g)
    keep = ev > threshold
    for j, (m, e, k) in enumerate(zip(g.mu.data, ev, keep)):
        yield {
            "layer": layer,
            "gate_side": side,
            "index": j,
            "mu": repr(float(m)),
            "eval_gate": repr(float(e)),
            "kept": int(k),
        }


def write_report(path_or_file, rows):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    finally:
        if own:
            fh.close()
