"""Relative squared-error metrics for filtering, equation learning and
operator learning, averaged over a set of functions."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

__all__ = ["relative_sq_error", "mean_relative_error", "r_filter", "r_eql", "r_opl"]


def relative_sq_error(truth, estimate) -> float:
    """``|truth - estimate|^2 / |truth|^2``; NaN when the truth vanishes."""
    truth = np.asarray(truth, dtype=float).ravel()
    estimate = np.asarray(estimate, dtype=float).ravel()
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {estimate.shape}")
    den = float(truth @ truth)
    if den == 0.0:
        return math.nan
    diff = truth - estimate
    return float(diff @ diff) / den


def mean_relative_error(truths: Sequence, estimates: Sequence) -> float:
    if len(truths) != len(estimates) or len(truths) == 0:
        raise ValueError("need matching, nonempty lists of truths and estimates")
    return float(np.mean([relative_sq_error(t, e) for t, e in zip(truths, estimates)]))


def r_filter(truths: Sequence, estimates: Sequence) -> float:
    """Mean over training functions of ``|u - u_hat|^2 / |u|^2`` on the test grid."""
    return mean_relative_error(truths, estimates)


def r_eql(true_values: Sequence, learned_values: Sequence) -> float:
    """Mean over ``W`` of ``|P(w) - P_hat(w)|^2 / |P(w)|^2`` on the test grid."""
    return mean_relative_error(true_values, learned_values)


def r_opl(true_solutions: Sequence, learned_solutions: Sequence) -> float:
    """Mean over ``W`` of the relative squared error of the learned solution map."""
    return mean_relative_error(true_solutions, learned_solutions)
