"""Reduction of per-subframe 2D positional gradients into one statistic.

Every reducer works component-wise over a stack of shape ``(n, G, 2)``.
The ``*_weights`` functions return the selection weights ``s`` (same shape)
so that ``aggregate = sum_i s_i * stack_i``; the training loop reuses those
weights to route the aggregated signal back to world-space means.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyStack, ParameterOutOfRange

MODES = ("max", "mean", "topk")


def _check(stack) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 0 or stack.shape[0] == 0:
        raise EmptyStack("cannot aggregate an empty subframe stack")
    return stack


def _topk_mask(stack: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest magnitudes along axis 0.

    A stable sort on ``-|x|`` breaks ties towards the lower subframe index.
    """
    order = np.argsort(-np.abs(stack), axis=0, kind="stable")
    mask = np.zeros(stack.shape, dtype=bool)
    np.put_along_axis(mask, order[:k], True, axis=0)
    return mask


def max_weights(stack) -> np.ndarray:
    stack = _check(stack)
    return _topk_mask(stack, 1).astype(np.float64)


def mean_weights(stack) -> np.ndarray:
    stack = _check(stack)
    return np.full(stack.shape, 1.0 / stack.shape[0])


def topk_weights(stack, k: int) -> np.ndarray:
    stack = _check(stack)
    n = stack.shape[0]
    if not 1 <= k <= n:
        raise ParameterOutOfRange(f"top-k needs 1 <= k <= {n}, got k={k}")
    return _topk_mask(stack, k) / float(k)


def aggregate_max(stack) -> np.ndarray:
    """The signed entry of largest magnitude; ties go to the earliest subframe."""
    stack = _check(stack)
    idx = np.argmax(np.abs(stack), axis=0)
    return np.take_along_axis(stack, idx[None], axis=0)[0]


def aggregate_mean(stack) -> np.ndarray:
    stack = _check(stack)
    return np.add.reduce(stack, axis=0) / stack.shape[0]


def aggregate_topk(stack, k: int) -> np.ndarray:
    """Mean of the ``k`` largest-magnitude entries, summed in subframe order.

    Keeping the subframe order makes ``k = n`` agree bit-for-bit with
    :func:`aggregate_mean` and ``k = 1`` with :func:`aggregate_max`.
    """
    stack = _check(stack)
    n = stack.shape[0]
    if not 1 <= k <= n:
        raise ParameterOutOfRange(f"top-k needs 1 <= k <= {n}, got k={k}")
    picked = np.where(_topk_mask(stack, k), stack, 0.0)
    if k == 1:
        # x + 0.0 would turn -0.0 into +0.0
        return aggregate_max(stack)
    return np.add.reduce(picked, axis=0) / k


def selection_weights(stack, mode: str = "max", k: int = 3) -> np.ndarray:
    if mode == "max":
        return max_weights(stack)
    if mode == "mean":
        return mean_weights(stack)
    if mode == "topk":
        return topk_weights(stack, min(k, _check(stack).shape[0]))
    raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {MODES}")


def aggregate(stack, mode: str = "max", k: int = 3) -> np.ndarray:
    if mode == "max":
        return aggregate_max(stack)
    if mode == "mean":
        return aggregate_mean(stack)
    if mode == "topk":
        return aggregate_topk(stack, min(k, _check(stack).shape[0]))
    raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {MODES}")
