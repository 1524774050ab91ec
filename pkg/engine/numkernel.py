"""
Dense float64 kernel
Every op returns a GradPair: the forward value plus a closure mapping the
output gradient to input gradients.
"""
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from utils.errors import ShapeError

DTYPE = np.float64


@dataclass(frozen=True)
class GradPair:
    value: Any
    grad_fn: Callable

    def backward(self, grad):
        return self.grad_fn(grad)


def as_matrix(data, rows=None, cols=None):
    """Coerce to a row-major float64 2-D array, optionally reshaping flat data"""
    arr = np.asarray(data, dtype=DTYPE)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError('as_matrix', arr.shape, (rows, cols))
        arr = arr.reshape(rows, cols)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError('as_matrix', arr.shape, ('rows', 'cols'))
    return np.ascontiguousarray(arr)


def matmul(A, B):
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError('matmul', A.shape, B.shape)
    C = A @ B

    def grad_fn(dC):
        dC = as_matrix(dC)
        return dC @ B.T, A.T @ dC

    return GradPair(C, grad_fn)


def relu(M):
    M = np.asarray(M, dtype=DTYPE)
    mask = M > 0.0
    out = np.where(mask, M, 0.0)

    def grad_fn(dout):
        # subgradient at exactly 0 is 0
        return np.where(mask, np.asarray(dout, dtype=DTYPE), 0.0)

    return GradPair(out, grad_fn)


def col_max_pool(M):
    M = as_matrix(M)
    rows, cols = M.shape
    if rows == 0:
        raise ValueError("col_max_pool needs at least one row")
    # np.argmax returns the first maximal index, so ties go to the lowest row
    argmax = np.argmax(M, axis=0)
    out = M[argmax, np.arange(cols)]

    def grad_fn(dout):
        dM = np.zeros_like(M)
        dM[argmax, np.arange(cols)] = np.asarray(dout, dtype=DTYPE).reshape(cols)
        return dM

    return GradPair(out, grad_fn)


def softmax(v):
    v = np.asarray(v, dtype=DTYPE)
    shifted = np.exp(v - np.max(v))
    return shifted / shifted.sum()


def logsumexp(v):
    v = np.asarray(v, dtype=DTYPE).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = np.max(v)
    total = np.sum(np.exp(v - m))
    value = float(m + np.log(total))
    weights = np.exp(v - m) / total

    def grad_fn(g):
        return float(g) * weights

    return GradPair(value, grad_fn)


def score_matrix(F, G):
    """Raw dot products S[i][j] = F[i] . G[j]"""
    F = as_matrix(F)
    G = as_matrix(G)
    if F.shape[1] != G.shape[1]:
        raise ShapeError('score_matrix', F.shape, G.shape)
    S = F @ G.T

    def grad_fn(dS):
        dS = as_matrix(dS)
        return dS @ G, dS.T @ F

    return GradPair(S, grad_fn)


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow"""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=DTYPE))


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.exp(log_sigmoid(x))


def all_finite(*arrays):
    return all(np.all(np.isfinite(np.asarray(a, dtype=DTYPE))) for a in arrays)


def batched_col_max_pool(M, mask):
    """Column max over the valid rows of each slab of an (N, L, D) stack

    Rows where mask is False are excluded from the pool and get no gradient;
    ties go to the lowest row index.
    """
    M = np.asarray(M, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if M.ndim != 3 or mask.shape != M.shape[:2]:
        raise ShapeError('batched_col_max_pool', M.shape, mask.shape)
    if not np.all(mask.any(axis=1)):
        raise ValueError("batched_col_max_pool: every slab needs at least one valid row")
    masked = np.where(mask[:, :, None], M, -np.inf)
    argmax = np.argmax(masked, axis=1)
    n_idx = np.arange(M.shape[0])[:, None]
    d_idx = np.arange(M.shape[2])[None, :]
    out = M[n_idx, argmax, d_idx]

    def grad_fn(dout):
        dM = np.zeros_like(M)
        dM[n_idx, argmax, d_idx] = np.asarray(dout, dtype=DTYPE)
        return dM

    return GradPair(out, grad_fn)
