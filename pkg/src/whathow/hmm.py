"""Exact message passing for an HMM whose emissions also depend on a
trial-global discrete variable ``x``.

All arrays carry the epoch axis ``z`` before the trial-variable axis ``x``.
Messages are kept in log space; the transition sums are done by shifting by
the running maximum, exponentiating and using a matrix product, which is
exact up to terms smaller than ``exp(-745)`` relative to the maximum.
Leading batch axes are allowed on ``log_emis`` for the filtering routines.
"""
from __future__ import annotations

import math

import numpy as np


class InferenceError(FloatingPointError):
    """Every latent configuration has zero probability at some time step."""

    def __init__(self, t: int, c: int | None = None, detail: str = ""):
        self.t, self.c = t, c
        msg = f"zero likelihood at t={t}" + (f" for task c={c}" if c is not None else "")
        super().__init__(msg + (f" ({detail})" if detail else ""))


def logsumexp(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def log_gauss(q: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian log densities.

    ``q`` is ``(..., T, D)`` and ``means`` is ``(Z, X, D)``; the result is
    ``(..., T, Z, X)``.
    """
    D = q.shape[-1]
    q2 = np.sum(q * q, axis=-1)[..., None, None]
    m2 = np.sum(means * means, axis=-1)
    cross = np.einsum("...td,zxd->...tzx", q, means)
    sq = np.maximum(q2 - 2.0 * cross + m2, 0.0)
    return -0.5 * sq / sigma**2 - D * (math.log(sigma) + 0.5 * math.log(2 * math.pi))


def _propagate(log_alpha: np.ndarray, A: np.ndarray) -> np.ndarray:
    """log sum_z exp(log_alpha[..., z, x]) * A[z, w]  ->  [..., w, x]."""
    m = np.max(log_alpha, axis=-2, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(log_alpha - m)
    with np.errstate(divide="ignore"):
        return np.log(np.einsum("...zx,zw->...wx", p, A)) + m


def forward(log_emis: np.ndarray, log_pi: np.ndarray, log_A: np.ndarray, log_px: np.ndarray,
            c: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward messages ``log p(q_{1:t}, z_t | x)`` and the marginal log-likelihood.

    Shapes: ``log_emis (..., T, Z, X)``, ``log_pi (Z,)``, ``log_A (Z, Z)`` with
    ``A[from, to]``, ``log_px (X,)``. Returns ``log_alpha`` shaped like
    ``log_emis`` and ``ll`` of shape ``(...)``.
    """
    T = log_emis.shape[-3]
    A = np.exp(log_A)
    log_alpha = np.empty_like(log_emis)
    log_alpha[..., 0, :, :] = log_pi[:, None] + log_emis[..., 0, :, :]
    _check(log_alpha[..., 0, :, :] + log_px, 0, c)
    for t in range(1, T):
        log_alpha[..., t, :, :] = _propagate(log_alpha[..., t - 1, :, :], A) + log_emis[..., t, :, :]
        _check(log_alpha[..., t, :, :] + log_px, t, c)
    ll = logsumexp(log_alpha[..., -1, :, :] + log_px, axis=(-2, -1))
    return log_alpha, ll


def _check(la: np.ndarray, t: int, c: int | None) -> None:
    flat = la.reshape(la.shape[:-2] + (-1,))
    if not np.all(np.any(np.isfinite(flat), axis=-1)):
        raise InferenceError(t, c)


def backward(log_emis: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    """Backward messages ``log p(q_{t+1:T} | z_t, x)``; the last one is 0."""
    T = log_emis.shape[-3]
    A_T = np.exp(log_A).T
    log_beta = np.zeros_like(log_emis)
    for t in range(T - 2, -1, -1):
        log_beta[..., t, :, :] = _propagate(log_emis[..., t + 1, :, :] + log_beta[..., t + 1, :, :], A_T)
    return log_beta


def smooth(log_emis: np.ndarray, log_pi: np.ndarray, log_A: np.ndarray, log_px: np.ndarray,
           c: int | None = None, pairwise: bool = True):
    """Joint posteriors for a single sequence.

    Returns ``gamma (T, Z, X)``, ``xi (T-1, Z, Z, X)`` (or ``None``) and the
    marginal log-likelihood.
    """
    log_alpha, ll = forward(log_emis, log_pi, log_A, log_px, c)
    log_beta = backward(log_emis, log_A)
    gamma = np.exp(log_alpha + log_beta + log_px - ll)
    xi = None
    if pairwise and log_emis.shape[0] > 1:
        la = log_alpha[:-1, :, None, :]
        lb = (log_emis[1:] + log_beta[1:])[:, None, :, :]
        with np.errstate(invalid="ignore"):
            xi = np.exp(la + log_A[None, :, :, None] + lb + log_px - ll)
        xi = np.nan_to_num(xi, nan=0.0)
    elif pairwise:
        xi = np.zeros((0,) + log_A.shape + (log_emis.shape[-1],))
    return gamma, xi, float(ll)


def filter_z(log_emis: np.ndarray, log_pi: np.ndarray, log_A: np.ndarray, log_px: np.ndarray,
             c: int | None = None) -> np.ndarray:
    """Causal posterior ``p(z_t | obs_{1:t})`` with ``x`` marginalised.

    Works on batched ``log_emis (..., T, Z, X)`` and returns ``(..., T, Z)``.
    """
    log_alpha, _ = forward(log_emis, log_pi, log_A, log_px, c)
    lz = logsumexp(log_alpha + log_px, axis=-1)
    return np.exp(lz - logsumexp(lz, axis=-1, keepdims=True))
