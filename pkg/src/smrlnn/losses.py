"""Training losses and their gradients.

* ``loss_disc``: least-squares discriminator loss, control scored towards +1 and
  treated towards -1.
* ``loss_balance``: what the representation minimizes against a frozen
  discriminator, ``1/2 E_control D(r)^2``.
* ``loss_rsk``: structure keeper, minus the sum of the top-K ridge-regularized
  canonical correlations between covariates and representations.
* ``loss_factual``: factual MSE plus an L2 penalty on representation weights.
"""
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import linalg
from .errors import DimensionError, EmptyArmError, NonFiniteLossError
from .nn import (forward_disc, forward_outcome, forward_rep, mlp_backward, mlp_forward,
                 outcome_forward_backward)

LOSS_NAMES = ("disc", "balance", "rsk", "factual")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_reg: float = 1e-4
    lambda1: float = 1e-3
    lambda2: float = 1e-3
    K: int = None  # None -> min(P, d, 10)

    def __post_init__(self):
        problems = []
        for name in ("alpha", "beta", "lambda_reg", "lambda1", "lambda2"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        if self.K is not None and self.K < 1:
            problems.append("K must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def resolve_k(self, p, d):
        k = min(p, d, 10) if self.K is None else self.K
        if k > min(p, d):
            raise ValueError(f"K={k} exceeds min(P, d)={min(p, d)}")
        return k

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RskResult:
    loss_value: float
    correlations: np.ndarray  # descending, length min(P, d)


@dataclass
class Batch:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray


def _require(arr, arm):
    if arr.shape[0] == 0:
        raise EmptyArmError(arm)


# --- balancing -----------------------------------------------------------------

def loss_disc(disc, r0, r1):
    _require(r0, "control")
    _require(r1, "treated")
    d0 = forward_disc(disc, r0)
    d1 = forward_disc(disc, r1)
    return 0.5 * np.mean((d0 - 1.0) ** 2) + 0.5 * np.mean((d1 + 1.0) ** 2)


def disc_value_and_grad(disc, r0, r1):
    """Value of ``loss_disc`` and its gradient w.r.t. the discriminator (representations held fixed)."""
    _require(r0, "control")
    _require(r1, "treated")
    out0, tape0 = mlp_forward(disc, r0, keep=True)
    out1, tape1 = mlp_forward(disc, r1, keep=True)
    e0 = out0 - 1.0
    e1 = out1 + 1.0
    value = 0.5 * np.mean(e0 ** 2) + 0.5 * np.mean(e1 ** 2)
    g0, _ = mlp_backward(disc, tape0, e0 / r0.shape[0])
    g1, _ = mlp_backward(disc, tape1, e1 / r1.shape[0])
    return value, g0.flatten() + g1.flatten()


def loss_balance(disc, r0, r1=None, symmetric=False):
    _require(r0, "control")
    value = 0.5 * np.mean(forward_disc(disc, r0) ** 2)
    if symmetric:
        _require(r1, "treated")
        value += 0.5 * np.mean(forward_disc(disc, r1) ** 2)
    return value


def balance_value_and_grad(disc, r0, r1=None, symmetric=False):
    """Value of ``loss_balance`` and dL/dr for each arm (discriminator frozen)."""
    _require(r0, "control")
    out0, tape0 = mlp_forward(disc, r0, keep=True)
    value = 0.5 * np.mean(out0 ** 2)
    _, grad_r0 = mlp_backward(disc, tape0, out0 / r0.shape[0])
    grad_r1 = None if r1 is None else np.zeros_like(r1)
    if symmetric:
        _require(r1, "treated")
        out1, tape1 = mlp_forward(disc, r1, keep=True)
        value += 0.5 * np.mean(out1 ** 2)
        _, grad_r1 = mlp_backward(disc, tape1, out1 / r1.shape[0])
    return value, grad_r0, grad_r1


# --- structure keeper -------------------------------------------------------------

def rsk_correlations_whitened(x, r, lambda1, lambda2):
    """Canonical correlations as singular values of the doubly whitened cross-covariance."""
    cxx = linalg.covariance(x, x)
    crr = linalg.covariance(r, r)
    cxr = linalg.covariance(x, r)
    t = linalg.inv_sqrt(cxx, lambda1) @ cxr @ linalg.inv_sqrt(crr, lambda2)
    return linalg.svd_values(t)


def _rsk_core(x, r, weights, need_grad):
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if x.ndim != 2 or r.ndim != 2 or x.shape[0] != r.shape[0]:
        raise DimensionError(f"X {x.shape} and R {r.shape} must share rows")
    n = x.shape[0]
    if n < 2:
        raise DimensionError("structure keeper needs at least 2 rows")
    p, d = x.shape[1], r.shape[1]
    k = weights.resolve_k(p, d)
    xc = x - x.mean(axis=0)
    rc = r - r.mean(axis=0)
    # whiten the narrower side by eigendecomposition, solve the wider one by Cholesky
    if p <= d:
        ac, bc, ridge_a, ridge_b, swapped = xc, rc, weights.lambda1, weights.lambda2, False
    else:
        ac, bc, ridge_a, ridge_b, swapped = rc, xc, weights.lambda2, weights.lambda1, True
    c_aa = ac.T @ ac / n + ridge_a * np.eye(ac.shape[1])
    c_bb = bc.T @ bc / n + ridge_b * np.eye(bc.shape[1])
    c_ab = ac.T @ bc / n
    if not (np.all(np.isfinite(c_aa)) and np.all(np.isfinite(c_bb)) and np.all(np.isfinite(c_ab))):
        raise NonFiniteLossError("rsk", float("nan"))
    a_half = linalg.inv_sqrt(c_aa)
    solved = linalg.chol_solve(c_bb, c_ab.T)  # C_bb^-1 C_ba
    m = a_half @ c_ab @ solved @ a_half
    eig = linalg.sym_eig(0.5 * (m + m.T))
    lam = eig.eigenvalues
    # eigenvalues at roundoff level are exact zeros (rank-deficient R); sqrt would amplify the noise
    lam = np.where(lam > 1e-12 * max(1.0, float(lam.max(initial=0.0))), lam, 0.0)
    corr = np.sqrt(lam)
    value = -float(np.sum(corr[:k]))
    if not need_grad:
        return RskResult(value, corr), None

    if k < corr.size and abs(corr[k - 1] - corr[k]) < 1e-9:
        warnings.warn("tied canonical correlations at the top-K boundary; using a subgradient",
                      RuntimeWarning, stacklevel=3)
    sig = corr[:k]
    a_vec = a_half @ eig.eigenvectors[:, :k]
    live = sig > 0.0  # zero correlations get the zero subgradient
    b_vec = np.zeros((bc.shape[1], k))
    b_vec[:, live] = (solved @ a_vec[:, live]) / sig[live]
    d_ab = a_vec @ b_vec.T
    d_aa = -0.5 * (a_vec * sig) @ a_vec.T
    d_bb = -0.5 * (b_vec * sig) @ b_vec.T
    # d(sum corr)/d(side) through the covariance blocks; loss is the negative
    if swapped:
        grad_r = -(2.0 * ac @ d_aa + bc @ d_ab.T) / n
    else:
        grad_r = -(2.0 * bc @ d_bb + ac @ d_ab) / n
    return RskResult(value, corr), grad_r


def loss_rsk(x, r, weights, method="cholesky"):
    """Structure-keeper loss. ``method='whitened'`` uses the inverse-square-root/SVD path."""
    if method == "whitened":
        p, d = np.shape(x)[1], np.shape(r)[1]
        corr = rsk_correlations_whitened(x, r, weights.lambda1, weights.lambda2)
        k = weights.resolve_k(p, d)
        return RskResult(-float(np.sum(corr[:k])), corr)
    if method != "cholesky":
        raise ValueError(f"unknown method {method!r}")
    return _rsk_core(x, r, weights, need_grad=False)[0]


def rsk_value_and_grad(x, r, weights):
    """``(RskResult, dL/dR)``."""
    return _rsk_core(x, r, weights, need_grad=True)


# --- factual ----------------------------------------------------------------------

def rep_penalty(phi):
    return float(sum(np.sum(w * w) for w in phi.params.weights))


def loss_factual(bundle, x, z, y, weights):
    x, z, y = _check_factual(x, z, y)
    y_hat = forward_outcome(bundle.heads, forward_rep(bundle.phi, x), z)
    return float(np.mean((y_hat - y) ** 2) + weights.lambda_reg * rep_penalty(bundle.phi))


def _check_factual(x, z, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z)
    if not (x.shape[0] == y.shape[0] == z.shape[0]):
        raise DimensionError("X, z and y lengths differ")
    if not np.all(np.isfinite(y)):
        raise ValueError("outcomes contain NaN or Inf")
    return x, z, y


def factual_from_reps(heads, r, z, y):
    """MSE part of the factual loss from representations.

    Returns ``(mse, [grad head0, grad head1] flat, dL/dr)``.
    """
    n = r.shape[0]

    def mse(y_hat):
        e = y_hat - y
        return float(np.mean(e * e)), 2.0 * e / n

    value, _, grads, grad_r = outcome_forward_backward(heads, r, z, mse)
    return value, [g.flatten() for g in grads], grad_r


def phi_penalty_grad(phi, lambda_reg):
    return np.concatenate([np.concatenate([(2.0 * lambda_reg * w).ravel(), np.zeros_like(b)])
                           for w, b in zip(phi.params.weights, phi.params.biases)])


# --- uniform gradient interface ------------------------------------------------------

def loss_value(name, bundle, batch, weights, symmetric=False):
    """Scalar value of a named loss on a batch (used for finite differences)."""
    r = mlp_forward(bundle.phi, batch.x)
    treated = np.asarray(batch.z) == 1
    if name == "disc":
        return loss_disc(bundle.disc, r[~treated], r[treated])
    if name == "balance":
        return loss_balance(bundle.disc, r[~treated], r[treated], symmetric)
    if name == "rsk":
        return loss_rsk(batch.x, r, weights).loss_value
    if name == "factual":
        return loss_factual(bundle, batch.x, batch.z, batch.y, weights)
    raise ValueError(f"unknown loss {name!r}")


def loss_and_grads(name, bundle, batch, weights, symmetric=False):
    """Value and analytic gradients of a named loss.

    Returns ``(value, {part: flat gradient})`` covering exactly the parameter
    groups the loss updates in training: ``disc`` for the discriminator loss,
    ``phi`` for balance and structure keeper, ``phi``/``head0``/``head1`` for the
    factual loss.
    """
    r, tape = mlp_forward(bundle.phi, batch.x, keep=True)
    treated = np.asarray(batch.z) == 1
    if name == "disc":
        value, g = disc_value_and_grad(bundle.disc, r[~treated], r[treated])
        return value, {"disc": g}
    if name == "balance":
        value, g0, g1 = balance_value_and_grad(bundle.disc, r[~treated], r[treated], symmetric)
        grad_r = np.zeros_like(r)
        grad_r[~treated] = g0
        if g1 is not None:
            grad_r[treated] = g1
    elif name == "rsk":
        res, grad_r = rsk_value_and_grad(batch.x, r, weights)
        value = res.loss_value
    elif name == "factual":
        _, z, y = _check_factual(batch.x, batch.z, batch.y)
        mse, head_grads, grad_r = factual_from_reps(bundle.heads, r, z, y)
        value = mse + weights.lambda_reg * rep_penalty(bundle.phi)
        gphi, _ = mlp_backward(bundle.phi, tape, grad_r)
        return value, {
            "phi": gphi.flatten() + phi_penalty_grad(bundle.phi, weights.lambda_reg),
            "head0": head_grads[0],
            "head1": head_grads[1],
        }
    else:
        raise ValueError(f"unknown loss {name!r}")
    gphi, _ = mlp_backward(bundle.phi, tape, grad_r)
    return value, {"phi": gphi.flatten()}
