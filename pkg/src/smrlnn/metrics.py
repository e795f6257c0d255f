"""Evaluation metrics for effect estimates."""
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import _backend, linalg
from .errors import DataError, DimensionError
from .nn import Mlp, MlpConfig, Optimizer, ParamSet, init_params, mlp_backward, mlp_forward


def _vec(a, name):
    a = np.asarray(a, dtype=np.float64).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def _same_length(*arrays):
    if len({a.shape[0] for a in arrays}) != 1:
        raise DimensionError("input lengths differ")


def pehe(tau_hat, mu1, mu0):
    """Mean squared error of the effect estimate (no square root)."""
    tau_hat, mu1, mu0 = _vec(tau_hat, "tau_hat"), _vec(mu1, "mu1"), _vec(mu0, "mu0")
    _same_length(tau_hat, mu1, mu0)
    return float(np.mean((tau_hat - (mu1 - mu0)) ** 2))


def sqrt_pehe(tau_hat, mu1, mu0):
    return math.sqrt(pehe(tau_hat, mu1, mu0))


def ate_bias(tau_hat, true_ate):
    tau_hat = _vec(tau_hat, "tau_hat")
    if tau_hat.size == 0:
        raise ValueError("empty effect vector")
    return float(abs(np.mean(tau_hat) - true_ate))


def _rct(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise DimensionError("rct mask length differs")
    return mask


def policy_risk(y1_hat, y0_hat, y_obs, z, rct_mask=None):
    """Risk of treating RCT units whose predicted treated outcome is higher.

    Ties in the prediction are not treated. A policy cell with no observed
    units contributes zero value.
    """
    y1_hat, y0_hat, y_obs = _vec(y1_hat, "y1_hat"), _vec(y0_hat, "y0_hat"), _vec(y_obs, "y_obs")
    z = np.asarray(z)
    _same_length(y1_hat, y0_hat, y_obs, z)
    e = _rct(rct_mask, y_obs.size)
    if not e.any():
        raise DataError("no randomized rows to evaluate")
    treat = (y1_hat > y0_hat) & e
    dont = (~(y1_hat > y0_hat)) & e
    t, c = (z == 1) & e, (z == 0) & e
    n_e = e.sum()
    value = 0.0
    for cell, share, label in ((treat & t, treat.sum() / n_e, "treated"), (dont & c, dont.sum() / n_e, "control")):
        if cell.any():
            value += y_obs[cell].mean() * share
        elif share > 0:
            warnings.warn(f"policy risk: no observed {label} units agree with the policy", RuntimeWarning,
                          stacklevel=2)
    return float(1.0 - value)


def att_bias(tau_hat, y_obs, z, rct_mask=None):
    """|mean estimated effect on treated - (mean y treated - mean y RCT controls)|, within the RCT."""
    tau_hat, y_obs = _vec(tau_hat, "tau_hat"), _vec(y_obs, "y_obs")
    z = np.asarray(z)
    _same_length(tau_hat, y_obs, z)
    e = _rct(rct_mask, y_obs.size)
    t, c = (z == 1) & e, (z == 0) & e
    if not t.any():
        raise DataError("no treated units in the randomized set")
    if not c.any():
        raise DataError("no control units in the randomized set")
    att = y_obs[t].mean() - y_obs[c].mean()
    return float(abs(tau_hat[t].mean() - att))


def outcome_auc(scores, labels):
    """Concordance AUC with half credit for ties; ``None`` when only one class is present."""
    scores = np.clip(_vec(scores, "scores"), 0.0, 1.0)
    labels = np.asarray(labels).ravel()
    _same_length(scores, labels)
    pos, neg = labels == 1, labels == 0
    if not (pos | neg).all():
        raise ValueError("labels must be binary")
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- balance diagnostic --------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    """Fixed classifier used to estimate the H-divergence (version bumps on any change)."""

    hidden: tuple = (20, 20)
    epochs: int = 200
    lr: float = 0.01
    activation: str = "elu"
    version: int = 1


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _train_probe(x, label, cfg, seed):
    """Class-balanced logistic classifier trained full-batch with Adam."""
    mcfg = MlpConfig((x.shape[1],) + tuple(cfg.hidden) + (1,), cfg.activation)
    net = Mlp(mcfg, init_params(mcfg, seed))
    weight = np.where(label == 1, 0.5 / label.sum(), 0.5 / (label.size - label.sum()))
    opt = Optimizer("adam", cfg.lr)
    for _ in range(cfg.epochs):
        logit, tape = mlp_forward(net, x, keep=True)
        grad_logit = (weight * (_sigmoid(logit[:, 0]) - label))[:, None]
        grads, _ = mlp_backward(net, tape, grad_logit)
        net.params = ParamSet.unflatten(mcfg, opt.step("probe", net.params.flatten(), grads.flatten()))
    return net


def h_divergence(r0, r1, probe_cfg=None, seed=0):
    """Holdout estimate of the largest mean-score gap a probe classifier finds between arms.

    Each arm is split in half; the probe (features z-scored on the training
    half) is fit on one half and scored on the other. Returns
    ``|mean_control sigma(D) - mean_treated sigma(D)|`` on the holdout, a lower
    bound on the divergence over the probe's class.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    r0 = linalg.as_matrix(r0, "control representations")
    r1 = linalg.as_matrix(r1, "treated representations")
    if r0.shape[1] != r1.shape[1]:
        raise DimensionError("arms have different widths")
    if min(r0.shape[0], r1.shape[0]) < 10:
        raise DataError("each arm needs at least 10 rows to split")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(7,)))
    p0, p1 = rng.permutation(r0.shape[0]), rng.permutation(r1.shape[0])
    h0, h1 = r0.shape[0] // 2, r1.shape[0] // 2
    x_tr = np.vstack([r0[p0[:h0]], r1[p1[:h1]]])
    y_tr = np.concatenate([np.zeros(h0), np.ones(h1)])
    mean, std = x_tr.mean(axis=0), x_tr.std(axis=0)
    std[std < 1e-12] = 1.0
    net = _train_probe((x_tr - mean) / std, y_tr, probe_cfg, rng.integers(2**32))
    s0 = _sigmoid(mlp_forward(net, (r0[p0[h0:]] - mean) / std)[:, 0])
    s1 = _sigmoid(mlp_forward(net, (r1[p1[h1:]] - mean) / std)[:, 0])
    return float(abs(s0.mean() - s1.mean()))


# --- matched-pair ground truth -----------------------------------------------------------

@dataclass
class PsmResult:
    treated: np.ndarray  # row indices of treated units
    matched: np.ndarray  # matched control row per treated unit, -1 if none left
    tau: np.ndarray  # y_treated - y_match, NaN when unmatched
    propensity: np.ndarray


def fit_logistic(x, z, tol=1e-8, max_iter=100):
    """Logistic propensity model as a single-layer network, fit by Newton steps.

    Covariates are z-scored internally; a 1e-10 ridge keeps separable data finite.
    """
    x = linalg.as_matrix(x, "covariates")
    z = np.asarray(z, dtype=np.float64)
    mean, std = x.mean(axis=0), x.std(axis=0)
    std[std < 1e-12] = 1.0
    a = np.hstack([np.ones((x.shape[0], 1)), (x - mean) / std])
    theta = np.zeros(a.shape[1])
    n = a.shape[0]
    for _ in range(max_iter):
        prob = _sigmoid(a @ theta)
        grad = a.T @ (prob - z) / n + 1e-10 * theta
        if np.linalg.norm(grad) <= tol:
            break
        hess = (a * (prob * (1 - prob))[:, None]).T @ a / n + 1e-10 * np.eye(a.shape[1])
        theta = theta - linalg.chol_solve(hess, grad)
    w = theta[1:] / std
    b = theta[0] - w @ mean
    cfg = MlpConfig((x.shape[1], 1))
    return Mlp(cfg, ParamSet([w[:, None]], [np.array([b])]))


def psm_ground_truth(x, z, y):
    """Approximate per-treated effects by 1-NN propensity matching without replacement.

    Treated units are matched in descending propensity order to the closest
    unused control (ties go to the lowest row index).
    """
    z = np.asarray(z)
    y = _vec(y, "y")
    model = fit_logistic(x, z)
    prop = _sigmoid(mlp_forward(model, linalg.as_matrix(x))[:, 0])
    treated = np.flatnonzero(z == 1)
    controls = np.flatnonzero(z == 0)
    if controls.size == 0:
        raise DataError("no controls to match against")
    if controls.size < treated.size:
        warnings.warn(f"{treated.size} treated but only {controls.size} controls; "
                      "lowest-propensity treated units stay unmatched", RuntimeWarning, stacklevel=2)
    pt = np.ascontiguousarray(prop[treated])
    order = np.argsort(-pt, kind="stable").astype(np.int64)
    local = _backend.greedy_match(pt, np.ascontiguousarray(prop[controls]), order)
    matched = np.where(local >= 0, controls[np.maximum(local, 0)], -1)
    tau = np.where(matched >= 0, y[treated] - y[np.maximum(matched, 0)], np.nan)
    return PsmResult(treated, matched, tau, prop)


# --- reports -------------------------------------------------------------------------

@dataclass
class EvalReport:
    replicate: int = 0
    seed: int = None
    n_eval: int = 0
    pehe: float = None
    ate_bias: float = None
    policy_risk: float = None
    att_bias: float = None
    auc: float = None
    h_div: float = None

    METRICS = ("pehe", "ate_bias", "policy_risk", "att_bias", "auc", "h_div")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_row(self):
        """CSV cells in :meth:`columns` order; absent metrics are empty, never zero."""
        out = []
        for name in self.columns():
            v = getattr(self, name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out
