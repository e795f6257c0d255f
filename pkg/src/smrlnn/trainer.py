"""Minibatch training of the representation, outcome heads and discriminator.

Each minibatch computes every gradient group on the current parameters and
then updates all of them at once:

    W (representation)  <- alpha * d rsk + beta * d balance + d factual
    U (discriminator)   <- d disc
    V (outcome heads)   <- d factual

Inputs are z-scored with training-split statistics and continuous outcomes
are centred and scaled; predictions are returned on the original scale.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import losses, metrics
from .errors import ConfigError, DataError, NonFiniteLossError
from .losses import LossWeights
from .nn import (Architecture, ModelBundle, Optimizer, build_bundle, forward_outcome,
                 forward_rep, mlp_backward, mlp_forward)

ABLATIONS = ("v0", "v1", "v2", "full")
STOP_REASONS = ("max_epochs", "early_stop", "nonfinite_loss")
DEFAULT_LR = {"adam": 1e-2, "sgd": 1e-2}
# Relative to a z-scored outcome; larger weights swamp the factual fit once it is small.
DEFAULT_ALPHA = 1e-3
DEFAULT_BETA = 1e-3
MAX_REDRAWS = 10
MIN_DELTA = 1e-4
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 100
    max_epochs: int = 1000
    lr: float = None  # None -> optimizer default
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=lambda: LossWeights(alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA))
    arch: Architecture = field(default_factory=Architecture)
    ablation: str = "full"
    seed: int = 0
    patience: int = 1000  # = max_epochs: run to the end, keep the best validation epoch
    val_fraction: float = 0.2
    init_scheme: str = "scaled"
    symmetric_balance: bool = False
    standardize: bool = True
    divergence_every: int = 0  # 0: probe only the returned model
    restore_best: bool = True  # return the lowest-validation-loss epoch

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.arch, dict):
            self.arch = Architecture(**self.arch)
        problems = []
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.optimizer not in DEFAULT_LR:
            problems.append(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr is not None and not self.lr >= 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.ablation not in ABLATIONS:
            problems.append(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.val_fraction <= 0.5:
            problems.append(f"val_fraction must be in [0, 0.5], got {self.val_fraction}")
        if self.divergence_every < 0:
            problems.append("divergence_every must be >= 0")
        if problems:
            raise ConfigError(problems)

    @property
    def learning_rate(self):
        return DEFAULT_LR[self.optimizer] if self.lr is None else self.lr

    def to_dict(self):
        d = asdict(self)
        d["lr"] = self.learning_rate
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Schedule:
    weights: LossWeights
    use_rsk: bool
    use_balance: bool
    update_disc: bool


def ablation_mode(cfg):
    """Effective loss weights and which gradient groups run for ``cfg.ablation``."""
    w = cfg.weights
    if cfg.ablation == "v0":
        w = replace(w, alpha=0.0, beta=0.0)
    elif cfg.ablation == "v1":
        w = replace(w, alpha=0.0)
    elif cfg.ablation == "v2":
        w = replace(w, beta=0.0)
    elif cfg.ablation != "full":
        raise ConfigError([f"unknown ablation {cfg.ablation!r}"])
    return Schedule(w, use_rsk=w.alpha > 0, use_balance=w.beta > 0,
                    update_disc=cfg.ablation in ("v1", "full"))


# --- standardization ------------------------------------------------------------------

@dataclass
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def fit(cls, x, y, binary, enabled=True):
        p = x.shape[1]
        if not enabled:
            return cls(np.zeros(p), np.ones(p))
        std = x.std(axis=0)
        std[std < 1e-12] = 1.0
        if binary:
            return cls(x.mean(axis=0), std)
        ys = float(y.std())
        return cls(x.mean(axis=0), std, float(y.mean()), ys if ys > 1e-12 else 1.0)

    def x(self, x):
        return (x - self.x_mean) / self.x_std

    def y(self, y):
        return (y - self.y_mean) / self.y_scale

    def y_inverse(self, y):
        return y * self.y_scale + self.y_mean

    def to_dict(self):
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_scale": self.y_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float),
                   float(d["y_mean"]), float(d["y_scale"]))


@dataclass
class FittedModel:
    bundle: ModelBundle
    scaler: Scaler
    config: TrainConfig


@dataclass
class ItePrediction:
    tau: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray


def predict_ite(model, x):
    """Per-row effect ``H(phi(x), 1) - H(phi(x), 0)``, with both arm predictions.

    ``model`` may be a bare :class:`ModelBundle` (inputs used as given) or a
    :class:`FittedModel` (inputs standardized, outputs un-scaled).
    """
    if isinstance(model, FittedModel):
        bundle, scaler = model.bundle, model.scaler
        x = scaler.x(np.asarray(x, dtype=np.float64))
    else:
        bundle, scaler = model, None
    r = forward_rep(bundle.phi, x)
    n = r.shape[0]
    mu0 = forward_outcome(bundle.heads, r, np.zeros(n, dtype=np.int64))
    mu1 = forward_outcome(bundle.heads, r, np.ones(n, dtype=np.int64))
    if scaler is not None:
        mu0, mu1 = scaler.y_inverse(mu0), scaler.y_inverse(mu1)
    return ItePrediction(mu1 - mu0, mu0, mu1)


# --- history --------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "train_factual", "val_factual", "disc", "balance", "rsk", "h_div", "pehe", "ate_bias")


@dataclass
class TrainHistory:
    """One record per completed epoch; losses on the standardized scale, metrics on the original."""

    records: list = field(default_factory=list)
    stop_reason: str = None
    stopped_epoch: int = 0
    selected_epoch: int = 0  # epoch whose parameters were returned
    nonfinite: str = None

    def last(self, key):
        return self.records[-1][key] if self.records else None

    def selected(self, key):
        """Value from the epoch whose parameters were returned."""
        if not self.selected_epoch:
            return None
        return self.records[self.selected_epoch - 1][key]

    def column(self, key):
        return np.array([r[key] if r[key] is not None else np.nan for r in self.records], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS + ("selected", "stop_reason"))
            for i, rec in enumerate(self.records):
                cells = ["" if rec[k] is None else (repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]))
                         for k in HISTORY_COLUMNS]
                cells.append("1" if rec["epoch"] == self.selected_epoch else "")
                w.writerow(cells + [self.stop_reason if i == len(self.records) - 1 else ""])


# --- data handling --------------------------------------------------------------------

def _split(z, frac, rng):
    """Stratified train/validation split; each arm keeps at least one training row."""
    train, val = [], []
    for arm in (0, 1):
        idx = rng.permutation(np.flatnonzero(z == arm))
        k = min(int(round(frac * idx.size)), idx.size - 1)
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _batches(train_idx, z, m, rng):
    """Shuffled minibatches; single-arm draws are redrawn, then sampled stratified."""
    perm = rng.permutation(train_idx)
    n_batches = max(1, math.ceil(perm.size / m))
    for chunk in np.array_split(perm, n_batches):
        tries = 0
        while np.unique(z[chunk]).size < 2 and tries < MAX_REDRAWS:
            chunk = rng.choice(train_idx, size=chunk.size, replace=False)
            tries += 1
        if np.unique(z[chunk]).size < 2:
            chunk = _stratified(train_idx, z, max(chunk.size, 2), rng)
        yield chunk


def _stratified(train_idx, z, size, rng):
    t = train_idx[z[train_idx] == 1]
    c = train_idx[z[train_idx] == 0]
    n_t = min(max(1, int(round(size * t.size / train_idx.size))), size - 1)
    return np.concatenate([rng.choice(t, size=min(n_t, t.size), replace=False),
                           rng.choice(c, size=min(size - n_t, c.size), replace=False)])


def _check_data(data):
    z = np.asarray(data.z)
    if not np.isin(z, (0, 1)).all():
        raise DataError("treatment must be 0 or 1")
    for arm, label in ((0, "control"), (1, "treated")):
        if (z == arm).sum() < 2:
            raise DataError(f"training needs at least 2 {label} rows, found {(z == arm).sum()}")


# --- one step -------------------------------------------------------------------------

def _step_grads(bundle, x, z, y, sched, symmetric):
    """Loss values and per-group gradients on the current parameters."""
    w = sched.weights
    r, tape = mlp_forward(bundle.phi, x, keep=True)
    treated = z == 1
    mse, head_grads, grad_r = losses.factual_from_reps(bundle.heads, r, z, y)
    values = {"factual": mse + w.lambda_reg * losses.rep_penalty(bundle.phi)}
    if sched.use_balance:
        bal, g0, g1 = losses.balance_value_and_grad(bundle.disc, r[~treated], r[treated], symmetric)
        values["balance"] = bal
        grad_r = grad_r.copy()
        grad_r[~treated] += w.beta * g0
        if symmetric:
            grad_r[treated] += w.beta * g1
    if sched.use_rsk:
        res, g_rsk = losses.rsk_value_and_grad(x, r, w)
        values["rsk"] = res.loss_value
        grad_r = grad_r + w.alpha * g_rsk
    grads = {"head0": head_grads[0], "head1": head_grads[1]}
    gphi, _ = mlp_backward(bundle.phi, tape, grad_r)
    grads["phi"] = gphi.flatten() + losses.phi_penalty_grad(bundle.phi, w.lambda_reg)
    if sched.update_disc:
        values["disc"], grads["disc"] = losses.disc_value_and_grad(bundle.disc, r[~treated], r[treated])
    for name, v in values.items():
        if not np.isfinite(v):
            raise NonFiniteLossError(name, float(v))
    return values, grads


def train_step(bundle, opt, x, z, y, sched, symmetric=False):
    """One simultaneous update of every active group; returns ``(new bundle, loss values)``."""
    values, grads = _step_grads(bundle, x, z, y, sched, symmetric)
    new = bundle
    for part, g in grads.items():
        new = new.with_flat(part, opt.step(part, bundle.flat(part), g))
    return new, values


# --- epoch bookkeeping ----------------------------------------------------------------

def _factual_mse(bundle, x, z, y, w):
    if x.shape[0] == 0:
        return None
    return losses.loss_factual(bundle, x, z, y, w)


def _epoch_record(epoch, bundle, data, xs, ys, tr, va, sched, cfg, scaler, want_div):
    w = sched.weights
    z = np.asarray(data.z)
    rec = {k: None for k in HISTORY_COLUMNS}
    rec["epoch"] = epoch
    rec["train_factual"] = _factual_mse(bundle, xs[tr], z[tr], ys[tr], w)
    rec["val_factual"] = _factual_mse(bundle, xs[va], z[va], ys[va], w)
    r = forward_rep(bundle.phi, xs[tr])
    t = z[tr] == 1
    rec["disc"] = float(losses.loss_disc(bundle.disc, r[~t], r[t]))
    rec["balance"] = float(losses.loss_balance(bundle.disc, r[~t], r[t], cfg.symmetric_balance))
    if xs[tr].shape[0] >= 2:
        rec["rsk"] = losses.loss_rsk(xs[tr], r, w).loss_value
    if want_div:
        try:
            rec["h_div"] = metrics.h_divergence(r[~t], r[t], seed=cfg.seed)
        except DataError:
            pass
    if data.mu0 is not None and data.mu1 is not None:
        pred = predict_ite(FittedModel(bundle, scaler, cfg), data.x)
        rec["pehe"] = metrics.pehe(pred.tau, data.mu1, data.mu0)
        rec["ate_bias"] = metrics.ate_bias(pred.tau, float(np.mean(data.mu1 - data.mu0)))
    return rec


def train(data, cfg=None, bundle=None):
    """Fit a model on ``data`` (needs ``x``, ``z``, ``y``; ``mu0``/``mu1`` enable metric tracking).

    Returns ``(FittedModel, TrainHistory)``. A non-finite loss or gradient stops
    training with reason ``nonfinite_loss``. The returned parameters are those of
    the epoch with the lowest validation loss (``restore_best``), otherwise the
    last finite ones.
    """
    cfg = cfg or TrainConfig()
    _check_data(data)
    sched = ablation_mode(cfg)
    x = np.asarray(data.x, dtype=np.float64)
    z = np.asarray(data.z).astype(np.int64)
    y = np.asarray(data.y, dtype=np.float64)
    seeds = np.random.SeedSequence(int(cfg.seed), spawn_key=(101,)).spawn(3)
    split_rng, batch_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    tr, va = _split(z, cfg.val_fraction, split_rng)
    scaler = Scaler.fit(x[tr], y[tr], getattr(data, "binary", False), cfg.standardize)
    xs, ys = scaler.x(x), scaler.y(y)
    if bundle is None:
        init_seed = int(seeds[2].generate_state(1)[0])
        bundle = build_bundle(x.shape[1], cfg.arch, seed=init_seed, scheme=cfg.init_scheme)
    elif bundle.phi.config.n_in != x.shape[1]:
        raise DataError(f"model expects {bundle.phi.config.n_in} covariates, data has {x.shape[1]}")
    sched.weights.resolve_k(x.shape[1], bundle.phi.config.n_out)
    opt = Optimizer(cfg.optimizer, cfg.learning_rate)
    hist = TrainHistory()
    plateau, wait = math.inf, 0
    best_val, kept = math.inf, None
    for epoch in range(1, cfg.max_epochs + 1):
        try:
            for idx in _batches(tr, z, cfg.batch_size, batch_rng):
                bundle, _ = train_step(bundle, opt, xs[idx], z[idx], ys[idx], sched, cfg.symmetric_balance)
        except NonFiniteLossError as exc:
            hist.stop_reason, hist.nonfinite = "nonfinite_loss", exc.loss_name
            break
        want_div = cfg.divergence_every > 0 and epoch % cfg.divergence_every == 0
        rec = _epoch_record(epoch, bundle, data, xs, ys, tr, va, sched, cfg, scaler, want_div)
        hist.records.append(rec)
        monitor = rec["val_factual"] if rec["val_factual"] is not None else rec["train_factual"]
        monitor *= scaler.y_scale ** 2  # plateau threshold applies on the outcome's own scale
        if not math.isfinite(monitor):
            hist.stop_reason, hist.nonfinite = "nonfinite_loss", "factual"
            break
        if monitor < best_val:
            best_val, kept = monitor, (epoch, bundle)
        if va.size:
            if monitor < plateau - MIN_DELTA:
                plateau, wait = monitor, 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    hist.stop_reason = "early_stop"
                    break
        if epoch == cfg.max_epochs:
            hist.stop_reason = "max_epochs"
    hist.stopped_epoch = len(hist.records)
    if hist.records:
        if cfg.restore_best and kept is not None and va.size:
            hist.selected_epoch, bundle = kept
        else:
            hist.selected_epoch = hist.stopped_epoch
        rec = hist.records[hist.selected_epoch - 1]
        if rec["h_div"] is None:
            r = forward_rep(bundle.phi, xs[tr])
            t = z[tr] == 1
            try:
                rec["h_div"] = metrics.h_divergence(r[~t], r[t], seed=cfg.seed)
            except DataError:
                pass
    return FittedModel(bundle, scaler, cfg), hist


# --- checkpoints ----------------------------------------------------------------------

def checkpoint_dict(model, history=None):
    d = {"version": CHECKPOINT_VERSION, "model": model.bundle.to_dict(), "scaler": model.scaler.to_dict(),
         "config": model.config.to_dict()}
    if history is not None:
        d["stop_reason"] = history.stop_reason
        d["epochs"] = history.stopped_epoch
        d["selected_epoch"] = history.selected_epoch
    return d


def save_checkpoint(model, path, history=None):
    text = json.dumps(checkpoint_dict(model, history), sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {d.get('version')!r}")
    cfg = dict(d["config"])
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k in known})
    return FittedModel(ModelBundle.from_dict(d["model"]), Scaler.from_dict(d["scaler"]), cfg)
