"""Feed-forward networks with explicit backward passes.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``h @ W + b``. Gradients are hand-derived per layer; the contract they must
honour is agreement with central differences (see :func:`numerical_grad`).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteLossError

HIDDEN_ACTIVATIONS = ("relu", "elu", "identity")
OUTPUT_ACTIVATIONS = ("identity", "tanh")
INIT_SCHEMES = ("scaled", "paper_literal")


@dataclass(frozen=True)
class MlpConfig:
    layer_widths: tuple
    activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs an input and an output width")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]

    @property
    def shapes(self):
        w = self.layer_widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "output_activation": self.output_activation,
        }


@dataclass
class ParamSet:
    weights: list
    biases: list

    @property
    def size(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def unflatten(cls, config, vec):
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases = [], []
        pos = 0
        for fan_in, fan_out in config.shapes:
            weights.append(vec[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(vec[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != vec.size:
            raise DimensionError(f"expected {pos} parameters, got {vec.size}")
        return cls(weights, biases)

    def copy(self):
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return ParamSet([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


@dataclass
class Mlp:
    config: MlpConfig
    params: ParamSet

    def copy(self):
        return Mlp(self.config, self.params.copy())


def init_params(config, seed, scheme="scaled"):
    """Gaussian weights, zero biases.

    ``scaled`` draws N(0, 1/fan_in); ``paper_literal`` draws N(0, 1).
    ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in config.shapes:
        std = 1.0 if scheme == "paper_literal" else 1.0 / np.sqrt(fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * std)
        biases.append(np.zeros(fan_out))
    return ParamSet(weights, biases)


def _act(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        h = z.copy()
        neg = z < 0
        h[neg] = np.expm1(z[neg])
        return h
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(name)


def _act_grad(name, z, h):
    if name == "identity":
        return None
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "elu":
        return np.where(z > 0, 1.0, h + 1.0)
    if name == "tanh":
        return 1.0 - h * h
    raise ValueError(name)


def mlp_forward(net, x, keep=False):
    """Forward pass. With ``keep=True`` also returns the tape for :func:`mlp_backward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.config.n_in:
        raise DimensionError(f"input has shape {x.shape}, network expects {net.config.n_in} columns")
    cfg, p = net.config, net.params
    n_layers = len(p.weights)
    h = x
    tape = [(None, x)]
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = _act(cfg.output_activation if i == n_layers - 1 else cfg.activation, z)
        if keep:
            tape.append((z, h))
    return (h, tape) if keep else h


def mlp_backward(net, tape, grad_out):
    """Backprop ``grad_out`` (dL/d output) through a recorded forward pass.

    Returns ``(ParamSet of gradients, dL/d input)``.
    """
    cfg, p = net.config, net.params
    n_layers = len(p.weights)
    g = np.asarray(grad_out, dtype=np.float64)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        z, h = tape[i + 1]
        name = cfg.output_activation if i == n_layers - 1 else cfg.activation
        d = _act_grad(name, z, h)
        if d is not None:
            g = g * d
        h_prev = tape[i][1]
        gw[i] = h_prev.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return ParamSet(gw, gb), g


@dataclass
class Architecture:
    """Layer layout of a full model; defaults sit inside the Appendix search grid."""

    rep_layers: int = 2
    rep_width: int = 100
    rep_dim: int = 100
    head_layers: int = 2
    head_width: int = 100
    disc_layers: int = 1
    disc_width: int = 100
    activation: str = "elu"

    def phi_config(self, n_in):
        widths = [n_in] + [self.rep_width] * (self.rep_layers - 1) + [self.rep_dim]
        return MlpConfig(tuple(widths), self.activation)

    def head_config(self):
        return MlpConfig((self.rep_dim,) + (self.head_width,) * self.head_layers + (1,), self.activation)

    def disc_config(self):
        return MlpConfig((self.rep_dim,) + (self.disc_width,) * self.disc_layers + (1,), self.activation)


PARTS = ("phi", "head0", "head1", "disc")


@dataclass
class ModelBundle:
    phi: Mlp
    head0: Mlp
    head1: Mlp
    disc: Mlp
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.phi.config.n_out
        if not (self.head0.config.n_in == self.head1.config.n_in == self.disc.config.n_in == d):
            raise DimensionError("representation width must match head and discriminator inputs")
        if self.head0.config.n_out != 1 or self.head1.config.n_out != 1 or self.disc.config.n_out != 1:
            raise DimensionError("heads and discriminator must have a single output")

    @property
    def heads(self):
        return (self.head0, self.head1)

    def copy(self):
        return ModelBundle(self.phi.copy(), self.head0.copy(), self.head1.copy(), self.disc.copy(), dict(self.meta))

    def flat(self, part):
        return getattr(self, part).params.flatten()

    def with_flat(self, part, vec):
        out = self.copy()
        net = getattr(out, part)
        net.params = ParamSet.unflatten(net.config, vec)
        return out

    def to_dict(self):
        return {
            part: {
                "config": getattr(self, part).config.to_dict(),
                "shapes": [list(s) for s in getattr(self, part).config.shapes],
                "params": self.flat(part).tolist(),
            }
            for part in PARTS
        }

    @classmethod
    def from_dict(cls, data, meta=None):
        nets = {}
        for part in PARTS:
            entry = data[part]
            cfg = MlpConfig(tuple(entry["config"]["layer_widths"]), entry["config"]["activation"],
                            entry["config"]["output_activation"])
            if [list(s) for s in cfg.shapes] != entry["shapes"]:
                raise DimensionError(f"checkpoint shapes for {part} do not match its config")
            nets[part] = Mlp(cfg, ParamSet.unflatten(cfg, np.array(entry["params"], dtype=np.float64)))
        return cls(meta=dict(meta or {}), **nets)


def build_bundle(n_in, arch=None, seed=0, scheme="scaled"):
    """Fresh model with independent init streams per network."""
    arch = arch or Architecture()
    seqs = np.random.SeedSequence(seed).spawn(4)
    cfgs = (arch.phi_config(n_in), arch.head_config(), arch.head_config(), arch.disc_config())
    nets = [Mlp(c, init_params(c, s, scheme)) for c, s in zip(cfgs, seqs)]
    return ModelBundle(*nets)


def forward_rep(phi, x):
    return mlp_forward(phi, x)


def forward_disc(disc, r):
    return mlp_forward(disc, r)[:, 0]


def _check_z(z, n):
    z = np.asarray(z)
    if z.shape != (n,):
        raise DimensionError(f"treatment vector has shape {z.shape}, expected ({n},)")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("treatment values must be 0 or 1")
    return z.astype(bool)


def forward_outcome(heads, r, z):
    """Route row ``i`` through head ``z[i]``."""
    r = np.asarray(r, dtype=np.float64)
    treated = _check_z(z, r.shape[0])
    out = np.empty(r.shape[0])
    if (~treated).any():
        out[~treated] = mlp_forward(heads[0], r[~treated])[:, 0]
    if treated.any():
        out[treated] = mlp_forward(heads[1], r[treated])[:, 0]
    return out


def outcome_forward_backward(heads, r, z, grad_fn):
    """Routed forward pass plus backward for a loss on the predictions.

    ``grad_fn(y_hat)`` returns ``(value, dL/dy_hat)``. Returns
    ``(value, y_hat, [grad head0, grad head1], dL/dr)``; a head that receives
    no rows gets an all-zero gradient.
    """
    r = np.asarray(r, dtype=np.float64)
    treated = _check_z(z, r.shape[0])
    y_hat = np.empty(r.shape[0])
    tapes = []
    for arm, mask in ((0, ~treated), (1, treated)):
        if mask.any():
            out, tape = mlp_forward(heads[arm], r[mask], keep=True)
            y_hat[mask] = out[:, 0]
            tapes.append((arm, mask, tape))
    value, g = grad_fn(y_hat)
    grads = [heads[0].params.zeros_like(), heads[1].params.zeros_like()]
    grad_r = np.zeros_like(r)
    for arm, mask, tape in tapes:
        grads[arm], grad_r[mask] = mlp_backward(heads[arm], tape, g[mask][:, None])
    return value, y_hat, grads, grad_r


def numerical_grad(f, theta, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = f(theta)
        theta[i] = orig - h
        fm = f(theta)
        theta[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def grad_rel_error(analytic, numeric):
    """Largest ``|a - n| / max(1, |n|)`` over all coordinates."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, **kw):
        return cls(np.zeros(size), np.zeros(size), **kw)


def _check_finite_grad(grads):
    if not np.all(np.isfinite(grads)):
        raise NonFiniteLossError("gradient")


def adam_step(params, grads, state, lr):
    """Bias-corrected adaptive-moment update on flat vectors. Returns ``(params, state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    _check_finite_grad(grads)
    if grads.shape != state.m.shape or np.shape(params) != grads.shape:
        raise DimensionError("parameter, gradient and state shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def sgd_step(params, grads, lr):
    grads = np.asarray(grads, dtype=np.float64)
    _check_finite_grad(grads)
    return params - lr * grads


class Optimizer:
    """One optimizer state per named parameter group."""

    def __init__(self, mode="adam", lr=1e-3):
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {mode!r}")
        self.mode = mode
        self.lr = lr
        self.states = {}

    def step(self, name, params, grads):
        if self.mode == "sgd":
            return sgd_step(params, grads, self.lr)
        state = self.states.get(name)
        if state is None:
            state = AdamState.zeros(np.size(params))
        new, self.states[name] = adam_step(params, grads, state, self.lr)
        return new
