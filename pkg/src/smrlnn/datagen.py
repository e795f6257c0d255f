"""Synthetic cohorts, super-population ground truth and CSV ingestion.

Randomness comes from one ``SeedSequence`` per dataset seed, split into
independent child streams by purpose (see ``STREAMS``), so adding a new
purpose never perturbs the draws of an existing one.
"""
import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

STREAMS = {
    "coefficients": 0,
    "covariates": 1,
    "assignment": 2,
    "noise": 3,
    "twins": 4,
    "superpopulation": 5,
    "fixture": 6,
}

PAPER_ALPHA = (0.8, -0.8, -1, -0.8, 0.2, -0.4, 1, 0.6, 0.2, 0.6, -0.2, -0.4, -1, 0.6, 0.4)
PAPER_BETA0_M1 = (1.2, 1.1, 1.0, 1.8, 1.6, 2.0, 1.2, 1.3, 1.4, 1.1, 1.5, 1.1, 1.1, 1.0, 1.7)
PAPER_BETA1_M1 = (1.5, 1.0, 1.9, 2.0, 1.5, 2.0, 2.0, 1.7, 2.0, 1.5, 1.4, 1.6, 1.9, 1.2, 1.2)
PAPER_BETA0_M2 = (-5, 4, 3, -2, -2, -5, -2, 2, -2, 1, -3, -5, 4, 5, -4)
PAPER_BETA0_M3 = (0.1, 0.2, 0.3, 0.1, 0, 0.3, 0, 0, 0, 0, 0, 0.1, 0, 0, 0.3)

MODEL3_OFFSET = 0.5
HIGHDIM_P = (50, 100, 200, 400, 800)


def stream(seed, purpose):
    """Generator for one named purpose under a dataset seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[purpose],)))


@dataclass(frozen=True)
class PaperCoefficients:
    alpha: np.ndarray
    beta0_m1: np.ndarray
    beta1_m1: np.ndarray
    beta0_m2: np.ndarray
    beta0_m3: np.ndarray

    @classmethod
    def paper_fixed(cls):
        return cls(*(np.array(v, dtype=np.float64) for v in
                     (PAPER_ALPHA, PAPER_BETA0_M1, PAPER_BETA1_M1, PAPER_BETA0_M2, PAPER_BETA0_M3)))

    @classmethod
    def resample(cls, p, rng):
        """Draw every coefficient vector from its generating distribution."""
        return cls(
            alpha=rng.uniform(-1.0, 1.0, p),
            beta0_m1=rng.uniform(1.0, 2.0, p),
            beta1_m1=rng.uniform(1.0, 2.0, p),
            beta0_m2=rng.uniform(-5.0, 5.0, p),
            beta0_m3=rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=p, p=[0.6, 0.1, 0.1, 0.1, 0.1]),
        )

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("alpha", "beta0_m1", "beta1_m1", "beta0_m2", "beta0_m3")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass(frozen=True)
class SimConfig:
    N: int = 500
    P: int = 15
    rho: float = 0.3
    sigma2: float = 1.0
    outcome_model: int = 1
    seed: int = 0
    coefficient_source: str = "paper_fixed"

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.rho < 1.0:
            problems.append(f"rho must be in [0, 1), got {self.rho}")
        if not self.sigma2 > 0:
            problems.append(f"sigma2 must be > 0, got {self.sigma2}")
        if self.N < 2:
            problems.append(f"N must be >= 2, got {self.N}")
        if self.P < 1:
            problems.append(f"P must be >= 1, got {self.P}")
        if self.outcome_model not in (1, 2, 3):
            problems.append(f"outcome_model must be 1, 2 or 3, got {self.outcome_model}")
        if self.coefficient_source not in ("paper_fixed", "resample"):
            problems.append(f"unknown coefficient_source {self.coefficient_source!r}")
        elif self.coefficient_source == "paper_fixed" and self.P != 15:
            problems.append("paper_fixed coefficients require P = 15")
        if problems:
            raise ConfigError(problems)

    def coefficients(self):
        if self.coefficient_source == "paper_fixed":
            return PaperCoefficients.paper_fixed()
        return PaperCoefficients.resample(self.P, stream(self.seed, "coefficients"))


@dataclass
class Dataset:
    """A cohort. Ground-truth fields are ``None`` when unknown (real data)."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray  # factual outcome
    mu0: np.ndarray = None
    mu1: np.ndarray = None
    tau: np.ndarray = None
    e: np.ndarray = None
    y0: np.ndarray = None
    y1: np.ndarray = None
    ycf: np.ndarray = None
    rct: np.ndarray = None  # bool mask of randomized rows
    binary: bool = False
    columns: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def has_truth(self):
        return self.mu0 is not None and self.mu1 is not None

    def potential_outcomes(self):
        """``(y0, y1)`` when both are observable (factual plus counterfactual column)."""
        if self.y0 is not None and self.y1 is not None:
            return self.y0, self.y1
        if self.ycf is not None:
            t = self.z == 1
            return np.where(t, self.ycf, self.y), np.where(t, self.y, self.ycf)
        return None

    def subset(self, idx):
        kw = {}
        for name in ("x", "z", "y", "mu0", "mu1", "tau", "e", "y0", "y1", "ycf", "rct"):
            v = getattr(self, name)
            kw[name] = None if v is None else v[idx]
        return replace(self, **kw)


def gen_covariates(cfg, rng=None):
    """Rows i.i.d. N(0, sigma2 [(1 - rho) I + rho 11']) via a shared per-row factor."""
    rng = rng if rng is not None else stream(cfg.seed, "covariates")
    g = rng.standard_normal((cfg.N, 1))
    eps = rng.standard_normal((cfg.N, cfg.P))
    return np.sqrt(cfg.sigma2) * (np.sqrt(cfg.rho) * g + np.sqrt(1.0 - cfg.rho) * eps)


def logistic(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def gen_assignment(x, alpha, rng):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (x.shape[1],):
        raise DataError(f"alpha has length {alpha.size}, covariates have {x.shape[1]} columns")
    e = logistic(x @ alpha)
    z = (rng.random(x.shape[0]) < e).astype(np.int64)
    return z, e


def outcome_surfaces(x, model_id, coeffs):
    """Noiseless ``(mu0, mu1, tau)`` for outcome model 1, 2 or 3."""
    x = np.asarray(x, dtype=np.float64)
    if model_id == 1:
        mu0 = x @ coeffs.beta0_m1
        tau = x @ coeffs.beta1_m1 + 2.0
        mu1 = mu0 + tau
    elif model_id == 2:
        mu0 = x @ coeffs.beta0_m2
        tau = (0.5 * (x[:, 0] > 0.5) + 1.0 * (x[:, 1] > 0.3)
               + 2.0 * ((x[:, 2] > 0) & (x[:, 3] > 0.2)))
        mu1 = mu0 + tau
    elif model_id == 3:
        mu0 = x @ coeffs.beta0_m3
        mu1 = np.exp((x + MODEL3_OFFSET) @ coeffs.beta0_m3)
        tau = mu1 - mu0
    else:
        raise ValueError(f"unknown outcome model {model_id!r}")
    return mu0, mu1, tau


def simulate(cfg, coeffs=None):
    """Generate one cohort; potential outcomes share the unit's noise draw."""
    coeffs = coeffs if coeffs is not None else cfg.coefficients()
    x = gen_covariates(cfg)
    z, e = gen_assignment(x, coeffs.alpha, stream(cfg.seed, "assignment"))
    mu0, mu1, tau = outcome_surfaces(x, cfg.outcome_model, coeffs)
    noise = stream(cfg.seed, "noise").standard_normal(cfg.N)
    y0, y1 = mu0 + noise, mu1 + noise
    y = np.where(z == 1, y1, y0)
    return Dataset(x=x, z=z, y=y, mu0=mu0, mu1=mu1, tau=tau, e=e, y0=y0, y1=y1)


def true_ate(model_id, coeffs=None, M=100_000, seed=0, rho=0.3, sigma2=1.0):
    """Mean effect over ``M`` fresh covariate draws (the super population).

    Draws come in antithetic pairs ``(x, -x)``; the covariate law is symmetric,
    so the estimate stays unbiased and a linear effect is recovered exactly.
    """
    coeffs = coeffs if coeffs is not None else PaperCoefficients.paper_fixed()
    half = (M + 1) // 2
    cfg = SimConfig(N=half, P=coeffs.alpha.size, rho=rho, sigma2=sigma2, outcome_model=model_id, seed=seed,
                    coefficient_source="resample")
    x = gen_covariates(cfg, stream(seed, "superpopulation"))
    x = np.vstack([x, -x])[:M]
    return float(np.mean(outcome_surfaces(x, model_id, coeffs)[2]))


def highdim_config(P, N=200, seed=0, outcome_model=1):
    """Configuration for the high-dimensional scenario.

    Coefficients are redrawn from their generating distributions at the new
    dimension; no realized values exist past P = 15.
    """
    if P not in HIGHDIM_P:
        raise ConfigError([f"P must be one of {HIGHDIM_P}, got {P}"])
    cfg = SimConfig(N=N, P=P, outcome_model=outcome_model, seed=seed, coefficient_source="resample")
    return cfg, cfg.coefficients()


def twins_assignment(x, seed, w0=None, wh=None):
    """Biased selection ``z ~ Bernoulli(logistic(w0'x + wh))`` with w0 ~ N(0, 0.1 I), wh ~ N(2, 0.1)."""
    rng = stream(seed, "twins")
    x = np.asarray(x, dtype=np.float64)
    draw_w0 = rng.normal(0.0, np.sqrt(0.1), x.shape[1])
    draw_wh = rng.normal(2.0, np.sqrt(0.1))
    w0 = draw_w0 if w0 is None else np.asarray(w0, dtype=np.float64)
    wh = draw_wh if wh is None else float(wh)
    e = logistic(x @ w0 + wh)
    z = (rng.random(x.shape[0]) < e).astype(np.int64)
    return z, e


# --- CSV ---------------------------------------------------------------------------

EXPORT_EXTRA = ("z", "yF", "mu0", "mu1", "tau", "e")


def _fmt(v):
    return repr(float(v))


def write_csv(ds, path, extra_columns=()):
    """Export with columns x1..xP, z, yF, mu0, mu1, tau, e (absent truth left empty).

    ``extra_columns`` may append ``ycf`` and/or ``rct``.
    """
    header = [f"x{j + 1}" for j in range(ds.p)] + list(EXPORT_EXTRA) + list(extra_columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            extra = [str(int(ds.z[i])), _fmt(ds.y[i])]
            for arr in (ds.mu0, ds.mu1, ds.tau, ds.e):
                extra.append("" if arr is None else _fmt(arr[i]))
            for name in extra_columns:
                arr = getattr(ds, name)
                if name == "rct":
                    extra.append(str(int(arr[i])))
                else:
                    extra.append(_fmt(arr[i]))
            w.writerow([_fmt(v) for v in ds.x[i]] + extra)


@dataclass
class CsvSchema:
    """Column roles. ``covariates`` may be omitted to take every ``prefix*`` column."""

    treatment: str = "z"
    outcome: str = "yF"
    covariates: list = None
    prefix: str = "x"
    mu0: str = None
    mu1: str = None
    ycf: str = None
    rct: str = None
    propensity: str = None
    binary: bool = False

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError([f"unknown schema key {k!r}" for k in unknown])
        return cls(**data)

    @classmethod
    def export_schema(cls):
        return cls(mu0="mu0", mu1="mu1", propensity="e")


def _parse_float(text, line, col):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}: column {col!r} is not a number: {text!r}") from None


def load_csv(path, schema=None):
    """Read a cohort CSV. Rows with a missing covariate are dropped (with a warning)."""
    schema = schema or CsvSchema.export_schema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        covs = schema.covariates or [h for h in header if h.startswith(schema.prefix)
                                     and h[len(schema.prefix):].isdigit()]
        optional = {k: getattr(schema, k) for k in ("mu0", "mu1", "ycf", "rct", "propensity")
                    if getattr(schema, k)}
        needed = list(covs) + [schema.treatment, schema.outcome] + list(optional.values())
        missing = [c for c in needed if c not in header]
        if missing or not covs:
            raise DataError(f"{path}: missing columns {missing or ['<covariates>']}")
        pos = {h: i for i, h in enumerate(header)}
        rows, dropped = [], 0
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, found {len(rec)}")
            cov_text = [rec[pos[c]].strip() for c in covs]
            if any(t in ("", "NA", "NaN", "nan") for t in cov_text):
                dropped += 1
                continue
            xs = [_parse_float(t, line, c) for t, c in zip(cov_text, covs)]
            zt = _parse_float(rec[pos[schema.treatment]], line, schema.treatment)
            if zt not in (0.0, 1.0):
                raise DataError(f"line {line}: treatment must be 0 or 1, got {rec[pos[schema.treatment]]!r}")
            yv = _parse_float(rec[pos[schema.outcome]], line, schema.outcome)
            extra = {k: _parse_float(rec[pos[c]], line, c) for k, c in optional.items()}
            if not np.isfinite(xs).all() or not np.isfinite(yv):
                raise DataError(f"line {line}: non-finite value")
            rows.append((xs, int(zt), yv, extra))
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing covariates", stacklevel=2)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    x = np.array([r[0] for r in rows], dtype=np.float64)
    z = np.array([r[1] for r in rows], dtype=np.int64)
    y = np.array([r[2] for r in rows], dtype=np.float64)
    col = {k: np.array([r[3][k] for r in rows], dtype=np.float64) for k in optional}
    ds = Dataset(x=x, z=z, y=y, mu0=col.get("mu0"), mu1=col.get("mu1"), ycf=col.get("ycf"),
                 e=col.get("propensity"), binary=schema.binary,
                 columns={"covariates": list(covs), "treatment": schema.treatment, "outcome": schema.outcome,
                          **optional, "dropped_rows": dropped})
    if ds.mu0 is not None and ds.mu1 is not None:
        ds.tau = ds.mu1 - ds.mu0
    if "rct" in col:
        ds.rct = col["rct"] != 0
    return ds


# --- bundled fixtures --------------------------------------------------------------

def make_jobs_like(seed=0, n_rct=120, n_obs=180, p=8):
    """Jobs-shaped cohort: an RCT block plus observational controls, binary outcome."""
    rng = stream(seed, "fixture")
    x_rct = rng.standard_normal((n_rct, p))
    z_rct = (rng.random(n_rct) < 0.45).astype(np.int64)
    x_obs = rng.standard_normal((n_obs, p)) + 0.5
    x = np.vstack([x_rct, x_obs])
    z = np.concatenate([z_rct, np.zeros(n_obs, dtype=np.int64)])
    w = rng.normal(0.0, 0.6, p)
    base = logistic(x @ w - 0.3)
    lift = 0.15 * (x[:, 0] > 0)
    y = (rng.random(n_rct + n_obs) < np.clip(base + z * lift, 0, 1)).astype(np.float64)
    rct = np.concatenate([np.ones(n_rct, bool), np.zeros(n_obs, bool)])
    return Dataset(x=x, z=z, y=y, rct=rct, binary=True)


def make_twins_like(seed=0, n=400, p=10):
    """Twins-shaped cohort: both binary potential outcomes known, biased selection."""
    rng = stream(seed, "fixture")
    x = rng.standard_normal((n, p))
    w = rng.normal(0.0, 0.5, p)
    p0 = logistic(x @ w - 1.5)
    p1 = logistic(x @ w - 1.8)
    u = rng.random(n)
    y0 = (u < p0).astype(np.float64)
    y1 = (u < p1).astype(np.float64)
    z, e = twins_assignment(x, seed)
    y = np.where(z == 1, y1, y0)
    ycf = np.where(z == 1, y0, y1)
    return Dataset(x=x, z=z, y=y, e=e, y0=y0, y1=y1, ycf=ycf, binary=True)


def fixture_path(name):
    """Path of a bundled fixture, e.g. ``fixture_path("jobs_like.csv")``."""
    from importlib.resources import files
    return str(files("smrlnn") / "fixtures" / name)
