"""Command-line entry point: simulate | train | eval | bench | gradcheck."""
import argparse
import csv
import dataclasses
import difflib
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, datagen, losses, metrics, trainer
from .datagen import CsvSchema, SimConfig
from .errors import ConfigError, DataError, NonFiniteLossError, SmrlError
from .losses import LossWeights
from .nn import Architecture, build_bundle, forward_rep, grad_rel_error, numerical_grad
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NONFINITE = 5
EXIT_GRADCHECK = 6

CONFIG_VERSION = 1
GRAD_TOL = 1e-4


# --- configuration ---------------------------------------------------------------------

@dataclass
class DataSection:
    csv: str = None
    schema: dict = None  # CsvSchema keys, or a path string to a schema JSON


@dataclass
class EvalSection:
    checkpoint: str = None
    task: str = "auto"  # auto | sim | rct | twins
    true_ate: float = None
    h_div: bool = False


@dataclass
class BenchSection:
    models: list = field(default_factory=lambda: [1])
    N: list = field(default_factory=lambda: [500])
    ablations: list = field(default_factory=lambda: ["v0", "v1", "v2", "full"])
    reps: int = 10
    seed: int = 0
    h_div: bool = False
    ate_samples: int = 100_000


@dataclass
class GradcheckSection:
    draws: int = 20
    seed: int = 0
    rows: int = 12


SECTIONS = {
    "simulate": SimConfig,
    "train": TrainConfig,
    "data": DataSection,
    "eval": EvalSection,
    "bench": BenchSection,
    "gradcheck": GradcheckSection,
}
NESTED = {("train", "weights"): LossWeights, ("train", "arch"): Architecture}


def _field_names(cls):
    return [f.name for f in dataclasses.fields(cls)]


def _unknown(keys, cls, where):
    valid = _field_names(cls)
    out = []
    for k in keys:
        if k not in valid:
            near = difflib.get_close_matches(k, valid, n=1, cutoff=0.0)
            hint = f" (did you mean {near[0]!r}?)" if near else ""
            out.append(f"unknown key {k!r} in {where}{hint}")
    return out


def validate_config(raw):
    """Check every key at once; returns the problems (empty when valid)."""
    if not isinstance(raw, dict):
        return ["config must be a JSON object"]
    problems = []
    for key in raw:
        if key == "version":
            if raw[key] != CONFIG_VERSION:
                problems.append(f"unsupported config version {raw[key]!r}")
            continue
        if key not in SECTIONS:
            near = difflib.get_close_matches(key, list(SECTIONS), n=1, cutoff=0.0)
            problems.append(f"unknown section {key!r}" + (f" (did you mean {near[0]!r}?)" if near else ""))
            continue
        body = raw[key]
        if not isinstance(body, dict):
            problems.append(f"section {key!r} must be an object")
            continue
        problems += _unknown(body, SECTIONS[key], key)
        for (sec, sub), cls in NESTED.items():
            if sec == key and isinstance(body.get(sub), dict):
                problems += _unknown(body[sub], cls, f"{key}.{sub}")
    return problems


def _build(cls, body):
    body = dict(body or {})
    if cls is SimConfig and body.get("seed") is None:
        body.pop("seed", None)
    return cls(**body)


@dataclass
class Resolved:
    simulate: SimConfig
    train: TrainConfig
    data: DataSection
    eval: EvalSection
    bench: BenchSection
    gradcheck: GradcheckSection

    def to_dict(self):
        out = {"version": CONFIG_VERSION}
        for name in SECTIONS:
            obj = getattr(self, name)
            out[name] = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
        return out


def resolve_config(raw, seed=None, reps=None):
    """Validate, apply flag overrides and instantiate every section.

    Seed precedence: ``--seed`` flag, then the config file, then ``SMRL_SEED``.
    """
    raw = dict(raw or {})
    problems = validate_config(raw)
    if problems:
        raise ConfigError(problems)
    env_seed = os.environ.get("SMRL_SEED")
    if seed is None and env_seed is not None:
        try:
            env_seed = int(env_seed)
        except ValueError:
            raise ConfigError([f"SMRL_SEED must be an integer, got {env_seed!r}"]) from None
    sections = {}
    for name in ("simulate", "train", "bench", "gradcheck"):
        body = dict(raw.get(name) or {})
        if seed is not None:
            body["seed"] = seed
        elif "seed" not in body and env_seed is not None:
            body["seed"] = env_seed
        sections[name] = body
    if reps is not None:
        sections["bench"]["reps"] = reps
    built = {}
    for name, cls in SECTIONS.items():
        body = sections.get(name, raw.get(name))
        try:
            built[name] = _build(cls, body)
        except ConfigError as exc:
            problems += [f"{name}: {p}" for p in exc.problems]
        except (TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    if not problems:
        problems += _check_sections(built)
    if problems:
        raise ConfigError(problems)
    return Resolved(**built)


def _check_sections(b):
    problems = []
    if b["eval"].task not in ("auto", "sim", "rct", "twins"):
        problems.append(f"eval: unknown task {b['eval'].task!r}")
    bench = b["bench"]
    if not bench.models or not bench.N or not bench.ablations:
        problems.append("bench: models, N and ablations must be nonempty")
    for m in bench.models:
        if m not in (1, 2, 3):
            problems.append(f"bench: unknown outcome model {m!r}")
    for a in bench.ablations:
        if a not in trainer.ABLATIONS:
            problems.append(f"bench: unknown ablation {a!r}")
    if bench.reps < 1:
        problems.append("bench: reps must be >= 1")
    if b["gradcheck"].draws < 1:
        problems.append("gradcheck: draws must be >= 1")
    return problems


def load_config(path):
    """Read a config file; a run manifest is accepted and its resolved config reused."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    if isinstance(raw, dict) and "manifest_version" in raw:
        return raw["config"]
    return raw


# --- manifest --------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    artifact_version: str = __version__
    manifest_version: int = 1

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- datasets --------------------------------------------------------------------------

def _schema(section):
    if section.schema is None:
        return None
    if isinstance(section.schema, str):
        return CsvSchema.load(section.schema)
    unknown = sorted(set(section.schema) - set(_field_names(CsvSchema)))
    if unknown:
        raise ConfigError([f"unknown schema key {k!r}" for k in unknown])
    return CsvSchema(**section.schema)


def load_dataset(cfg, path=None, schema_path=None):
    """CSV from ``--data`` / ``data.csv`` if given, otherwise a fresh simulation."""
    path = path or cfg.data.csv
    if path:
        schema = CsvSchema.load(schema_path) if schema_path else _schema(cfg.data)
        return datagen.load_csv(path, schema)
    return datagen.simulate(cfg.simulate)


# --- commands --------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    out = _out_dir(args)
    started = _now()
    ds = datagen.simulate(cfg.simulate)
    path = out / "dataset.csv"
    datagen.write_csv(ds, path)
    RunManifest("simulate", cfg.to_dict(), [cfg.simulate.seed], [path.name], started, _now()).write(out)
    print(f"wrote {path} ({ds.n} rows, {int(ds.z.sum())} treated)")
    return EXIT_OK


def cmd_train(args, cfg):
    out = _out_dir(args)
    started = _now()
    ds = load_dataset(cfg, args.data, args.schema)
    model, hist = trainer.train(ds, cfg.train)
    ckpt, hpath = out / "checkpoint.json", out / "history.csv"
    trainer.save_checkpoint(model, ckpt, hist)
    hist.write_csv(hpath)
    RunManifest("train", cfg.to_dict(), [cfg.train.seed], [ckpt.name, hpath.name], started, _now()).write(out)
    print(f"stopped: {hist.stop_reason} after {hist.stopped_epoch} epochs (kept epoch {hist.selected_epoch})")
    if hist.stop_reason == "nonfinite_loss":
        print(f"non-finite {hist.nonfinite}; checkpoint holds the last finite parameters", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


def infer_task(ds):
    if ds.rct is not None:
        return "rct"
    if ds.binary and ds.potential_outcomes() is not None:
        return "twins"
    if ds.has_truth:
        return "sim"
    raise DataError("cannot infer an evaluation task: no ground truth, RCT flag or counterfactual column")


def evaluate(model, ds, task="auto", true_ate=None, h_div=False, seed=0):
    """Populate the metrics that apply to ``task``; the rest stay absent."""
    if ds.p != model.bundle.phi.config.n_in:
        raise DataError(f"checkpoint expects {model.bundle.phi.config.n_in} covariates, dataset has {ds.p}")
    task = infer_task(ds) if task == "auto" else task
    pred = trainer.predict_ite(model, ds.x)
    rep = metrics.EvalReport(seed=seed, n_eval=ds.n)
    if task == "sim":
        if not ds.has_truth:
            raise DataError("sim task needs mu0 and mu1 columns")
        rep.pehe = metrics.pehe(pred.tau, ds.mu1, ds.mu0)
        truth = float(np.mean(ds.mu1 - ds.mu0)) if true_ate is None else true_ate
        rep.ate_bias = metrics.ate_bias(pred.tau, truth)
    elif task == "rct":
        if ds.rct is None:
            raise DataError("rct task needs an RCT flag column")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep.policy_risk = metrics.policy_risk(pred.mu1, pred.mu0, ds.y, ds.z, ds.rct)
        rep.att_bias = metrics.att_bias(pred.tau, ds.y, ds.z, ds.rct)
    elif task == "twins":
        po = ds.potential_outcomes()
        if po is None:
            raise DataError("twins task needs both potential outcomes")
        y0, y1 = po
        rep.auc = metrics.outcome_auc(np.concatenate([pred.mu0, pred.mu1]), np.concatenate([y0, y1]))
        truth = float(np.mean(y1 - y0)) if true_ate is None else true_ate
        rep.ate_bias = metrics.ate_bias(pred.tau, truth)
    else:
        raise ConfigError([f"unknown task {task!r}"])
    if h_div:
        r = forward_rep(model.bundle.phi, model.scaler.x(ds.x))
        rep.h_div = metrics.h_divergence(r[ds.z == 0], r[ds.z == 1], seed=seed)
    return rep


def write_reports(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(metrics.EvalReport.columns())
        for rep in reports:
            w.writerow(rep.to_row())


def cmd_eval(args, cfg):
    out = _out_dir(args)
    started = _now()
    ckpt = args.checkpoint or cfg.eval.checkpoint
    if not ckpt:
        raise ConfigError(["eval needs --checkpoint or eval.checkpoint"])
    model = trainer.load_checkpoint(ckpt)
    ds = load_dataset(cfg, args.data, args.schema)
    rep = evaluate(model, ds, args.task or cfg.eval.task, cfg.eval.true_ate, cfg.eval.h_div, model.config.seed)
    path = out / "eval.csv"
    write_reports(path, [rep])
    RunManifest("eval", cfg.to_dict(), [model.config.seed], [path.name], started, _now()).write(out)
    for name in metrics.EvalReport.METRICS:
        v = getattr(rep, name)
        if v is not None:
            print(f"{name:12s} {v:.6g}")
    return EXIT_OK


# --- bench -----------------------------------------------------------------------------

RESULT_COLUMNS = ("model", "N", "method", "replicate", "seed", "status", "pehe", "ate_bias", "h_div", "epochs")


def replicate_seeds(base, reps):
    return [int(s) for s in np.random.SeedSequence(int(base)).generate_state(reps)]


def run_replicate(task):
    """One (model, N, replicate) cell: simulate once, train every ablation on it."""
    model_id, n, rep, seed, ablations, train_cfg, true_ate, want_div = task
    rows = []
    try:
        ds = datagen.simulate(SimConfig(N=n, outcome_model=model_id, seed=seed))
    except SmrlError as exc:
        return [(model_id, n, a, rep, seed, f"failed: {exc}", None, None, None, 0) for a in ablations]
    for ab in ablations:
        cfg = dataclasses.replace(train_cfg, ablation=ab, seed=seed)
        try:
            fitted, hist = trainer.train(ds, cfg)
        except (SmrlError, FloatingPointError, np.linalg.LinAlgError) as exc:
            rows.append((model_id, n, ab, rep, seed, f"failed: {exc}", None, None, None, 0))
            continue
        if hist.stop_reason == "nonfinite_loss":
            rows.append((model_id, n, ab, rep, seed, "nonfinite_loss", None, None, None, hist.stopped_epoch))
            continue
        tau = trainer.predict_ite(fitted, ds.x).tau
        hd = hist.selected("h_div") if want_div else None
        rows.append((model_id, n, ab, rep, seed, "ok", metrics.pehe(tau, ds.mu1, ds.mu0),
                     metrics.ate_bias(tau, true_ate), hd, hist.stopped_epoch))
    return rows


def format_pm(mean, sd):
    return f"{mean:.2f} ± {sd:.2f}"


def aggregate(rows):
    """Mean and sample SD (n - 1) per (model, N, method) over successful replicates."""
    groups = {}
    for r in rows:
        groups.setdefault(r[:3], []).append(r)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if m[5] == "ok"]
        entry = {"model": key[0], "N": key[1], "method": key[2], "n_ok": len(ok), "n_failed": len(members) - len(ok)}
        for col, i in (("pehe", 6), ("ate_bias", 7)):
            vals = np.array([m[i] for m in ok], dtype=float)
            entry[f"{col}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"{col}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
        out.append(entry)
    return out


AGG_COLUMNS = ("model", "N", "method", "n_ok", "n_failed", "pehe_mean", "pehe_sd", "ate_bias_mean", "ate_bias_sd",
               "pehe", "ate_bias")


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_bench(out, rows, agg):
    res, agg_csv, agg_txt = out / "results.csv", out / "aggregate.csv", out / "aggregate.txt"
    with open(res, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    table = []
    for a in agg:
        pm = {c: (format_pm(a[f"{c}_mean"], a[f"{c}_sd"]) if a[f"{c}_mean"] is not None else "")
              for c in ("pehe", "ate_bias")}
        table.append([_cell(a[c]) for c in AGG_COLUMNS[:-2]] + [pm["pehe"], pm["ate_bias"]])
    with open(agg_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        w.writerows(table)
    shown = ("model", "N", "method", "n_ok", "n_failed", "pehe", "ate_bias")
    idx = [AGG_COLUMNS.index(c) for c in shown]
    lines = [list(shown)] + [[row[i] for i in idx] for row in table]
    widths = [max(len(line[i]) for line in lines) for i in range(len(shown))]
    with open(agg_txt, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write("  ".join(c.rjust(wd) for c, wd in zip(line, widths)).rstrip() + "\n")
    return [res.name, agg_csv.name, agg_txt.name]


def bench(cfg, workers=1):
    """Run the grid; returns ``(rows, aggregate, seeds)``. Rows are ordered independently of ``workers``."""
    b = cfg.bench
    seeds = replicate_seeds(b.seed, b.reps)
    truths = {m: datagen.true_ate(m, M=b.ate_samples) for m in b.models}
    tasks = [(m, n, rep, seeds[rep], tuple(b.ablations), cfg.train, truths[m], b.h_div)
             for m in b.models for n in b.N for rep in range(b.reps)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_replicate, tasks))
    else:
        chunks = [run_replicate(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    order = {a: i for i, a in enumerate(b.ablations)}
    rows.sort(key=lambda r: (b.models.index(r[0]), b.N.index(r[1]), order[r[2]], r[3]))
    return rows, aggregate(rows), seeds


def cmd_bench(args, cfg):
    out = _out_dir(args)
    started = _now()
    rows, agg, seeds = bench(cfg, args.workers or os.cpu_count() or 1)
    files = write_bench(out, rows, agg)
    RunManifest("bench", cfg.to_dict(), seeds, files, started, _now()).write(out)
    with open(out / "aggregate.txt", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    failed = sum(a["n_failed"] for a in agg)
    if failed:
        print(f"{failed} replicate run(s) failed and were excluded", file=sys.stderr)
    return EXIT_OK


# --- gradcheck -------------------------------------------------------------------------

def gradcheck_draw(rng, rows=12):
    """A random small instance: (bundle, batch, weights)."""
    p = int(rng.integers(2, 6))
    arch = Architecture(rep_layers=int(rng.integers(1, 3)), rep_width=int(rng.integers(2, 7)),
                        rep_dim=int(rng.integers(2, 6)), head_layers=int(rng.integers(0, 3)),
                        head_width=int(rng.integers(2, 7)), disc_layers=int(rng.integers(0, 3)),
                        disc_width=int(rng.integers(2, 7)))
    bundle = build_bundle(p, arch, seed=int(rng.integers(2**31)))
    x = rng.standard_normal((rows, p))
    z = np.zeros(rows, dtype=np.int64)
    z[rng.permutation(rows)[: rows // 2]] = 1
    y = rng.standard_normal(rows)
    w = LossWeights(lambda_reg=float(rng.uniform(0, 0.1)), lambda1=float(rng.uniform(0.01, 0.1)),
                    lambda2=float(rng.uniform(0.01, 0.1)))
    return bundle, losses.Batch(x, z, y), w


def gradcheck(draws=20, seed=0, rows=12, corrupt=None):
    """Largest relative error per loss over ``draws`` random instances."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(9,)))
    worst = {name: 0.0 for name in losses.LOSS_NAMES}
    for _ in range(draws):
        bundle, batch, w = gradcheck_draw(rng, rows)
        for name in losses.LOSS_NAMES:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                _, grads = losses.loss_and_grads(name, bundle, batch, w)
                for part, g in grads.items():
                    if name == corrupt:
                        g = g + 1e-2
                    base = bundle.flat(part)
                    num = numerical_grad(
                        lambda v, part=part: losses.loss_value(name, bundle.with_flat(part, v), batch, w), base)
                    worst[name] = max(worst[name], grad_rel_error(g, num))
    return worst


def cmd_gradcheck(args, cfg):
    g = cfg.gradcheck
    worst = gradcheck(g.draws, g.seed, g.rows, corrupt=args.corrupt)
    failed = [n for n, e in worst.items() if not e <= GRAD_TOL]
    for name, err in worst.items():
        print(f"{name:8s} max_rel_err={err:.3e} {'FAIL' if name in failed else 'ok'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# --- entry point -----------------------------------------------------------------------

COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "gradcheck": cmd_gradcheck}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a run manifest)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config (fallback: SMRL_SEED)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--reps", type=int, help="Monte Carlo replicates for bench")
    common.add_argument("--workers", type=int, help="bench worker processes (default: all cores)")
    parser = argparse.ArgumentParser(prog="smrlnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort CSV")
    p_train = sub.add_parser("train", parents=[common], help="fit a model")
    p_eval = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    for p in (p_train, p_eval):
        p.add_argument("--data", help="dataset CSV (default: simulate from the config)")
        p.add_argument("--schema", help="column-role schema JSON for --data")
    p_eval.add_argument("--checkpoint", help="checkpoint JSON from train")
    p_eval.add_argument("--task", choices=("auto", "sim", "rct", "twins"))
    sub.add_parser("bench", parents=[common], help="Monte Carlo ablation benchmark")
    p_grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p_grad.add_argument("--corrupt", choices=losses.LOSS_NAMES, help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(load_config(args.config), seed=args.seed, reps=args.reps)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
