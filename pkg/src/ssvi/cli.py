"""Command-line harness: ``ssvi {generate,fit,matrix,warmstart,evaluate}``.

Every command reads one YAML config; values not given fall back to
:data:`DEFAULTS` (printed by ``ssvi --help``).  ``--set key.sub=value``
overrides single entries.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .engine import EStep, RunConfig, Schedule, load_checkpoint, run, save_checkpoint
from .evaluation import count_active_components, heldout_predictive_lda, mc_kl_dpmb, mixture_log_likelihood
from .models import dpmb, lda

log = logging.getLogger("ssvi")

METRICS_SCHEMA_VERSION = 1

DEFAULTS_YAML = """\
model: dpmb              # dpmb | lda
seed: 0                  # drives every random stream of a command
data:
  path: data/dataset     # .npz for dpmb, text corpus for lda
  heldout: 200           # lda: trailing documents kept out of training
generate:                # synthetic data (cmd generate)
  dpmb: {n_components: 100, n_features: 100, n_samples: 1000, alpha: 20.0}
  lda: {n_topics: 10, n_words: 200, n_docs: 2000, doc_len: 50, alpha: 0.1, eta: 0.1}
hyper:                   # model hyperparameters used when fitting
  dpmb: {n_components: 100, alpha: 20.0}
  lda: {n_topics: 10, alpha: 0.1, eta: 0.1}
mstep: ssvi-a            # mf | ssvi | ssvi-a | cgs (dpmb only)
estep: {kind: exact, num_samples: 5, burn_in: 5, max_iters: 100, tol: 0.001}
schedule: {scale: 1.0, kappa: 0.75, ramp: false}
batch_size: null         # null = all groups every iteration
iterations: 500          # global updates, or sweeps for cgs
cgs_burn_in: 250
init_scale: null         # null = model default
diagnostics_every: 10    # diagnostic metrics every n iterations (0 = never)
kl_samples: 100000
output: runs/out
matrix:                  # cmd matrix: every combination, every seed
  mstep: [mf, ssvi-a]
  estep: [exact]
  seeds: [0, 1, 2, 3, 4]
  hyper: [{}]            # list of partial overrides of the hyper block
"""
DEFAULTS = yaml.safe_load(DEFAULTS_YAML)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; raised before any compute."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, value in (over or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_set(cfg, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file, then ``key=value`` overrides."""
    user = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        _apply_set(cfg, item)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    model = cfg.get("model")
    if model not in ("dpmb", "lda"):
        raise ConfigError(f"model must be dpmb or lda, got {model!r}")
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer")
    if cfg["mstep"] == "cgs":
        if model != "dpmb":
            raise ConfigError("collapsed Gibbs (mstep: cgs) is only available for dpmb")
    else:
        try:
            _run_config(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if model == "lda" and cfg["estep"]["kind"] == "exact":
        log.info("lda has no tractable exact E-step; Gibbs is used")


def _run_config(cfg):
    return RunConfig(
        mstep=cfg["mstep"],
        estep=EStep(**cfg["estep"]),
        schedule=Schedule(**cfg["schedule"]),
        batch_size=cfg["batch_size"],
        max_iterations=cfg["iterations"],
        seed=cfg["seed"],
        init_scale=cfg["init_scale"],
        diagnostics_every=cfg["diagnostics_every"],
    )


def config_digest(cfg):
    """Hash of everything that affects the numbers (not output paths)."""
    core = {k: v for k, v in cfg.items() if k not in ("output", "matrix")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def model_digest(cfg):
    """Identifies the model a checkpoint belongs to: kind, hyperparameters, data."""
    blob = {
        "model": cfg["model"],
        "hyper": cfg["hyper"][cfg["model"]],
        "heldout": cfg["data"]["heldout"] if cfg["model"] == "lda" else None,
        "data": _file_digest(cfg["data"]["path"]),
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def _topics_path(path):
    return Path(str(path) + ".topics.csv")


def _load_data(cfg):
    path = Path(cfg["data"]["path"])
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist; run `ssvi generate` first")
    if cfg["model"] == "dpmb":
        try:
            return dpmb.load_dataset(path)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"{path} is not a dpmb dataset: {exc}") from exc
    try:
        corpus = lda.read_corpus(path)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path} is not an lda corpus: {exc}") from exc
    tp = _topics_path(path)
    if tp.exists():
        corpus.topics = np.loadtxt(tp, delimiter=",", skiprows=1, ndmin=2)
    n_held = int(cfg["data"]["heldout"])
    if not 0 <= n_held < len(corpus):
        raise ConfigError(f"heldout={n_held} must be in [0, {len(corpus)})")
    n_train = len(corpus) - n_held
    train = corpus.subset(range(n_train))
    held = corpus.subset(range(n_train, len(corpus))) if n_held else None
    return train, held


def _build_model(cfg, data):
    hyper = cfg["hyper"][cfg["model"]]
    if cfg["model"] == "dpmb":
        return dpmb.DPMBModel(data.y, hyper["n_components"], hyper["alpha"])
    train, held = data
    return lda.LDAModel(train, hyper["n_topics"], hyper["alpha"], hyper["eta"], heldout=held)


def cmd_generate(cfg):
    path = Path(cfg["data"]["path"])
    path.parent.mkdir(parents=True, exist_ok=True)
    gen = cfg["generate"][cfg["model"]]
    if cfg["model"] == "dpmb":
        ds = dpmb.generate(seed=cfg["seed"], **gen)
        dpmb.save_dataset(path, ds)
        dpmb.export_csv(path.with_suffix(".csv"), ds)
        summary = {"path": str(path), "n_samples": int(ds.y.shape[0]), "n_features": int(ds.y.shape[1]),
                   "true_active_components": ds.n_used}
    else:
        corpus = lda.synth_corpus(seed=cfg["seed"], **gen)
        lda.write_corpus(path, corpus)
        lda.export_topics_csv(_topics_path(path), corpus.topics)
        summary = {"path": str(path), "n_docs": len(corpus), "n_words": corpus.n_words,
                   "n_tokens": corpus.n_tokens}
    print(json.dumps(summary))
    return summary


# ---------------------------------------------------------------------------
# Fitting and evaluation
# ---------------------------------------------------------------------------

def evaluate_lambda(cfg, data, lam, rng=None):
    """Model-appropriate metrics for natural parameters ``lam``."""
    metrics, notes = {}, []
    if cfg["model"] == "dpmb":
        hyper = cfg["hyper"]["dpmb"]
        counts = lam["pi"] - hyper["alpha"] / hyper["n_components"]
        pi, phi = dpmb.DPMBModel.point_estimate(lam)
        metrics["active_components"] = count_active_components(counts, dpmb.ACTIVE_THRESHOLD)
        metrics["train_loglik_per_obs"] = float(mixture_log_likelihood(data.y, pi, phi).mean())
        if data.true_params is None:
            notes.append("dataset has no ground truth; KL not computed")
        else:
            kl = mc_kl_dpmb(data.true_params, (pi, phi), cfg["kl_samples"],
                            rng=np.random.default_rng([cfg["seed"], 7]))
            metrics["kl"] = kl.value
            metrics["kl_std_error"] = kl.std_error
            metrics["true_active_components"] = data.n_used
    else:
        train, held = data
        topics = lam["topics"] / lam["topics"].sum(1, keepdims=True)
        alpha = cfg["hyper"]["lda"]["alpha"]
        if held is None:
            notes.append("no held-out documents; predictive score not computed")
        else:
            metrics["heldout_loglik"] = heldout_predictive_lda(held.docs, topics, alpha)
            if train.topics is not None and train.topics.shape == topics.shape:
                metrics["heldout_loglik_true_topics"] = heldout_predictive_lda(held.docs, train.topics, alpha)
    return metrics, notes


def _write_metrics(path, cfg, metrics, notes, extra=None):
    doc = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "model": cfg["model"],
        "seed": cfg["seed"],
        "config_digest": config_digest(cfg),
        "metrics": metrics,
        "notes": notes,
    }
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def _fit(cfg, data, out, init_lambda=None, extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = _build_model(cfg, data)
    digest = config_digest(cfg)
    start = time.perf_counter()
    if cfg["mstep"] == "cgs":
        if init_lambda is not None:
            raise ConfigError("collapsed Gibbs cannot be warm-started from natural parameters")
        lam, iteration, rng_state = _fit_cgs(cfg, model, out)
    else:
        lam, trace = run(model, _run_config(cfg), init_lambda=init_lambda)
        trace.to_csv(out / "trace.csv")
        iteration, rng_state = len(trace), trace.rng_state
    elapsed = time.perf_counter() - start
    save_checkpoint(out / "checkpoint.npz", lam, iteration, digest, cfg["model"], rng_state=rng_state,
                    extra={"model_digest": model_digest(cfg), "seed": cfg["seed"], "config": cfg})
    metrics, notes = evaluate_lambda(cfg, data, lam)
    metrics["iterations"] = iteration
    metrics["fit_seconds"] = elapsed
    doc = _write_metrics(out / "metrics.json", cfg, metrics, notes, extra)
    print(json.dumps(doc["metrics"], sort_keys=True))
    return lam, doc


def _fit_cgs(cfg, model, out):
    hyper = cfg["hyper"]["dpmb"]
    start = time.perf_counter()
    res = dpmb.collapsed_gibbs(model.y, hyper["n_components"], hyper["alpha"], n_sweeps=cfg["iterations"],
                               burn_in=cfg["cgs_burn_in"], rng=cfg["seed"])
    per_sweep = 1000.0 * (time.perf_counter() - start) / max(cfg["iterations"], 1)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "occupied_components", "wall_ms"])
        for t, k in enumerate(res.active_trace, start=1):
            writer.writerow([t, int(k), per_sweep])
    return res.as_lambda(), cfg["iterations"], None


def cmd_fit(cfg):
    data = _load_data(cfg)
    return _fit(cfg, data, cfg["output"])


def cmd_evaluate(cfg, checkpoint):
    lam, meta = load_checkpoint(checkpoint)
    if meta["model"] != cfg["model"]:
        raise ConfigError(f"checkpoint holds a {meta['model']} model, config says {cfg['model']}")
    data = _load_data(cfg)
    metrics, notes = evaluate_lambda(cfg, data, lam)
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    doc = _write_metrics(out / "metrics.json", cfg, metrics, notes,
                         {"checkpoint": str(checkpoint), "checkpoint_config_digest": meta["config_digest"],
                          "iteration": meta["iteration"]})
    print(json.dumps(doc, sort_keys=True))
    return doc


def cmd_warmstart(cfg, checkpoint):
    """Continue from a stored ``lambda`` under the config's (E, M) cell.

    The step-size schedule restarts at ``t = 1``; this is recorded in the
    metrics file.
    """
    lam, meta = load_checkpoint(checkpoint)
    if meta["model"] != cfg["model"]:
        raise ConfigError(f"checkpoint holds a {meta['model']} model, config says {cfg['model']}")
    data = _load_data(cfg)
    want = model_digest(cfg)
    have = meta.get("extra", {}).get("model_digest")
    if have != want:
        raise ConfigError(f"checkpoint model digest {have} does not match this config ({want}); "
                          "hyperparameters or data differ")
    extra = {"warm_start": {"checkpoint": str(checkpoint), "from_config_digest": meta["config_digest"],
                            "from_iteration": meta["iteration"], "schedule_restarted": True}}
    return _fit(cfg, data, cfg["output"], init_lambda=lam, extra=extra)


def _matrix_cells(cfg):
    grid = cfg["matrix"]
    for hyper in grid.get("hyper") or [{}]:
        for mstep in grid["mstep"]:
            for estep in grid["estep"]:
                for seed in grid["seeds"]:
                    cell = copy.deepcopy(cfg)
                    cell["mstep"], cell["seed"] = mstep, int(seed)
                    cell["estep"]["kind"] = estep
                    cell["hyper"][cfg["model"]].update(hyper)
                    yield hyper, cell


def cmd_matrix(cfg):
    """Fit every grid cell; one summary row per cell and seed.

    A failing cell is recorded with its error and the matrix continues.
    """
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg)
    rows = []
    for i, (hyper, cell) in enumerate(_matrix_cells(cfg)):
        cell_dir = out / f"cell{i:03d}_{cell['mstep']}_{cell['estep']['kind']}_s{cell['seed']}"
        row = {"cell": i, "mstep": cell["mstep"], "estep": cell["estep"]["kind"], "seed": cell["seed"],
               "hyper": json.dumps(hyper, sort_keys=True), "status": "ok", "error": ""}
        try:
            validate_config(cell)
            cell["output"] = str(cell_dir)
            _, doc = _fit(cell, data, cell_dir)
            row.update(doc["metrics"])
        except Exception as exc:  # noqa: BLE001 - recorded, matrix continues
            log.warning("cell %d failed: %s", i, exc)
            row["status"], row["error"] = "failed", f"{type(exc).__name__}: {exc}"
        rows.append(row)
    cols = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    with open(out / "matrix.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in cols})
    return rows


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssvi",
        description="Structured stochastic variational inference experiments.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="default configuration:\n\n" + DEFAULTS_YAML,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, checkpoint=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. -s schedule.kappa=0.9")
        p.add_argument("-o", "--output", help="output directory (overrides config)")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint .npz written by fit")
        return p

    add("generate", "write a synthetic dataset")
    add("fit", "fit a model; writes trace.csv, checkpoint.npz, metrics.json")
    add("matrix", "fit every (M-step, E-step, hyperparameter, seed) cell; writes matrix.csv")
    add("warmstart", "continue fitting from a checkpoint under a new config", checkpoint=True)
    add("evaluate", "compute metrics for a checkpoint", checkpoint=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.output:
            cfg["output"] = args.output
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "matrix":
            cmd_matrix(cfg)
        elif args.command == "warmstart":
            cmd_warmstart(cfg, args.checkpoint)
        else:
            cmd_evaluate(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"ssvi: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
