"""Stochastic (structured) variational inference driver.

The driver is model-agnostic.  A model describes its global variables as a
dict of named blocks, each with an exponential family and a prior, and
supplies a local E-step that turns sufficient statistics of the global
variables into expected conjugate statistics for a minibatch.  Each
iteration then

1. computes the step size and the data multiplier,
2. picks a minibatch,
3. either samples the global variables by inversion (SSVI, SSVI-A) or takes
   their expected sufficient statistics (mean-field SVI),
4. runs the local E-step on the minibatch,
5. applies the selected M-step, and
6. appends a row to the :class:`RunTrace`.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np


__all__ = [
    "Schedule",
    "MStep",
    "EStepKind",
    "EStep",
    "RunConfig",
    "RunTrace",
    "ConjugateModel",
    "EStepError",
    "step_size",
    "data_multiplier",
    "mstep_meanfield",
    "mstep_ssvi_a",
    "mstep_ssvi",
    "apply_V",
    "natural_gradient",
    "run",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "DOMAIN_FLOOR",
]

DOMAIN_FLOOR = 1e-8
CHECKPOINT_VERSION = 1

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Schedule:
    """Robbins-Monro step sizes ``scale * t ** -kappa``.

    ``ramp`` linearly grows the data multiplier over the first sweep.
    """

    scale: float = 1.0
    kappa: float = 0.75
    ramp: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("step-size scale must be positive")
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0.5, 1]")


def step_size(t, sched):
    if t < 1:
        raise ValueError("iterations are counted from 1")
    return sched.scale * float(t) ** (-sched.kappa)


def data_multiplier(t, n_groups, batch_size, sched):
    """Weight ``N_eff / S`` applied to minibatch statistics."""
    if not 1 <= batch_size <= n_groups:
        raise ValueError("need 1 <= batch_size <= n_groups")
    n_eff = min(t * batch_size, n_groups) if sched.ramp else n_groups
    return n_eff / batch_size


class MStep(str, enum.Enum):
    MEANFIELD = "mf"
    SSVI = "ssvi"
    SSVI_A = "ssvi-a"


class EStepKind(str, enum.Enum):
    EXACT = "exact"
    MEANFIELD = "meanfield"
    GIBBS = "gibbs"


@dataclass(frozen=True)
class EStep:
    """Local E-step selection and its knobs."""

    kind: EStepKind = EStepKind.EXACT
    num_samples: int = 5
    burn_in: int = 5
    max_iters: int = 100
    tol: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", EStepKind(self.kind))
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Everything the driver needs besides the model."""

    mstep: MStep = MStep.SSVI_A
    estep: EStep = field(default_factory=EStep)
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: Optional[int] = None
    max_iterations: int = 100
    seed: int = 0
    tol: float = 0.0
    patience: int = 5
    diagnostics_every: int = 1
    init_scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "mstep", MStep(self.mstep))
        if isinstance(self.estep, Mapping):
            object.__setattr__(self, "estep", EStep(**self.estep))
        if isinstance(self.schedule, Mapping):
            object.__setattr__(self, "schedule", Schedule(**self.schedule))
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mstep"] = self.mstep.value
        d["estep"]["kind"] = self.estep.kind.value
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lambda_hash(lam):
    h = hashlib.sha1()
    for name in sorted(lam):
        h.update(name.encode())
        h.update(np.ascontiguousarray(lam[name], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


class RunTrace:
    """Per-iteration record of a run."""

    base_columns = ("t", "rho", "multiplier", "lambda_hash", "rel_change")

    def __init__(self):
        self.rows = []
        self.rng_state = None

    def append(self, row):
        if self.rows and row["t"] <= self.rows[-1]["t"]:
            raise ValueError("trace iterations must increase")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def columns(self):
        cols = list(self.base_columns)
        for row in self.rows:
            for key in row:
                if key not in cols and key != "wall_ms":
                    cols.append(key)
        return cols + ["wall_ms"]

    def digest(self):
        """Hash of everything except wall-clock times."""
        stripped = [{k: v for k, v in row.items() if k != "wall_ms"} for row in self.rows]
        return hashlib.sha256(json.dumps(stripped, sort_keys=True, default=float).encode()).hexdigest()[:16]

    def to_csv(self, path):
        import csv

        cols = self.columns
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row.get(c, "") for c in cols})


class EStepError(RuntimeError):
    """A local E-step failed; carries the partial run state."""

    def __init__(self, message, iteration, lam, trace):
        super().__init__(message)
        self.iteration = iteration
        self.lam = lam
        self.trace = trace


class ConjugateModel:
    """Base class for conditionally conjugate models.

    Subclasses set ``families`` (block name -> exponential family) and
    implement :meth:`prior`, :meth:`local_stats` and ``n_groups``.
    ``local_stats`` receives sufficient statistics of the global variables,
    either evaluated at a draw or their expectations under ``q``, and returns
    the summed expected conjugate statistics over the minibatch.
    """

    families: Mapping = {}
    supported_esteps = (EStepKind.EXACT,)

    @property
    def n_groups(self):
        raise NotImplementedError

    def prior(self) -> Params:
        raise NotImplementedError

    def local_stats(self, batch, t_beta, estep, rng) -> Params:
        raise NotImplementedError

    def init_lambda(self, rng, scale=None) -> Params:
        """Prior plus ``scale * Exponential(1)`` noise per coordinate."""
        prior = self.prior()
        if scale is None:
            scale = self.init_scale()
        return {name: eta + scale * rng.exponential(1.0, size=eta.shape) for name, eta in prior.items()}

    def init_scale(self):
        return 0.1

    def diagnostics(self, lam) -> Dict[str, float]:
        return {}

    def begin_run(self):
        """Reset any per-run E-step state."""


def _project(lam):
    return np.maximum(lam, DOMAIN_FLOOR)


def mstep_meanfield(lam, eta, scaled_stats, rho):
    """``(1 - rho) lam + rho (eta + stats)`` with stats taken at ``E_q[t(beta)]``."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    return _project((1.0 - rho) * lam + rho * (eta + scaled_stats))


def mstep_ssvi_a(lam, eta, scaled_stats, rho):
    """Same arithmetic as :func:`mstep_meanfield`; stats were taken at a draw."""
    return mstep_meanfield(lam, eta, scaled_stats, rho)


def apply_V(family, draw, lam, stats):
    """``(d^2A)^{-1} (dR/dlam) (dt/dbeta)^T stats`` for one block."""
    return family.apply_V(draw, lam, stats)


def natural_gradient(family, draw, lam, eta, stats):
    """Stochastic natural gradient ``-lam + eta + V stats``."""
    return -lam + eta + apply_V(family, draw, lam, stats)


def mstep_ssvi(family, lam, eta, draw, scaled_stats, rho):
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    return _project((1.0 - rho) * lam + rho * (eta + apply_V(family, draw, lam, scaled_stats)))


class _Batches:
    """Minibatches without replacement, reshuffled every sweep."""

    def __init__(self, n, size, rng):
        self.n, self.size, self.rng = n, size, rng
        self.order = np.empty(0, dtype=np.int64)

    def next(self):
        if self.size >= self.n:
            return np.arange(self.n)
        if self.order.size < self.size:
            # leftovers open the next sweep, so a batch never repeats an index
            fresh = self.rng.permutation(self.n)
            fresh = fresh[~np.isin(fresh, self.order)]
            self.order = np.concatenate([self.order, fresh])
        batch, self.order = self.order[: self.size], self.order[self.size:]
        return np.sort(batch)


def _streams(seed):
    names = ("init", "batches", "draws", "estep")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def run(model, config, init_lambda=None, rng_state=None, callback: Optional[Callable] = None):
    """Run stochastic variational inference on ``model``.

    Parameters
    ----------
    model : ConjugateModel
    config : RunConfig
    init_lambda : dict, optional
        Starting natural parameters (warm start).  Drawn from the model's
        initialiser when omitted.
    rng_state : dict, optional
        Bit-generator states to resume the random streams from.
    callback : callable, optional
        Called as ``callback(t, lam)`` after every iteration.

    Returns
    -------
    lam : dict of ndarray
    trace : RunTrace
    """
    if config.estep.kind not in model.supported_esteps:
        raise ValueError(f"{type(model).__name__} does not support the {config.estep.kind.value} E-step")
    streams = _streams(config.seed)
    if rng_state is not None:
        for name, state in rng_state.items():
            streams[name].bit_generator.state = state
    prior = model.prior()
    if init_lambda is None:
        lam = model.init_lambda(streams["init"], config.init_scale)
    else:
        lam = {k: np.array(v, dtype=float) for k, v in init_lambda.items()}
    for name, fam in model.families.items():
        lam[name] = fam.validate(lam[name])
        if lam[name].shape != prior[name].shape:
            raise ValueError(f"block {name!r} has shape {lam[name].shape}, expected {prior[name].shape}")

    n = model.n_groups
    size = n if config.batch_size is None else min(config.batch_size, n)
    batches = _Batches(n, size, streams["batches"])
    trace = RunTrace()
    model.begin_run()
    calm = 0
    for t in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        rho = step_size(t, config.schedule)
        mult = data_multiplier(t, n, size, config.schedule)
        batch = batches.next()
        draws = {}
        if config.mstep is MStep.MEANFIELD:
            t_beta = {k: fam.grad_log_normalizer(lam[k]) for k, fam in model.families.items()}
        else:
            for k, fam in model.families.items():
                draws[k] = fam.sample(lam[k], streams["draws"])
            t_beta = {k: fam.draw_stats(draws[k]) for k, fam in model.families.items()}
        try:
            stats = model.local_stats(batch, t_beta, config.estep, streams["estep"])
        except Exception as exc:  # noqa: BLE001 - rewrapped with run context
            raise EStepError(f"E-step failed at iteration {t}: {exc}", t, lam, trace) from exc

        new = {}
        for k, fam in model.families.items():
            scaled = mult * stats[k]
            if config.mstep is MStep.SSVI:
                new[k] = mstep_ssvi(fam, lam[k], prior[k], draws[k], scaled, rho)
            else:
                new[k] = mstep_meanfield(lam[k], prior[k], scaled, rho)
        num = sum(float(np.sum((new[k] - lam[k]) ** 2)) for k in lam)
        den = sum(float(np.sum(lam[k] ** 2)) for k in lam)
        rel = float(np.sqrt(num / den)) if den > 0 else 0.0
        lam = new

        row = {"t": t, "rho": rho, "multiplier": mult, "lambda_hash": lambda_hash(lam), "rel_change": rel}
        if config.diagnostics_every and t % config.diagnostics_every == 0:
            row.update(model.diagnostics(lam))
        row["wall_ms"] = 1000.0 * (time.perf_counter() - start)
        trace.append(row)
        if callback is not None:
            callback(t, lam)
        if config.tol > 0:
            calm = calm + 1 if rel < config.tol else 0
            if calm >= config.patience:
                break
    trace.rng_state = {name: g.bit_generator.state for name, g in streams.items()}
    return lam, trace


def save_checkpoint(path, lam, iteration, config_digest, model_name, rng_state=None, extra=None):
    """Write natural parameters and run metadata to a versioned ``.npz``."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "config_digest": config_digest,
        "model": model_name,
        "rng_state": rng_state,
        "blocks": sorted(lam),
        "extra": extra or {},
    }
    arrays = {f"lambda__{k}": np.asarray(v) for k, v in lam.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, default=_json_default)), **arrays)


def load_checkpoint(path):
    """Returns ``(lam, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        lam = {k: np.array(data[f"lambda__{k}"]) for k in meta["blocks"]}
    return lam, meta


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
