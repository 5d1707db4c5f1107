"""Experiment configuration files.

The format is line-oriented ``key = value`` text with section headers::

    [run]
    id = sine1d
    epochs = 3000
    seeds = 0,1,2
    out = runs
    thresholds = 0.01,0.001

    [problem]
    kind = mlp_regression
    hidden = 16,16

    [method:spgd]
    method = spgd-adam
    precond = damped_lanczos
    schedule_factor = 0.7
    schedule_interval = 100

Each ``[method:<label>]`` section is one optimizer configuration.  If
``method`` is omitted the label itself must name a method.  Missing keys take
the defaults listed in :data:`PROBLEM_PARAMS` and :data:`METHOD_KEYS`; unknown
keys are an error.  :func:`dumps` writes every field, so
``loads(dumps(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace

from .errors import InvalidConfigError
from .optimizers import METHODS, HyperParams, StaircaseSchedule, check_method
from .precond import KINDS, PrecondSpec


def _ints(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _floats(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


PROBLEM_PARAMS = {
    "linear_lsq": {"m": (int, 16), "n": (int, 16), "kappa": (float, 10.0), "seed": (int, 0)},
    "discrete_pde": {
        "n": (int, 31),
        "nonlinearity": (str, "cubic"),
        "init_radius": (float, 0.1),
    },
    "mlp_regression": {
        "dim": (int, 1),
        "frequency": (float, 3.0),
        "hidden": (_ints, (16, 16)),
        "batch_size": (int, 256),
        "test_size": (int, 4096),
        "seed": (int, 0),
        "activation": (str, "tanh"),
    },
    "poisson": {
        "dim": (int, 2),
        "hidden": (_ints, (16, 16)),
        "n_interior": (int, 256),
        "n_boundary": (int, 128),
        "lambda_bc": (float, 1000.0),
        "test_size": (int, 4096),
        "seed": (int, 0),
        "activation": (str, "tanh"),
    },
    "softmax_toy": {
        "classes": (int, 3),
        "dim": (int, 2),
        "per_class": (int, 20),
        "hidden": (_ints, ()),
        "seed": (int, 0),
    },
}

_OPTIONAL_FLOAT = object()

METHOD_KEYS = {
    "method": (str, None),
    "alpha": (float, 1e-2),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "schedule_factor": (float, 1.0),
    "schedule_interval": (int, 1),
    "schedule_floor": (float, 0.0),
    "precond": (str, "damped_lanczos"),
    "mu": (float, 1e-5),
    "p": (float, 0.5),
    "k": (int, 10),
    "delta": (float, 1e-4),
    "trunc_tol": (_OPTIONAL_FLOAT, None),
}

RUN_KEYS = {
    "id": (str, "run"),
    "epochs": (int, 100),
    "seeds": (_ints, (0,)),
    "out": (str, "runs"),
    "thresholds": (_floats, (1e-2, 1e-3)),
}


@dataclass(frozen=True)
class ProblemConfig:
    kind: str
    params: tuple  # sorted (key, value) pairs

    def kwargs(self) -> dict:
        return dict(self.params)


@dataclass(frozen=True)
class MethodConfig:
    label: str
    method: str
    hyper: HyperParams


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    epochs: int
    seeds: tuple
    out: str
    thresholds: tuple
    problem: ProblemConfig
    methods: tuple = field(default_factory=tuple)

    def with_overrides(self, seeds=None, epochs=None, out=None) -> "RunConfig":
        cfg = self
        if seeds is not None:
            cfg = replace(cfg, seeds=tuple(seeds))
        if epochs is not None:
            cfg = replace(cfg, epochs=int(epochs))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        _validate_run(cfg)
        return cfg

    def hash(self) -> str:
        """Digest of the experiment; the output directory is not part of it."""
        return hashlib.sha256(dumps(replace(self, out="")).encode()).hexdigest()


def _convert(section, key, raw, conv):
    try:
        if conv is _OPTIONAL_FLOAT:
            return None if raw.strip().lower() == "none" else float(raw)
        return conv(raw)
    except ValueError as exc:
        raise InvalidConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _read_section(parser, section, schema):
    values = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise InvalidConfigError(f"unknown key {key!r} in section [{section}]")
        values[key] = _convert(section, key, raw, schema[key][0])
    for key, (_, default) in schema.items():
        values.setdefault(key, default)
    return values


def _validate_run(cfg: RunConfig) -> None:
    if cfg.epochs < 1:
        raise InvalidConfigError("epochs must be >= 1")
    if not cfg.seeds:
        raise InvalidConfigError("at least one seed is required")
    if any(s < 0 for s in cfg.seeds):
        raise InvalidConfigError("seeds must be nonnegative")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise InvalidConfigError("seeds must be distinct")
    if any(not t > 0 for t in cfg.thresholds):
        raise InvalidConfigError("thresholds must be positive")
    if any(a <= b for a, b in zip(cfg.thresholds, cfg.thresholds[1:])):
        raise InvalidConfigError("thresholds must be strictly descending")


def _method_config(label, values) -> MethodConfig:
    method = values.pop("method") or label
    if method not in METHODS:
        raise InvalidConfigError(f"[method:{label}] unknown method {method!r}")
    if values["precond"] not in KINDS:
        raise InvalidConfigError(f"[method:{label}] unknown precond {values['precond']!r}")
    precond = PrecondSpec(
        kind=values["precond"],
        mu=values["mu"],
        p=values["p"],
        k=values["k"],
        delta=values["delta"],
        trunc_tol=values["trunc_tol"],
    )
    schedule = StaircaseSchedule(
        values["schedule_factor"], values["schedule_interval"], values["schedule_floor"]
    )
    hyper = HyperParams(
        alpha=values["alpha"],
        beta1=values["beta1"],
        beta2=values["beta2"],
        eps=values["eps"],
        schedule=schedule,
        precond=precond,
    )
    check_method(method, hyper)
    return MethodConfig(label, method, hyper)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"malformed config: {exc}") from exc

    methods = []
    for section in parser.sections():
        if section in ("run", "problem"):
            continue
        if not section.startswith("method:") or not section[len("method:") :].strip():
            raise InvalidConfigError(f"unknown section [{section}]")
        label = section[len("method:") :].strip()
        if any(c in label for c in "/\\ "):
            raise InvalidConfigError(f"invalid method label {label!r}")
        methods.append(_method_config(label, _read_section(parser, section, METHOD_KEYS)))
    if not methods:
        raise InvalidConfigError("config defines no [method:<label>] section")

    run = _read_section(parser, "run", RUN_KEYS) if parser.has_section("run") else {
        k: d for k, (_, d) in RUN_KEYS.items()
    }
    if not parser.has_section("problem") or not parser.has_option("problem", "kind"):
        raise InvalidConfigError("[problem] section with a 'kind' key is required")
    kind = parser.get("problem", "kind").strip()
    if kind not in PROBLEM_PARAMS:
        raise InvalidConfigError(f"unknown problem kind {kind!r}")
    schema = dict(PROBLEM_PARAMS[kind], kind=(str, kind))
    params = _read_section(parser, "problem", schema)
    params.pop("kind")

    cfg = RunConfig(
        run_id=run["id"],
        epochs=run["epochs"],
        seeds=run["seeds"],
        out=run["out"],
        thresholds=run["thresholds"],
        problem=ProblemConfig(kind, tuple(sorted(params.items()))),
        methods=tuple(methods),
    )
    if not cfg.run_id or any(c in cfg.run_id for c in "/\\"):
        raise InvalidConfigError(f"invalid run id {cfg.run_id!r}")
    _validate_run(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def _method_values(m: MethodConfig) -> dict:
    h = m.hyper
    values = {
        "method": m.method,
        "alpha": h.alpha,
        "beta1": h.beta1,
        "beta2": h.beta2,
        "eps": h.eps,
        "schedule_factor": h.schedule.factor,
        "schedule_interval": h.schedule.interval,
        "schedule_floor": h.schedule.floor,
        "precond": h.precond.kind,
        "mu": h.precond.mu,
        "p": h.precond.p,
        "k": h.precond.k,
        "delta": h.precond.delta,
        "trunc_tol": "none" if h.precond.trunc_tol is None else h.precond.trunc_tol,
    }
    return values


def dumps(cfg: RunConfig) -> str:
    lines = ["[run]"]
    run = {
        "id": cfg.run_id,
        "epochs": cfg.epochs,
        "seeds": cfg.seeds,
        "out": cfg.out,
        "thresholds": cfg.thresholds,
    }
    lines += [f"{k} = {_fmt(v)}" for k, v in run.items()]
    lines += ["", "[problem]", f"kind = {cfg.problem.kind}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in cfg.problem.params]
    for m in cfg.methods:
        lines += ["", f"[method:{m.label}]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in _method_values(m).items()]
    return "\n".join(lines) + "\n"
