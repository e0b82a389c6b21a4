"""Run configuration, trajectory-record files and plot-data tables.

Configuration files are YAML mappings::

    experiment: DephasingFeedback      # preset name (see ``qthermo presets``)
    parameters: {gamma_phi: 0.1, cutoff: 0.05}
    n_trajectories: 1000
    dt: 0.01                           # overrides the preset timestep
    seed: 0
    scheme: qsd                        # optional, must match the preset
    output_dir: out
    threads: 1
    export: {records: false, histograms: true, estimators: true}

Energies are in units of ``hbar w0``, times in ``1/w0``.

Record files are JSON lines: a header ``{"schema": "qthermo.records",
"version": 1}`` followed by one trajectory per line.  Floats use the
shortest repr that round-trips exactly, complex numbers are ``[re, im]``
pairs and non-finite values the strings ``"+inf"``, ``"-inf"``, ``"nan"``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .ensemble import EnsembleStats, exact_distribution, histogram
from .errors import ConfigParseError, ConfigValidationError, RecordFormatError, SchemaVersionMismatchError
from .experiments import PRESETS, ExperimentSpec, build_preset
from .irreversibility import EntropyBreakdown
from .ledger import ThermoLedger
from .unraveling import SCHEMES, TrajectoryRecord

SCHEMA = "qthermo.records"
SCHEMA_VERSION = 1
OUTPUT_ENV = "QTHERMO_OUTPUT_DIR"
UNITS = "energy in hbar*omega0, time in 1/omega0"

EXPORT_FLAGS = ("records", "histograms", "estimators")

# Parameters that must be >= 0 (rates, cutoffs) or > 0 (scales).
NON_NEGATIVE = {"gamma", "gamma_phi", "cutoff", "amplitude"}
POSITIVE = {"dt", "duration", "omega0", "omega1", "beta"}


# -- configuration ----------------------------------------------------------------------


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "qthermo_output")


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    parameters: dict[str, Any] = field(default_factory=dict)
    n_trajectories: int = 1000
    dt: float | None = None
    seed: int = 0
    scheme: str | None = None
    output_dir: str = field(default_factory=default_output_dir)
    threads: int = 1
    export: dict[str, bool] = field(default_factory=lambda: {"records": False, "histograms": True, "estimators": True})

    def resolved_parameters(self) -> dict[str, Any]:
        """Preset defaults overlaid with the config values."""
        params = {k: p.default for k, p in PRESETS[self.experiment][1].items()}
        params.update(self.parameters)
        if self.dt is not None:
            params["dt"] = self.dt
        return params

    def build(self) -> ExperimentSpec:
        try:
            return build_preset(self.experiment, **self.resolved_parameters())
        except ValueError as exc:
            raise ConfigValidationError("parameters", str(exc)) from exc


TOP_KEYS = {f for f in RunConfig.__dataclass_fields__}


def _check_type(key: str, value, kind: type, nullable: bool = False):
    if value is None:
        if nullable:
            return None
        raise ConfigValidationError(key, "must not be null")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigValidationError(key, f"expected {kind.__name__}, got {value!r}")
    return value


def _check_sign(key: str, value, name: str | None = None) -> None:
    if value is None:
        return
    name = name or key
    if key in NON_NEGATIVE and value < 0:
        raise ConfigValidationError(name, f"must be non-negative, got {value}")
    if key in POSITIVE and not value > 0:
        raise ConfigValidationError(name, f"must be positive, got {value}")


def validate_config(data: Any) -> RunConfig:
    """Check a parsed mapping and fill defaults."""
    if not isinstance(data, dict):
        raise ConfigValidationError("<root>", "config must be a mapping")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigValidationError(str(unknown[0]), "unknown key")
    if "experiment" not in data:
        raise ConfigValidationError("experiment", "missing")
    name = data["experiment"]
    if name not in PRESETS:
        raise ConfigValidationError("experiment", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    schema = PRESETS[name][1]

    raw = data.get("parameters") or {}
    if not isinstance(raw, dict):
        raise ConfigValidationError("parameters", "must be a mapping")
    params = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigValidationError(f"parameters.{key}", f"unknown parameter for {name}")
        p = schema[key]
        params[key] = _check_type(f"parameters.{key}", value, p.kind, p.nullable)
        _check_sign(key, params[key], f"parameters.{key}")

    kw: dict[str, Any] = {"experiment": name, "parameters": params}
    if "n_trajectories" in data:
        kw["n_trajectories"] = _check_type("n_trajectories", data["n_trajectories"], int)
        if kw["n_trajectories"] < 1:
            raise ConfigValidationError("n_trajectories", "must be at least 1")
    if data.get("dt") is not None:
        if "dt" not in schema:
            raise ConfigValidationError("dt", f"{name} has no timestep")
        kw["dt"] = _check_type("dt", data["dt"], float)
        _check_sign("dt", kw["dt"])
    if "seed" in data:
        kw["seed"] = _check_type("seed", data["seed"], int)
        if kw["seed"] < 0:
            raise ConfigValidationError("seed", "must be non-negative")
    if "threads" in data:
        kw["threads"] = _check_type("threads", data["threads"], int)
        if kw["threads"] < 1:
            raise ConfigValidationError("threads", "must be at least 1")
    if "output_dir" in data:
        kw["output_dir"] = str(_check_type("output_dir", data["output_dir"], str))
    if data.get("scheme") is not None:
        kw["scheme"] = _check_type("scheme", data["scheme"], str)
        if kw["scheme"] not in SCHEMES:
            raise ConfigValidationError("scheme", f"expected one of {SCHEMES}")
    export = dict(RunConfig.__dataclass_fields__["export"].default_factory())
    raw_export = data.get("export") or {}
    if not isinstance(raw_export, dict):
        raise ConfigValidationError("export", "must be a mapping")
    for key, value in raw_export.items():
        if key not in EXPORT_FLAGS:
            raise ConfigValidationError(f"export.{key}", "unknown export flag")
        export[key] = _check_type(f"export.{key}", value, bool)
    kw["export"] = export

    config = RunConfig(**kw)
    spec = config.build()
    if config.scheme is not None and config.scheme != spec.protocol.scheme:
        raise ConfigValidationError("scheme", f"{name} runs the {spec.protocol.scheme!r} unraveling")
    return config


def parse_config(text: str) -> RunConfig:
    """Parse and validate YAML config text."""
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = None if mark is None else mark.line + 1
        column = None if mark is None else mark.column + 1
        raise ConfigParseError(exc.problem or str(exc), line, column) from exc
    except yaml.YAMLError as exc:
        raise ConfigParseError(str(exc)) from exc
    if data is None:
        data = {}
    return validate_config(data)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Apply command-line overrides (``None`` values are ignored) and revalidate."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if not overrides:
        return config
    data = {
        "experiment": config.experiment,
        "parameters": dict(config.parameters),
        "n_trajectories": config.n_trajectories,
        "dt": config.dt,
        "seed": config.seed,
        "scheme": config.scheme,
        "output_dir": config.output_dir,
        "threads": config.threads,
        "export": dict(config.export),
    }
    data.update(overrides)
    return validate_config(data)


# -- value encoding -----------------------------------------------------------------------


def _enc_float(x: float):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return x


def _dec_float(x) -> float:
    if isinstance(x, str):
        if x not in ("nan", "+inf", "-inf"):
            raise ValueError(f"bad float {x!r}")
        return float(x)
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f"bad float {x!r}")
    return float(x)


def _enc_real(a) -> list:
    return [_enc_float(v) for v in np.asarray(a, dtype=float).ravel()]


def _enc_array(a: np.ndarray | None):
    """``{"shape", "dtype", "data"}`` with complex entries as ``[re, im]``."""
    if a is None:
        return None
    a = np.asarray(a)
    if np.iscomplexobj(a):
        data = [[_enc_float(z.real), _enc_float(z.imag)] for z in a.ravel()]
        kind = "complex"
    elif np.issubdtype(a.dtype, np.integer):
        data = [int(v) for v in a.ravel()]
        kind = "int"
    else:
        data = _enc_real(a)
        kind = "float"
    return {"shape": list(a.shape), "dtype": kind, "data": data}


def _dec_array(obj) -> np.ndarray | None:
    if obj is None:
        return None
    shape = tuple(int(s) for s in obj["shape"])
    kind = obj["dtype"]
    data = obj["data"]
    if kind == "complex":
        arr = np.array([complex(_dec_float(re), _dec_float(im)) for re, im in data], dtype=complex)
    elif kind == "int":
        arr = np.array([int(v) for v in data], dtype=np.int64)
    elif kind == "float":
        arr = np.array([_dec_float(v) for v in data], dtype=float)
    else:
        raise ValueError(f"unknown dtype {kind!r}")
    return arr.reshape(shape)


def _encode_record(rec: TrajectoryRecord, entropy: EntropyBreakdown | None) -> dict:
    lg = rec.ledger
    return {
        "seed": rec.seed,
        "index": rec.index,
        "scheme": rec.scheme,
        "kraus": rec.kraus,
        "times": _enc_array(np.asarray(rec.times, dtype=float)),
        "outcomes": _enc_array(rec.outcomes),
        "initial_index": rec.initial_index,
        "initial_probability": _enc_float(rec.initial_probability),
        "initial_state": _enc_array(rec.initial_state),
        "final_index": rec.final_index,
        "final_state": _enc_array(rec.final_state_),
        "log_prob": _enc_float(rec.log_prob),
        "log_pd": _enc_float(rec.log_pd),
        "log_pr": _enc_float(rec.log_pr),
        "ledger": {
            "u": _enc_array(lg.u_series),
            "dw": _enc_array(lg.dw_series),
            "dq": _enc_array(lg.dq_series),
            "dq_cl": _enc_array(lg.dq_cl_series),
            "dq_q": _enc_array(lg.dq_q_series),
            "fb_work": _enc_array(lg.fb_work_series),
            "final_heat": _enc_float(lg.final_heat),
            "split_available": bool(lg.split_available),
        },
        "entropy": None if entropy is None else {
            "boundary": None if entropy.boundary is None else _enc_float(entropy.boundary),
            "conditional": _enc_float(entropy.conditional),
        },
        "states": _enc_array(rec.states),
        "controls": _enc_array(rec.controls),
        "pre_feedback": _enc_array(rec.pre_feedback),
    }


def _decode_record(obj: dict) -> tuple[TrajectoryRecord, EntropyBreakdown | None]:
    lg = obj["ledger"]
    ledger = ThermoLedger(
        _dec_array(lg["u"]),
        _dec_array(lg["dw"]),
        _dec_array(lg["dq"]),
        _dec_array(lg["dq_cl"]),
        _dec_array(lg["fb_work"]),
        _dec_float(lg["final_heat"]),
        bool(lg["split_available"]),
    )
    ent = obj.get("entropy")
    entropy = None
    if ent is not None:
        boundary = None if ent["boundary"] is None else _dec_float(ent["boundary"])
        entropy = EntropyBreakdown(boundary, _dec_float(ent["conditional"]))
    if obj["scheme"] not in SCHEMES:
        raise ValueError(f"unknown scheme {obj['scheme']!r}")
    rec = TrajectoryRecord(
        times=_dec_array(obj["times"]),
        scheme=obj["scheme"],
        kraus=obj["kraus"],
        outcomes=_dec_array(obj["outcomes"]),
        states=_dec_array(obj["states"]),
        initial_state=_dec_array(obj["initial_state"]),
        initial_index=int(obj["initial_index"]),
        initial_probability=_dec_float(obj["initial_probability"]),
        seed=obj["seed"],
        index=int(obj["index"]),
        ledger=ledger,
        log_prob=_dec_float(obj["log_prob"]),
        log_pd=_dec_float(obj["log_pd"]),
        log_pr=_dec_float(obj["log_pr"]),
        final_index=None if obj["final_index"] is None else int(obj["final_index"]),
        final_state_=_dec_array(obj["final_state"]),
        controls=_dec_array(obj["controls"]),
        pre_feedback=_dec_array(obj["pre_feedback"]),
    )
    return rec, entropy


# -- record files ---------------------------------------------------------------------------


def write_records(records: Sequence[TrajectoryRecord], path, entropies: Sequence[EntropyBreakdown | None] | None = None) -> Path:
    """Write records (and optional entropy breakdowns) as JSON lines."""
    path = Path(path)
    if entropies is not None and len(entropies) != len(records):
        raise ValueError("entropies must match records one to one")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION, "count": len(records)}) + "\n")
        for i, rec in enumerate(records):
            ent = None if entropies is None else entropies[i]
            fh.write(json.dumps(_encode_record(rec, ent), allow_nan=False, separators=(",", ":")) + "\n")
    return path


def read_records(path, with_entropy: bool = False):
    """Read a record file; returns records, or ``(records, entropies)``."""
    path = Path(path)
    records: list[TrajectoryRecord] = []
    entropies: list[EntropyBreakdown | None] = []
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(1, f"bad header: {exc.msg}") from exc
        if not isinstance(header, dict) or header.get("schema") != SCHEMA:
            raise RecordFormatError(1, "not a qthermo record file")
        if header.get("version") != SCHEMA_VERSION:
            raise SchemaVersionMismatchError(f"record schema version {header.get('version')!r}, expected {SCHEMA_VERSION}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec, ent = _decode_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordFormatError(lineno, f"{type(exc).__name__}: {exc}") from exc
            records.append(rec)
            entropies.append(ent)
    if "count" in header and header["count"] != len(records):
        raise RecordFormatError(len(records) + 2, f"expected {header['count']} records, found {len(records)}")
    return (records, entropies) if with_entropy else records


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)


def records_equal(a: TrajectoryRecord, b: TrajectoryRecord) -> bool:
    """Field-by-field exact comparison (NaN equals NaN)."""
    la, lb = a.ledger, b.ledger
    scalars = ("scheme", "kraus", "initial_index", "seed", "index", "final_index")
    floats = ("initial_probability", "log_prob", "log_pd", "log_pr")
    arrays = ("times", "outcomes", "states", "initial_state", "final_state_", "controls", "pre_feedback")
    ledger = ("u_series", "dw_series", "dq_series", "dq_cl_series", "fb_work_series")
    return (
        all(getattr(a, f) == getattr(b, f) for f in scalars)
        and all(_same(getattr(a, f), getattr(b, f)) for f in floats + arrays)
        and all(_same(getattr(la, f), getattr(lb, f)) for f in ledger)
        and _same(la.final_heat, lb.final_heat)
        and la.split_available == lb.split_available
    )


# -- plot data ------------------------------------------------------------------------------


def _fmt(x) -> str:
    return "%.17g" % x


def write_table(path, columns: Sequence[str], rows, comment: str = UNITS) -> Path:
    """Comma-separated table with a ``#`` comment line and a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return path


def _distribution_table(path, values, weights, label: str) -> Path:
    vals, masses = exact_distribution(values, weights)
    return write_table(path, (label, "mass"), zip(vals, masses))


def _paired_increments(stats: EnsembleStats, bins: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled ``P[dW_fb]`` and ``P[-dQ_q]`` on common bins."""
    fb = stats.increments["fb_work"].ravel()
    mq = -stats.increments["dq_q"].ravel()
    lo = min(fb.min(), mq.min())
    hi = max(fb.max(), mq.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    _, p_fb = histogram(fb, policy=edges)
    _, p_mq = histogram(mq, policy=edges)
    return edges, p_fb, p_mq


def export_plot_data(stats: EnsembleStats, path) -> list[Path]:
    """Write the tables behind the standard figures into directory ``path``.

    Always: ``estimators.csv`` and one ``hist_<name>.csv`` per histogram.
    With sampled times: ``timeseries.csv`` (t, U_jump, U_nojump, Q_cl,
    Q_q, boundary entropy, jump fraction, U).  Discrete experiments add
    ``dist_<quantity>.csv`` (value, mass) tables; feedback runs add
    ``increments.csv`` with the paired ``dW_fb`` and ``-dQ_q`` distributions.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    est_rows = [(k, e.value, e.stderr, str(e.n)) for k, e in sorted(stats.estimators.items())]
    est_rows.append(("divergent_count", float(stats.divergent_count), 0.0, str(stats.n_trajectories)))
    files.append(write_table(out / "estimators.csv", ("name", "value", "stderr", "n"), est_rows))
    for name, (edges, masses) in sorted(stats.histograms.items()):
        files.append(write_table(out / f"hist_{name}.csv", ("left", "right", "mass"), zip(edges[:-1], edges[1:], masses)))

    ts = stats.time_series
    if ts:
        cols = ("t", "U_jump", "U_nojump", "Q_cl", "Q_q", "boundary_entropy", "jump_fraction", "U")
        keys = ("t", "u_jump", "u_nojump", "mean_q_cl", "mean_q_q", "boundary_entropy", "jump_fraction", "mean_u")
        files.append(write_table(out / "timeseries.csv", cols, zip(*(ts[k] for k in keys))))

    per = stats.per_trajectory
    if stats.experiment in ("PrepareMeasure", "JarzynskiClosed"):
        for key, label in (("q_q", "Q_q"), ("delta_u", "delta_U"), ("work", "W"), ("entropy", "entropy")):
            vals = per.get(key)
            if vals is None:
                continue
            keep = np.isfinite(vals)
            if not keep.any():
                continue
            w = None if stats.weights is None else stats.weights[keep]
            files.append(_distribution_table(out / f"dist_{key}.csv", vals[keep], w, label))
    if "fb_work" in stats.increments:
        edges, p_fb, p_mq = _paired_increments(stats)
        centers = 0.5 * (edges[1:] + edges[:-1])
        files.append(write_table(out / "increments.csv", ("center", "P_dW_fb", "P_minus_dQ_q"), zip(centers, p_fb, p_mq)))
    return files


def entropies_from_stats(stats: EnsembleStats) -> list[EntropyBreakdown]:
    per = stats.per_trajectory
    boundary = per.get("boundary")
    return [
        EntropyBreakdown(None if boundary is None else float(boundary[i]), float(per["conditional"][i]))
        for i in range(stats.n_trajectories)
    ]


__all__ = [
    "EXPORT_FLAGS", "OUTPUT_ENV", "RunConfig", "SCHEMA", "SCHEMA_VERSION", "default_output_dir",
    "entropies_from_stats", "export_plot_data", "load_config", "parse_config", "read_records", "records_equal",
    "validate_config", "with_overrides", "write_records", "write_table",
]
