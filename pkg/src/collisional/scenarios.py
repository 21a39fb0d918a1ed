"""JSON scenario configs, the preset catalog and the scenario runner.

A config describes the cycle with symbolic operator builders, the tau sweep,
the initial state and one ``analysis`` block. Running a scenario writes one CSV
per series and a JSON manifest with every check and whether it passed.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import platform
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np
import scipy

from . import constants
from .dynamics import (
    GeneratorTerm,
    MasterEquationSpec,
    Regime,
    build_master_equation,
    classify_regime,
    fit_generator,
    integrate_master,
    magnus_defect,
    probe_states,
    propagate_exact,
    zeno_decay_curve,
    zeno_factor,
)
from .engine import build_channel, evolve, mean_propagator, stepped_propagator, tau_sweep
from .filtering import Feedback, run_ensemble
from .linalg import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    TensorLayout,
    dag,
    embed,
    kron,
    negativity,
    pure_state,
    purity,
    spin,
    trace_distance,
    unitary,
)
from .model import (
    Ancilla,
    CouplingSchedule,
    CycleSpec,
    EigenstatePrep,
    ExplicitPrep,
    GaussianMomentsPrep,
    OscillatorGaussianPrep,
    Scaled,
    SubInteraction,
    limit_set,
)
from .oscillator import annihilation, gaussian_ket, momentum, number, position

OUTPUT_ENV = "COLLISIONAL_OUT"

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 2, 3


class ConfigError(ValueError):
    """Config does not parse or does not match the schema."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None, field: str | None = None):
        self.line, self.column, self.field = line, column, field
        where = []
        if line is not None:
            where.append(f"line {line}, column {column}")
        if field:
            where.append(f"field {field}")
        super().__init__(f"{'; '.join(where)}: {message}" if where else message)


# -- schema and loading ------------------------------------------------------

def schema() -> dict:
    return json.loads(resources.files("collisional").joinpath("scenario.schema.json").read_text())


def _locate(text: str, path: list) -> tuple[int | None, int | None]:
    """Best-effort line/column of the JSON value at ``path``."""
    if text is None or not path:
        return None, None
    key = next((p for p in reversed(path) if isinstance(p, str)), None)
    if key is None:
        return None, None
    idx = text.find(f'"{key}"')
    if idx < 0:
        return None, None
    line = text.count("\n", 0, idx) + 1
    return line, idx - (text.rfind("\n", 0, idx) + 1) + 1


def validate_config(config: dict, text: str | None = None) -> dict:
    """Schema validation followed by a trial build of the cycle."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        line, col = _locate(text, path)
        raise ConfigError(err.message, line, col, "/".join(str(p) for p in path) or "<root>")
    try:
        cycle = build_cycle(config)
        state = build_state(config["initial_state"])
    except (ValueError, KeyError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
    if state.shape != (cycle.dim, cycle.dim):
        raise ConfigError(f"initial state has dimension {state.shape[0]}, system has {cycle.dim}", field="initial_state")
    if config.get("mode") in ("conditional", "both") and not config.get("ensemble"):
        raise ConfigError("conditional mode needs an ensemble block", field="ensemble")
    return config


def load_config(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno, exc.colno) from exc
    return validate_config(config, text)


# -- builders ----------------------------------------------------------------

def build_operator(e: dict) -> np.ndarray:
    op = e["op"]
    if op == "identity":
        return np.eye(e["dim"], dtype=complex)
    if op == "zero":
        return np.zeros((e["dim"], e["dim"]), dtype=complex)
    if op in ("pauli_x", "pauli_y", "pauli_z"):
        return {"pauli_x": PAULI_X, "pauli_y": PAULI_Y, "pauli_z": PAULI_Z}[op].copy()
    if op == "diag":
        return np.diag(np.asarray(e["values"], dtype=float)).astype(complex)
    if op == "position":
        return position(e["dim"], e.get("length", 1.0))
    if op == "momentum":
        return momentum(e["dim"], e.get("length", 1.0))
    if op == "number":
        return number(e["dim"])
    if op == "ladder":
        a = annihilation(e["dim"])
        return dag(a) if e.get("dagger") else a
    if op == "spin":
        return spin(e["spin"], e["axis"])
    if op == "matrix":
        re = np.asarray(e["re"], dtype=float)
        im = np.asarray(e.get("im", np.zeros_like(re)), dtype=float)
        return re + 1j * im
    if op == "scale":
        return e["factor"] * build_operator(e["of"])
    if op == "embed":
        return embed(build_operator(e["of"]), e["index"], e["dims"])
    if op == "sum":
        return sum(build_operator(t) for t in e["terms"])
    if op == "product":
        out = build_operator(e["factors"][0])
        for f in e["factors"][1:]:
            out = out @ build_operator(f)
        return out
    if op == "kron":
        return kron(*[build_operator(f) for f in e["factors"]])
    if op == "power":
        return np.linalg.matrix_power(build_operator(e["of"]), e["n"])
    raise ValueError(f"unknown operator builder {op!r}")


def _opref(e):
    return e if isinstance(e, str) else build_operator(e)


def build_state(e: dict) -> np.ndarray:
    kind = e["kind"]
    if kind == "ket":
        re = np.asarray(e["re"], dtype=float)
        return pure_state(re + 1j * np.asarray(e.get("im", np.zeros_like(re)), dtype=float))
    if kind == "density":
        re = np.asarray(e["re"], dtype=float)
        return re + 1j * np.asarray(e.get("im", np.zeros_like(re)), dtype=float)
    if kind == "coherent":
        alpha = complex(*e["alpha"])
        return pure_state(gaussian_ket(e["dim"], alpha))
    if kind == "fock":
        psi = np.zeros(e["dim"])
        psi[e["level"]] = 1.0
        return pure_state(psi)
    if kind == "maximally_mixed":
        return np.eye(e["dim"], dtype=complex) / e["dim"]
    if kind == "product":
        return kron(*[build_state(f) for f in e["factors"]])
    raise ValueError(f"unknown state kind {kind!r}")


def build_preparation(e: dict):
    kind = e["kind"]
    if kind == "eigenstate":
        return EigenstatePrep(build_operator(e["m"]), e["eigenvalue"])
    if kind == "moment_gaussian":
        return GaussianMomentsPrep(e.get("mean"), e.get("variance", 1.0), e.get("grid"), e.get("nodes", 40))
    if kind == "pure_gaussian_wavefunction":
        r, theta = e.get("squeeze", (0.0, 0.0))
        return OscillatorGaussianPrep(
            e["dim"], e.get("width", 1.0), e.get("mean_x"), e.get("mean_p"), r * np.exp(1j * theta)
        )
    if kind == "explicit":
        return ExplicitPrep(build_state(e["state"]))
    raise ValueError(f"unknown preparation kind {kind!r}")


def build_ancilla(e: dict) -> Ancilla:
    pointer = e.get("pointer")
    return Ancilla(
        build_preparation(e["prep"]),
        {k: build_operator(v) for k, v in e.get("operators", {}).items()},
        tuple(Scaled(_opref(t["op"]), t.get("amplitude", 1.0), t.get("exponent", 0.0)) for t in e.get("m0", [])),
        None if pointer is None else _opref(pointer),
        e.get("label", ""),
    )


def build_schedule(e: dict | None) -> CouplingSchedule:
    e = e or {}
    samples = e.get("samples")
    return CouplingSchedule(
        e.get("amplitude", 1.0), e.get("exponent", 0.0), e.get("profile", "constant"),
        tuple(samples) if samples else None,
    )


def build_cycle(config: dict) -> CycleSpec:
    sysd = config["system"]
    ancillae = tuple(build_ancilla(a) for a in config["ancillae"])
    substeps = tuple(
        tuple(
            SubInteraction(build_operator(c["s"]), c["ancilla"], _opref(c["m"]), build_schedule(c.get("schedule")), c.get("label", ""))
            for c in sub
        )
        for sub in config["substeps"]
    )
    return CycleSpec(TensorLayout(tuple(sysd["dims"])), build_operator(sysd["s0"]), ancillae, substeps, config.get("hbar", 1.0), config["name"])


def sweep_points(config: dict) -> tuple[float, list[int]]:
    """Total time and collision counts of the sweep (taus are converted to counts)."""
    sw = config["sweep"]
    T = float(sw["T"])
    if "n" in sw:
        return T, [int(n) for n in sw["n"]]
    return T, [max(1, round(T / t)) for t in sw["tau"]]


# -- operator shorthands for the presets -------------------------------------

def _op(name, **kw):
    return {"op": name, **kw}


def _scale(f, e):
    return _op("scale", factor=f, of=e)


def _embed(e, index, dims):
    return _op("embed", index=index, dims=list(dims), of=e)


def _series(*terms):
    return [[float(c), float(x)] for c, x in terms]


# -- preset catalog ------------------------------------------------------------

def _exact_unitary_qubit():
    return {
        "name": "exact-unitary-qubit",
        "description": "Spin-1 ancilla in an M eigenstate with an eigenspace-preserving M0: purely unitary collisions.",
        "system": {"dims": [2], "s0": _scale(0.5, _op("pauli_z"))},
        "ancillae": [{
            "label": "spin-1",
            "prep": {"kind": "eigenstate", "m": _op("diag", values=[-1, 0, 1]), "eigenvalue": 1.0},
            "m0": [{"op": _op("diag", values=[0.0, 0.3, 0.7])}],
        }],
        "substeps": [[{"s": _op("pauli_x"), "ancilla": 0, "m": "M", "schedule": {"amplitude": 0.8}}]],
        "sweep": {"T": 10.0, "n": [1000]},
        "initial_state": {"kind": "ket", "re": [0.6, 0.48], "im": [0.0, 0.64]},
        "analysis": {"kind": "purity", "tolerance": 1e-9},
    }


def _weak_potential():
    return {
        "name": "weak-potential",
        "description": "Weak coupling to a mixed qutrit: collisions converge to the unitary with potential xi S.",
        "system": {"dims": [2], "s0": _scale(0.5, _op("pauli_z"))},
        "ancillae": [{
            "prep": {"kind": "explicit", "state": {"kind": "density", "re": [[0.2, 0, 0], [0, 0.3, 0], [0, 0, 0.5]]}},
            "operators": {"M": _op("diag", values=[-1, 0, 1])},
        }],
        "substeps": [[{"s": _op("pauli_x"), "ancilla": 0, "m": "M", "schedule": {"amplitude": 1.0}}]],
        "sweep": {"T": 1.0, "n": [32, 64, 128, 256, 512, 1024, 2048]},
        "initial_state": {"kind": "ket", "re": [1.0, 0.0]},
        "analysis": {"kind": "potential_convergence", "ratio_range": [1.6, 2.4]},
    }


def _zeno_qubit():
    return {
        "name": "zeno-qubit",
        "description": "Strong coupling with fixed Gaussian moments: per-collision coherence factor e^{-sigma^2 ds^2 / 2}.",
        "system": {"dims": [2], "s0": _op("zero", dim=2)},
        "ancillae": [{"prep": {"kind": "moment_gaussian", "mean": 0.0, "variance": 0.25, "nodes": 40}}],
        "substeps": [[{"s": _op("pauli_z"), "ancilla": 0, "m": "M", "schedule": {"amplitude": 1.0, "exponent": -1.0}}]],
        "sweep": {"T": 1.0, "n": [20]},
        "initial_state": {"kind": "ket", "re": [1.0, 1.0]},
        "analysis": {"kind": "zeno", "ds": 2.0, "sigma": 0.5, "tolerance": 1e-10},
    }


def _finite_decoherence(xi=0.4, gamma=0.3, nodes=40):
    return {
        "name": "finite-decoherence-gaussian",
        "description": "Strong coupling with moments mean = xi tau, variance = gamma tau - (xi tau)^2.",
        "system": {"dims": [2], "s0": _scale(0.5, _op("pauli_z"))},
        "ancillae": [{"prep": {
            "kind": "moment_gaussian", "mean": _series((xi, 1)), "variance": _series((gamma, 1), (-xi * xi, 2)), "nodes": nodes,
        }}],
        "substeps": [[{"s": _op("pauli_x"), "ancilla": 0, "m": "M", "schedule": {"amplitude": 1.0, "exponent": -1.0}}]],
        "sweep": {"T": 1.0, "n": [16, 32, 64, 128, 256]},
        "initial_state": {"kind": "ket", "re": [1.0, 0.0]},
        "analysis": {
            "kind": "master_convergence", "limit_taus": [0.1, 0.03, 0.01, 0.003, 0.001],
            "expect_regime": "FiniteDecoherence", "ratio_range": [1.6, 2.4],
        },
    }


def _meter(dim, D, mean_x=0.0, mean_p=0.0, squeeze=(0.0, 0.0)):
    """Pure Gaussian oscillator meter with width D / tau' (mean momentum mean_p * tau')."""
    return {
        "kind": "pure_gaussian_wavefunction", "dim": dim, "width": _series((D, -1)),
        "mean_x": _series((mean_x, 0)), "mean_p": _series((mean_p, 1)), "squeeze": list(squeeze),
    }


def _two_substep_feedback():
    j = 1.0
    return {
        "name": "two-substep-feedback",
        "description": "Spin-1 system read twice by one oscillator meter through p then x: potentials, noise and feedback.",
        "system": {"dims": [3], "s0": _scale(0.3, _op("spin", spin=j, axis="z"))},
        "ancillae": [{
            "label": "meter",
            "prep": _meter(16, 1.0, mean_x=0.4, mean_p=0.5, squeeze=(0.3, 0.7)),
            "m0": [{"op": "x", "amplitude": 0.6}, {"op": "p", "amplitude": 0.5, "exponent": -1.0}],
        }],
        "substeps": [
            [{"s": _op("spin", spin=j, axis="x"), "ancilla": 0, "m": "p", "schedule": {"amplitude": 1.0, "exponent": -1.0}}],
            [{"s": _op("spin", spin=j, axis="z"), "ancilla": 0, "m": "x", "schedule": {"amplitude": 0.7}}],
        ],
        "sweep": {"T": 1.0, "n": [16, 32, 64, 128]},
        "initial_state": {"kind": "ket", "re": [0.6, 0.0, 0.8]},
        "analysis": {
            "kind": "master_convergence", "limit_taus": [0.1, 0.03, 0.01, 0.003, 0.001],
            "ratio_range": [1.5, 2.5],
        },
    }


def _milburn_caves(d_sys=8, d_meter=24, D=1.0, mass=1.0):
    x = _op("position", dim=d_sys)
    p = _op("momentum", dim=d_sys)
    return {
        "name": "milburn-caves",
        "description": "Oscillator read through meter momentum then driven through meter position: the Milburn-Caves equation.",
        "system": {"dims": [d_sys], "s0": _scale(0.5 / mass, _op("power", of=p, n=2))},
        "ancillae": [{"label": "meter", "prep": _meter(d_meter, D)}],
        "substeps": [
            [{"s": _scale(math.sqrt(2.0), x), "ancilla": 0, "m": "p", "schedule": {"amplitude": 1.0, "exponent": -1.0}}],
            [{"s": p, "ancilla": 0, "m": "x", "schedule": {"amplitude": math.sqrt(2.0)}}],
        ],
        "sweep": {"T": 0.5, "n": [20, 40, 80]},
        "initial_state": {"kind": "coherent", "dim": d_sys, "alpha": [0.3, 0.0]},
        "analysis": {
            "kind": "master_convergence", "limit_taus": [0.02, 0.006, 0.002, 0.0006, 0.0002],
            "ratio_range": [1.5, 2.5],
            "fit": {
                "taus": [0.004, 0.002, 0.001],
                "rtol": 0.05,
                "terms": [
                    {"kind": "dissipator", "a": x, "b": x, "expected": 1 / (4 * D), "label": "x noise"},
                    {"kind": "dissipator", "a": p, "b": p, "expected": D / 4, "label": "p noise"},
                    {"kind": "feedback", "a": p, "b": x, "expected": -0.5, "label": "friction"},
                ],
            },
        },
    }


def _newton_pair(d_sys=8, d_meter=6, D=1.0, K=1.0, omega=1.0):
    dims = [d_sys, d_sys]
    x1 = _embed(_op("position", dim=d_sys), 0, dims)
    x2 = _embed(_op("position", dim=d_sys), 1, dims)
    h_osc = _op("sum", terms=[
        _scale(omega, _embed(_op("number", dim=d_sys), 0, dims)),
        _scale(omega, _embed(_op("number", dim=d_sys), 1, dims)),
    ])
    strong = {"amplitude": K, "exponent": -1.0}
    return {
        "name": "newton-pair",
        "description": "Two oscillators measured crosswise by two meters: induced x1 x2 interaction with noise.",
        "system": {"dims": dims, "s0": h_osc},
        "ancillae": [
            {"label": "m1", "prep": _meter(d_meter, D)},
            {"label": "m2", "prep": _meter(d_meter, D)},
        ],
        "substeps": [
            [
                {"label": "M1 = p on m1", "s": x1, "ancilla": 0, "m": "p", "schedule": strong},
                {"label": "M2 = p on m2", "s": x2, "ancilla": 1, "m": "p", "schedule": strong},
            ],
            [
                {"label": "M3 = x on m2", "s": x1, "ancilla": 1, "m": "x", "schedule": {"amplitude": 1.0}},
                {"label": "M4 = x on m1", "s": x2, "ancilla": 0, "m": "x", "schedule": {"amplitude": 1.0}},
            ],
        ],
        "sweep": {"T": 1.0, "n": [1]},
        "initial_state": {"kind": "product", "factors": [{"kind": "fock", "dim": d_sys, "level": 0}] * 2},
        "analysis": {
            "kind": "generator_fit",
            "taus": [0.004, 0.002, 0.001],
            "probes": 3,
            "rtol": 0.05,
            "terms": [
                {"kind": "hamiltonian", "a": _op("product", factors=[x1, x2]), "expected": K / 2, "label": "x1 x2 coupling"},
                {"kind": "dissipator", "a": x1, "b": x1, "expected": D / 8 + K * K / (8 * D), "label": "site 1 noise"},
                {"kind": "dissipator", "a": x2, "b": x2, "expected": D / 8 + K * K / (8 * D), "label": "site 2 noise"},
            ],
        },
    }


def _joint_entangler(g=0.8):
    dims = [2, 2]
    xx = _op("kron", factors=[_op("pauli_x"), _op("pauli_x")])
    return {
        "name": "joint-measurement-entangler",
        "description": "One weakly coupled ancilla reads sigma_x (x) sigma_x: an entangling potential with vanishing noise.",
        "system": {"dims": dims, "s0": _op("sum", terms=[
            _scale(0.2, _embed(_op("pauli_z"), 0, dims)), _scale(0.3, _embed(_op("pauli_z"), 1, dims)),
        ])},
        "ancillae": [{
            "prep": {"kind": "explicit", "state": {"kind": "density", "re": [[0.25, 0], [0, 0.75]]}},
            "operators": {"M": _op("diag", values=[-1, 1])},
        }],
        "substeps": [[{"s": xx, "ancilla": 0, "m": "M", "schedule": {"amplitude": 2 * g}}]],
        "sweep": {"T": 1.0, "n": [1000]},
        "initial_state": {"kind": "ket", "re": [1, 0, 0, 0]},
        "analysis": {
            "kind": "entangler", "limit_taus": [0.1, 0.03, 0.01, 0.003, 0.001],
            "coupling": xx, "min_negativity": 0.01, "max_rate": 1e-12,
        },
    }


def _magnus(profile="symmetric_bump"):
    return {
        "name": "magnus-symmetric-switch",
        "description": "Time-symmetric switching: the stepped propagator differs from the mean one only at third order.",
        "system": {"dims": [2], "s0": _scale(0.5, _op("pauli_z"))},
        "ancillae": [{
            "prep": {"kind": "explicit", "state": {"kind": "ket", "re": [0.8, 0.6]}},
            "operators": {"M": _op("pauli_z")},
            "m0": [{"op": _scale(0.5, _op("pauli_x"))}],
        }],
        "substeps": [[{"s": _op("pauli_x"), "ancilla": 0, "m": "M", "schedule": {"amplitude": 1.0, "profile": profile}}]],
        "sweep": {"T": 1.0, "tau": [0.16, 0.08, 0.04, 0.02, 0.01]},
        "initial_state": {"kind": "ket", "re": [1.0, 0.0]},
        "analysis": {"kind": "magnus", "slices": 4096, "slope_tol": 0.2, "coefficient_rtol": 0.05},
    }


def _filtering(feedback: bool):
    gamma = 1.0
    cfg = {
        "name": "filtering-feedback" if feedback else "filtering-ensemble",
        "description": "Qubit read by a Gaussian meter in the position basis; conditional trajectories averaged.",
        "system": {"dims": [2], "s0": _scale(0.5, _op("pauli_z"))},
        "ancillae": [{"label": "meter", "prep": {
            "kind": "pure_gaussian_wavefunction", "dim": 30, "width": _series((1 / (2 * gamma), -1)),
        }}],
        "substeps": [[{"s": _scale(0.5, _op("pauli_x")), "ancilla": 0, "m": "p", "schedule": {"amplitude": 1.0, "exponent": -1.0}}]],
        "sweep": {"T": 1.0, "n": [100]},
        "mode": "both",
        "ensemble": {"ntraj": 4096, "seed": 2024},
        "initial_state": {"kind": "ket", "re": [1.0, 0.3], "im": [0.0, 0.2]},
        "analysis": {"kind": "filtering", "band": 3.0},
    }
    if feedback:
        cfg["ensemble"]["feedback"] = {"s": _scale(0.5, _op("pauli_z")), "gain": 0.8}
        cfg["analysis"]["gamma"] = gamma
    return cfg


PRESETS: dict[str, Callable[[], dict]] = {
    "exact-unitary-qubit": _exact_unitary_qubit,
    "weak-potential": _weak_potential,
    "zeno-qubit": _zeno_qubit,
    "finite-decoherence-gaussian": _finite_decoherence,
    "two-substep-feedback": _two_substep_feedback,
    "milburn-caves": _milburn_caves,
    "newton-pair": _newton_pair,
    "joint-measurement-entangler": _joint_entangler,
    "magnus-symmetric-switch": _magnus,
    "filtering-ensemble": lambda: _filtering(False),
    "filtering-feedback": lambda: _filtering(True),
}


def list_presets() -> list[tuple[str, str]]:
    return [(name, build()["description"]) for name, build in PRESETS.items()]


def preset_config(name: str) -> dict:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; try one of {', '.join(PRESETS)}") from None


def export_config(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True)


# -- checks and results ------------------------------------------------------

@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool
    gating: bool = True

    def as_dict(self):
        return {"name": self.name, "value": _jsonable(self.value), "threshold": self.threshold,
                "passed": bool(self.passed), "gating": self.gating}


@dataclass
class Series:
    name: str
    xname: str
    x: np.ndarray
    y: np.ndarray


@dataclass
class RunResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    series: list[Series] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.gating)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.passed else EXIT_CHECK_FAILED

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _within(name, value, lo, hi, gating=True):
    return Check(name, float(value), f"[{lo}, {hi}]", bool(lo <= value <= hi), gating)


def _at_most(name, value, bound, gating=True):
    return Check(name, float(value), f"<= {bound}", bool(value <= bound), gating)


def _at_least(name, value, bound, gating=True):
    return Check(name, float(value), f">= {bound}", bool(value >= bound), gating)


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# -- analyses ----------------------------------------------------------------

def _analysis_purity(config, cycle, rho0, res: RunResult):
    T, ns = sweep_points(config)
    tol = config["analysis"].get("tolerance", 1e-9)
    n = ns[0]
    tr = evolve(rho0, cycle, T, n)
    pur = np.array([purity(s) for s in tr.states])
    res.series.append(Series("purity", "time", tr.times, pur))
    res.checks.append(_at_most("purity_drift", float(np.max(np.abs(pur - purity(rho0)))), tol))


def _analysis_potential(config, cycle, rho0, res: RunResult):
    T, ns = sweep_points(config)
    lo, hi = config["analysis"].get("ratio_range", [1.6, 2.4])
    rc = cycle.realize(T / ns[-1])
    h = cycle.s0 + sum(t.gbar * rc.mean(t).real * t.s_op for t in rc.terms)
    u = unitary(h, T, cycle.hbar)
    target = u @ rho0 @ dag(u)
    dist = np.array([trace_distance(evolve(rho0, cycle, T, n, record_every=n).final, target) for n in ns])
    taus = T / np.array(ns)
    res.series.append(Series("distance_to_potential", "tau", taus, dist))
    ratios = dist[:-1] / dist[1:]
    res.series.append(Series("halving_ratio", "tau", taus[1:], ratios))
    for k, r in enumerate(ratios):
        res.checks.append(_within(f"ratio_n{ns[k + 1]}", r, lo, hi))


def _analysis_zeno(config, cycle, rho0, res: RunResult):
    a = config["analysis"]
    T, ns = sweep_points(config)
    n = ns[0]
    tau = T / n
    ds, sigma, hbar = a["ds"], a["sigma"], cycle.hbar
    tr = evolve(rho0, cycle, T, n)
    coh = np.array([abs(s[0, 1]) for s in tr.states]) / abs(rho0[0, 1])
    res.series.append(Series("coherence", "time", tr.times, coh))
    res.series.append(Series("coherence_discrete_formula", "time", tr.times, zeno_decay_curve(sigma, ds, tr.times, tau, hbar, "discrete")))
    res.series.append(Series("coherence_rate_equation", "time", tr.times, zeno_decay_curve(sigma, ds, tr.times, tau, hbar, "continuum")))
    rc = cycle.realize(tau)
    term = rc.terms[0]
    chi = zeno_factor(rc.ancillae[0].rho, term.m_op, ds, rc.step * term.gbar, hbar)
    one = build_channel(cycle, tau).apply(rho0)
    res.checks.append(_at_most("per_collision_factor", abs(one[0, 1] / rho0[0, 1] - chi), a.get("tolerance", 1e-10)))
    disc = zeno_decay_curve(sigma, ds, tr.times, tau, hbar, "discrete")
    res.checks.append(_at_most("discrete_curve", float(np.max(np.abs(coh - disc) / disc)), 1e-9))
    cont = zeno_decay_curve(sigma, ds, tr.times, tau, hbar, "continuum")
    # informational: the rate-equation curve is the continuum approximation, not the n-step product
    res.checks.append(_at_most("rate_equation_curve", float(np.max(np.abs(coh - cont) / cont)), 1e-9, gating=False))


def _reference_evolution(me: MasterEquationSpec, rho0, T):
    if me.dim <= 16:
        return propagate_exact(me, rho0, T)
    dt = constants.STABILITY_FACTOR / me.norm_bound()
    return integrate_master(me, rho0, T, dt, record_every=10**9).final


def _analysis_master(config, cycle, rho0, res: RunResult):
    a = config["analysis"]
    T, ns = sweep_points(config)
    taus_l = a["limit_taus"]
    if "expect_regime" in a:
        rep = classify_regime(cycle, taus_l)
        res.info["regime"] = rep.regime.value
        res.checks.append(Check("regime", float(rep.regime == Regime(a["expect_regime"])), a["expect_regime"], rep.regime.value == a["expect_regime"]))
    limits = limit_set(cycle, taus_l)
    res.info["limits"] = {k: np.asarray(getattr(limits, k)).tolist() for k in ("xi", "gamma", "mtilde", "mtilde0")}
    me = build_master_equation(cycle, limits)
    ref = _reference_evolution(me, rho0, T)
    dist = np.array([trace_distance(evolve(rho0, cycle, T, n, record_every=n).final, ref) for n in ns])
    taus = T / np.array(ns)
    res.series.append(Series("distance_to_master_equation", "tau", taus, dist))
    lo, hi = a.get("ratio_range", [1.6, 2.4])
    ratios = dist[:-1] / dist[1:]
    res.checks.append(_within("finest_halving_ratio", ratios[-1], lo, hi))
    if "fit" in a:
        _fit_checks(cycle, a["fit"], res)


def _fit_checks(cycle, spec, res: RunResult):
    terms = [GeneratorTerm(t["kind"], build_operator(t["a"]), build_operator(t["b"]) if "b" in t else None, t.get("label", "")) for t in spec["terms"]]
    probes = probe_states(cycle.dim, spec.get("probes", 3), spec.get("seed", 0))
    fit = fit_generator(cycle, terms, spec["taus"], probes)
    rtol = spec.get("rtol", 0.05)
    expected = np.array([t["expected"] for t in spec["terms"]])
    res.series.append(Series("fitted_coefficients", "term", np.arange(len(terms)), fit.coefficients))
    res.series.append(Series("expected_coefficients", "term", np.arange(len(terms)), expected))
    for t, got, want in zip(spec["terms"], fit.coefficients, expected):
        res.checks.append(_at_most(f"fit[{t.get('label', t['kind'])}]", abs(got / want - 1), rtol))
    res.info["fit_residual"] = fit.residual


def _analysis_generator_fit(config, cycle, rho0, res: RunResult):
    _fit_checks(cycle, config["analysis"], res)


def _analysis_entangler(config, cycle, rho0, res: RunResult):
    a = config["analysis"]
    T, ns = sweep_points(config)
    rep = classify_regime(cycle, a["limit_taus"])
    res.info["regime"] = rep.regime.value
    res.checks.append(Check("regime", float(rep.regime == Regime.EFFECTIVE_UNITARY), "EffectiveUnitary", rep.regime == Regime.EFFECTIVE_UNITARY))
    me = build_master_equation(cycle, rep.limits)
    rate = max((abs(r) for *_, r in me.dissipators), default=0.0)
    res.checks.append(_at_most("max_dissipator_rate", rate, a.get("max_rate", 1e-12)))
    xx = build_operator(a["coupling"])
    coef = float(np.real(np.trace(me.h_eff @ xx)) / np.real(np.trace(xx @ xx)))
    res.checks.append(_at_least("interaction_coefficient", abs(coef), 0.1))
    tr = evolve(rho0, cycle, T, ns[0], record_every=max(1, ns[0] // 100))
    neg = np.array([negativity(s, cycle.system.factor_dims) for s in tr.states])
    res.series.append(Series("negativity", "time", tr.times, neg))
    res.checks.append(_at_least("final_negativity", neg[-1], a.get("min_negativity", 0.01)))


def _analysis_magnus(config, cycle, rho0, res: RunResult):
    from .dynamics import magnus_asymmetry

    a = config["analysis"]
    taus = np.array(config["sweep"]["tau"], dtype=float)
    k = a.get("slices", 4096)
    defects = np.array([np.linalg.norm(stepped_propagator(cycle, t, k) - mean_propagator(cycle, t), 2) for t in taus])
    res.series.append(Series("propagator_defect", "tau", taus, defects))
    slope = _slope(taus, defects)
    sched = cycle.substeps[0][0].schedule
    symmetric = abs(magnus_asymmetry(sched, 1.0)) < 1e-10
    tol = a.get("slope_tol", 0.2)
    if symmetric:
        res.checks.append(_within("defect_slope", slope, 3 - tol, 3 + tol))
    else:
        res.checks.append(_within("defect_slope", slope, 2 - tol, 2 + tol))
        rc = cycle.realize(taus[-1])
        from .engine import free_hamiltonian, substep_hamiltonian

        h0 = free_hamiltonian(rc).toarray()
        hi = (substep_hamiltonian(rc, 0).toarray() - h0) / rc.terms[0].gbar
        pred = magnus_defect(h0, hi, sched, rc.step, cycle.hbar)
        res.checks.append(_at_most("defect_coefficient", abs(defects[-1] / pred - 1), a.get("coefficient_rtol", 0.05)))


def _analysis_filtering(config, cycle, rho0, res: RunResult):
    a = config["analysis"]
    T, ns = sweep_points(config)
    n = ns[0]
    ens_cfg = config["ensemble"]
    fb_cfg = ens_cfg.get("feedback")
    feedback = Feedback(build_operator(fb_cfg["s"]), fb_cfg["gain"]) if fb_cfg else None
    ens = run_ensemble(rho0, cycle, T, n, ens_cfg.get("ntraj", 1024), ens_cfg.get("seed", 0), feedback)
    if feedback is None:
        ref = evolve(rho0, cycle, T, n).states
    else:
        g = a.get("gamma", ens.extra["gamma"])
        s = cycle.substeps[0][0].s_op
        hb = cycle.hbar
        me = MasterEquationSpec(
            cycle.s0,
            [(s, s, g / 2), (feedback.s_op, feedback.s_op, hb**2 * feedback.gain**2 / (8 * g))],
            [(feedback.s_op, s, -feedback.gain / 2)],
            hb,
        )
        ref = [propagate_exact(me, rho0, t) for t in ens.times]
    dist = np.array([trace_distance(m, r) for m, r in zip(ens.mean, ref)])
    band = ens.band(a.get("band", 3.0))
    res.series.append(Series("ensemble_distance", "time", ens.times, dist))
    res.series.append(Series("monte_carlo_band", "time", ens.times, band))
    res.series.append(Series("mean_current", "time", ens.times[1:], ens.mean_current))
    worst = float(np.max(dist[1:] / band[1:]))
    res.checks.append(_at_most("distance_over_band", worst, 1.0))


ANALYSES = {
    "purity": _analysis_purity,
    "potential_convergence": _analysis_potential,
    "zeno": _analysis_zeno,
    "master_convergence": _analysis_master,
    "generator_fit": _analysis_generator_fit,
    "entangler": _analysis_entangler,
    "magnus": _analysis_magnus,
    "filtering": _analysis_filtering,
}


# -- running -----------------------------------------------------------------

def apply_overrides(config: dict, tau_points: int | None = None, ntraj: int | None = None,
                    hbar: float | None = None, seed: int | None = None) -> dict:
    config = copy.deepcopy(config)
    if tau_points is not None:
        sw = config["sweep"]
        key = "n" if "n" in sw else "tau"
        sw[key] = sw[key][:tau_points]
    if ntraj is not None or seed is not None:
        ens = config.setdefault("ensemble", {})
        if ntraj is not None:
            ens["ntraj"] = ntraj
        if seed is not None:
            ens["seed"] = seed
    if hbar is not None:
        config["hbar"] = hbar
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def run_config(config: dict) -> RunResult:
    """Evaluate a validated config; no files are written."""
    cycle = build_cycle(config)
    rho0 = build_state(config["initial_state"])
    res = RunResult(config["name"])
    ANALYSES[config["analysis"]["kind"]](config, cycle, rho0, res)
    return res


def write_series(path: Path, s: Series) -> None:
    y = np.asarray(s.y)
    cplx = np.iscomplexobj(y) and np.any(y.imag != 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([s.xname, "value", "imag"] if cplx else [s.xname, "value"])
        for xv, yv in zip(np.asarray(s.x), y):
            row = [repr(float(xv)), repr(float(np.real(yv)))]
            if cplx:
                row.append(repr(float(np.imag(yv))))
            w.writerow(row)


def default_output_dir(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "collisional-out")) / name


def run_scenario(config: dict, out_dir: str | os.PathLike | None = None) -> RunResult:
    """Run a config and write its CSV series followed by the manifest."""
    from . import __version__

    res = run_config(config)
    out = Path(out_dir) if out_dir is not None else default_output_dir(config["name"])
    out.mkdir(parents=True, exist_ok=True)
    wanted = set(config.get("outputs") or [s.name for s in res.series])
    for s in res.series:
        if s.name in wanted:
            path = out / f"{s.name}.csv"
            write_series(path, s)
            res.files.append(path.name)
    manifest = {
        "name": config["name"],
        "config_sha256": config_hash(config),
        "seed": config.get("ensemble", {}).get("seed"),
        "versions": {
            "collisional": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "tolerances": constants.TOLERANCES,
        "checks": [c.as_dict() for c in res.checks],
        "info": json.loads(json.dumps(res.info, default=_jsonable)),
        "outputs": res.files,
        "passed": res.passed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return res
