"""Finite-type branching Markov processes and superprocesses.

Both families live on the type space ``E = {0, ..., d-1}``.  A model is an
immutable value: arrays are copied on construction and frozen.

Configuration files are JSON objects with a ``kind`` key (``"bmp"`` or
``"sp"``); see ``README.md`` for the full schema and the bundled examples in
``branchlil/data``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Union

import numpy as np
from scipy.sparse.csgraph import connected_components

PROB_SUM_TOL = 1e-9
GENERATOR_ROW_TOL = 1e-9


class ModelError(ValueError):
    """Base class for invalid model definitions."""


class NegativeRate(ModelError):
    pass


class ProbabilitySumMismatch(ModelError):
    pass


class EmptyOffspringList(ModelError):
    pass


class NegativeMass(ModelError):
    pass


class InvalidGenerator(ModelError):
    """Motion matrix is not a conservative Markov generator."""


class ShapeMismatch(ModelError):
    pass


class ParseError(ModelError):
    """Configuration file could not be turned into a model.

    ``field`` names the offending key path, ``line`` is set for JSON syntax
    errors.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Finite point law of the offspring configuration of one type.

    ``probs[i]`` is the probability of atom ``i`` and ``counts[i, y]`` the
    number of type-``y`` children it produces.
    """

    probs: np.ndarray
    counts: np.ndarray

    def __init__(self, probs, counts):
        object.__setattr__(self, "probs", _frozen(probs))
        object.__setattr__(self, "counts", _frozen(np.atleast_2d(counts), dtype=np.int64))

    @property
    def n_atoms(self) -> int:
        return len(self.probs)

    def moment(self, k: int) -> float:
        """E[N^k] where N is the total number of children."""
        n = self.counts.sum(axis=1).astype(float)
        return float(np.dot(self.probs, n**k))


@dataclass(frozen=True, eq=False)
class BmpModel:
    """Non-local branching Markov process on a finite type space.

    Parameters
    ----------
    Q : (d, d) array
        Generator of the spatial motion.
    beta : (d,) array
        Branching rate per type.
    offspring : sequence of OffspringLaw
        Offspring point law for a particle branching at each type.
    """

    Q: np.ndarray
    beta: np.ndarray
    offspring: tuple
    name: str = ""

    def __init__(self, Q, beta, offspring, name: str = ""):
        object.__setattr__(self, "Q", _frozen(np.atleast_2d(Q)))
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(beta)))
        laws = tuple(
            law if isinstance(law, OffspringLaw) else OffspringLaw(*zip(*law)) if law else None
            for law in offspring
        )
        object.__setattr__(self, "offspring", laws)
        object.__setattr__(self, "name", name)

    kind = "bmp"

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    def mean_matrix(self) -> np.ndarray:
        """M[x, y] = expected number of type-y children of a type-x branching."""
        return np.array([law.probs @ law.counts for law in self.offspring], dtype=float)

    def __eq__(self, other):
        if not isinstance(other, BmpModel):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.Q, other.Q)
            and np.array_equal(self.beta, other.beta)
            and len(self.offspring) == len(other.offspring)
            and all(
                np.array_equal(a.probs, b.probs) and np.array_equal(a.counts, b.counts)
                for a, b in zip(self.offspring, other.offspring)
            )
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class JumpAtoms:
    """Finite list of jump atoms (rate per unit mass, mass vector) for one type."""

    rates: np.ndarray
    masses: np.ndarray

    def __init__(self, rates, masses, d: int | None = None):
        rates = np.atleast_1d(np.asarray(rates, dtype=float))
        masses = np.asarray(masses, dtype=float)
        if masses.size == 0:
            masses = np.zeros((0, d or 0))
        object.__setattr__(self, "rates", _frozen(rates))
        object.__setattr__(self, "masses", _frozen(np.atleast_2d(masses)))

    @property
    def n_atoms(self) -> int:
        return len(self.rates)


@dataclass(frozen=True, eq=False)
class SpModel:
    """Superprocess with decomposable, finite-activity branching mechanism.

    psi(x, f) = a(x) f(x) + b(x) f(x)^2 - eta(x, f)
                + sum_atoms r (exp(-nu(f)) - 1 + nu({x}) f(x))
    """

    Q: np.ndarray
    a: np.ndarray
    b: np.ndarray
    eta: np.ndarray
    jumps: tuple
    name: str = ""

    def __init__(self, Q, a, b, eta=None, jumps=None, name: str = ""):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        d = Q.shape[0]
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "a", _frozen(np.atleast_1d(a)))
        object.__setattr__(self, "b", _frozen(np.atleast_1d(b)))
        object.__setattr__(self, "eta", _frozen(np.zeros((d, d)) if eta is None else np.atleast_2d(eta)))
        if jumps is None:
            jumps = [[] for _ in range(d)]
        atoms = []
        for per_type in jumps:
            if isinstance(per_type, JumpAtoms):
                atoms.append(per_type)
            elif len(per_type) == 0:
                atoms.append(JumpAtoms([], [], d=d))
            else:
                r, nu = zip(*per_type)
                atoms.append(JumpAtoms(r, nu, d=d))
        object.__setattr__(self, "jumps", tuple(atoms))
        object.__setattr__(self, "name", name)

    kind = "sp"

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SpModel):
            return NotImplemented
        return (
            self.name == other.name
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("Q", "a", "b", "eta"))
            and len(self.jumps) == len(other.jumps)
            and all(
                np.array_equal(j1.rates, j2.rates) and np.array_equal(j1.masses, j2.masses)
                for j1, j2 in zip(self.jumps, other.jumps)
            )
        )

    __hash__ = None


Model = Union[BmpModel, SpModel]


@dataclass(frozen=True, eq=False)
class InitState:
    """Initial configuration: particle counts (BMP) or masses (SP) per type."""

    values: np.ndarray

    def __init__(self, values, integer: bool = False):
        arr = np.atleast_1d(np.asarray(values))
        if integer:
            if not np.all(np.asarray(arr) == np.round(arr)):
                raise ModelError("BMP initial counts must be integers")
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(float)
        if np.any(arr < 0):
            raise ModelError("initial state must be nonnegative")
        if not np.any(arr > 0):
            raise ModelError("initial state needs at least one positive entry")
        object.__setattr__(self, "values", _frozen(arr, dtype=arr.dtype))

    @classmethod
    def for_model(cls, model: Model, values) -> "InitState":
        st = cls(values, integer=model.kind == "bmp")
        if len(st.values) != model.d:
            raise ShapeMismatch(f"initial state has length {len(st.values)}, model has d={model.d}")
        return st


@dataclass
class ValidationReport:
    kind: str
    d: int
    irreducible: bool
    max_rate: float
    details: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "irreducible": self.irreducible,
            "max_rate": self.max_rate,
            "flags": list(self.flags),
            **self.details,
        }


def _check_generator(Q: np.ndarray) -> None:
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ShapeMismatch(f"Q must be square, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise InvalidGenerator("Q has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise NegativeRate("off-diagonal motion rates must be >= 0")
    rows = np.abs(Q.sum(axis=1))
    scale = max(1.0, float(np.abs(Q).max()))
    if np.any(rows > GENERATOR_ROW_TOL * scale):
        raise InvalidGenerator(f"rows of Q must sum to 0 (max residual {rows.max():.3g})")


def _irreducible(adjacency: np.ndarray) -> bool:
    graph = (adjacency > 0).astype(int)
    np.fill_diagonal(graph, 0)
    n, _ = connected_components(graph, directed=True, connection="strong")
    return n == 1


def validate_bmp(model: BmpModel) -> ValidationReport:
    """Check a BMP definition and report its offspring moments."""
    d = model.d
    _check_generator(model.Q)
    if model.beta.shape != (d,):
        raise ShapeMismatch(f"beta must have length {d}")
    if np.any(model.beta < 0):
        raise NegativeRate("branching rates must be >= 0")
    if len(model.offspring) != d:
        raise ShapeMismatch(f"need one offspring law per type, got {len(model.offspring)}")

    residuals, moments, flags = [], [], []
    for x, law in enumerate(model.offspring):
        if law is None or law.n_atoms == 0:
            raise EmptyOffspringList(f"type {x} has an empty offspring list")
        if law.counts.shape[1] != d:
            raise ShapeMismatch(f"type {x}: offspring counts must have length {d}")
        if np.any(law.probs < 0):
            raise ProbabilitySumMismatch(f"type {x}: negative atom probability")
        if np.any(law.counts < 0):
            raise ModelError(f"type {x}: offspring counts must be >= 0")
        res = float(law.probs.sum() - 1.0)
        if abs(res) > PROB_SUM_TOL:
            raise ProbabilitySumMismatch(f"type {x}: probabilities sum to {law.probs.sum():.12g}")
        residuals.append(res)
        moments.append([law.moment(k) for k in (1, 2, 3, 4)])
        if np.any((law.counts.sum(axis=1) == 1) & (law.probs > 0)):
            flags.append(f"type {x}: offspring law has an atom with N=1")

    M = model.mean_matrix()
    moments = np.array(moments)
    adjacency = model.Q + M
    return ValidationReport(
        kind="bmp",
        d=d,
        irreducible=_irreducible(adjacency),
        max_rate=float(model.beta.max()),
        flags=flags,
        details={
            "prob_residuals": residuals,
            "moments": moments.tolist(),
            "sup_fourth_moment": float(moments[:, 3].max()),
            "mean_matrix": M.tolist(),
        },
    )


def validate_sp(model: SpModel) -> ValidationReport:
    """Check a superprocess definition and report jump-measure moments."""
    d = model.d
    _check_generator(model.Q)
    for name in ("a", "b"):
        if getattr(model, name).shape != (d,):
            raise ShapeMismatch(f"{name} must have length {d}")
    if model.eta.shape != (d, d):
        raise ShapeMismatch(f"eta must be {d}x{d}")
    if np.any(model.b < 0):
        raise NegativeRate("b must be >= 0")
    if np.any(model.eta < 0):
        raise NegativeRate("eta must be >= 0")
    if np.any(np.diag(model.eta) != 0):
        raise ModelError("eta must have zero diagonal (local terms belong in a)")
    if len(model.jumps) != d:
        raise ShapeMismatch(f"need one jump list per type, got {len(model.jumps)}")

    fourth, total, flags = [], [], []
    for x, atoms in enumerate(model.jumps):
        if atoms.n_atoms:
            if atoms.masses.shape != (atoms.n_atoms, d):
                raise ShapeMismatch(f"type {x}: jump masses must have length {d}")
            if np.any(atoms.rates < 0):
                raise NegativeRate(f"type {x}: jump rates must be >= 0")
            if np.any(atoms.masses < 0):
                raise NegativeMass(f"type {x}: jump masses must be >= 0")
            if not (np.all(np.isfinite(atoms.masses)) and np.all(np.isfinite(atoms.rates))):
                raise ModelError(f"type {x}: jump atoms must be finite")
        mass = atoms.masses.sum(axis=1) if atoms.n_atoms else np.zeros(0)
        fourth.append(float(np.dot(atoms.rates, mass**4)))
        total.append(float(atoms.rates.sum()))
        if model.b[x] == 0:
            flags.append(f"type {x}: b=0 (pure-jump)")

    J = np.zeros((d, d))
    for x, atoms in enumerate(model.jumps):
        if atoms.n_atoms:
            J[x] = atoms.rates @ atoms.masses
    return ValidationReport(
        kind="sp",
        d=d,
        irreducible=_irreducible(model.Q + model.eta + J),
        max_rate=float(max(np.abs(model.a).max(), model.b.max(), max(total))),
        flags=flags,
        details={
            "fourth_moment": fourth,
            "total_jump_rate": total,
            "eta_row_sums": model.eta.sum(axis=1).tolist(),
        },
    )


def validate(model: Model) -> ValidationReport:
    return validate_bmp(model) if model.kind == "bmp" else validate_sp(model)


# -- serialization -----------------------------------------------------------


def model_to_dict(model: Model) -> dict:
    out: dict[str, Any] = {"kind": model.kind}
    if model.name:
        out["name"] = model.name
    out["d"] = model.d
    out["Q"] = model.Q.tolist()
    if model.kind == "bmp":
        out["beta"] = model.beta.tolist()
        out["offspring"] = [
            [{"p": float(p), "counts": [int(c) for c in k]} for p, k in zip(law.probs, law.counts)]
            for law in model.offspring
        ]
    else:
        out["a"] = model.a.tolist()
        out["b"] = model.b.tolist()
        out["eta"] = model.eta.tolist()
        out["jumps"] = [
            [{"rate": float(r), "mass": nu.tolist()} for r, nu in zip(atoms.rates, atoms.masses)]
            for atoms in model.jumps
        ]
    return out


def _require(obj: dict, key: str, ctx: str = ""):
    if key not in obj:
        raise ParseError("missing required field", field=ctx + key)
    return obj[key]


def _array(value, path: str, ndim: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"not a numeric array: {exc}", field=path) from None
    if arr.ndim != ndim:
        raise ParseError(f"expected a {ndim}-d array, got {arr.ndim}-d", field=path)
    return arr


def model_from_dict(cfg: dict) -> Model:
    """Build and validate a model from a parsed configuration mapping."""
    if not isinstance(cfg, dict):
        raise ParseError("top level must be an object")
    kind = _require(cfg, "kind")
    d = _require(cfg, "d")
    if not isinstance(d, int) or d < 1:
        raise ParseError("d must be a positive integer", field="d")
    Q = _array(_require(cfg, "Q"), "Q", 2)
    name = cfg.get("name", "")

    if kind == "bmp":
        beta = _array(_require(cfg, "beta"), "beta", 1)
        raw = _require(cfg, "offspring")
        if not isinstance(raw, list) or len(raw) != d:
            raise ParseError(f"expected a list of {d} offspring laws", field="offspring")
        laws = []
        for x, atoms in enumerate(raw):
            if not atoms:
                raise EmptyOffspringList(f"type {x} has an empty offspring list")
            try:
                probs = [float(_require(a, "p", f"offspring[{x}][{i}].")) for i, a in enumerate(atoms)]
                counts = [_require(a, "counts", f"offspring[{x}][{i}].") for i, a in enumerate(atoms)]
            except TypeError:
                raise ParseError("atoms must be objects with 'p' and 'counts'", field=f"offspring[{x}]") from None
            laws.append(OffspringLaw(probs, counts))
        model = BmpModel(Q, beta, laws, name=name)
        validate_bmp(model)
    elif kind == "sp":
        a = _array(_require(cfg, "a"), "a", 1)
        b = _array(_require(cfg, "b"), "b", 1)
        eta = _array(cfg["eta"], "eta", 2) if "eta" in cfg else None
        raw = cfg.get("jumps", [[] for _ in range(d)])
        if not isinstance(raw, list) or len(raw) != d:
            raise ParseError(f"expected a list of {d} jump lists", field="jumps")
        jumps = []
        for x, atoms in enumerate(raw):
            jumps.append(
                [
                    (float(_require(j, "rate", f"jumps[{x}][{i}].")), _require(j, "mass", f"jumps[{x}][{i}]."))
                    for i, j in enumerate(atoms)
                ]
            )
        model = SpModel(Q, a, b, eta, jumps, name=name)
        validate_sp(model)
    else:
        raise ParseError(f"unknown kind {kind!r}; expected 'bmp' or 'sp'", field="kind")
    if model.d != d:
        raise ParseError(f"d={d} does not match Q of size {model.d}", field="d")
    return model


def load_model(path) -> Model:
    """Load a model from a JSON configuration file (or a bundled name)."""
    path = Path(path)
    if not path.exists() and path.suffix in ("", ".json") and bundled_path(path.stem).exists():
        path = bundled_path(path.stem)
    text = path.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    return model_from_dict(cfg)


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def model_hash(model: Model) -> str:
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


BUNDLED = ("yule", "t2", "rot3", "feller")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("branchlil") / "data" / f"{name}.json"))


def bundled(name: str) -> Model:
    return load_model(bundled_path(name))
