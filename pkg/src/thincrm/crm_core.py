"""Truncated completely random measures.

A homogeneous CRM on X x Theta x R+ is approximated by K atoms
(x_k, theta_k, pi_k).  Masses come from the usual finite approximations:

    beta process   pi_k ~ Beta(1/K, 1 - 1/K)
    gamma process  pi_k ~ Gamma(shape / K, rate)

Both have expected total mass 1 under the default parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

BETA = "beta"
GAMMA = "gamma"

# smallest mass we allow; keeps logs finite when a gamma/beta draw underflows
MIN_MASS = np.finfo(float).tiny


class ParameterError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def substream(key: int, *path: int) -> np.random.Generator:
    """Independent generator identified by (key, *path); order of creation is irrelevant."""
    return np.random.default_rng([int(key), *map(int, path)])


@dataclass(frozen=True)
class LevySpec:
    """Levy-measure family plus truncation level.

    ``concentration`` is the beta-process c; it does not enter the
    Beta(1/K, 1 - 1/K) truncation and is kept for bookkeeping only.
    ``shape``/``rate`` are the gamma-process gamma and lambda.
    """

    family: str
    K: int
    concentration: float = 1.0
    shape: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        if self.family not in (BETA, GAMMA):
            raise ParameterError(f"unknown CRM family {self.family!r}")
        if int(self.K) != self.K or self.K < 1:
            raise ParameterError(f"truncation K must be a positive integer, got {self.K}")
        if self.family == BETA and self.K < 2:
            raise ParameterError("beta-process truncation needs K >= 2")
        for name in ("concentration", "shape", "rate"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"{name} must be positive, got {value}")

    @classmethod
    def beta(cls, K: int, concentration: float = 1.0) -> "LevySpec":
        return cls(BETA, K, concentration=concentration)

    @classmethod
    def gamma(cls, K: int, shape: float = 1.0, rate: float = 1.0) -> "LevySpec":
        return cls(GAMMA, K, shape=shape, rate=rate)

    @property
    def mean_total_mass(self) -> float:
        if self.family == BETA:
            return 1.0
        return self.shape / self.rate

    def mass_variance(self) -> float:
        """Variance of a single truncated atom mass."""
        K = self.K
        if self.family == BETA:
            a, b = 1.0 / K, 1.0 - 1.0 / K
            return a * b / ((a + b) ** 2 * (a + b + 1.0))
        return (self.shape / K) / self.rate**2

    def to_dict(self) -> dict:
        d = {"family": self.family, "K": self.K}
        if self.family == BETA:
            d["concentration"] = self.concentration
        else:
            d["shape"] = self.shape
            d["rate"] = self.rate
        return d


def sample_masses(spec: LevySpec, rng, size=None) -> np.ndarray:
    """Draw truncated masses; result has shape ``size + (K,)``."""
    rng = as_generator(rng)
    shape = (spec.K,) if size is None else tuple(np.atleast_1d(size)) + (spec.K,)
    K = spec.K
    if spec.family == BETA:
        pi = rng.beta(1.0 / K, 1.0 - 1.0 / K, size=shape)
        return np.clip(pi, MIN_MASS, np.nextafter(1.0, 0.0))
    pi = rng.gamma(spec.shape / K, 1.0 / spec.rate, size=shape)
    return np.maximum(pi, MIN_MASS)


@dataclass
class Atom:
    mass: float
    theta: Any = None
    location: Any = None


@dataclass
class TruncatedCRM:
    atoms: list[Atom]
    spec: LevySpec

    def __post_init__(self):
        if len(self.atoms) != self.spec.K:
            raise DimensionError(f"expected {self.spec.K} atoms, got {len(self.atoms)}")
        for atom in self.atoms:
            _check_mass(atom.mass, self.spec.family)

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def masses(self) -> np.ndarray:
        return np.array([a.mass for a in self.atoms], dtype=float)

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def to_dict(self) -> dict:
        return {
            "family": self.spec.family,
            "K": self.spec.K,
            "spec": self.spec.to_dict(),
            "atoms": [
                {"pi": float(a.mass), "theta": _jsonable(a.theta), "x": _jsonable(a.location)}
                for a in self.atoms
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "TruncatedCRM":
        spec_d = dict(d.get("spec") or {"family": d["family"], "K": d["K"]})
        spec = LevySpec(**spec_d)
        atoms = [Atom(a["pi"], a.get("theta"), a.get("x")) for a in d["atoms"]]
        return cls(atoms, spec)

    @classmethod
    def from_json(cls, text: str) -> "TruncatedCRM":
        return cls.from_dict(json.loads(text))


def _check_mass(mass: float, family: str) -> None:
    if family == BETA and not 0.0 < mass < 1.0:
        raise ParameterError(f"beta-process mass must lie in (0, 1), got {mass}")
    if family == GAMMA and not mass > 0.0:
        raise ParameterError(f"gamma-process mass must be positive, got {mass}")


def _jsonable(value):
    if value is None:
        return None
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def draw_truncated_crm(
    spec: LevySpec,
    rng,
    param_sampler: Callable[[np.random.Generator], Any] | None = None,
    location_sampler: Callable[[np.random.Generator], Any] | None = None,
) -> TruncatedCRM:
    """Draw K atoms of a truncated CRM.

    Masses use one substream of the call's key; atom k draws its theta and
    location from its own substream (key, 1, k), so swapping one sampler
    never perturbs another atom or the masses.
    """
    if isinstance(rng, np.random.Generator):
        key = int(rng.integers(2**63))
    else:
        key = int(rng if rng is not None else np.random.SeedSequence().entropy % 2**63)
    masses = sample_masses(spec, substream(key, 0))
    atoms = []
    for k in range(spec.K):
        theta = location = None
        if param_sampler is not None or location_sampler is not None:
            atom_rng = substream(key, 1, k)
            if param_sampler is not None:
                theta = param_sampler(atom_rng)
            if location_sampler is not None:
                location = location_sampler(atom_rng)
        atoms.append(Atom(float(masses[k]), theta, location))
    return TruncatedCRM(atoms, spec)


def expected_mass(crm: TruncatedCRM, thinning_probs: Sequence[float] | None = None) -> float:
    """E[total thinned mass | atoms] = sum_k p_k pi_k."""
    masses = crm.masses
    if thinning_probs is None:
        return float(masses.sum())
    p = np.asarray(thinning_probs, dtype=float)
    if p.shape != masses.shape:
        raise DimensionError(f"need {masses.size} thinning probabilities, got shape {p.shape}")
    if np.any((p < 0) | (p > 1)):
        raise ParameterError("thinning probabilities must lie in [0, 1]")
    return float(np.dot(p, masses))
