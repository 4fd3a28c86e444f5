"""Finite categorical populations over (x, u, r) and sampling from them.

Every conditional expectation the rest of the package needs is a finite sum
over cells, which is what makes exact oracle checks possible.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MASS_TOL = 1e-9

_MASK64 = (1 << 64) - 1


class PopulationError(ValueError):
    """Invalid population definition or query."""


def derive_seed(base: int, index: int) -> int:
    """Derive an independent 64-bit seed for task ``index`` from ``base``.

    SplitMix64 finaliser applied to ``base + (index + 1) * golden_gamma``.
    """
    z = (int(base) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


@dataclass(frozen=True)
class Cell:
    x: Hashable
    u: Hashable
    r: int
    mass: float
    mu: float


@dataclass(frozen=True)
class Individual:
    x: Hashable
    u: Hashable
    r: int
    y: int


@dataclass(frozen=True, eq=False)
class Population:
    """Validated cell table. Build it with :func:`build_population`."""

    cells: tuple[Cell, ...]
    x_domain: tuple
    u_domain: tuple
    renormalization: float = 1.0
    # columnar views, filled in by build_population
    mass: np.ndarray = field(repr=False, default=None)
    mu: np.ndarray = field(repr=False, default=None)
    r: np.ndarray = field(repr=False, default=None)
    x_code: np.ndarray = field(repr=False, default=None)
    u_code: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.cells)

    def x_index(self, x) -> int:
        try:
            return self.x_domain.index(_freeze(x))
        except ValueError:
            raise PopulationError(f"x={x!r} is not in the feature domain") from None

    def stratum_mask(self, x, r: int | None) -> np.ndarray:
        m = self.x_code == self.x_index(x)
        if r is not None:
            m &= self.r == int(r)
        return m

    def strata(self, group_blind: bool = False) -> list[tuple]:
        """(x, r) pairs (or (x, None) when group blind) with positive mass."""
        out = []
        for i, x in enumerate(self.x_domain):
            for r in ((None,) if group_blind else (0, 1)):
                m = self.x_code == i
                if r is not None:
                    m = m & (self.r == r)
                if self.mass[m].sum() > 0:
                    out.append((x, r))
        return out

    def group_mass(self, r: int) -> float:
        return float(self.mass[self.r == r].sum())

    def to_json(self) -> dict:
        return {
            "cells": [
                {"x": _thaw(c.x), "u": _thaw(c.u), "r": c.r, "mass": c.mass, "mu": c.mu}
                for c in self.cells
            ]
        }


def build_population(cells: Sequence[Cell]) -> Population:
    """Validate ``cells`` and return an immutable population.

    Masses are renormalised to sum to one; the factor applied is kept on
    ``Population.renormalization`` and logged when it is not negligible.
    """
    if not cells:
        raise PopulationError("population needs at least one cell")
    seen = set()
    norm = []
    for c in cells:
        c = Cell(_freeze(c.x), _freeze(c.u), int(c.r), float(c.mass), float(c.mu))
        key = (c.x, c.u, c.r)
        if key in seen:
            raise PopulationError(f"duplicate cell (x, u, r) = {key!r}")
        seen.add(key)
        if c.r not in (0, 1):
            raise PopulationError(f"group indicator must be 0 or 1, got {c.r}")
        if not np.isfinite(c.mass) or c.mass < 0:
            raise PopulationError(f"negative or non-finite mass {c.mass} in cell {key!r}")
        if not 0.0 <= c.mu <= 1.0:
            raise PopulationError(f"mu={c.mu} outside [0, 1] in cell {key!r}")
        norm.append(c)

    total = sum(c.mass for c in norm)
    if total <= 0:
        raise PopulationError("total mass must be positive")
    factor = 1.0 / total
    if abs(total - 1.0) > MASS_TOL:
        logger.warning("cell masses sum to %.12g; renormalised by factor %.12g", total, factor)
    if factor != 1.0:
        norm = [Cell(c.x, c.u, c.r, c.mass * factor, c.mu) for c in norm]

    x_domain = _sorted_domain(c.x for c in norm)
    u_domain = _sorted_domain(c.u for c in norm)
    x_pos = {x: i for i, x in enumerate(x_domain)}
    u_pos = {u: i for i, u in enumerate(u_domain)}

    arrays = dict(
        mass=np.array([c.mass for c in norm]),
        mu=np.array([c.mu for c in norm]),
        r=np.array([c.r for c in norm], dtype=np.int8),
        x_code=np.array([x_pos[c.x] for c in norm], dtype=np.int64),
        u_code=np.array([u_pos[c.u] for c in norm], dtype=np.int64),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return Population(tuple(norm), x_domain, u_domain, factor, **arrays)


def _sorted_domain(values) -> tuple:
    values = set(values)
    try:
        return tuple(sorted(values))
    except TypeError:
        return tuple(sorted(values, key=repr))


def conditional_mean_y(pop: Population, x, r: int | None) -> float:
    """E[Y | X=x, R=r]; ``r=None`` pools both groups."""
    m = pop.stratum_mask(x, r)
    w = pop.mass[m]
    if w.sum() <= 0:
        raise PopulationError(f"stratum (x={x!r}, r={r}) has zero mass")
    return float(np.dot(w, pop.mu[m]) / w.sum())


@dataclass(frozen=True, eq=False)
class Sample:
    """Columnar i.i.d. draw from a population.

    Iterating yields :class:`Individual` records; the arrays are what the
    estimators consume.
    """

    pop: Population
    cell: np.ndarray
    y: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.cell)

    @property
    def x_code(self) -> np.ndarray:
        return self.pop.x_code[self.cell]

    @property
    def u_code(self) -> np.ndarray:
        return self.pop.u_code[self.cell]

    @property
    def r(self) -> np.ndarray:
        return self.pop.r[self.cell]

    @property
    def mu(self) -> np.ndarray:
        return self.pop.mu[self.cell]

    def __iter__(self) -> Iterator[Individual]:
        cells = self.pop.cells
        for i, yi in zip(self.cell.tolist(), self.y.tolist()):
            c = cells[i]
            yield Individual(c.x, c.u, c.r, int(yi))


def sample(pop: Population, n: int, seed: int) -> Sample:
    """Draw ``n`` individuals; same (pop, n, seed) gives identical output."""
    if n < 1:
        raise PopulationError(f"sample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cell = rng.choice(len(pop), size=n, p=pop.mass)
    y = (rng.random(n) < pop.mu[cell]).astype(np.int8)
    return Sample(pop, cell, y, seed)


def pop_a() -> Population:
    """Canonical test population.

    x in {0,1}, u in {0,1,2}, r in {0,1}, twelve equal-mass cells with
    mu = 0.1 + 0.2*u + 0.1*x regardless of r.
    """
    cells = [
        Cell(x, u, r, 1 / 12, round(0.1 + 0.2 * u + 0.1 * x, 12))
        for r in (0, 1)
        for x in (0, 1)
        for u in (0, 1, 2)
    ]
    return build_population(cells)


def random_population(
    seed: int,
    n_x: int | None = None,
    n_u: int | None = None,
    max_x: int = 4,
    max_u: int = 8,
) -> Population:
    """Random population with Dirichlet masses and uniform mu.

    Domain sizes are drawn from 1..max_x and 2..max_u unless given.
    """
    rng = np.random.default_rng(seed)
    n_x = n_x or int(rng.integers(1, max_x + 1))
    n_u = n_u or int(rng.integers(2, max_u + 1))
    k = 2 * n_x * n_u
    mass = rng.dirichlet(np.ones(k))
    mu = rng.uniform(0.0, 1.0, size=k)
    cells = []
    i = 0
    for r in (0, 1):
        for x in range(n_x):
            for u in range(n_u):
                cells.append(Cell(x, u, r, float(mass[i]), float(mu[i])))
                i += 1
    return build_population(cells)


def population_from_json(doc: dict) -> Population:
    if "cells" not in doc or not isinstance(doc["cells"], list):
        raise PopulationError('population document needs a "cells" list')
    cells = []
    for i, c in enumerate(doc["cells"]):
        try:
            cells.append(Cell(c["x"], c["u"], c["r"], c["mass"], c["mu"]))
        except (KeyError, TypeError) as exc:
            raise PopulationError(f"cells[{i}]: missing field {exc}") from None
    return build_population(cells)


def load_population(path: str | Path) -> Population:
    with open(path) as fh:
        return population_from_json(json.load(fh))


def save_population(pop: Population, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(pop.to_json(), fh, indent=2)
