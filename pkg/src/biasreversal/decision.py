"""Threshold search rules: deterministic, noisy, and the fewer-labels variant."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .population import Population

BASELINE = "baseline"
FEWER_LABELS = "fewer_labels"
VARIANTS = (BASELINE, FEWER_LABELS)
NOISE_FAMILIES = ("logistic", "normal")


class RuleError(ValueError):
    """Invalid decision rule or unsupported use of one."""


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise on the decision maker's risk assessment.

    ``group_scale`` optionally overrides ``scale`` per group as (r=0, r=1).
    """

    family: str = "logistic"
    scale: float = 1.0
    group_scale: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise RuleError(f"unsupported noise family {self.family!r}")
        scales = (self.scale,) + tuple(self.group_scale or ())
        if any(not s > 0 for s in scales):
            raise RuleError("noise scale must be positive")

    def scale_for(self, r) -> np.ndarray | float:
        if self.group_scale is None:
            return self.scale
        return np.where(np.asarray(r) == 1, self.group_scale[1], self.group_scale[0])

    def cdf(self, z, r=0):
        z = np.asarray(z, dtype=float) / self.scale_for(r)
        return special.expit(z) if self.family == "logistic" else special.ndtr(z)

    def sf(self, z, r=0):
        z = np.asarray(z, dtype=float) / self.scale_for(r)
        return special.expit(-z) if self.family == "logistic" else special.ndtr(-z)

    def pdf(self, z, r=0):
        s = self.scale_for(r)
        z = np.asarray(z, dtype=float) / s
        if self.family == "logistic":
            p = special.expit(z)
            return p * (1.0 - p) / s
        return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi) / s

    def hazard(self, z, r=0):
        """f(z) / (1 - F(z)), computed in log space for the normal tail."""
        return np.exp(self.log_hazard(z, r))

    def log_hazard(self, z, r=0):
        """log f(z) - log(1 - F(z)); stays finite where the hazard underflows."""
        s = self.scale_for(r)
        z = np.asarray(z, dtype=float) / s
        if self.family == "logistic":
            return special.log_expit(z) - np.log(s)
        log_pdf = -0.5 * z * z - 0.5 * np.log(2 * np.pi)
        return log_pdf - special.log_ndtr(-z) - np.log(s)

    def draw(self, rng: np.random.Generator, n: int, r=0) -> np.ndarray:
        s = self.scale_for(r)
        if self.family == "logistic":
            return rng.logistic(0.0, 1.0, size=n) * s
        return rng.standard_normal(n) * s

    def to_json(self) -> dict:
        d = {"family": self.family, "scale": self.scale}
        if self.group_scale is not None:
            d["group_scale"] = list(self.group_scale)
        return d


@dataclass(frozen=True)
class DecisionRule:
    """Search when risk clears a group-specific threshold.

    Baseline uses ``c - tau*r``; fewer_labels uses ``c + tau*r``.
    """

    c: float
    tau: float = 0.0
    variant: str = BASELINE
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        if not 0.0 < self.c <= 1.0:
            raise RuleError(f"search cost c must lie in (0, 1], got {self.c}")
        if self.variant not in VARIANTS:
            raise RuleError(f"unknown variant {self.variant!r}")

    def threshold(self, r):
        r = np.asarray(r)
        sign = -1.0 if self.variant == BASELINE else 1.0
        return np.where(r == 1, self.c + sign * self.tau, self.c)

    def with_tau(self, tau: float) -> "DecisionRule":
        return DecisionRule(self.c, float(tau), self.variant, self.noise)

    def to_json(self) -> dict:
        return {
            "c": self.c,
            "tau": self.tau,
            "variant": self.variant,
            "noise": None if self.noise is None else self.noise.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DecisionRule":
        noise = d.get("noise")
        if noise is not None:
            gs = noise.get("group_scale")
            noise = NoiseSpec(
                noise.get("family", "logistic"),
                float(noise.get("scale", 1.0)),
                None if gs is None else (float(gs[0]), float(gs[1])),
            )
        return cls(float(d["c"]), float(d.get("tau", 0.0)), d.get("variant", BASELINE), noise)


def select(rule: DecisionRule, mu, r):
    """Deterministic rule: 1 iff mu >= threshold (weak inequality)."""
    if rule.noise is not None:
        raise RuleError("select() is for deterministic rules; use select_noisy")
    out = (np.asarray(mu) >= rule.threshold(r)).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def select_noisy(rule: DecisionRule, mu, r, eps):
    """Noisy rule: 1 iff mu + eps >= threshold."""
    if rule.noise is None:
        raise RuleError("select_noisy() needs a rule with a noise spec")
    out = (np.asarray(mu) + np.asarray(eps) >= rule.threshold(r)).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def selection_probability(rule: DecisionRule, mu, r):
    """P(S=1 | mu, r) = 1 - F(threshold - mu) for a noisy rule."""
    if rule.noise is None:
        raise RuleError("selection_probability() needs a rule with a noise spec")
    out = rule.noise.sf(rule.threshold(r) - np.asarray(mu, dtype=float), r)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class SelectionTable:
    """Per-cell selection probability and selected mass under a rule."""

    pop: Population
    rule: DecisionRule
    prob: np.ndarray
    selected_mass: np.ndarray


def cell_selection_probability(pop: Population, rule: DecisionRule) -> np.ndarray:
    if rule.noise is None:
        return (pop.mu >= rule.threshold(pop.r)).astype(float)
    return np.asarray(selection_probability(rule, pop.mu, pop.r), dtype=float)


def apply_rule(pop: Population, rule: DecisionRule, seed: int | None = None) -> SelectionTable:
    """Exact selected mass per cell.

    Noisy rules contribute their exact selection probabilities, so ``seed``
    is accepted for interface symmetry but never used.
    """
    prob = cell_selection_probability(pop, rule)
    return SelectionTable(pop, rule, prob, pop.mass * prob)


def draw_selection(rule: DecisionRule, mu: np.ndarray, r: np.ndarray, rng: np.random.Generator):
    """Selection flags for individuals, drawing fresh noise when the rule is noisy."""
    if rule.noise is None:
        return select(rule, mu, r)
    eps = rule.noise.draw(rng, len(mu), r)
    return select_noisy(rule, mu, r, eps)
