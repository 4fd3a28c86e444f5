"""Comparative statics over the bias parameter.

Sweeps compute, for every tau on a grid, the prediction each exercise
assigns to every (x, r) stratum, the automated rule built on those
predictions, and group top-share statistics. Exact mode enumerates the
population; Monte Carlo mode samples and fits.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .decision import BASELINE, DecisionRule, apply_rule
from .estimation import (EXERCISES, S_FULL, Y_GIVEN_SELECTED, YS_FULL, EstimationError,
                         FitOptions, fit, observe)
from .population import Cell, Population, PopulationError, build_population, derive_seed
from .svg import line_chart

CSV_COLUMNS = ("tau", "exercise", "group_blind", "x", "r", "prediction", "searched",
               "group_fraction", "top_share", "positivity_flag")


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    tau_grid: tuple[float, ...]
    rule: DecisionRule
    exercises: tuple[str, ...] = EXERCISES
    group_blind: tuple[bool, ...] = (False,)
    c_min: float = 0.5
    top_share_q: float = 0.5
    mode: str = "exact"             # or "monte_carlo"
    n: int = 100_000
    seed: int = 0
    fit_options: FitOptions = FitOptions(form="saturated")
    threads: int = 1

    def __post_init__(self):
        grid = tuple(float(t) for t in self.tau_grid)
        object.__setattr__(self, "tau_grid", grid)
        if not grid:
            raise SweepError("tau grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise SweepError("tau grid must be strictly ascending")
        if not 0.0 <= self.c_min <= 1.0:
            raise SweepError("c_min must lie in [0, 1]")
        if not 0.0 < self.top_share_q < 1.0:
            raise SweepError("top_share_q must lie in (0, 1)")
        if self.mode not in ("exact", "monte_carlo"):
            raise SweepError(f"unknown sweep mode {self.mode!r}")
        for ex in self.exercises:
            if ex not in EXERCISES:
                raise SweepError(f"unknown exercise {ex!r}")


@dataclass(frozen=True)
class SweepRow:
    tau: float
    exercise: str
    group_blind: bool
    x: object
    r: int
    prediction: float | None
    searched: int | None
    group_fraction: float
    top_share: float
    positivity_flag: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    config: SweepConfig
    diagnostics: dict = field(default_factory=dict)

    def series(self, exercise: str, x, r: int, group_blind: bool = False) -> list[float | None]:
        """Prediction path over the grid for one stratum."""
        out = []
        for tau in self.config.tau_grid:
            hit = [row.prediction for row in self.rows
                   if row.tau == tau and row.exercise == exercise and row.x == x
                   and row.r == r and row.group_blind == group_blind]
            out.append(hit[0] if hit else None)
        return out

    def group_metric(self, exercise: str, metric: str, r: int,
                     group_blind: bool = False) -> list[float]:
        out = []
        for tau in self.config.tau_grid:
            vals = [getattr(row, metric) for row in self.rows
                    if row.tau == tau and row.exercise == exercise and row.r == r
                    and row.group_blind == group_blind]
            out.append(vals[0] if vals else float("nan"))
        return out

    def searched_set(self, exercise: str, tau: float, r: int, group_blind: bool = False) -> set:
        return {row.x for row in self.rows
                if row.tau == tau and row.exercise == exercise and row.r == r
                and row.group_blind == group_blind and row.searched == 1}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_cell(getattr(row, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_svg(self) -> dict[str, str]:
        """One chart per (exercise, blind flag, metric), one series per group."""
        charts = {}
        taus = self.config.tau_grid
        for ex in self.config.exercises:
            for gb in self.config.group_blind:
                for metric in ("top_share", "group_fraction"):
                    series = {}
                    for r in (0, 1):
                        vals = self.group_metric(ex, metric, r, gb)
                        series[f"r={r}"] = list(zip(taus, vals))
                    name = f"sweep_{ex}{'_blind' if gb else ''}_{metric}.svg"
                    charts[name] = line_chart(series, title=f"{ex} ({metric})",
                                              xlabel="tau", ylabel=metric)
        return charts


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, tuple):
        return json.dumps(list(v))
    return str(v)


# --------------------------------------------------------------------------
# metrics


def automated_rule(predictions: Mapping, c_min: float, strata: Iterable | None = None) -> dict:
    """Search stratum iff its prediction is at least ``c_min``."""
    if strata is not None:
        missing = [s for s in strata if s not in predictions]
        if missing:
            raise SweepError(f"no prediction for strata {missing}")
    out = {}
    for key, p in predictions.items():
        if p is None or (isinstance(p, float) and math.isnan(p)):
            raise SweepError(f"prediction for stratum {key!r} is undefined")
        out[key] = int(p >= c_min)
    return out


def group_fraction(pop: Population, indicators: Mapping, r: int) -> float:
    """Share of group r's population mass living in searched strata.

    Keys of ``indicators`` are (x, r) pairs; group-blind keys (x, None)
    apply to both groups.
    """
    num = 0.0
    for i, x in enumerate(pop.x_domain):
        ind = indicators.get((x, r), indicators.get((x, None), 0))
        if ind:
            num += pop.mass[(pop.x_code == i) & (pop.r == r)].sum()
    return float(min(1.0, num / pop.group_mass(r)))


@dataclass(frozen=True)
class TopShare:
    fraction: dict[int, float]
    threshold: float
    selected_weight: float
    target_weight: float
    group1_share_of_top: float


def top_share_details(scores, groups, q: float = 0.5, weights=None) -> TopShare:
    """Group fractions at or above the pooled top-q cut-off.

    The cut-off is the score at which the descending cumulative weight first
    reaches ``q`` of the total (the ceil(q*N)-th largest score when
    unweighted). Every score tied with the cut-off counts as in the top set.
    """
    scores = np.asarray(scores, dtype=float)
    groups = np.asarray(groups)
    w = np.ones(len(scores)) if weights is None else np.asarray(weights, dtype=float)
    if not 0.0 < q < 1.0:
        raise SweepError("q must lie in (0, 1)")
    if len(scores) == 0 or w.sum() <= 0:
        raise SweepError("no scores to rank")
    order = np.argsort(-scores, kind="stable")
    cum = np.cumsum(w[order])
    target = q * cum[-1]
    k = int(np.searchsorted(cum, target - 1e-12 * cum[-1]))
    cut = scores[order][min(k, len(order) - 1)]
    top = scores >= cut
    frac = {}
    for g in (0, 1):
        gw = w[groups == g].sum()
        if gw <= 0:
            raise SweepError(f"group {g} is empty")
        frac[g] = float(w[top & (groups == g)].sum() / gw)
    top_w = float(w[top].sum())
    return TopShare(frac, float(cut), top_w, float(target), float(w[top & (groups == 1)].sum() / top_w))


def top_share(scores, groups, q: float = 0.5, weights=None) -> dict[int, float]:
    return top_share_details(scores, groups, q, weights).fraction


def mlr_diagnostic(pop: Population, rule: DecisionRule, tau_pair: tuple[float, float],
                   mu_pair: tuple[float, float], x, r: int) -> tuple[float, float]:
    """P(mu=mu1 | S=1, x, r) / P(mu=mu2 | S=1, x, r) at each tau of the pair."""
    if rule.noise is None:
        raise SweepError("likelihood-ratio diagnostic needs a noisy rule")
    t1, t2 = tau_pair
    m1, m2 = mu_pair
    if t1 > t2:
        raise SweepError("tau pair must be ordered")
    if not m1 < m2:
        raise SweepError("mu pair must satisfy mu1 < mu2")
    stratum = pop.stratum_mask(x, r)
    at1 = stratum & np.isclose(pop.mu, m1, rtol=0, atol=1e-12)
    at2 = stratum & np.isclose(pop.mu, m2, rtol=0, atol=1e-12)
    if not (pop.mass[at1].sum() > 0 and pop.mass[at2].sum() > 0):
        raise SweepError(f"mu values {mu_pair} are not both in the support of stratum ({x!r}, {r})")
    out = []
    for tau in (t1, t2):
        sel = apply_rule(pop, rule.with_tau(tau)).selected_mass
        out.append(float(sel[at1].sum() / sel[at2].sum()))
    return out[0], out[1]


# --------------------------------------------------------------------------
# sweeps


def _exact_stratum_predictions(pop: Population, rule: DecisionRule, exercise: str,
                               group_blind: bool) -> dict:
    sel = apply_rule(pop, rule).selected_mass
    out = {}
    for x, r in pop.strata(group_blind):
        m = pop.stratum_mask(x, r)
        s = sel[m].sum()
        if exercise == Y_GIVEN_SELECTED:
            out[(x, r)] = float(np.dot(sel[m], pop.mu[m]) / s) if s > 0 else None
        elif exercise == S_FULL:
            out[(x, r)] = float(s / pop.mass[m].sum())
        else:
            out[(x, r)] = float(np.dot(sel[m], pop.mu[m]) / pop.mass[m].sum())
    return out


def _mc_stratum_predictions(pop: Population, cfg: SweepConfig, rule: DecisionRule):
    # common random numbers: every grid point shares one population draw
    data = observe(pop, rule, cfg.n, derive_seed(cfg.seed, 0))
    out = {}
    for gb in cfg.group_blind:
        for ex in cfg.exercises:
            try:
                p = fit(data, ex, gb, cfg.fit_options)
            except EstimationError:
                p = None
            preds = {}
            for x, g in pop.strata(gb):
                i = pop.x_index(x)
                try:
                    val = p.predict_codes(np.array([[i]]), None if gb else np.array([g]))[0]
                    preds[(x, g)] = float(val)
                except (EstimationError, AttributeError):
                    preds[(x, g)] = None
            out[(ex, gb)] = preds
    return out


def _tau_rows(pop: Population, cfg: SweepConfig, tau: float) -> list[SweepRow]:
    rule = cfg.rule.with_tau(tau)
    if cfg.mode == "monte_carlo":
        mc_preds = _mc_stratum_predictions(pop, cfg, rule)
    rows = []
    for gb in cfg.group_blind:
        for ex in cfg.exercises:
            if cfg.mode == "exact":
                preds = _exact_stratum_predictions(pop, rule, ex, gb)
            else:
                preds = mc_preds[(ex, gb)]
            defined = {k: v for k, v in preds.items() if v is not None}
            ind = automated_rule(defined, cfg.c_min)

            # population (x, r) strata weighted by their mass, scored by the
            # (possibly blind) predictor; Monte Carlo mode only swaps the scores
            keys, scores, grp, wts = [], [], [], []
            for x, g in pop.strata(False):
                pk = (x, None) if gb else (x, g)
                keys.append((x, g, pk))
                if preds.get(pk) is None:
                    continue
                scores.append(preds[pk])
                grp.append(g)
                wts.append(pop.mass[pop.stratum_mask(x, g)].sum())
            try:
                ts = top_share(scores, grp, cfg.top_share_q, wts)
            except SweepError:
                ts = {0: float("nan"), 1: float("nan")}
            frac = {g: group_fraction(pop, ind, g) for g in (0, 1)}
            for x, g, pk in keys:
                p = preds.get(pk)
                rows.append(SweepRow(tau, ex, gb, x, g, p, ind.get(pk),
                                     frac[g], ts[g], int(p is None)))
    return rows


def run_sweep(pop: Population, cfg: SweepConfig) -> SweepResult:
    """Evaluate every configured exercise at every tau on the grid.

    Grid points run in a thread pool of ``cfg.threads`` workers and are
    merged in grid order, so output does not depend on the thread count.
    """
    if not cfg.tau_grid:
        raise SweepError("tau grid is empty")
    workers = max(1, int(cfg.threads))
    if workers == 1:
        chunks = [_tau_rows(pop, cfg, t) for t in cfg.tau_grid]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(lambda t: _tau_rows(pop, cfg, t), cfg.tau_grid))
    rows = [row for chunk in chunks for row in chunk]
    diagnostics = {}
    if cfg.rule.noise is not None:
        diagnostics["mlr"] = mlr_table(pop, cfg.rule, cfg.tau_grid)
    return SweepResult(rows, cfg, diagnostics)


def mlr_table(pop: Population, rule: DecisionRule, tau_grid: Sequence[float]) -> list[dict]:
    """Lowest/highest-mu likelihood ratio in each group-1 stratum, per tau."""
    out = []
    for x, r in pop.strata(False):
        if r != 1:
            continue
        m = pop.stratum_mask(x, r) & (pop.mass > 0)
        mus = np.unique(pop.mu[m])
        if len(mus) < 2:
            continue
        for tau in tau_grid:
            lo, _ = mlr_diagnostic(pop, rule, (tau, tau), (mus[0], mus[-1]), x, r)
            out.append({"x": x, "tau": tau, "mu_low": float(mus[0]),
                        "mu_high": float(mus[-1]), "ratio": lo})
    return out


def _weakly(values: Sequence[float | None], direction: int, tol: float) -> bool:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return all(direction * (b - a) >= -tol for a, b in zip(vals, vals[1:]))


def check_properties(result: SweepResult, tol: float = 1e-12) -> list[str]:
    """Monotonicity violations of the comparative statics in an exact sweep.

    Strata that fail positivity at a grid point are skipped there.
    """
    cfg = result.config
    if cfg.mode != "exact":
        return []
    # fewer_labels is the baseline model at tau = -tau_tilde
    sign = 1 if cfg.rule.variant == BASELINE else -1
    expected = {Y_GIVEN_SELECTED: -1, S_FULL: 1, YS_FULL: 1}
    problems = []
    xs = sorted({row.x for row in result.rows}, key=repr)
    for ex in cfg.exercises:
        d = sign * expected[ex]
        for x in xs:
            for r, direction in ((1, d), (0, 0)):
                path = result.series(ex, x, r, False)
                if direction == 0:
                    vals = [v for v in path if v is not None]
                    if vals and max(vals) - min(vals) > tol:
                        problems.append(f"{ex}: r=0 prediction at x={x!r} varies with tau")
                elif not _weakly(path, direction, tol):
                    word = "decreasing" if direction < 0 else "increasing"
                    problems.append(f"{ex}: r=1 prediction at x={x!r} not weakly {word}")
    return problems


# --------------------------------------------------------------------------
# group-blind reconstruction example


@dataclass
class ReconstructionReport:
    epsilon: float
    marginal_x: int
    tau_grid: tuple[float, ...]
    blind: list[dict]
    aware: list[dict]
    blind_group_avg: list[dict]
    aware_group_avg: list[dict]
    blind_movement: dict
    aware_movement: dict
    larger_blind_movement: int | None

    def to_json(self) -> dict:
        def keyed(rows):
            return [{str(k): v for k, v in row.items()} for row in rows]
        return {
            "epsilon": self.epsilon,
            "marginal_x": self.marginal_x,
            "tau_grid": list(self.tau_grid),
            "blind": keyed(self.blind),
            "aware": keyed(self.aware),
            "blind_group_avg": keyed(self.blind_group_avg),
            "aware_group_avg": keyed(self.aware_group_avg),
            "blind_movement": {str(k): v for k, v in self.blind_movement.items()},
            "aware_movement": {str(k): v for k, v in self.aware_movement.items()},
            "larger_blind_movement": self.larger_blind_movement,
        }


def reconstruction_population(epsilon: float, marginal_x: int) -> Population:
    """Binary-X population where group is reconstructable up to ``epsilon``.

    Group 0 has X=1 with probability 1-eps, group 1 has X=0 with probability
    1-eps. Within each (x, r) three equally likely unobservable types carry
    risks 0.2, 0.45, 0.7; with c=0.5 only the 0.7 type is searched at
    tau=0, and the 0.45 type in group 1 at ``marginal_x`` joins once
    tau >= 0.05. The group-1 middle type at the other x is lowered to 0.2 so
    it stays unsearched for tau < 0.3.
    """
    if not 0.0 <= epsilon < 0.5:
        raise SweepError("epsilon must lie in [0, 0.5)")
    if marginal_x not in (0, 1):
        raise SweepError("marginal_x must be 0 or 1")
    cells = []
    for r in (0, 1):
        for x in (0, 1):
            px = (1 - epsilon if x == 1 else epsilon) if r == 0 else (1 - epsilon if x == 0 else epsilon)
            for u, mu in enumerate((0.2, 0.45, 0.7)):
                if r == 1 and u == 1 and x != marginal_x:
                    mu = 0.2
                cells.append(Cell(x, u, r, 0.5 * px / 3, mu))
    return build_population(cells)


def reconstruction_demo(epsilon: float, marginal_x: int,
                        tau_grid: Sequence[float] = (0.0, 0.05, 0.1),
                        exercise: str = Y_GIVEN_SELECTED) -> ReconstructionReport:
    """Compare group-blind and group-aware prediction movement over tau.

    Reports each group's average prediction under both predictors and which
    group's blind average moves more between the ends of the grid.
    """
    pop = reconstruction_population(epsilon, marginal_x)
    rule = DecisionRule(0.5, 0.0)
    blind, aware, bavg, aavg = [], [], [], []
    for tau in tau_grid:
        rt = rule.with_tau(tau)
        b = _exact_stratum_predictions(pop, rt, exercise, True)
        a = _exact_stratum_predictions(pop, rt, exercise, False)
        blind.append({x: v for (x, _), v in b.items()})
        aware.append(dict(a))
        bavg.append({g: _group_average(pop, lambda x, g: b.get((x, None)), g) for g in (0, 1)})
        aavg.append({g: _group_average(pop, lambda x, g: a.get((x, g)), g) for g in (0, 1)})
    bmove = {g: float(abs(bavg[-1][g] - bavg[0][g])) for g in (0, 1)}
    amove = {g: float(abs(aavg[-1][g] - aavg[0][g])) for g in (0, 1)}
    larger = None if bmove[0] == bmove[1] else (0 if bmove[0] > bmove[1] else 1)
    return ReconstructionReport(epsilon, marginal_x, tuple(tau_grid), blind, aware,
                                bavg, aavg, bmove, amove, larger)


def _group_average(pop: Population, pred, g: int) -> float:
    total = 0.0
    gm = pop.group_mass(g)
    for i, x in enumerate(pop.x_domain):
        w = pop.mass[(pop.x_code == i) & (pop.r == g)].sum()
        if w > 0:
            v = pred(x, g)
            if v is None:
                raise PopulationError(f"prediction undefined at x={x!r}")
            total += w * v
    return float(total / gm)
