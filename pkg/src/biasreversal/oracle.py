"""Brute-force reference computations and the oracle-check suite.

The reference functions use plain loops and the ``math`` module only, and
read populations as raw (x, u, r, mass, mu) tuples, so they stay
independent of the vectorised code paths they are compared against.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

# --------------------------------------------------------------------------
# reference computations


def raw_cells(pop) -> list[tuple]:
    return [(c.x, c.u, c.r, c.mass, c.mu) for c in pop.cells]


def logistic_cdf(z: float, scale: float = 1.0) -> float:
    z = z / scale
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def normal_cdf(z: float, scale: float = 1.0) -> float:
    return 0.5 * math.erfc(-z / (scale * math.sqrt(2.0)))


def ref_threshold(c: float, tau: float, r: int, variant: str = "baseline") -> float:
    if r == 0:
        return c
    return c - tau if variant == "baseline" else c + tau


def ref_selection(mu: float, r: int, c: float, tau: float, variant: str = "baseline",
                  family: str | None = None, scale: float = 1.0) -> float:
    t = ref_threshold(c, tau, r, variant)
    if family is None:
        return 1.0 if mu >= t else 0.0
    cdf = logistic_cdf if family == "logistic" else normal_cdf
    return 1.0 - cdf(t - mu, scale)


def ref_conditional_mean(cells, x, r) -> float:
    num = den = 0.0
    for cx, _, cr, mass, mu in cells:
        if cx == x and (r is None or cr == r):
            num += mass * mu
            den += mass
    return num / den


def ref_target(cells, exercise: str, x, r, c: float, tau: float, variant: str = "baseline",
               family: str | None = None, scale: float = 1.0) -> float | None:
    sel_mass = sel_y = mass = 0.0
    for cx, _, cr, m, mu in cells:
        if cx != x or (r is not None and cr != r):
            continue
        p = ref_selection(mu, cr, c, tau, variant, family, scale)
        mass += m
        sel_mass += m * p
        sel_y += m * p * mu
    if exercise == "y_given_selected":
        return sel_y / sel_mass if sel_mass > 0 else None
    if exercise == "s_full":
        return sel_mass / mass
    return sel_y / mass


def ref_top_share(scores, groups, q: float) -> dict[int, float]:
    """Unweighted: cut at the ceil(q*N)-th largest score, ties included."""
    ranked = sorted(scores, reverse=True)
    cut = ranked[math.ceil(q * len(ranked)) - 1]
    out = {}
    for g in (0, 1):
        members = [s for s, gg in zip(scores, groups) if gg == g]
        out[g] = sum(1 for s in members if s >= cut) / len(members)
    return out


def ref_count_above(scores, c: float) -> int:
    return sum(1 for s in scores if s > c)


# --------------------------------------------------------------------------
# oracle-check suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _close(a, b, tol) -> bool:
    return a is not None and b is not None and abs(a - b) <= tol


def _checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    from . import decision as dec
    from . import estimation as est
    from . import experiments as exp
    from . import population as popm
    from . import sqf

    pop = popm.pop_a()
    cells = raw_cells(pop)
    checks = []

    def add(name):
        def deco(fn):
            checks.append((name, fn))
            return fn
        return deco

    @add("population.sample: P(R=1) within 0.002 at n=1e6")
    def _():
        smp = popm.sample(pop, 10**6, 1)
        exact = sum(m for _, _, r, m, _ in cells if r == 1)
        got = float(np.mean(smp.r))
        return abs(got - exact) <= 0.002, f"empirical {got:.5f} vs exact {exact:.5f}"

    @add("population.conditional_mean_y on POP-A")
    def _():
        pairs = [((0, 1), 0.3), ((1, 0), 0.4)]
        res = [(popm.conditional_mean_y(pop, x, r), ref_conditional_mean(cells, x, r), want)
               for (x, r), want in pairs]
        ok = all(_close(a, b, 1e-12) and _close(a, w, 1e-12) for a, b, w in res)
        return ok, "; ".join(f"{a:.12g} (oracle {b:.12g}, hand {w})" for a, b, w in res)

    @add("decision.select_noisy: logistic selection frequencies at 1e6 draws")
    def _():
        rng = np.random.default_rng(11)
        out = []
        ok = True
        for tau, want in ((0.0, 1 - logistic_cdf(0.3)), (0.2, 1 - logistic_cdf(0.1))):
            rule = dec.DecisionRule(0.5, tau, noise=dec.NoiseSpec("logistic", 1.0))
            eps = rule.noise.draw(rng, 10**6)
            freq = float(np.mean(dec.select_noisy(rule, np.full(10**6, 0.2), np.ones(10**6), eps)))
            ok &= abs(freq - want) <= 0.002
            out.append(f"tau={tau}: {freq:.4f} vs {want:.4f}")
        return ok, "; ".join(out)

    @add("decision.selection_probability: logistic closed form")
    def _():
        rule = dec.DecisionRule(0.5, 0.0, noise=dec.NoiseSpec("logistic", 1.0))
        got = dec.selection_probability(rule, 0.6, 1)
        want = logistic_cdf(0.1)
        return _close(got, want, 1e-12) and round(got, 4) == 0.5250, f"{got:.6f} vs {want:.6f}"

    @add("decision.apply_rule: POP-A selected cells")
    def _():
        t0 = dec.apply_rule(pop, dec.DecisionRule(0.45, 0.0))
        sel = {(c.u) for c, p in zip(pop.cells, t0.prob) if c.r == 1 and c.x == 0 and p > 0}
        t1 = dec.apply_rule(pop, dec.DecisionRule(0.45, 0.45))
        all_r1 = all(p == 1.0 for c, p in zip(pop.cells, t1.prob) if c.r == 1)
        oracle = {u for x, u, r, _, mu in cells if r == 1 and x == 0
                  and ref_selection(mu, r, 0.45, 0.0) > 0}
        return sel == oracle == {2} and all_r1, f"tau=0 selected u={sorted(sel)}; tau=c all r=1 selected: {all_r1}"

    @add("estimation.observe: tau=c selects every group-1 record")
    def _():
        ds = est.observe(pop, dec.DecisionRule(0.45, 0.45), 10**5, 3)
        ok = bool(np.all(ds.s[ds.r == 1] == 1))
        return ok, f"{int(np.sum(ds.r == 1))} group-1 records, all selected: {ok}"

    @add("estimation.exact_prediction: POP-A tables")
    def _():
        want = {
            "y_given_selected": (0.5, 0.4, 0.3),
            "s_full": (1 / 3, 2 / 3, 1.0),
            "ys_full": (1 / 6, 4 / 15, 0.3),
        }
        ok, parts = True, []
        for ex, vals in want.items():
            for tau, w in zip((0.0, 0.3, 0.45), vals):
                got = est.exact_prediction(pop, dec.DecisionRule(0.45, tau), ex, 0, 1)
                ref = ref_target(cells, ex, 0, 1, 0.45, tau)
                ok &= _close(got, ref, 1e-12) and _close(got, w, 1e-12)
            parts.append(ex)
        return ok, "checked " + ", ".join(parts) + " at tau in {0, 0.3, 0.45}"

    @add("estimation.fit: interacted logistic equals stratum means within 1e-3")
    def _():
        ds = est.observe(pop, dec.DecisionRule(0.45, 0.3), 200_000, 5)
        worst = 0.0
        for ex in est.EXERCISES:
            lg = est.fit(ds, ex, options=est.FitOptions(interact=True))
            rows, label = ds.training_view(ex)
            for i, x in enumerate(pop.x_domain):
                for r in (0, 1):
                    m = (ds.features[rows, 0] == i) & (ds.r[rows] == r)
                    if m.any():
                        worst = max(worst, abs(est.predict(lg, x, r) - float(label[m].mean())))
        return worst <= 1e-3, f"max deviation {worst:.2e}"

    @add("estimation.predict: saturated fit at tau=0.3 tracks the exact value")
    def _():
        ds = est.observe(pop, dec.DecisionRule(0.45, 0.3), 10**6, 7)
        p = est.fit(ds, "y_given_selected", options=est.FitOptions(form="saturated"))
        got = est.predict(p, 0, 1)
        n = int(np.sum((ds.features[:, 0] == 0) & (ds.r == 1) & (ds.s == 1)))
        se = math.sqrt(0.4 * 0.6 / n)
        return abs(got - 0.4) <= 4 * se, f"{got:.5f} vs 0.4 (4 SE = {4 * se:.5f})"

    @add("experiments.run_sweep: POP-A exact grid")
    def _():
        cfg = exp.SweepConfig((0.0, 0.3, 0.45), dec.DecisionRule(0.45), c_min=0.45)
        res = exp.run_sweep(pop, cfg)
        ok = True
        for ex in est.EXERCISES:
            got = res.series(ex, 0, 1)
            ref = [ref_target(cells, ex, 0, 1, 0.45, t) for t in cfg.tau_grid]
            ok &= all(_close(a, b, 1e-12) for a, b in zip(got, ref))
        return ok, "y_given_selected " + str([round(v, 6) for v in res.series("y_given_selected", 0, 1)])

    @add("experiments.automated_rule: search flips off as tau rises")
    def _():
        flags = []
        for tau in (0.0, 0.3):
            pred = {(0, 1): ref_target(cells, "y_given_selected", 0, 1, 0.45, tau)}
            flags.append(exp.automated_rule(pred, 0.45)[(0, 1)])
        return flags == [1, 0], f"searched at tau=0, 0.3: {flags}"

    @add("experiments.top_share: POP-A Monte Carlo group-1 share weakly decreasing")
    def _():
        cfg = exp.SweepConfig((0.0, 0.3, 0.45), dec.DecisionRule(0.45), ("y_given_selected",),
                              mode="monte_carlo", n=10**6, seed=1)
        res = exp.run_sweep(pop, cfg)
        ts = res.group_metric("y_given_selected", "top_share", 1)
        ok = all(b <= a for a, b in zip(ts, ts[1:]))
        return ok, f"group-1 top share {ts}"

    @add("experiments.mlr_diagnostic: closed-form logistic ratios")
    def _():
        mp = popm.build_population([popm.Cell(0, 0, 1, 0.5, 0.2), popm.Cell(0, 1, 1, 0.5, 0.6)])
        rule = dec.DecisionRule(0.5, 0.0, noise=dec.NoiseSpec("logistic", 1.0))
        a, b = exp.mlr_diagnostic(mp, rule, (0.0, 0.2), (0.2, 0.6), 0, 1)
        wa = (1 - logistic_cdf(0.3)) / (1 - logistic_cdf(-0.1))
        wb = (1 - logistic_cdf(0.1)) / (1 - logistic_cdf(-0.3))
        # quoted figures divide probabilities already rounded to 4 dp
        pr = [round(dec.selection_probability(rule.with_tau(t), m, 1), 4)
              for t, m in ((0.0, 0.2), (0.0, 0.6), (0.2, 0.2), (0.2, 0.6))]
        quoted = (round(pr[0] / pr[1], 4), round(pr[2] / pr[3], 4))
        ok = _close(a, wa, 1e-12) and _close(b, wb, 1e-12) and quoted == (0.8107, 0.8269)
        return ok, f"exact {a:.6f}, {b:.6f}; from 4-dp probabilities {quoted[0]}, {quoted[1]}"

    @add("experiments.reconstruction_demo: both directions attainable")
    def _():
        r1 = exp.reconstruction_demo(0.05, 1)
        r0 = exp.reconstruction_demo(0.05, 0)
        ok = r1.larger_blind_movement == 0 and r0.larger_blind_movement == 1
        return ok, f"marginal x=1 -> group {r1.larger_blind_movement}; x=0 -> group {r0.larger_blind_movement}"

    @add("sqf.generate: documented marginals at n=1e5")
    def _():
        cfg = sqf.GeneratorConfig()
        data = sqf.synthetic_data(100_000, 2, cfg)
        n = len(data)
        worst = abs(float(np.mean(data.r)) - cfg.p_group1) / math.sqrt(cfg.p_group1 * (1 - cfg.p_group1) / n)
        for j, p in enumerate(cfg.u_probs):
            worst = max(worst, abs(float(np.mean(data.u[:, j])) - p) / math.sqrt(p * (1 - p) / n))
        return worst <= 4.5, f"largest marginal deviation {worst:.2f} SE"

    @add("sqf.calibrate_thresholds: monotone in group-1 share (brute force)")
    def _():
        rng = np.random.default_rng(4)
        ok = True
        for _ in range(50):
            n = int(rng.integers(40, 200))
            scores = rng.random(n)
            groups = (rng.random(n) < 0.7).astype(int)
            prev = None
            for share in (0.55, 0.6, 0.65, 0.7):
                try:
                    cal = sqf.calibrate_thresholds(scores, groups, 0.5, share)
                except sqf.PipelineError:
                    continue
                g1 = [s for s, g in zip(scores, groups) if g == 1]
                ok &= ref_count_above(g1, cal.c1) == cal.target[1]
                if prev is not None:
                    ok &= cal.c1 <= prev.c1 and cal.c0 >= prev.c0
                prev = cal
        return ok, "50 random score sets"

    @add("sqf.fit_risk_model: single-flag contraband model")
    def _():
        cfg = sqf.GeneratorConfig(x_effects=tuple(tuple(0.0 for _ in row) for row in sqf.GeneratorConfig.x_effects),
                                  u_effects=(2.5,) + (0.0,) * 9, intercept=-2.0, r_effect=0.0)
        data = sqf.synthetic_data(60_000, 6, cfg)
        a, _ = sqf.split(data, 0.5, 1)
        model = sqf.fit_risk_model(a)
        coefs = model.coefficients()
        dom = max(coefs.items(), key=lambda kv: abs(kv[1]) if kv[0] != "intercept" else -1)
        pred = model.score(a)
        worst = 0.0
        for flag in (0, 1):
            m = a.u[:, 0] == flag
            worst = max(worst, abs(float(pred[m].mean()) - float(a.contraband[m].mean())))
        return dom[0] == "cs_objcs=1" and worst <= 0.01, f"dominant {dom[0]}; flag-stratum gap {worst:.2e}"

    @add("sqf.synthesize: calibrated rate 0.5 within one record")
    def _():
        data = sqf.synthetic_data(40_000, 8)
        a, b = sqf.split(data, 0.5, 2)
        model = sqf.fit_risk_model(a)
        cal = sqf.calibrate_thresholds(model.score(b), b.r, 0.5, 0.9)
        syn = sqf.synthesize(b, cal.c0, cal.c1, model, 0.9)
        n_s = int(syn.data.s.sum())
        target = math.floor(0.5 * len(b))
        return abs(n_s - target) <= 1 + sum(cal.tie_slack), f"{n_s} searched vs target {target}"

    @add("sqf.replicate_figure: curve directions at desk scale")
    def _():
        data = sqf.synthetic_data(200_000, 1)
        fig = sqf.replicate_figure(data, seed=3, bootstrap=100)
        ok, parts = True, []
        for ex, d in (("y_given_selected", -1), ("s_full", 1), ("ys_full", 1)):
            c = fig.curve(ex)
            inv, big = sqf.count_inversions([p.top_share for p in c], d, [p.se for p in c])
            ok &= inv <= 1 and big == 0
            parts.append(f"{ex}: {inv} inversion(s)")
        return ok, "; ".join(parts)

    return checks


def run_oracle_checks(verbose: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name, fn in _checks():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not an aborted suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if verbose:
            verbose(f"{'PASS' if res.passed else 'FAIL'}  {name}  [{detail}]")
    return results
