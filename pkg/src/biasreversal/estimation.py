"""The data scientist's side: observed data, exact targets, and fitted predictors.

Three prediction exercises are supported:

``y_given_selected``
    Y on the selected sample only.
``s_full``
    The selection decision S on everyone.
``ys_full``
    Y*S on everyone, i.e. missing labels imputed as zero.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from . import kernels
from .decision import DecisionRule, apply_rule, draw_selection
from .population import Population, derive_seed, sample

logger = logging.getLogger(__name__)

Y_GIVEN_SELECTED = "y_given_selected"
S_FULL = "s_full"
YS_FULL = "ys_full"
EXERCISES = (Y_GIVEN_SELECTED, S_FULL, YS_FULL)

MISSING = -1


class EstimationError(ValueError):
    """Fit or prediction request that cannot be honoured."""


class ConvergenceWarning(UserWarning):
    pass


def _check_exercise(exercise: str) -> None:
    if exercise not in EXERCISES:
        raise EstimationError(f"unknown exercise {exercise!r}; expected one of {EXERCISES}")


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    """Records (features, r, s, y) as seen by the data scientist.

    ``features`` holds integer codes into ``levels``. Labels of unselected
    records are overwritten with ``MISSING`` on construction, so nothing
    downstream can read them.
    """

    features: np.ndarray
    r: np.ndarray
    s: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...] = ("x",)
    levels: tuple[tuple, ...] = ((0, 1),)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.int64)
        if features.ndim == 1:
            features = features[:, None]
        n = features.shape[0]
        r = np.asarray(self.r, dtype=np.int8)
        s = np.asarray(self.s, dtype=np.int8)
        y = np.asarray(self.y, dtype=np.int8)
        if not (len(r) == len(s) == len(y) == n):
            raise EstimationError("features, r, s and y must have the same length")
        if features.shape[1] != len(self.feature_names) or len(self.levels) != len(self.feature_names):
            raise EstimationError("feature_names and levels must match the feature columns")
        if np.any((s != 0) & (s != 1)) or np.any((r != 0) & (r != 1)):
            raise EstimationError("r and s must be 0/1 indicators")
        y = np.where(s == 1, y, MISSING).astype(np.int8)
        if np.any((s == 1) & (y != 0) & (y != 1)):
            raise EstimationError("selected records need a 0/1 label")
        for name, arr in (("features", features), ("r", r), ("s", s), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "levels", tuple(tuple(lv) for lv in self.levels))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return len(self.s)

    @classmethod
    def from_records(cls, records: Sequence[tuple], x_domain: Sequence, **kw) -> "ObservedDataset":
        """Build from (x, r, s, y) tuples; ``y`` may be ``None`` when s == 0."""
        pos = {x: i for i, x in enumerate(x_domain)}
        xs, rs, ss, ys = [], [], [], []
        for x, r, s, y in records:
            xs.append(pos[x])
            rs.append(r)
            ss.append(s)
            ys.append(MISSING if y is None or not s else y)
        return cls(np.array(xs), np.array(rs), np.array(ss), np.array(ys),
                   levels=(tuple(x_domain),), **kw)

    def training_view(self, exercise: str) -> tuple[np.ndarray, np.ndarray]:
        """Row mask and 0/1 label for an exercise."""
        _check_exercise(exercise)
        if exercise == Y_GIVEN_SELECTED:
            rows = self.s == 1
            return rows, self.y[rows]
        if exercise == S_FULL:
            return np.ones(len(self), dtype=bool), self.s.copy()
        return np.ones(len(self), dtype=bool), np.where(self.s == 1, self.y, 0).astype(np.int8)

    def subset(self, rows: np.ndarray) -> "ObservedDataset":
        return ObservedDataset(self.features[rows], self.r[rows], self.s[rows], self.y[rows],
                               self.feature_names, self.levels, dict(self.provenance))


def observe(pop: Population, rule: DecisionRule, n: int, seed: int) -> ObservedDataset:
    """Sample ``n`` individuals, apply ``rule`` and mask unselected labels.

    Noise for noisy rules is drawn from a stream derived from ``seed`` so the
    population draw is the same as ``sample(pop, n, seed)``.
    """
    smp = sample(pop, n, seed)
    rng = np.random.default_rng(derive_seed(seed, 1))
    s = draw_selection(rule, smp.mu, smp.r, rng)
    return ObservedDataset(
        smp.x_code, smp.r, s, smp.y,
        feature_names=("x",), levels=(pop.x_domain,),
        provenance={"rule": rule.to_json(), "seed": int(seed), "n": int(n)},
    )


def exact_prediction(pop: Population, rule: DecisionRule, exercise: str, x, r: int | None) -> float:
    """Population value of the exercise's target in stratum (x, r).

    ``r=None`` gives the group-blind target conditioning on x alone.
    """
    _check_exercise(exercise)
    table = apply_rule(pop, rule)
    m = pop.stratum_mask(x, r)
    mass = pop.mass[m].sum()
    if mass <= 0:
        raise EstimationError(f"stratum (x={x!r}, r={r}) has zero mass")
    sel = table.selected_mass[m]
    if exercise == Y_GIVEN_SELECTED:
        if sel.sum() <= 0:
            raise EstimationError(f"no selected mass in stratum (x={x!r}, r={r})")
        return float(np.dot(sel, pop.mu[m]) / sel.sum())
    if exercise == S_FULL:
        return float(sel.sum() / mass)
    return float(np.dot(sel, pop.mu[m]) / mass)


# --------------------------------------------------------------------------
# encodings


@dataclass(frozen=True, eq=False)
class Encoding:
    """Maps categorical codes (and optionally r) to active design columns.

    Main effects: intercept plus one-hot per feature with the first level
    dropped, plus an r indicator. Interacted: one column per observed joint
    stratum of all features (and r), first stratum dropped.
    """

    feature_names: tuple[str, ...]
    levels: tuple[tuple, ...]
    use_r: bool
    interact: bool
    strata: np.ndarray = field(default=None, repr=False)

    @property
    def radix(self) -> np.ndarray:
        sizes = [len(lv) for lv in self.levels] + ([2] if self.use_r else [])
        return np.cumprod([1] + sizes[::-1][:-1])[::-1].astype(np.int64)

    def stratum_keys(self, features: np.ndarray, r: np.ndarray | None) -> np.ndarray:
        cols = [features[:, j] for j in range(features.shape[1])]
        if self.use_r:
            cols.append(np.asarray(r, dtype=np.int64))
        return np.stack(cols, axis=1).astype(np.int64) @ self.radix

    @property
    def n_params(self) -> int:
        if self.interact:
            return len(self.strata)
        return 1 + sum(len(lv) - 1 for lv in self.levels) + int(self.use_r)

    def column_names(self) -> list[str]:
        if self.interact:
            return ["intercept"] + [f"stratum[{k}]" for k in self.strata[1:]]
        names = ["intercept"]
        for name, lv in zip(self.feature_names, self.levels):
            names += [f"{name}={v}" for v in lv[1:]]
        if self.use_r:
            names.append("r=1")
        return names

    def active(self, features: np.ndarray, r: np.ndarray | None) -> np.ndarray:
        n = features.shape[0]
        if self.interact:
            idx = self.lookup(features, r)
            out = np.full((n, 2), -1, dtype=np.int32)
            out[:, 0] = 0
            out[:, 1] = np.where(idx > 0, idx, -1)
            return out
        m = 1 + features.shape[1] + int(self.use_r)
        out = np.full((n, m), -1, dtype=np.int32)
        out[:, 0] = 0
        offset = 1
        for j, lv in enumerate(self.levels):
            code = features[:, j]
            if np.any((code < 0) | (code >= len(lv))):
                raise EstimationError(f"feature {self.feature_names[j]!r} has codes outside its levels")
            out[:, 1 + j] = np.where(code > 0, offset + code - 1, -1)
            offset += len(lv) - 1
        if self.use_r:
            out[:, -1] = np.where(np.asarray(r) == 1, offset, -1)
        return out

    def lookup(self, features: np.ndarray, r: np.ndarray | None) -> np.ndarray:
        """Index of each row's stratum in ``strata``; raises off support."""
        keys = self.stratum_keys(features, r)
        idx = np.searchsorted(self.strata, keys)
        idx = np.minimum(idx, len(self.strata) - 1)
        bad = self.strata[idx] != keys
        if np.any(bad):
            raise EstimationError(
                f"{int(bad.sum())} record(s) fall in strata not seen during fitting")
        return idx

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "levels": [list(lv) for lv in self.levels],
            "use_r": self.use_r,
            "interact": self.interact,
            "strata": None if self.strata is None else self.strata.tolist(),
        }


def make_encoding(dataset: ObservedDataset, group_blind: bool, interact: bool,
                  rows: np.ndarray | None = None) -> Encoding:
    enc = Encoding(dataset.feature_names, dataset.levels, not group_blind, interact)
    if interact:
        feats = dataset.features if rows is None else dataset.features[rows]
        r = dataset.r if rows is None else dataset.r[rows]
        strata = np.unique(enc.stratum_keys(feats, r))
        object.__setattr__(enc, "strata", strata)
    return enc


# --------------------------------------------------------------------------
# predictors


@dataclass(frozen=True)
class FitOptions:
    form: str = "logistic"          # or "saturated"
    interact: bool = False
    ridge: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 100
    compress: bool = True


@dataclass(frozen=True)
class FitMeta:
    iterations: int
    grad_norm: float
    converged: bool
    n_obs: int
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class Predictor:
    exercise: str
    group_blind: bool
    form: str
    encoding: Encoding
    coef: np.ndarray | None
    table: np.ndarray | None
    fit_meta: FitMeta

    def predict_codes(self, features: np.ndarray, r: np.ndarray | None = None) -> np.ndarray:
        """Vectorised prediction for integer-coded feature rows."""
        features = np.asarray(features, dtype=np.int64)
        if features.ndim == 1:
            features = features[:, None]
        if not self.group_blind and r is None:
            raise EstimationError("group-aware predictor needs r")
        if self.form == "saturated":
            return self.table[self.encoding.lookup(features, r)]
        active = self.encoding.active(features, r)
        eta = kernels.linear_predictor(active, self.coef)
        return expit(eta)

    def predict_dataset(self, dataset: ObservedDataset) -> np.ndarray:
        return self.predict_codes(dataset.features, dataset.r)

    def to_json(self) -> dict:
        d = {
            "exercise": self.exercise,
            "group_blind": self.group_blind,
            "form": self.form,
            "encoding": self.encoding.to_json(),
            "fit_meta": {
                "iterations": self.fit_meta.iterations,
                "grad_norm": self.fit_meta.grad_norm,
                "converged": self.fit_meta.converged,
                "n_obs": self.fit_meta.n_obs,
                "degenerate": self.fit_meta.degenerate,
            },
        }
        if self.form == "saturated":
            d["table"] = self.table.tolist()
        else:
            d["coefficients"] = dict(zip(self.encoding.column_names(), self.coef.tolist()))
        return d


def predict(p: Predictor, x, r: int | None = None) -> float:
    """Prediction for one feature value (a tuple when there are several columns)."""
    if not p.group_blind and r is None:
        raise EstimationError("group-aware predictor needs r")
    enc = p.encoding
    values = (x,) if len(enc.levels) == 1 else tuple(x)
    codes = []
    for v, lv, name in zip(values, enc.levels, enc.feature_names):
        v = tuple(v) if isinstance(v, list) else v
        if v not in lv:
            raise EstimationError(f"{name}={v!r} is not a known level")
        codes.append(lv.index(v))
    out = p.predict_codes(np.array([codes]), None if p.group_blind else np.array([r]))
    return float(out[0])


def fit(dataset: ObservedDataset, exercise: str, group_blind: bool = False,
        options: FitOptions | None = None) -> Predictor:
    """Fit one exercise by saturated stratum means or ridge logistic IRLS."""
    opts = options or FitOptions()
    rows, label = dataset.training_view(exercise)
    if not rows.any():
        raise EstimationError(f"no training records for {exercise}")
    feats = dataset.features[rows]
    r = dataset.r[rows]
    n = int(rows.sum())
    degenerate = bool(label.min() == label.max())
    if degenerate:
        logger.warning("%s: constant label %d on %d records; fit is intercept-only in effect",
                       exercise, int(label[0]), n)

    if opts.form == "saturated":
        enc = make_encoding(dataset, group_blind, True, rows)
        idx = enc.lookup(feats, r)
        counts = np.bincount(idx, minlength=len(enc.strata))
        sums = np.bincount(idx, weights=label, minlength=len(enc.strata))
        meta = FitMeta(0, 0.0, True, n, degenerate)
        return Predictor(exercise, group_blind, "saturated", enc, None, sums / counts, meta)
    if opts.form != "logistic":
        raise EstimationError(f"unknown predictor form {opts.form!r}")

    enc = make_encoding(dataset, group_blind, opts.interact, rows)
    active = enc.active(feats, r)
    y = label.astype(np.float64)
    if opts.compress:
        active, inv = _unique_rows(active, enc.n_params)
        count = np.bincount(inv, minlength=len(active)).astype(np.float64)
        ysum = np.bincount(inv, weights=y, minlength=len(active))
    else:
        count = np.ones(n)
        ysum = y
    active = np.ascontiguousarray(active, dtype=np.int32)
    coef, meta = irls(active, count, ysum, enc.n_params, opts)
    meta = FitMeta(meta.iterations, meta.grad_norm, meta.converged, n, degenerate)
    return Predictor(exercise, group_blind, "logistic", enc, coef, None, meta)


def _unique_rows(active: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct design rows and the inverse map, packing rows into int64 keys when they fit."""
    m = active.shape[1]
    if m * np.log2(k + 1) < 62:
        keys = (active.astype(np.int64) + 1) @ ((k + 1) ** np.arange(m - 1, -1, -1, dtype=np.int64))
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        return active[first], inv.ravel()
    order = np.lexsort(active.T[::-1])
    srt = active[order]
    new = np.r_[True, np.any(srt[1:] != srt[:-1], axis=1)]
    inv = np.empty(len(active), dtype=np.int64)
    inv[order] = np.cumsum(new) - 1
    return srt[new], inv


def irls(active: np.ndarray, count: np.ndarray, ysum: np.ndarray, k: int,
         opts: FitOptions) -> tuple[np.ndarray, FitMeta]:
    """Newton / IRLS on the mean log-loss plus (ridge/2)*|slopes|^2.

    Column 0 is the unpenalised intercept. Steps are halved until the
    objective does not increase.
    """
    total = count.sum()
    pen = np.full(k, opts.ridge)
    pen[0] = 0.0
    ybar = np.clip(ysum.sum() / total, 1e-6, 1 - 1e-6)
    beta = np.zeros(k)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = kernels.linear_predictor(active, b)
        return float(np.sum(count * np.logaddexp(0.0, eta) - ysum * eta)) / total \
            + 0.5 * float(np.dot(pen * b, b))

    obj = objective(beta)
    gnorm = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        loss, grad, hess = kernels.newton_terms(active, count, ysum, beta)
        grad = grad / total + pen * beta
        hess = hess / total + np.diag(pen)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < opts.tol:
            it -= 1
            break
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(hess, grad)[0]
        t = 1.0
        for _ in range(40):
            cand = beta - t * step
            new = objective(cand)
            if new <= obj + 1e-12 * max(1.0, abs(obj)):
                break
            t *= 0.5
        beta, obj = cand, new
    else:
        loss, grad, _ = kernels.newton_terms(active, count, ysum, beta)
        gnorm = float(np.max(np.abs(grad / total + pen * beta)))
    converged = gnorm < opts.tol
    if not converged:
        warnings.warn(f"IRLS stopped after {it} iterations with gradient max-norm {gnorm:.3g}",
                      ConvergenceWarning, stacklevel=3)
    return beta, FitMeta(it, gnorm, converged, int(total))
