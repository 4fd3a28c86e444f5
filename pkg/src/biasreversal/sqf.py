"""Stop-level simulation pipeline on SQF-style data.

Searched stops are split in two. A contraband risk model is fitted on one
half using demographics, stop context and the officer's stated reasons. On
the other half that model re-creates biased search decisions at group
thresholds chosen to hit a target search rate and group composition, and
the three prediction exercises are refit on (X, R) alone.

Real SQF extracts are read through :func:`ingest`; :func:`generate_stops`
produces synthetic data with the same column layout.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .estimation import EXERCISES, Y_GIVEN_SELECTED, FitOptions, ObservedDataset, Predictor, fit
from .experiments import top_share
from .population import derive_seed
from .svg import line_chart

logger = logging.getLogger(__name__)

TRUE_VALUES = {"1", "y", "yes", "true", "t"}
FALSE_VALUES = {"0", "n", "no", "false", "f"}

DEFAULT_SCHEMA = {
    "x": [
        {"column": "age", "bins": [0, 18, 25, 35, 45, 200]},
        {"column": "sex"},
        {"column": "build"},
        {"column": "pct"},
        {"column": "timestop", "hour_band": 4},
    ],
    "r": {"column": "race", "group1": ["B"], "group0": ["W"]},
    "u": ["cs_objcs", "cs_descr", "cs_casng", "cs_lkout", "cs_cloth",
          "cs_drgtr", "cs_furtv", "cs_vcrim", "cs_bulge", "cs_other"],
    "searched": "searched",
    "contraband": "contrabn",
}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class StopRecord:
    x_features: tuple
    r: int
    u_features: tuple[int, ...]
    searched: int
    contraband: int | None


@dataclass
class IngestReport:
    rows_read: int = 0
    kept: int = 0
    dropped_missing: int = 0
    dropped_other_group: int = 0
    rejected_unsearched_contraband: int = 0


@dataclass(frozen=True, eq=False)
class StopData:
    """Columnar stop table; iterate for :class:`StopRecord` objects."""

    x: np.ndarray                   # (n, kx) codes into x_levels
    r: np.ndarray
    u: np.ndarray                   # (n, ku) 0/1
    searched: np.ndarray
    contraband: np.ndarray          # -1 where absent
    x_names: tuple[str, ...]
    x_levels: tuple[tuple, ...]
    u_names: tuple[str, ...]
    report: IngestReport = field(default_factory=IngestReport)

    def __post_init__(self):
        c = np.where(self.searched == 1, self.contraband, -1).astype(np.int8)
        object.__setattr__(self, "contraband", c)

    def __len__(self) -> int:
        return len(self.r)

    def __iter__(self) -> Iterator[StopRecord]:
        for i in range(len(self)):
            xf = tuple(lv[c] for lv, c in zip(self.x_levels, self.x[i]))
            cb = int(self.contraband[i])
            yield StopRecord(xf, int(self.r[i]), tuple(int(v) for v in self.u[i]),
                             int(self.searched[i]), None if cb < 0 else cb)

    def subset(self, rows) -> "StopData":
        return StopData(self.x[rows], self.r[rows], self.u[rows], self.searched[rows],
                        self.contraband[rows], self.x_names, self.x_levels, self.u_names,
                        self.report)


# --------------------------------------------------------------------------
# ingest


def _parse_binary(raw: str, column: str, line: int) -> int | None:
    v = raw.strip().lower()
    if v == "":
        return None
    if v in TRUE_VALUES:
        return 1
    if v in FALSE_VALUES:
        return 0
    raise PipelineError(f"line {line}: column {column!r} has non-binary value {raw!r}")


def _x_label(raw: str, spec: dict) -> str | None:
    raw = raw.strip()
    if raw == "":
        return None
    if "bins" in spec:
        try:
            v = float(raw)
        except ValueError:
            return None
        edges = spec["bins"]
        for lo, hi in zip(edges, edges[1:]):
            if lo <= v < hi:
                return f"{lo:g}-{hi:g}"
        return None
    if "hour_band" in spec:
        digits = raw.replace(":", "")
        if not digits.isdigit():
            return None
        hour = int(digits) // 100
        if not 0 <= hour <= 24:
            return None
        width = int(spec["hour_band"])
        lo = (hour % 24) // width * width
        return f"{lo:02d}-{lo + width - 1:02d}"
    return raw


def _x_levels(spec: dict, seen: set) -> tuple:
    if "bins" in spec:
        edges = spec["bins"]
        return tuple(f"{lo:g}-{hi:g}" for lo, hi in zip(edges, edges[1:]))
    if "hour_band" in spec:
        w = int(spec["hour_band"])
        return tuple(f"{lo:02d}-{lo + w - 1:02d}" for lo in range(0, 24, w))
    return tuple(sorted(seen))


def ingest(path: str | Path, schema: dict | None = None) -> StopData:
    """Read a stop-level CSV into validated columnar records.

    Rows outside the two configured groups, rows with a missing required
    field, and unsearched rows claiming contraband are dropped and counted
    in ``StopData.report``.
    """
    with open(path, newline="") as fh:
        return ingest_text(fh.read(), schema)


def ingest_text(text: str, schema: dict | None = None) -> StopData:
    schema = schema or DEFAULT_SCHEMA
    reader = csv.DictReader(io.StringIO(text))
    header = set(reader.fieldnames or ())
    x_specs = [s if isinstance(s, dict) else {"column": s} for s in schema["x"]]
    rspec = schema["r"]
    required = [s["column"] for s in x_specs] + [rspec["column"]] + list(schema["u"]) \
        + [schema["searched"], schema["contraband"]]
    missing_cols = [c for c in required if c not in header]
    if missing_cols:
        raise PipelineError(f"CSV lacks mapped column(s): {', '.join(missing_cols)}")
    g1 = {str(v) for v in rspec.get("group1", ["B"])}
    g0 = {str(v) for v in rspec.get("group0", ["W"])}

    report = IngestReport()
    xs, rs, us, ss, cs = [], [], [], [], []
    for line, row in enumerate(reader, start=2):
        report.rows_read += 1
        race = (row[rspec["column"]] or "").strip()
        if race in g1:
            r = 1
        elif race in g0:
            r = 0
        else:
            report.dropped_other_group += 1
            continue
        searched = _parse_binary(row[schema["searched"]] or "", schema["searched"], line)
        contraband = _parse_binary(row[schema["contraband"]] or "", schema["contraband"], line)
        if searched is None:
            report.dropped_missing += 1
            continue
        if searched == 0 and contraband == 1:
            report.rejected_unsearched_contraband += 1
            continue
        if searched == 1 and contraband is None:
            report.dropped_missing += 1
            continue
        xf = [_x_label(row[s["column"]] or "", s) for s in x_specs]
        uf = [_parse_binary(row[c] or "", c, line) for c in schema["u"]]
        if any(v is None for v in xf) or any(v is None for v in uf):
            report.dropped_missing += 1
            continue
        xs.append(xf)
        rs.append(r)
        us.append(uf)
        ss.append(searched)
        cs.append(contraband if searched == 1 else -1)
    report.kept = len(rs)
    if report.dropped_missing or report.rejected_unsearched_contraband:
        logger.info("ingest: %s", report)

    levels = tuple(_x_levels(s, {row[j] for row in xs}) for j, s in enumerate(x_specs))
    pos = [{v: i for i, v in enumerate(lv)} for lv in levels]
    x = np.array([[pos[j][v] for j, v in enumerate(row)] for row in xs],
                 dtype=np.int64).reshape(len(xs), len(x_specs))
    return StopData(
        x, np.array(rs, dtype=np.int8),
        np.array(us, dtype=np.int8).reshape(len(us), len(schema["u"])),
        np.array(ss, dtype=np.int8), np.array(cs, dtype=np.int8),
        tuple(s["column"] for s in x_specs), levels, tuple(schema["u"]), report,
    )


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic stop population in the default schema.

    Marginals: group 1 with probability ``p_group1``; each x column drawn
    independently from its ``x_probs`` row; each reason flag independently
    with ``u_probs``. Contraband is Bernoulli(expit(intercept + x effects +
    u effects + r effect)); a stop is searched with probability
    expit(search_intercept + search_slope * logit(risk) + search_bias * r).
    """

    p_group1: float = 0.84
    x_levels: tuple = (
        ("age", (17, 21, 30, 40, 55)),           # representative ages of the five bins
        ("sex", ("F", "M")),
        ("build", ("H", "M", "T", "U")),
        ("pct", (14, 40, 44, 46, 73, 75, 79, 115)),
        ("timestop", (200, 600, 1000, 1400, 1800, 2200)),
    )
    x_probs: tuple = (
        (0.15, 0.30, 0.25, 0.15, 0.15),
        (0.10, 0.90),
        (0.10, 0.50, 0.35, 0.05),
        (0.10, 0.15, 0.10, 0.15, 0.15, 0.15, 0.10, 0.10),
        (0.15, 0.05, 0.15, 0.20, 0.25, 0.20),
    )
    x_effects: tuple = (
        (0.0, 0.8, 0.4, -0.4, -1.2),
        (0.0, 1.2),
        (0.0, 0.4, 0.6, -0.4),
        (0.0, 0.8, -0.8, 0.4, 1.2, -0.4, 0.6, -1.0),
        (0.0, -0.4, 0.4, 0.8, 0.4, -0.8),
    )
    u_names: tuple = ("cs_objcs", "cs_descr", "cs_casng", "cs_lkout", "cs_cloth",
                      "cs_drgtr", "cs_furtv", "cs_vcrim", "cs_bulge", "cs_other")
    u_probs: tuple = (0.08, 0.25, 0.25, 0.15, 0.10, 0.12, 0.40, 0.10, 0.15, 0.20)
    u_effects: tuple = (1.2, -0.12, 0.06, -0.06, 0.24, 0.72, -0.18, 0.18, 0.9, 0.12)
    intercept: float = -3.0
    r_effect: float = 0.0
    search_intercept: float = 1.5
    search_slope: float = 0.6
    search_bias: float = 0.3


def generator_config_from_json(d: dict) -> GeneratorConfig:
    base = GeneratorConfig()
    kw = {}
    for k, v in d.items():
        if not hasattr(base, k):
            raise PipelineError(f"unknown generator field {k!r}")
        kw[k] = _tuplify(v)
    return GeneratorConfig(**{**base.__dict__, **kw})


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(i) for i in v)
    return v


def generate_stops(n: int, seed: int, config: GeneratorConfig | None = None) -> list[dict]:
    """Draw ``n`` synthetic stops as CSV-ready rows in the default schema."""
    cfg = config or GeneratorConfig()
    if n < 1:
        raise PipelineError("n must be >= 1")
    rng = np.random.default_rng(seed)
    r = (rng.random(n) < cfg.p_group1).astype(np.int8)
    eta = np.full(n, cfg.intercept) + cfg.r_effect * r
    xcols = {}
    for (name, values), probs, effects in zip(cfg.x_levels, cfg.x_probs, cfg.x_effects):
        code = rng.choice(len(values), size=n, p=np.asarray(probs) / np.sum(probs))
        xcols[name] = np.asarray(values)[code]
        eta += np.asarray(effects)[code]
    u = (rng.random((n, len(cfg.u_names))) < np.asarray(cfg.u_probs)).astype(np.int8)
    eta += u @ np.asarray(cfg.u_effects, dtype=float)
    risk = expit(eta)
    y = (rng.random(n) < risk).astype(np.int8)
    s_prob = expit(cfg.search_intercept + cfg.search_slope * eta + cfg.search_bias * r)
    searched = (rng.random(n) < s_prob).astype(np.int8)

    rows = []
    for i in range(n):
        row = {name: str(col[i]) for name, col in xcols.items()}
        row["race"] = "B" if r[i] else "W"
        for j, uname in enumerate(cfg.u_names):
            row[uname] = "Y" if u[i, j] else "N"
        row["searched"] = "Y" if searched[i] else "N"
        row["contrabn"] = ("Y" if y[i] else "N") if searched[i] else ""
        rows.append(row)
    return rows


def generator_schema(config: GeneratorConfig | None = None) -> dict:
    cfg = config or GeneratorConfig()
    schema = dict(DEFAULT_SCHEMA)
    schema["u"] = list(cfg.u_names)
    return schema


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def synthetic_data(n: int, seed: int, config: GeneratorConfig | None = None) -> StopData:
    """Generate and ingest in one step (round-trips through the CSV schema)."""
    rows = generate_stops(n, seed, config)
    return ingest_text(rows_to_csv(rows), generator_schema(config))


# --------------------------------------------------------------------------
# pipeline stages


def split(data: StopData, fraction: float, seed: int) -> tuple[StopData, StopData]:
    """Seeded split of the searched stops; partition A gets floor(fraction*N)."""
    if not 0.0 < fraction < 1.0:
        raise PipelineError("split fraction must lie in (0, 1)")
    idx = np.flatnonzero(data.searched == 1)
    if len(idx) == 0:
        raise PipelineError("no searched stops to split")
    perm = np.random.default_rng(seed).permutation(idx)
    n_a = int(math.floor(fraction * len(idx)))
    return data.subset(np.sort(perm[:n_a])), data.subset(np.sort(perm[n_a:]))


@dataclass(frozen=True, eq=False)
class RiskModel:
    predictor: Predictor

    def score(self, data: StopData) -> np.ndarray:
        feats = np.concatenate([data.x, data.u.astype(np.int64)], axis=1)
        return self.predictor.predict_codes(feats, data.r)

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.predictor.encoding.column_names(), self.predictor.coef.tolist()))


def _risk_dataset(data: StopData) -> ObservedDataset:
    feats = np.concatenate([data.x, data.u.astype(np.int64)], axis=1)
    levels = data.x_levels + ((0, 1),) * len(data.u_names)
    return ObservedDataset(feats, data.r, np.ones(len(data), dtype=np.int8), data.contraband,
                           data.x_names + data.u_names, levels)


def fit_risk_model(partition: StopData, options: FitOptions | None = None) -> RiskModel:
    """Logistic regression of contraband on (X, R, U) among searched stops."""
    if len(partition) == 0:
        raise PipelineError("risk model partition is empty")
    if np.any(partition.searched != 1) or np.any(partition.contraband < 0):
        raise PipelineError("risk model partition must contain labelled searched stops only")
    return RiskModel(fit(_risk_dataset(partition), Y_GIVEN_SELECTED, False, options))


@dataclass(frozen=True)
class Calibration:
    c0: float
    c1: float
    tau: float
    target: tuple[int, int]
    realized: tuple[int, int]
    tie_slack: tuple[int, int]


def _group_threshold(scores: np.ndarray, k: int) -> float:
    """Largest threshold c with exactly k scores strictly above it (up to ties)."""
    s = np.sort(scores)[::-1]
    if k > len(s):
        raise PipelineError(f"target of {k} searches exceeds group size {len(s)}")
    if k == 0:
        return float(s[0])
    if k == len(s):
        return 0.0 if s[-1] > 0 else float(np.nextafter(s[-1], -np.inf))
    return float(s[k])


def calibrate_thresholds(scores: np.ndarray, groups: np.ndarray, rate: float,
                         aa_share: float) -> Calibration:
    """Group thresholds giving ``rate`` searched overall, ``aa_share`` of them in group 1.

    Target counts are floor(aa_share*rate*N) for group 1 and
    floor((1-aa_share)*rate*N) for group 0. Each threshold is the highest
    score left unsearched, so ``score > c`` selects exactly the target count
    unless scores tie across the boundary (reported as ``tie_slack``).
    """
    if not 0.0 < aa_share < 1.0 or not 0.0 < rate < 1.0:
        raise PipelineError("rate and aa_share must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float)
    groups = np.asarray(groups)
    n = len(scores)
    k1 = int(math.floor(aa_share * rate * n + 1e-9))
    k0 = int(math.floor((1.0 - aa_share) * rate * n + 1e-9))
    s0, s1 = scores[groups == 0], scores[groups == 1]
    c0 = _group_threshold(s0, k0)
    c1 = _group_threshold(s1, k1)
    real = (int(np.sum(s0 > c0)), int(np.sum(s1 > c1)))
    return Calibration(c0, c1, c0 - c1, (k0, k1), real, (k0 - real[0], k1 - real[1]))


@dataclass(frozen=True, eq=False)
class SyntheticSearchSet:
    data: ObservedDataset       # (X, R, s_hat, contraband masked where s_hat = 0)
    scores: np.ndarray
    c0: float
    c1: float
    tau: float
    target_share: float | None
    realized_share: float
    realized_rate: float


def synthesize(partition: StopData, c0: float, c1: float, risk_model: RiskModel,
               target_share: float | None = None) -> SyntheticSearchSet:
    """Re-create searches: s_hat = 1 iff predicted risk > the group's threshold."""
    scores = risk_model.score(partition)
    thr = np.where(partition.r == 1, c1, c0)
    s_hat = (scores > thr).astype(np.int8)
    ds = ObservedDataset(partition.x, partition.r, s_hat, partition.contraband,
                         partition.x_names, partition.x_levels,
                         {"c0": c0, "c1": c1})
    n_s = int(s_hat.sum())
    share = float(np.sum(s_hat[partition.r == 1]) / n_s) if n_s else float("nan")
    return SyntheticSearchSet(ds, scores, float(c0), float(c1), float(c0 - c1), target_share,
                              share, n_s / max(1, len(s_hat)))


# --------------------------------------------------------------------------
# figure replication


FIGURE_COLUMNS = ("aa_share", "tau", "exercise", "group", "top_share")


@dataclass(frozen=True)
class FigurePoint:
    aa_share: float
    tau: float
    exercise: str
    group: int
    top_share: float
    se: float
    calibration: Calibration


@dataclass
class FigureResult:
    points: list[FigurePoint]
    n_partition_a: int
    n_partition_b: int
    risk_model: RiskModel

    def curve(self, exercise: str, group: int = 1) -> list[FigurePoint]:
        return sorted((p for p in self.points if p.exercise == exercise and p.group == group),
                      key=lambda p: p.aa_share)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIGURE_COLUMNS)
        for p in self.points:
            w.writerow([repr(p.aa_share), repr(p.tau), p.exercise, p.group, repr(p.top_share)])
        return buf.getvalue()

    def to_svg(self) -> str:
        series = {ex: [(p.tau, p.top_share) for p in sorted(self.curve(ex), key=lambda p: p.tau)]
                  for ex in EXERCISES}
        return line_chart(series, title="Group-1 share in top half of predicted risk",
                          xlabel="tau = c0 - c1", ylabel="fraction of group 1 in top 50%")


def default_share_grid(start: float = 0.80, stop: float = 0.95, step: float = 0.025) -> list[float]:
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def _bootstrap_se(scores: np.ndarray, groups: np.ndarray, q: float, reps: int, seed: int) -> float:
    """Bootstrap SE of the group-1 top share with the fitted scores held fixed.

    Resampling records with replacement is the same as drawing multinomial
    counts over the distinct (score, group) cells, which is what is done.
    """
    if reps < 2:
        return float("nan")
    rng = np.random.default_rng(seed)
    cells, counts = np.unique(np.stack([scores, groups.astype(float)], axis=1),
                              axis=0, return_counts=True)
    n = int(counts.sum())
    vals = np.empty(reps)
    for b in range(reps):
        w = rng.multinomial(n, counts / n)
        vals[b] = top_share(cells[:, 0], cells[:, 1].astype(np.int8), q, w)[1]
    return float(vals.std(ddof=1))


def _share_point(b: StopData, risk: RiskModel, rate: float, share: float, q: float,
                 reps: int, seed: int, options: FitOptions | None) -> list[FigurePoint]:
    scores = risk.score(b)
    cal = calibrate_thresholds(scores, b.r, rate, share)
    syn = synthesize(b, cal.c0, cal.c1, risk, share)
    out = []
    for j, ex in enumerate(EXERCISES):
        model = fit(syn.data, ex, False, options)
        pred = model.predict_dataset(syn.data)
        ts = top_share(pred, b.r, q)
        se = _bootstrap_se(pred, b.r, q, reps, derive_seed(seed, j))
        for g in (0, 1):
            out.append(FigurePoint(share, cal.tau, ex, g, ts[g], se if g == 1 else float("nan"), cal))
    return out


def replicate_figure(data: StopData, share_grid: Sequence[float] | None = None, seed: int = 0,
                     rate: float = 0.5, split_fraction: float = 0.5, q: float = 0.5,
                     bootstrap: int = 200, options: FitOptions | None = None,
                     threads: int = 1) -> FigureResult:
    """Run the split / fit / synthesize / refit loop across group-1 search shares.

    Every share point is a pure function of its inputs and derived seed, so
    results are identical for any ``threads``.
    """
    grid = list(default_share_grid() if share_grid is None else share_grid)
    if not grid or any(not 0.0 < s < 1.0 for s in grid):
        raise PipelineError("share grid must be non-empty and inside (0, 1)")
    a, b = split(data, split_fraction, derive_seed(seed, 0))
    risk = fit_risk_model(a, options)

    def point(i_share):
        i, share = i_share
        return _share_point(b, risk, rate, share, q, bootstrap, derive_seed(seed, 1000 + i), options)

    items = list(enumerate(grid))
    if threads <= 1:
        chunks = [point(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(point, items))
    return FigureResult([p for c in chunks for p in c], len(a), len(b), risk)


def count_inversions(values: Sequence[float], direction: int, se: Sequence[float] | None = None,
                     k_se: float = 2.0) -> tuple[int, int]:
    """(adjacent steps against ``direction``, of which larger than k_se standard errors)."""
    inv = big = 0
    for i in range(1, len(values)):
        d = direction * (values[i] - values[i - 1])
        if d < 0:
            inv += 1
            if se is not None:
                tol = k_se * math.hypot(se[i], se[i - 1])
                if -d >= tol:
                    big += 1
    return inv, big
