"""Command-line entry point: ``biasreversal sweep|sqf|oracle-check|generate``.

Structured settings come from a JSON config; flags only carry paths, the
seed, the worker cap and the output format. Every run writes
``manifest.json`` next to its artifacts, and a manifest is itself a valid
``--config`` that reproduces the same outputs.

Exit codes: 0 success, 1 validation error, 2 property violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

from . import kernels
from .decision import DecisionRule, RuleError
from .estimation import EXERCISES, EstimationError, FitOptions
from .experiments import SweepConfig, SweepError, check_properties, run_sweep
from .population import (PopulationError, derive_seed, pop_a, population_from_json,
                         random_population)
from .sqf import (DEFAULT_SCHEMA, PipelineError, count_inversions, default_share_grid,
                  generate_stops, generator_config_from_json, ingest, replicate_figure,
                  rows_to_csv, synthetic_data)

MANIFEST_VERSION = 1
COMMANDS = ("sweep", "sqf", "oracle-check", "generate")
SEED_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration; ``key`` locates the offending entry in the file."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biasreversal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name, help_ in (("sweep", "tau sweep over a finite population"),
                        ("sqf", "stop-and-frisk style simulation pipeline"),
                        ("oracle-check", "run every reference example against brute-force oracles"),
                        ("generate", "emit a synthetic stop-level dataset")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, required=name != "oracle-check")
        sp.add_argument("--out", type=Path, required=name != "oracle-check")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--format", choices=("csv", "csv+svg"))
    return p


# --------------------------------------------------------------------------
# config handling


def _line_of(text: str, key: str | None) -> int | None:
    if not key:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path: Path) -> tuple[dict, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    return doc, text


def _get(d: dict, key: str, kind, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f'missing required field "{key}"', key)
        return default
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or (kind is int and isinstance(v, bool)):
        raise ConfigError(f'field "{key}" has the wrong type ({type(v).__name__})', key)
    return v


def _grid(spec, key: str) -> list[float]:
    if isinstance(spec, list):
        if not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in spec):
            raise ConfigError(f'"{key}" must hold numbers', key)
        return [float(t) for t in spec]
    if isinstance(spec, dict):
        start = _get(spec, "start", float, required=True)
        stop = _get(spec, "stop", float, required=True)
        if "num" in spec:
            num = _get(spec, "num", int)
            if num < 1:
                raise ConfigError('"num" must be positive', "num")
            if num == 1:
                return [start]
            return [start + (stop - start) * i / (num - 1) for i in range(num)]
        step = _get(spec, "step", float, required=True)
        if step <= 0:
            raise ConfigError('"step" must be positive', "step")
        return [round(start + i * step, 12) for i in range(int(math.floor((stop - start) / step + 1e-9)) + 1)]
    raise ConfigError(f'"{key}" must be a list or a {{start, stop, num|step}} object', key)


def _resolve_path(p: str, base: Path) -> Path:
    q = Path(p)
    return q if q.is_absolute() else (base / q).resolve()


def _population(spec, base: Path):
    """Population from a fixture name, inline cells, a JSON file or a random draw.

    Returns the population and a self-contained spec that rebuilds it through
    the same arithmetic (raw cell masses, not renormalised ones).
    """
    if spec == "pop_a" or (isinstance(spec, dict) and spec.get("fixture") == "pop_a"):
        return pop_a(), {"fixture": "pop_a"}
    if not isinstance(spec, dict):
        raise ConfigError('"population" must be "pop_a" or an object', "population")
    if "fixture" in spec:
        raise ConfigError(f'unknown population fixture {spec["fixture"]!r}', "fixture")
    if "cells" in spec:
        return population_from_json(spec), {"cells": spec["cells"]}
    if "path" in spec:
        path = _resolve_path(_get(spec, "path", str), base)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"population file {path}: {exc}", "path") from None
        return population_from_json(doc), {"cells": doc.get("cells")}
    if "random" in spec:
        r = _get(spec, "random", dict)
        args = (_get(r, "seed", int, required=True), _get(r, "n_x", int, 2), _get(r, "n_u", int, 3))
        return random_population(*args), {"random": dict(zip(("seed", "n_x", "n_u"), args))}
    raise ConfigError('"population" needs one of fixture, cells, path, random', "population")


def _fit_options(spec: dict | None, default_form: str) -> FitOptions:
    spec = spec or {}
    allowed = set(FitOptions.__dataclass_fields__)
    for k in spec:
        if k not in allowed:
            raise ConfigError(f'unknown fit option "{k}"', k)
    opts = FitOptions(form=spec.get("form", default_form), interact=bool(spec.get("interact", False)),
                      ridge=float(spec.get("ridge", 1e-6)), tol=float(spec.get("tol", 1e-8)),
                      max_iter=int(spec.get("max_iter", 100)), compress=bool(spec.get("compress", True)))
    if opts.form not in ("logistic", "saturated"):
        raise ConfigError(f"unknown fit form {opts.form!r}", "form")
    return opts


# --------------------------------------------------------------------------
# commands; each returns (resolved config, {artifact name: text}, violations)


def _sweep(cfg: dict, base: Path, seed: int | None, threads: int, fmt: str):
    pop, pop_spec = _population(cfg.get("population", None) or _missing("population"), base)
    rule_doc = _get(cfg, "rule", dict, required=True)
    try:
        rule = DecisionRule.from_json(rule_doc)
    except KeyError as exc:
        raise ConfigError(f"rule is missing field {exc}", "rule") from None
    sw = _get(cfg, "sweep", dict, {})
    grid = _grid(sw.get("tau_grid", {"start": 0.0, "stop": rule.c, "num": 21}), "tau_grid")
    mode = _get(sw, "mode", str, "exact")
    if mode == "monte_carlo" and seed is None:
        raise ConfigError('monte_carlo mode needs a seed (config "seed" or --seed)', "mode")
    exercises = tuple(_get(sw, "exercises", list, list(EXERCISES)))
    blind = tuple(bool(b) for b in _get(sw, "group_blind", list, [False]))
    sc = SweepConfig(grid, rule, exercises, blind, c_min=_get(sw, "c_min", float, 0.5),
                     top_share_q=_get(sw, "top_share_q", float, 0.5), mode=mode,
                     n=_get(sw, "n", int, 100_000), seed=0 if seed is None else seed,
                     fit_options=_fit_options(_get(sw, "fit", dict), "saturated"), threads=threads)
    res = run_sweep(pop, sc)
    arts = {"sweep.csv": res.to_csv()}
    if "mlr" in res.diagnostics:
        arts["mlr.json"] = json.dumps(res.diagnostics["mlr"], indent=2) + "\n"
    if fmt == "csv+svg":
        arts.update(res.to_svg())
    resolved = {
        "population": pop_spec,
        "rule": rule.to_json(),
        "sweep": {
            "tau_grid": list(sc.tau_grid), "exercises": list(sc.exercises),
            "group_blind": list(sc.group_blind), "c_min": sc.c_min, "top_share_q": sc.top_share_q,
            "mode": sc.mode, "n": sc.n, "fit": dict(sc.fit_options.__dict__),
        },
    }
    return resolved, arts, check_properties(res)


def _missing(key):
    raise ConfigError(f'missing required field "{key}"', key)


def _need_seed(seed, what):
    if seed is None:
        raise ConfigError(f'{what} needs a seed (config "seed" or --seed)', "seed")


def _sqf(cfg: dict, base: Path, seed: int | None, threads: int, fmt: str):
    _need_seed(seed, "sqf")
    data_spec = _get(cfg, "data", dict, required=True)
    inputs = {}
    if "synthetic" in data_spec:
        syn = _get(data_spec, "synthetic", dict)
        n = _get(syn, "n", int, 200_000)
        gen = generator_config_from_json(_get(syn, "generator", dict, {}))
        data = synthetic_data(n, seed, gen)
        data_resolved = {"synthetic": {"n": n, "generator": syn.get("generator", {})}}
    elif "csv" in data_spec:
        path = _resolve_path(_get(data_spec, "csv", str), base)
        schema = _get(data_spec, "schema", dict, DEFAULT_SCHEMA)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"data file {path}: {exc.strerror}", "csv") from None
        digest = hashlib.sha256(raw).hexdigest()
        if "sha256" in data_spec and data_spec["sha256"] != digest:
            raise ConfigError(f"data file {path} changed since the manifest was written", "sha256")
        data = ingest(path, schema)
        inputs[str(path)] = digest
        data_resolved = {"csv": str(path), "schema": schema, "sha256": digest}
    else:
        raise ConfigError('"data" needs "synthetic" or "csv"', "data")

    pl = _get(cfg, "pipeline", dict, {})
    grid = _grid(pl["share_grid"], "share_grid") if "share_grid" in pl else default_share_grid()
    rate = _get(pl, "rate", float, 0.5)
    frac = _get(pl, "split_fraction", float, 0.5)
    q = _get(pl, "top_share_q", float, 0.5)
    reps = _get(pl, "bootstrap", int, 200)
    opts = _fit_options(_get(pl, "fit", dict), "logistic")
    fig = replicate_figure(data, grid, derive_seed(seed, 1), rate, frac, q, reps, opts, threads)

    violations = []
    summary = {"n_records": len(data), "n_partition_a": fig.n_partition_a,
               "n_partition_b": fig.n_partition_b, "ingest": asdict(data.report), "curves": {}}
    for ex, direction in (("y_given_selected", -1), ("s_full", 1), ("ys_full", 1)):
        c = fig.curve(ex)
        inv, big = count_inversions([p.top_share for p in c], direction, [p.se for p in c])
        summary["curves"][ex] = {"direction": direction, "inversions": inv, "large_inversions": big}
        if inv > 1 or big > 0:
            violations.append(f"{ex}: {inv} inversion(s), {big} beyond 2 SE")
    arts = {"figure1.csv": fig.to_csv(), "sqf_summary.json": json.dumps(summary, indent=2) + "\n"}
    if fmt == "csv+svg":
        arts["figure1.svg"] = fig.to_svg()
    resolved = {"data": data_resolved,
                "pipeline": {"share_grid": grid, "rate": rate, "split_fraction": frac,
                             "top_share_q": q, "bootstrap": reps, "fit": dict(opts.__dict__)}}
    return resolved, arts, violations, inputs


def _generate(cfg: dict, base: Path, seed: int | None, threads: int, fmt: str):
    _need_seed(seed, "generate")
    n = _get(cfg, "n", int, required=True)
    if n < 1:
        raise ConfigError('"n" must be positive', "n")
    gen_doc = _get(cfg, "generator", dict, {})
    rows = generate_stops(n, seed, generator_config_from_json(gen_doc))
    return {"n": n, "generator": gen_doc}, {"stops.csv": rows_to_csv(rows)}, []


def _oracle(out_lines: list[str]):
    from .oracle import run_oracle_checks

    def emit(line):
        print(line, flush=True)
        out_lines.append(line)

    results = run_oracle_checks(emit)
    failed = [r.name for r in results if not r.passed]
    emit(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return failed


# --------------------------------------------------------------------------


def _write(out: Path, arts: dict[str, str]) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name in sorted(arts):
        data = arts[name].encode()
        (out / name).write_bytes(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    return hashes


def _manifest(command, config, seed, fmt, hashes, inputs=None) -> str:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "seed": seed,
        "format": fmt,
        "config": config,
        "artifacts": hashes,
        "inputs": inputs or {},
        "kernel_backend": kernels.BACKEND,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run(args: argparse.Namespace) -> int:
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.seed is not None and not 0 <= args.seed <= SEED_MAX:
        raise ConfigError("--seed must be an unsigned 64-bit integer")

    if args.command == "oracle-check":
        lines: list[str] = []
        failed = _oracle(lines)
        if args.out is not None:
            hashes = _write(args.out, {"oracle_check.txt": "\n".join(lines) + "\n"})
            (args.out / "manifest.json").write_text(_manifest(args.command, {}, None, "txt", hashes))
        return 2 if failed else 0

    cfg, text = load_config(args.config)
    base = args.config.resolve().parent
    try:
        if "manifest_version" in cfg:
            if cfg.get("command") != args.command:
                raise ConfigError(f'manifest was written by "{cfg.get("command")}", not "{args.command}"',
                                  "command")
            seed = cfg.get("seed") if args.seed is None else args.seed
            fmt = args.format or cfg.get("format", "csv+svg")
            body = cfg.get("config")
            if not isinstance(body, dict):
                raise ConfigError('manifest has no "config" object', "config")
        else:
            seed = args.seed if args.seed is not None else _get(cfg, "seed", int)
            fmt = args.format or _get(cfg, "format", str, "csv+svg")
            body = cfg
        if seed is not None and not 0 <= seed <= SEED_MAX:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        if fmt not in ("csv", "csv+svg"):
            raise ConfigError(f"unknown format {fmt!r}", "format")

        inputs = {}
        if args.command == "sweep":
            resolved, arts, violations = _sweep(body, base, seed, args.threads, fmt)
        elif args.command == "sqf":
            resolved, arts, violations, inputs = _sqf(body, base, seed, args.threads, fmt)
        else:
            resolved, arts, violations = _generate(body, base, seed, args.threads, fmt)
    except ConfigError as exc:
        line = _line_of(text, exc.key)
        where = f"{args.config}:{line}" if line else str(args.config)
        raise ConfigError(f"{where}: {exc}") from None
    except (PopulationError, RuleError, SweepError, EstimationError, PipelineError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None

    hashes = _write(args.out, arts)
    (args.out / "manifest.json").write_text(_manifest(args.command, resolved, seed, fmt, hashes, inputs))
    for name in sorted(hashes):
        print(f"wrote {args.out / name}")
    if violations:
        for v in violations:
            print(f"property violation: {v}", file=sys.stderr)
        return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
