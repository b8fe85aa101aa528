"""Command-line front end.

``flit <command> [--config FILE] [flags]``; flags override the file.
Exit codes: 0 ok, 1 requested convergence failed, 2 config error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from flit.core import (
    ProblemSpec,
    Status,
    admissible_epsilon_exponent,
    hida_condition,
    l2_condition,
    lemma1_condition,
)

COMMANDS = ("check", "moments", "simulate", "estimate", "stransform", "converge", "chaos")
EXIT_OK, EXIT_CONVERGENCE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# fields that never influence results and are left out of emitted configs
_RUNTIME_ONLY = {"workers", "out", "dump"}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: Literal["check", "moments", "simulate", "estimate", "stransform", "converge", "chaos"]
    d: int = Field(1, ge=1)
    h1: list[float] = [0.5]
    h2: Optional[list[float]] = None
    T: float = Field(1.0, gt=0)
    epsilon: float = Field(0.0, ge=0)
    N: int = Field(0, ge=0)
    grid_n: int = Field(256, ge=1)
    replicates: int = Field(1000, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, ge=1)
    rel_tol: Optional[float] = Field(None, gt=0, lt=1)
    format: Literal["csv", "json"] = "csv"
    out: Optional[str] = None
    require_converged: bool = False
    dump: Optional[str] = None
    # command specific
    epsilons: Optional[list[float]] = None
    t: Optional[float] = None
    s: Optional[float] = None
    bump_center: float = 0.5
    bump_width: float = Field(0.25, gt=0)
    bump_amplitude: float = 1.0
    n_max: int = Field(10, ge=0)

    @model_validator(mode="after")
    def _shape(self):
        if self.h2 is None:
            self.h2 = list(self.h1)
        for name in ("h1", "h2"):
            v = getattr(self, name)
            if len(v) == 1:
                setattr(self, name, v * self.d)
            elif len(v) != self.d:
                raise ValueError(f"{name} must have 1 or d={self.d} entries")
            if any(not 0 < h < 1 for h in getattr(self, name)):
                raise ValueError(f"{name} entries must lie in (0, 1)")
        if self.epsilons is not None:
            if any(e <= 0 for e in self.epsilons) or any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
                raise ValueError("epsilons must be positive and strictly descending")
        if self.command in ("estimate", "stransform") and self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive for {self.command}")
        if self.command == "converge" and self.epsilons is None and self.epsilon <= 0:
            raise ValueError("converge needs epsilon > 0 or an epsilons list")
        for name in ("t", "s"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= self.T:
                raise ValueError(f"{name} must lie in (0, T]")
        return self

    def spec(self, epsilon: float | None = None) -> ProblemSpec:
        return ProblemSpec(self.d, self.h1, self.h2, self.T, self.epsilon if epsilon is None else epsilon, self.N)

    def emitted(self) -> dict:
        return self.model_dump(exclude=_RUNTIME_ONLY)


# ---------------------------------------------------------------------------
# output


class Result:
    def __init__(self, records: list[dict], summary: dict | None = None, statuses=()):
        self.records = records
        self.summary = summary or {}
        self.statuses = list(statuses)


def _num(v):
    if isinstance(v, bool) or v is None:
        return v
    if isinstance(v, Status):
        return v.value
    if isinstance(v, float):
        return v if math.isfinite(v) else repr(v)
    return v


def _csv_field(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Status):
        return v.value
    return "" if v is None else str(v)


def render(cfg: RunConfig, res: Result) -> str:
    if cfg.format == "json":
        doc = {
            "config": cfg.emitted(),
            "records": [{k: _num(v) for k, v in r.items()} for r in res.records],
        }
        if res.summary:
            doc["summary"] = {k: _num(v) for k, v in res.summary.items()}
        return json.dumps(doc, indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if res.records:
        keys = list(res.records[0])
        w.writerow(keys)
        for r in res.records:
            w.writerow([_csv_field(r.get(k)) for k in keys])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def _quads(cfg: RunConfig):
    from dataclasses import replace

    from flit.moments import QUAD_2D, QUAD_4D, QUAD_CHAOS

    qs = [QUAD_2D, QUAD_4D, QUAD_CHAOS]
    if cfg.rel_tol is not None:
        qs = [replace(q, rel_tol=cfg.rel_tol) for q in qs]
    return tuple(replace(q, workers=cfg.workers) for q in qs)


def _mr(quantity: str, r, **extra) -> dict:
    return {"quantity": quantity, **extra, "value": float(r.value), "error_estimate": float(r.error_estimate), "status": r.status}


def cmd_check(cfg: RunConfig) -> Result:
    spec = cfg.spec()
    rows = []
    for n in range(cfg.N + 1):
        rows.append({"check": "hida_condition", "N": n, "value": hida_condition(ProblemSpec(spec.d, spec.h1, spec.h2, spec.T, spec.epsilon, n))})
    rows.append({"check": "l2_condition", "N": "", "value": l2_condition(spec.d, spec.h1, spec.h2)})
    hA, hB = sorted((spec.h1.hmax, spec.h2.hmax))
    if hA < hB:
        rows.append({"check": "lemma1_condition", "N": cfg.N, "value": lemma1_condition(spec.d, cfg.N, hA, hB)})
    try:
        a = admissible_epsilon_exponent(spec.d, spec.h1, spec.h2)
    except ValueError:
        a = "none"
    rows.append({"check": "admissible_epsilon_exponent", "N": "", "value": a})
    return Result(rows)


def cmd_moments(cfg: RunConfig) -> Result:
    from flit.moments import mean_L, second_moment_L, truncated_norm

    q2, q4, qc = _quads(cfg)
    spec = cfg.spec()
    eps = spec.epsilon
    m = mean_L(spec, q2)
    rows = [_mr("mean", m, epsilon=eps, N=0)]
    if cfg.N == 0:
        m2 = second_moment_L(spec, q4)
        rows.append(_mr("second_moment", m2, epsilon=eps, N=0))
    else:
        acc = truncated_norm(spec, q4, cfg.N - 1, qc)
        m2 = acc.closed_form_total
        rows.append(_mr("second_moment", m2, epsilon=eps, N=0))
        if m2.status != Status.DIVERGING:
            for n in range(1, cfg.N + 1):
                rows.append(_mr("truncated_norm", acc.truncated(n), epsilon=eps, N=n))
    return Result(rows, statuses=[r["status"] for r in rows])


def _grid(cfg: RunConfig):
    from flit.fbm import TimeGrid

    return TimeGrid(cfg.T, cfg.grid_n)


def cmd_simulate(cfg: RunConfig) -> Result:
    from flit.fbm import sample_pair, write_binary, to_csv

    grid = _grid(cfg)
    spec = cfg.spec()
    pairs = [sample_pair(spec, grid, cfg.seed, r) for r in range(cfg.replicates)]
    if cfg.dump:
        write_binary(cfg.dump, pairs)
        Path(cfg.dump + ".csv").write_text(to_csv(pairs))
    ts = grid.points
    rows = []
    for p in pairs:
        for i, b in enumerate((p.b1, p.b2), start=1):
            for j in range(b.shape[0]):
                for k in range(b.shape[1]):
                    rows.append({"replicate": p.replicate, "process": i, "coordinate": j, "index": k, "t": float(ts[k]), "value": float(b[j, k])})
    return Result(rows)


def _mc_cfg(cfg: RunConfig, epsilon: float | None = None):
    from flit.mc import McConfig

    return McConfig(cfg.replicates, _grid(cfg), cfg.seed, cfg.spec(epsilon))


def cmd_estimate(cfg: RunConfig) -> Result:
    from flit.mc import mc_moments

    m = mc_moments(_mc_cfg(cfg), workers=cfg.workers)
    row = {
        "epsilon": cfg.epsilon,
        "mean": m.mean,
        "se_mean": m.se_mean,
        "second_moment": m.second_moment,
        "se_m2": m.se_m2,
        "variance": m.variance,
        "se_variance": m.se_variance,
        "n": cfg.grid_n,
        "replicates": m.replicates_used,
        "seed": cfg.seed,
    }
    return Result([row])


def cmd_stransform(cfg: RunConfig) -> Result:
    from flit.mc import s_transform_mc
    from flit.mh import gaussian_bump
    from flit.moments import pairings, s_transform_delta

    mc = _mc_cfg(cfg)
    t = cfg.T if cfg.t is None else cfg.t
    s = cfg.T if cfg.s is None else cfg.s
    bump = gaussian_bump(cfg.bump_center, cfg.bump_width, cfg.bump_amplitude)
    f1 = [bump] * cfg.d
    f2 = [gaussian_bump(0.0, 1.0, 0.0)] * cfg.d
    est, se = s_transform_mc(mc, t, s, f1, f2, workers=cfg.workers)
    a1, a2 = pairings(mc.spec, f1, f2, t, s)
    exact = s_transform_delta(mc.spec, t, s, a1, a2)
    row = {"t": t, "s": s, "epsilon": cfg.epsilon, "shift_norm": float(math.sqrt(sum((a1 - a2) ** 2))),
           "estimate_mc": est, "se": se, "analytic": exact, "z": (est - exact) / se if se > 0 else math.nan,
           "replicates": cfg.replicates, "seed": cfg.seed}
    return Result([row])


def cmd_converge(cfg: RunConfig) -> Result:
    from flit.mc import COLUMNS, convergence_study

    q2, q4, _ = _quads(cfg)
    eps = cfg.epsilons or [cfg.epsilon * 2.0**-k for k in range(5)]
    specs = [cfg.spec(e) for e in eps]
    st = convergence_study(specs, _mc_cfg(cfg, eps[0]), q2, q4, workers=cfg.workers)
    rows = [{c: getattr(r, c) for c in COLUMNS} for r in st.rows]
    summary = {
        "mean_limit": st.mean_limit.value,
        "mean_limit_status": st.mean_limit.status,
        "m2_limit": st.m2_limit.value,
        "m2_limit_status": st.m2_limit.status,
        "mean_monotone": st.mean_monotone,
        "m2_monotone": st.m2_monotone,
    }
    if not (st.mean_monotone and st.m2_monotone):
        print("warning: analytic moments are not monotone in epsilon", file=sys.stderr)
    return Result(rows, summary, statuses=[st.mean_limit.status, st.m2_limit.status])


def cmd_chaos(cfg: RunConfig) -> Result:
    from flit.moments import truncated_norm

    _, q4, qc = _quads(cfg)
    acc = truncated_norm(cfg.spec(), q4, cfg.n_max, qc)
    ps = acc.partial_sums()
    rows = []
    for n, c in enumerate(acc.contributions):
        rows.append({"n": n, "c_n": float(c.value), "error_estimate": float(c.error_estimate), "status": c.status, "partial_sum": float(ps[n])})
    tot = acc.closed_form_total
    summary = {"closed_form_total": tot.value, "closed_form_error": tot.error_estimate, "closed_form_status": tot.status}
    return Result(rows, summary, statuses=[tot.status] + [c.status for c in acc.contributions])


HANDLERS = {
    "check": cmd_check,
    "moments": cmd_moments,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "stransform": cmd_stransform,
    "converge": cmd_converge,
    "chaos": cmd_chaos,
}


# ---------------------------------------------------------------------------
# argument handling


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flit", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--d", type=int)
    p.add_argument("--h1", type=_floats)
    p.add_argument("--h2", type=_floats)
    p.add_argument("--T", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--N", type=int)
    p.add_argument("--grid-n", dest="grid_n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--out")
    p.add_argument("--require-converged", dest="require_converged", action="store_true", default=None)
    p.add_argument("--dump")
    return p


class ConfigError(Exception):
    pass


def load_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if "config" in data and "records" in data:  # a previous JSON output
            data = data["config"]
    env = os.environ.get("FLIT_WORKERS")
    if env is not None and "workers" not in data:
        data["workers"] = env
    for k, v in vars(args).items():
        if k != "config" and v is not None:
            data[k] = v
    data["command"] = args.command
    try:
        cfg = RunConfig.model_validate(data)
        cfg.spec()
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'config'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(msgs)
    except ValueError as exc:
        raise ConfigError(str(exc))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"flit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = HANDLERS[cfg.command](cfg)
        text = render(cfg, res)
    except Exception as exc:  # noqa: BLE001 - any failure below the config layer
        print(f"flit: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    if cfg.require_converged and any(st != Status.CONVERGED for st in res.statuses):
        print("flit: requested convergence failed", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
