"""Command line entry point: simulate, compare, sweep, gantt, verify-residual.

Exit codes: 0 success, 2 configuration/usage error, 3 schedule error,
4 simulation violation, 5 residual verification failure.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
import warnings
from fractions import Fraction
from pathlib import Path

from . import analysis, residual, schedule
from .errors import ConfigError, ScheduleError, SimulationError, StpSimError
from .sim import SimResult, TimelineEntry, bubble_report, simulate, validate_dependencies
from .workload import (CostModel, ParallelConfig, as_time, build_llm_stage_plan, build_mllm_stage_plan,
                       build_uniform_stage_plan)

EXIT_CONFIG, EXIT_SCHEDULE, EXIT_SIM, EXIT_RESIDUAL = 2, 3, 4, 5

SECTIONS = {
    "parallel": {"p", "m", "v", "t", "layers", "vit_layers", "lm_layers", "vit_unit_cost", "lm_unit_cost"},
    "costs": {"t_f", "t_b", "t_w", "t_ar", "m_a", "unit_split", "pcie_bw", "contention", "pp_comm_time"},
    "schedule": {"kind", "warmup", "alpha_warmup", "alpha_steady"},
}
TIME_KEYS = {"t_f", "t_b", "t_w", "t_ar", "pp_comm_time"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config

def check_config(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object with sections parallel, costs, schedule")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
    for sec, allowed in SECTIONS.items():
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {sec!r} must be an object")
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown config key {sec}.{key!r}")
    if "p" not in raw.get("parallel", {}) or "m" not in raw.get("parallel", {}):
        raise ConfigError("parallel.p and parallel.m are required")
    return raw


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return check_config(raw)


class Experiment:
    """Resolved objects of one configuration."""

    def __init__(self, raw: dict, tick: Fraction | None = None, kind: str | None = None):
        par, costs, sch = raw.get("parallel", {}), dict(raw.get("costs", {})), raw.get("schedule", {})
        for key in TIME_KEYS & costs.keys():
            costs[key] = as_time(costs[key], tick)
        try:
            self.cfg = ParallelConfig(**{k: par[k] for k in ("p", "m", "v", "t") if k in par})
            self.cm = CostModel(**costs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if "vit_layers" in par:
            for k in ("lm_layers", "vit_unit_cost", "lm_unit_cost"):
                if k not in par:
                    raise ConfigError(f"parallel.{k} is required with parallel.vit_layers")
            self.plan = build_mllm_stage_plan(par["vit_layers"], par["lm_layers"], as_time(par["vit_unit_cost"]),
                                              as_time(par["lm_unit_cost"]), self.cfg)
        elif "layers" in par:
            self.plan = build_llm_stage_plan(par["layers"], self.cfg)
        else:
            self.plan = build_uniform_stage_plan(self.cfg)
        self.kind = analysis.normalise_kind(kind or sch.get("kind", "stp"))
        self.warmup = sch.get("warmup", schedule.THROUGHPUT)
        if self.warmup not in (schedule.THROUGHPUT, schedule.MEMORY_EFFICIENT):
            raise ConfigError(f"schedule.warmup must be {schedule.THROUGHPUT} or {schedule.MEMORY_EFFICIENT}")
        self.alpha_warmup = as_time(sch.get("alpha_warmup", 0))
        self.alpha_steady = as_time(sch.get("alpha_steady", 0))
        for name in ("alpha_warmup", "alpha_steady"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"schedule.{name} must lie in [0, 1]")

    def program(self):
        if self.kind == "1f1b-i":
            return schedule.schedule_1f1b_interleaved(self.plan, self.cfg)
        if self.kind == "zbv":
            return schedule.schedule_zbv(self.plan, self.cfg)
        prog = schedule.schedule_stp(self.plan, self.cfg, self.warmup, cm=self.cm)
        if self.alpha_warmup or self.alpha_steady:
            prog = schedule.apply_offloading(prog, self.cm, self.alpha_warmup, self.alpha_steady, self.plan)
        return prog

    def run(self):
        prog = self.program()
        result = simulate(prog, self.plan, self.cm, self.cfg)
        return prog, result, validate_dependencies(result, prog, self.plan)


def metrics(result: SimResult) -> dict:
    q = lambda x: f"{Fraction(x).numerator}/{Fraction(x).denominator}"  # noqa: E731
    return {
        "makespan": q(result.makespan),
        "pp_bubble": [q(x) for x in result.pp_bubble],
        "tp_exposed": [q(x) for x in result.tp_exposed],
        "peak_memory": [q(x) for x in result.peak_memory],
        "violations": [str(v) for v in result.violations],
    }


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gantt

def load_timeline(path) -> tuple:
    data = json.loads(Path(path).read_text())
    return data.get("meta", {}), [TimelineEntry.from_dict(e) for e in data["entries"]]


def _lanes(entries):
    from .sim import STREAMS
    used = sorted({(e.device, e.stream) for e in entries}, key=lambda k: (k[0], STREAMS.index(k[1])))
    return used


def _glyph(mb: int) -> str:
    return "0123456789abcdefghijklmnopqrstuvwxyz"[mb % 36]


def render_text(entries, tick: Fraction = Fraction(1)) -> str:
    """One row per (device, stream); a cell shows the microbatch occupying that tick.

    Chunk-0 work is shown in the microbatch glyph, chunk-1 work in brackets
    of the op row beneath it: ``F``/``B``/``b``/``W`` for forward, full
    backward, activation backward and weight pass; ``.`` for exposed stalls.
    """
    if not entries:
        return ""
    end = max(e.end for e in entries)
    width = int(-(-end // tick))
    out = []
    opchar = {"F": "F", "Bfull": "B", "Bact": "b", "W": "W", "AR": "a", "stall": ".", "send": ">", "recv": "<",
              "act": "o", "wgrad": "o"}
    for d, stream in _lanes(entries):
        top, bot = [" "] * width, [" "] * width
        for e in entries:
            if e.device != d or e.stream != stream or e.end <= e.start:
                continue
            lo, hi = int(e.start // tick), int(-(-e.end // tick))
            for i in range(lo, min(hi, width)):
                top[i] = _glyph(e.mb) if e.kind != "stall" else "."
                ch = opchar.get(e.op, "?")
                bot[i] = ch if e.chunk[1] == 0 else ch.lower() if ch.isalpha() else ch
        label = f"d{d} {stream:<7}"
        out.append(f"{label} |{''.join(top)}|")
        out.append(f"{'':<{len(label)}} |{''.join(bot)}|")
    return "\n".join(out)


_COLORS = {  # (op, chunk) -> fill; dark for chunk 0, light for chunk 1
    ("F", 0): "#1f4e9c", ("F", 1): "#8fb3e8",
    ("Bfull", 0): "#2e7d32", ("Bfull", 1): "#9ccc9e",
    ("Bact", 0): "#b26a00", ("Bact", 1): "#f5c27a",
    ("W", 0): "#6a1b9a", ("W", 1): "#ce9ee0",
}


def render_svg(entries, meta: dict | None = None, scale: float = 6.0, band: int = 18) -> str:
    lanes = _lanes(entries)
    index = {k: i for i, k in enumerate(lanes)}
    end = float(max((e.end for e in entries), default=0))
    left = 90
    w = int(left + end * scale + 10)
    h = int(band * len(lanes) + 30)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="9">']
    title = ""
    if meta:
        title = f"{meta.get('schedule', '')} p={meta.get('p', '')} m={meta.get('m', '')}"
    parts.append(f'<text x="4" y="12">{title}</text>')
    for (d, stream), i in index.items():
        y = 20 + i * band
        parts.append(f'<text x="4" y="{y + band - 6}">d{d} {stream}</text>')
    for e in entries:
        if e.end <= e.start:
            continue
        y = 20 + index[(e.device, e.stream)] * band
        x = left + float(e.start) * scale
        wd = float(e.end - e.start) * scale
        if e.stream == "Compute":
            fill = "#d32f2f" if e.kind == "stall" else _COLORS.get((e.op, e.chunk[1]), "#999999")
        else:
            fill = "#9e9e9e" if e.chunk[1] == 0 else "#e0e0e0"
        parts.append(f'<rect x="{x:.3f}" y="{y}" width="{wd:.3f}" height="{band - 2}" fill="{fill}" '
                     f'stroke="#ffffff" stroke-width="0.3"><title>{e.kind} mb{e.mb} chunk{e.chunk[1]} '
                     f'[{e.start},{e.end})</title></rect>')
        if e.stream == "Compute" and e.kind != "stall" and wd >= 6:
            parts.append(f'<text x="{x + wd / 2:.3f}" y="{y + band - 6}" text-anchor="middle" '
                         f'fill="#ffffff">{e.mb}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- commands

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tick(args):
    return None if args.tick is None else Fraction(1, args.tick)


def cmd_simulate(args) -> int:
    exp = Experiment(load_config(args.config), _tick(args))
    prog, result, violations = exp.run()
    out = _out_dir(args)
    _dump(out / "timeline.json", result.to_dict())
    m = metrics(result)
    m["violations"] = [str(v) for v in violations]
    m["bubble_report"] = bubble_report(result, exp.cm, exp.cfg).to_dict()
    _dump(out / "metrics.json", m)
    _dump(out / "program.json", prog.to_dict())
    if args.format == "svg":
        (out / "gantt.svg").write_text(render_svg(result.entries, result.meta))
    elif args.format == "txt":
        (out / "gantt.txt").write_text(render_text(result.entries) + "\n")
    print(f"{exp.kind}: makespan {float(result.makespan):g}, "
          f"max pp bubble {float(max(result.pp_bubble)):g}, max tp exposed {float(max(result.tp_exposed)):g}, "
          f"max peak {float(max(result.peak_memory)):g}")
    if violations:
        for v in violations[:20]:
            print(v, file=sys.stderr)
        raise CliError(EXIT_SIM, f"{len(violations)} violation(s)")
    return 0


def _compare_rows(raw, tick):
    comps, results = [], {}
    for kind in analysis.KINDS:
        exp = Experiment(raw, tick, kind)
        _, result, violations = exp.run()
        if violations:
            raise CliError(EXIT_SIM, f"{kind}: {violations[0]}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cf = analysis.closed_form(kind, exp.cm, exp.cfg)
        comps.append(analysis.compare(result, cf))
        results[kind] = result
    return comps, results


def cmd_compare(args) -> int:
    raw = load_config(args.config)
    comps, results = _compare_rows(raw, _tick(args))
    table = analysis.render_comparisons(comps)
    spans = "\n".join(f"makespan {k}: {float(r.makespan):g}" for k, r in results.items())
    print(table)
    print(spans)
    if args.out:
        out = _out_dir(args)
        _dump(out / "compare.json", {
            "comparisons": [c.to_dict() for c in comps],
            "makespan": {k: str(r.makespan) for k, r in results.items()},
        })
        (out / "compare.txt").write_text(table + "\n" + spans + "\n")
    return 0


def _parse_grid(specs) -> list:
    axes = []
    for spec in specs or ():
        if "=" not in spec:
            raise ConfigError(f"grid axis {spec!r} must look like section.key=v1,v2")
        key, vals = spec.split("=", 1)
        if "." not in key:
            raise ConfigError(f"grid key {key!r} must be section.key")
        sec, name = key.split(".", 1)
        if sec not in SECTIONS or name not in SECTIONS[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        values = [json.loads(v) if v[:1] in "[{\"" or v.replace(".", "", 1).lstrip("-").isdigit() else v
                  for v in vals.split(",") if v != ""]
        if not values:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append((sec, name, values))
    if not axes:
        raise ConfigError("sweep grid is empty")
    return axes


def sweep(raw: dict, axes, tick=None, kinds=None) -> list:
    rows = []
    kinds = kinds or [raw.get("schedule", {}).get("kind", "stp")]
    for combo in itertools.product(*[vals for _, _, vals in axes]):
        point = copy.deepcopy(raw)
        for (sec, name, _), val in zip(axes, combo):
            point.setdefault(sec, {})[name] = val
        for kind in kinds:
            exp = Experiment(check_config(point), tick, kind)
            _, result, violations = exp.run()
            if violations:
                raise CliError(EXIT_SIM, f"{kind} at {combo}: {violations[0]}")
            rows.append({
                "point": {f"{sec}.{name}": val for (sec, name, _), val in zip(axes, combo)},
                "kind": exp.kind,
                "makespan": str(result.makespan),
                "max_pp_bubble": str(max(result.pp_bubble)),
                "max_tp_exposed": str(max(result.tp_exposed)),
                "max_peak_memory": str(max(result.peak_memory)),
            })
    return rows


def cmd_sweep(args) -> int:
    raw = load_config(args.config)
    kinds = [analysis.normalise_kind(k) for k in args.kinds.split(",")] if args.kinds else None
    rows = sweep(raw, _parse_grid(args.grid), _tick(args), kinds)
    keys = list(rows[0]["point"]) if rows else []
    head = keys + ["kind", "makespan", "max_pp_bubble", "max_tp_exposed", "max_peak_memory"]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join([json.dumps(r["point"][k]) for k in keys] +
                               [r["kind"]] + [f"{float(Fraction(r[k])):g}" for k in head[len(keys) + 1:]]))
    print("\n".join(lines))
    if args.out:
        _dump(_out_dir(args) / "sweep.json", rows)
    return 0


def cmd_gantt(args) -> int:
    try:
        meta, entries = load_timeline(args.timeline)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read timeline {args.timeline}: {exc}") from exc
    if args.format == "svg":
        text = render_svg(entries, meta)
    else:
        text = render_text(entries, Fraction(1, args.tick) if args.tick else Fraction(1)) + "\n"
    if args.out:
        name = "gantt.svg" if args.format == "svg" else "gantt.txt"
        (_out_dir(args) / name).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_verify_residual(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    report = residual.verify_residual(args.trials, args.seed)
    print(report.render())
    if args.out:
        _dump(_out_dir(args) / "residual.json", report.to_dict())
    if not report.passed:
        raise CliError(EXIT_RESIDUAL, "residual verification failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stpsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, out_required=False):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--tick", type=int, default=None,
                       help="snap configured times to multiples of 1/N")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="generate, simulate and validate one schedule")
    common(p, out_required=True)
    p.add_argument("--format", choices=("json", "svg", "txt"), default="json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="all three schedules against their closed forms")
    common(p)
    p.add_argument("--format", choices=("json", "txt"), default="txt")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="metrics over a parameter grid")
    common(p)
    p.add_argument("--grid", action="append", help="section.key=v1,v2,... (repeatable)")
    p.add_argument("--kinds", help="comma-separated schedule kinds (default: the config's)")
    p.add_argument("--format", choices=("json", "txt"), default="txt")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gantt", help="render a timeline JSON")
    common(p, config=False)
    p.add_argument("--timeline", required=True)
    p.add_argument("--format", choices=("svg", "txt"), default="txt")
    p.set_defaults(func=cmd_gantt)

    p = sub.add_parser("verify-residual", help="fused residual forward/backward checks")
    common(p, config=False)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--format", choices=("json", "txt"), default="txt")
    p.set_defaults(func=cmd_verify_residual)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScheduleError as exc:
        print(f"schedule error: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except StpSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
