"""Closed-form bubble and memory expressions and their comparison with simulation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigMismatch, ConfigError
from .sim import SimResult
from .workload import CostModel, ParallelConfig, as_time

KINDS = ("1f1b-i", "zbv", "stp")
_ALIASES = {"1f1b": "1f1b-i", "1f1b-interleaved": "1f1b-i", "zb-v": "zbv", "ours": "stp"}


def normalise_kind(kind: str) -> str:
    k = kind.lower()
    k = _ALIASES.get(k, k)
    if k not in KINDS:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    return k


@dataclass(frozen=True)
class ClosedForm:
    kind: str
    pp_bubble: Fraction
    tp_bubble: Fraction
    peak_memory: Fraction  # on the bottleneck device
    cfg: ParallelConfig
    cost_model: dict
    # names of terms that came out negative for this cost model
    flags: tuple = ()


def closed_form(kind: str, cm: CostModel, cfg: ParallelConfig) -> ClosedForm:
    cfg.require_two_virtual_stages()
    kind = normalise_kind(kind)
    p, m = cfg.p, cfg.m
    if m < 2 * p:
        warnings.warn(f"m={m} < 2p={2 * p}: closed forms assume many more microbatches than stages",
                      stacklevel=2)
    f, b, w, ar, ma = cm.t_f, cm.t_b, cm.t_w, cm.t_ar, cm.m_a
    if kind == "1f1b-i":
        per_stage = f + ar + b + w
        tp, mem = 2 * m * ar, (3 * p - 2) * ma
    elif kind == "zbv":
        per_stage = f + 2 * ar + b - 2 * w
        tp, mem = 4 * m * ar, 2 * p * ma
    else:
        per_stage = f + ar + b - w
        tp, mem = (2 * p + 1) * ar, 3 * p * ma
    flags = ("pp_bubble",) if per_stage < 0 else ()
    return ClosedForm(kind, (p - 1) * per_stage, tp, mem, cfg, cm.to_dict(), flags)


@dataclass(frozen=True)
class ToleranceSpec:
    pp_rel: Fraction = Fraction(15, 100)
    mem_abs: Fraction = Fraction(1)  # in activation quanta


@dataclass(frozen=True)
class MetricRow:
    metric: str
    simulated: Fraction
    closed: Fraction
    passed: bool
    rule: str
    device: int  # device the simulated value comes from

    @property
    def abs_dev(self) -> Fraction:
        return self.simulated - self.closed

    @property
    def rel_dev(self) -> Fraction | None:
        return None if self.closed == 0 else (self.simulated - self.closed) / self.closed


@dataclass(frozen=True)
class Comparison:
    kind: str
    rows: tuple
    notes: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def row(self, metric: str) -> MetricRow:
        return next(r for r in self.rows if r.metric == metric)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "notes": list(self.notes),
            "rows": [{
                "metric": r.metric,
                "simulated": str(r.simulated),
                "closed_form": str(r.closed),
                "abs_dev": str(r.abs_dev),
                "rel_dev": None if r.rel_dev is None else f"{float(r.rel_dev):.6f}",
                "rule": r.rule,
                "device": r.device,
                "result": "PASS" if r.passed else "FAIL",
            } for r in self.rows],
        }


def _argmax(values) -> int:
    return max(range(len(values)), key=lambda i: (values[i], -i))


def compare(sim: SimResult, cf: ClosedForm, tol: ToleranceSpec = ToleranceSpec()) -> Comparison:
    """Check a simulation against the closed forms of its schedule.

    PP bubble and peak memory are taken from the bottleneck device. TP
    exposure is per device: exact for the baselines, an upper bound for the
    synergistic schedule.
    """
    meta = sim.meta
    if meta.get("p") != cf.cfg.p or meta.get("m") != cf.cfg.m:
        raise ConfigMismatch(f"simulation is for p={meta.get('p')}, m={meta.get('m')}; "
                             f"closed form for p={cf.cfg.p}, m={cf.cfg.m}")
    if "cost_model" in meta and meta["cost_model"] != cf.cost_model:
        raise ConfigMismatch("simulation and closed form use different cost models")
    if "schedule" in meta and normalise_kind(meta["schedule"]) != cf.kind:
        raise ConfigMismatch(f"simulation ran {meta['schedule']!r}, closed form is for {cf.kind!r}")

    rows = []
    d = _argmax(sim.pp_bubble)
    pp = sim.pp_bubble[d]
    if cf.pp_bubble == 0:
        ok = pp == 0
    else:
        ok = abs(pp - cf.pp_bubble) <= tol.pp_rel * cf.pp_bubble
    rows.append(MetricRow("pp_bubble", pp, cf.pp_bubble, ok, f"within {float(tol.pp_rel):.0%}", d))

    d = _argmax(sim.tp_exposed)
    tp = sim.tp_exposed[d]
    if cf.kind == "stp":
        rows.append(MetricRow("tp_bubble", tp, cf.tp_bubble, tp <= cf.tp_bubble, "at most", d))
    else:
        exact = all(x == cf.tp_bubble for x in sim.tp_exposed)
        if not exact:
            d = next(i for i, x in enumerate(sim.tp_exposed) if x != cf.tp_bubble)
            tp = sim.tp_exposed[d]
        rows.append(MetricRow("tp_bubble", tp, cf.tp_bubble, exact, "exact", d))

    d = _argmax(sim.peak_memory)
    peak = sim.peak_memory[d]  # already in memory units
    rows.append(MetricRow("peak_memory", peak, cf.peak_memory,
                          abs(peak - cf.peak_memory) <= tol.mem_abs * as_time(cf.cost_model["m_a"]),
                          f"within {tol.mem_abs} quantum", d))
    return Comparison(cf.kind, tuple(rows), cf.flags)


def render_comparisons(comps) -> str:
    head = ["schedule", "metric", "simulated", "closed form", "dev", "rel", "rule", "result"]
    lines = [head]
    for c in comps:
        for r in c.rows:
            rel = "-" if r.rel_dev is None else f"{float(r.rel_dev):+.1%}"
            lines.append([c.kind, r.metric, f"{float(r.simulated):g}", f"{float(r.closed):g}",
                          f"{float(r.abs_dev):+g}", rel, r.rule, "PASS" if r.passed else "FAIL"])
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
