"""Deterministic discrete-event execution of schedule programs.

Each device owns five streams: Compute, TpComm, PpComm, H2D and D2H. An
action is expanded into its execution block (see :mod:`stpsim.braid`) and
laid out on the device's Compute and TpComm streams. Actions are committed
in global order of start time, ties broken by device index, so the result
is a pure function of the inputs.

Memory is counted in activation quanta: a chunk-microbatch allocates its
quantum (scaled by the chunk's layer ratio) when its forward starts and
frees it when its last backward unit ends (the Bfull, or the W after a
Bact). Offload and Reload move a fraction between device and host.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

from . import braid
from .errors import DeadlockDetected, SimulationError
from .program import Action, ScheduleProgram
from .workload import CostModel, ParallelConfig, StagePlan, chunk_costs

ZERO = Fraction(0)
STREAMS = ("Compute", "TpComm", "PpComm", "H2D", "D2H")


@dataclass(frozen=True)
class TimelineEntry:
    device: int
    stream: str
    kind: str
    mb: int
    chunk: tuple
    start: Fraction
    end: Fraction
    action: int = -1  # position in the device's action list
    unit: int = -1  # index in the block's compute_seq (units) or comm_seq (all-reduces)
    op: str = ""  # F / Bact / Bfull / W for compute, send / recv for PP traffic
    anchor: int = -1  # all-reduces: producing unit
    consumer: int = -1  # all-reduces: first unit that needs the result

    def to_dict(self) -> dict:
        d = {
            "device": self.device,
            "stream": self.stream,
            "kind": self.kind,
            "mb": self.mb,
            "chunk": list(self.chunk),
            "start": _q(self.start),
            "end": _q(self.end),
            "action": self.action,
        }
        if self.unit >= 0:
            d["unit"] = self.unit
        if self.op:
            d["op"] = self.op
        if self.anchor >= 0:
            d["anchor"] = self.anchor
        if self.consumer >= 0:
            d["consumer"] = self.consumer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TimelineEntry":
        return cls(d["device"], d["stream"], d["kind"], d["mb"], tuple(d["chunk"]),
                   Fraction(d["start"]), Fraction(d["end"]), d.get("action", -1),
                   d.get("unit", -1), d.get("op", ""), d.get("anchor", -1), d.get("consumer", -1))


def _q(x: Fraction) -> str:
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class Violation:
    kind: str
    device: int
    detail: str

    def __str__(self):
        return f"{self.kind}(dev{self.device}): {self.detail}"


@dataclass
class MemoryLedger:
    # per device / host: list of (time, level) after each change, time-ordered
    device_steps: list
    host_steps: list

    @property
    def peak(self) -> list:
        return [max([ZERO] + [lvl for _, lvl in steps]) for steps in self.device_steps]

    @property
    def final(self) -> list:
        return [steps[-1][1] if steps else ZERO for steps in self.device_steps]

    @property
    def host_final(self) -> list:
        return [steps[-1][1] if steps else ZERO for steps in self.host_steps]

    @property
    def host_peak(self) -> list:
        return [max([ZERO] + [lvl for _, lvl in steps]) for steps in self.host_steps]


def build_ledger(events_per_device, host_events_per_device) -> MemoryLedger:
    """Fold (time, delta) events into step functions; frees sort before allocations at a tie."""
    def fold(events):
        level = ZERO
        steps = []
        for t, delta in sorted(events, key=lambda e: (e[0], e[1])):
            level += delta
            steps.append((t, level))
        return steps
    return MemoryLedger([fold(e) for e in events_per_device], [fold(e) for e in host_events_per_device])


@dataclass
class SimResult:
    entries: tuple
    makespan: Fraction
    pp_bubble: list
    tp_exposed: list
    peak_memory: list
    memory: MemoryLedger
    violations: list
    meta: dict = field(default_factory=dict)

    def device_entries(self, d: int, stream: str | None = None) -> list:
        return [e for e in self.entries if e.device == d and (stream is None or e.stream == stream)]

    def to_dict(self) -> dict:
        return {
            "meta": dict(self.meta, makespan=_q(self.makespan)),
            "entries": [e.to_dict() for e in self.entries],
        }


# ---------------------------------------------------------------- executor

class Executor:
    """Mutable execution state shared by :func:`simulate` and the schedule planners."""

    def __init__(self, plan: StagePlan, cm: CostModel, cfg: ParallelConfig, dataflow: str = "v"):
        self.plan, self.cm, self.cfg = plan, cm, cfg
        self.order = plan.traversal(dataflow)
        self.S = len(self.order)
        self.stage = {slot: s for s, slot in enumerate(self.order)}
        self.costs = {slot: chunk_costs(plan.spec(slot), cm, plan.reference_layers) for slot in self.order}
        p = cfg.p
        self.compute_free = [ZERO] * p
        self.tp_free = [ZERO] * p
        self.pp_free = [ZERO] * p
        self.h2d_free = [ZERO] * p
        self.d2h_free = [ZERO] * p
        self.last_dispatch = [ZERO] * p
        self.first_start: list = [None] * p
        self.entries: list[TimelineEntry] = []
        self.mem_events = [[] for _ in range(p)]
        self.host_events = [[] for _ in range(p)]
        self.inflight = [ZERO] * p  # device memory as of the latest commit (planner bookkeeping)
        self.violations: list[Violation] = []
        self.stall = [ZERO] * p
        # readiness bookkeeping, keyed by (mb, stage)
        self.fwd_end: dict = {}
        self.fwd_arrival: dict = {}
        self.bwd_arrival: dict = {}
        self.bact_end: dict = {}
        self.done: set = set()  # (op, mb, stage)
        self.offloaded: dict = defaultdict(lambda: ZERO)  # (mb, stage, target) -> amount
        self.offload_end: dict = {}
        self.reload_end: dict = {}
        self.reloaded: dict = defaultdict(lambda: ZERO)
        self.counter = [0] * p

    # -- lookup helpers
    def slot(self, d: int, c: int):
        return (d, c)

    def stage_of(self, d: int, c: int) -> int:
        return self.stage[(d, c)]

    def device_of_stage(self, s: int) -> int:
        return self.order[s][0]

    def mem_of(self, d: int, c: int) -> Fraction:
        return self.costs[(d, c)].mem

    # -- dependency resolution
    def op_ready(self, d: int, c: int, op: str, mb: int):
        """Time the inputs of (op, mb) on chunk c of device d are available, or None if unknown."""
        s = self.stage_of(d, c)
        if op == "F":
            if s == 0:
                return ZERO
            return self.fwd_arrival.get((mb, s))
        if op in ("Bact", "Bfull"):
            fe = self.fwd_end.get((mb, s))
            if fe is None:
                return None
            if s == self.S - 1:
                return fe
            arr = self.bwd_arrival.get((mb, s))
            return None if arr is None else max(fe, arr)
        if op == "W":
            return self.bact_end.get((mb, s))
        raise ValueError(op)

    def _needs_reload(self, d, c, op, mb):
        s = self.stage_of(d, c)
        targets = ("act",) if op in ("Bact", "Bfull") else ("act", "wgrad") if op == "W" else ()
        return [(mb, s, t) for t in targets if self.offloaded[(mb, s, t)] > self.reloaded_amount(mb, s, t)]

    def reloaded_amount(self, mb, s, target):
        return self.reloaded[(mb, s, target)]

    def action_ready(self, d: int, a: Action):
        """Earliest start of compute action ``a`` on device d, or None if some input is still unknown."""
        t = self.compute_free[d]
        for op, mb, c in a.ops():
            r = self.op_ready(d, c, op, mb)
            if r is None:
                return None
            t = max(t, r)
        return t

    def reload_gate(self, d: int, a: Action):
        """Latest reload completion among data the action consumes."""
        gate = ZERO
        for op, mb, c in a.ops():
            for key in self._needs_reload(d, c, op, mb):
                end = self.reload_end.get(key)
                if end is not None:
                    gate = max(gate, end)
        return gate

    # -- block construction
    def block_for(self, d: int, a: Action) -> braid.ExecutionBlock:
        slot = (d, a.chunk)
        cc = self.costs[slot]
        ar = cc.ar
        k = a.kind
        if k == "F":
            return braid.forward_only_block(braid.forward_units(cc, a.mb, slot), ar=ar)
        if k == "Bfull":
            return braid.backward_only_block(braid.backward_units(cc, a.mb, slot, False), False, ar=ar)
        if k == "Bact":
            units = braid.backward_units(cc, a.mb, slot, True)
            return braid.backward_only_block(units, True, ar=ar)
        if k == "W":
            return braid.weight_only_block(braid.weight_units(cc, a.mb, slot))
        if k == "FandB":
            return braid.braid_block(braid.forward_units(cc, a.mb, slot),
                                     braid.backward_units(cc, a.bwd_mb, slot, a.separate_w),
                                     a.separate_w, ar=ar)
        if k == "FandW":
            wslot = (d, a.w_chunk)
            return braid.forward_weight_block(braid.forward_units(cc, a.mb, slot),
                                              braid.weight_units(self.costs[wslot], a.bwd_mb, wslot), ar=ar)
        raise ValueError(k)

    # -- commits
    def commit(self, d: int, a: Action, start: Fraction, index: int = -1):
        """Execute compute action ``a`` on device d starting at ``start``."""
        gate = self.reload_gate(d, a)
        if gate > start:
            self.violations.append(Violation(
                "ReloadMiss", d, f"{a.label()} at {start} needs data reloaded only at {gate}"))
            start = gate
        for op, mb, c in a.ops():
            for key in self._needs_reload(d, c, op, mb):
                if key not in self.reload_end:
                    self.violations.append(Violation(
                        "ReloadMiss", d, f"{a.label()} uses offloaded {key} that is never reloaded"))
        if index < 0:
            index = self.counter[d]
        self.counter[d] = index + 1
        slot = (d, a.chunk)
        block = self.block_for(d, a)
        timing = braid.place_block(block, self.cm.contention, start, self.tp_free[d])
        if self.first_start[d] is None:
            self.first_start[d] = start
        self.last_dispatch[d] = start

        op_span: dict = {}
        for i, (u, (us, ue)) in enumerate(zip(block.compute_seq, timing.units)):
            op = "W" if u.pass_ == "Bw" else u.pass_
            self.entries.append(TimelineEntry(d, "Compute", u.label, u.microbatch, u.chunk, us, ue, index, i, op))
            lo, hi = op_span.get((op, u.microbatch), (us, ue))
            op_span[(op, u.microbatch)] = (min(lo, us), max(hi, ue))
        for j, (ar, (as_, ae)) in enumerate(zip(block.comm_seq, timing.ars)):
            mb = block.compute_seq[ar.anchor].microbatch
            cons = ar.consumer if ar.consumer is not None else (-1 if ar.overlap is not None else ar.anchor + 1)
            self.entries.append(TimelineEntry(d, "TpComm", f"AR.{ar.direction}", mb, slot, as_, ae,
                                              index, j, "AR", ar.anchor, cons))
        for (st, en, j) in timing.stalls:
            mb = block.compute_seq[block.comm_seq[j].anchor].microbatch
            self.entries.append(TimelineEntry(d, "Compute", "stall", mb, slot, st, en, index, j, "stall"))
            self.stall[d] += en - st
        if timing.ars:
            self.tp_free[d] = max(self.tp_free[d], max(e for _, e in timing.ars))
        self.compute_free[d] = timing.compute_end
        out_ready = timing.end

        for op, mb, c in a.ops():
            lo, hi = op_span[(op, mb)]
            s = self.stage[(d, c)]
            mem = self.mem_of(d, c)
            self.done.add((op, mb, s))
            if op == "F":
                self._mem(d, lo, mem)
                self.fwd_end[(mb, s)] = out_ready
                if s + 1 < self.S:
                    self.fwd_arrival[(mb, s + 1)] = self._send(d, s + 1, mb, slot, out_ready, index, "F")
            elif op in ("Bact", "Bfull"):
                if op == "Bfull":
                    self._release(d, hi, mb, s, mem)
                else:
                    self.bact_end[(mb, s)] = hi
                if s > 0:
                    self.bwd_arrival[(mb, s - 1)] = self._send(d, s - 1, mb, slot, out_ready, index, "B")
            elif op == "W":
                self._release(d, hi, mb, s, mem)

    def _release(self, d, t, mb, s, mem):
        # whatever is still on the host is dropped with the device copy
        for target in ("act", "wgrad"):
            left = self.offloaded[(mb, s, target)] - self.reloaded[(mb, s, target)]
            if left > 0:
                self._host(d, t, -left)
                mem -= left
        self._mem(d, t, -mem)

    def _mem(self, d, t, delta):
        self.mem_events[d].append((t, delta))
        self.inflight[d] += delta

    def _host(self, d, t, delta):
        self.host_events[d].append((t, delta))

    def _send(self, d, dst_stage, mb, slot, ready, index, what):
        dst = self.device_of_stage(dst_stage)
        if dst == d:
            return ready
        dur = self.cm.pp_comm_time
        if dur == 0:
            return ready
        st = max(ready, self.pp_free[d], self.pp_free[dst])
        en = st + dur
        dst_slot = self.order[dst_stage]
        self.entries.append(TimelineEntry(d, "PpComm", f"send.{what}", mb, slot, st, en, index, op="send"))
        self.entries.append(TimelineEntry(dst, "PpComm", f"recv.{what}", mb, dst_slot, st, en, -1, op="recv"))
        self.pp_free[d] = self.pp_free[dst] = en
        # sends are issued after the computation and are not overlapped with it
        self.compute_free[d] = max(self.compute_free[d], en)
        return en

    def commit_transfer(self, d: int, a: Action, index: int = -1):
        """Issue an Offload/Reload; returns False when its input is not yet known."""
        slot = (d, a.chunk)
        s = self.stage[slot]
        key = (a.mb, s, a.target)
        amount = a.alpha * self.mem_of(d, a.chunk)
        dur = amount / self.cm.pcie_bw
        if a.kind == "Offload":
            ready = self.fwd_end.get((a.mb, s)) if a.target == "act" else self.bact_end.get((a.mb, s))
            if ready is None:
                return False
            st = max(ready, self.d2h_free[d])
            en = st + dur
            self.d2h_free[d] = en
            self.entries.append(TimelineEntry(d, "D2H", "Offload", a.mb, slot, st, en, index, op=a.target))
            self._mem(d, en, -amount)
            self._host(d, en, amount)
            self.offloaded[key] += amount
            self.offload_end[key] = en
        else:
            oe = self.offload_end.get(key)
            if oe is None:
                return False
            st = max(self.last_dispatch[d], self.h2d_free[d], oe)
            en = st + dur
            self.h2d_free[d] = en
            self.entries.append(TimelineEntry(d, "H2D", "Reload", a.mb, slot, st, en, index, op=a.target))
            self._mem(d, en, amount)
            self._host(d, en, -amount)
            self.reloaded[key] += amount
            self.reload_end[key] = en
        if index < 0:
            index = self.counter[d]
        self.counter[d] = index + 1
        return True

    # -- results
    def result(self, meta: dict | None = None) -> SimResult:
        entries = tuple(sorted(self.entries, key=_entry_key))
        makespan = max((e.end for e in entries), default=ZERO)
        ledger = build_ledger(self.mem_events, self.host_events)
        pp, tp = _bubbles(entries, self.cfg.p, makespan)
        return SimResult(entries, makespan, pp, tp, ledger.peak, ledger, list(self.violations), meta or {})


def _entry_key(e: TimelineEntry):
    return (e.device, STREAMS.index(e.stream), e.start, e.end, e.action, e.unit, e.kind, e.mb)


def _bubbles(entries, p, makespan):
    """Per-device PP bubble and exposed TP time from compute-stream entries."""
    busy = [ZERO] * p
    stall = [ZERO] * p
    first = [None] * p
    for e in entries:
        if e.stream != "Compute":
            continue
        if first[e.device] is None or e.start < first[e.device]:
            first[e.device] = e.start
        if e.kind == "stall":
            stall[e.device] += e.end - e.start
        else:
            busy[e.device] += e.end - e.start
    pp = []
    for d in range(p):
        if first[d] is None:
            pp.append(ZERO)
            continue
        pp.append(makespan - first[d] - busy[d] - stall[d])
    return pp, stall


# ---------------------------------------------------------------- fixed programs

def simulate(prog: ScheduleProgram, plan: StagePlan, cm: CostModel, cfg: ParallelConfig | None = None) -> SimResult:
    """Execute a fixed program: every device consumes its action list in order."""
    cfg = cfg or prog.cfg
    if cfg.p != plan.p or len(prog.per_device) != cfg.p:
        raise SimulationError("program, plan and config disagree on the number of devices")
    ex = Executor(plan, cm, cfg, prog.dataflow)
    ptr = [0] * cfg.p
    lists = prog.per_device
    while True:
        best = None
        for d in range(cfg.p):
            acts = lists[d]
            while ptr[d] < len(acts) and not acts[ptr[d]].is_compute:
                if not ex.commit_transfer(d, acts[ptr[d]], ptr[d]):
                    break
                ptr[d] += 1
            if ptr[d] >= len(acts) or not acts[ptr[d]].is_compute:
                continue
            t = ex.action_ready(d, acts[ptr[d]])
            if t is not None and (best is None or t < best[0]):
                best = (t, d)
        if best is None:
            if all(ptr[d] >= len(lists[d]) for d in range(cfg.p)):
                break
            raise _deadlock(ex, lists, ptr)
        t, d = best
        ex.commit(d, lists[d][ptr[d]], t, ptr[d])
        ptr[d] += 1
    meta = {
        "schedule": prog.kind,
        "dataflow": prog.dataflow,
        "warmup": prog.warmup,
        "p": cfg.p,
        "m": cfg.m,
        "cost_model": cm.to_dict(),
    }
    if prog.phases:
        meta["phases"] = [list(ph) for ph in prog.phases]
    return ex.result(meta)


def _deadlock(ex: Executor, lists, ptr) -> DeadlockDetected:
    waits = {}
    blocked = {}
    for d, acts in enumerate(lists):
        if ptr[d] >= len(acts):
            continue
        a = acts[ptr[d]]
        blocked[d] = a.label()
        for op, mb, c in a.ops():
            if ex.op_ready(d, c, op, mb) is None:
                s = ex.stage_of(d, c)
                if op == "F":
                    waits[d] = ex.device_of_stage(s - 1)
                elif op in ("Bact", "Bfull"):
                    waits[d] = d if (mb, s) not in ex.fwd_end else ex.device_of_stage(s + 1)
                else:
                    waits[d] = d
    cycle = []
    for start in sorted(waits):
        seen = []
        cur = start
        while cur in waits and cur not in seen:
            seen.append(cur)
            cur = waits[cur]
        if cur in seen:
            cycle = seen[seen.index(cur):]
            break
    return DeadlockDetected(cycle, blocked)


# ---------------------------------------------------------------- validation

def _action_spans(entries):
    """(device, action) -> (first start, block end) over compute and all-reduce entries."""
    spans = {}
    for e in entries:
        if e.stream not in ("Compute", "TpComm") or e.action < 0:
            continue
        key = (e.device, e.action)
        lo, hi = spans.get(key, (e.start, e.end))
        spans[key] = (min(lo, e.start), max(hi, e.end))
    return spans


def validate_dependencies(result: SimResult, prog: ScheduleProgram, plan: StagePlan) -> list:
    """Re-check a timeline against the execution rules; empty when everything holds."""
    out = list(result.violations)
    entries = result.entries
    order = plan.traversal(prog.dataflow)
    stage = {slot: s for s, slot in enumerate(order)}
    S = len(order)

    # stream exclusivity
    by_stream = defaultdict(list)
    for e in entries:
        if e.end > e.start:
            by_stream[(e.device, e.stream)].append(e)
    for (d, stream), es in sorted(by_stream.items()):
        es.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(es, es[1:]):
            if b.start < a.end:
                out.append(Violation("StreamOverlapViolation", d,
                                     f"{stream}: {a.kind} mb{a.mb} [{a.start},{a.end}) overlaps "
                                     f"{b.kind} mb{b.mb} [{b.start},{b.end})"))

    # per-op spans on the compute stream: (op, mb, stage) -> (start, end, device, action)
    spans = _action_spans(entries)
    ops: dict = {}
    for e in entries:
        if e.stream != "Compute" or e.kind == "stall":
            continue
        key = (e.op, e.mb, stage[tuple(e.chunk)])
        lo, hi, d, a = ops.get(key, (e.start, e.end, e.device, e.action))
        ops[key] = (min(lo, e.start), max(hi, e.end), d, a)

    def produced(op, mb, s):
        """Time the output of (op, mb, s) is available to its consumer."""
        rec = ops.get((op, mb, s))
        if rec is None:
            return None
        return spans[(rec[2], rec[3])][1]

    recv = {}
    for e in entries:
        if e.stream == "PpComm" and e.op == "recv":
            recv[(e.kind.split(".")[1], e.mb, stage[tuple(e.chunk)])] = e.end

    for (op, mb, s), (lo, hi, d, a) in sorted(ops.items(), key=lambda kv: (kv[1][0], kv[0])):
        needs = []
        if op == "F" and s > 0:
            needs.append(("F", mb, s - 1, True))
        if op in ("Bact", "Bfull"):
            needs.append(("F", mb, s, False))
            if s < S - 1:
                up = "Bfull" if ("Bfull", mb, s + 1) in ops else "Bact"
                needs.append((up, mb, s + 1, True))
        if op == "W":
            needs.append(("Bact", mb, s, False))
        for (pop, pmb, ps, cross) in needs:
            t = produced(pop, pmb, ps)
            if t is None:
                out.append(Violation("MissingWork", d, f"{op} mb{mb} stage{s} needs {pop} mb{pmb} stage{ps}"))
                continue
            if cross and order[ps][0] != order[s][0]:
                what = "F" if pop == "F" else "B"
                t = max(t, recv.get((what, mb, s), t))
                if lo < t:
                    out.append(Violation("CrossDeviceViolation", d,
                                         f"{op} mb{mb} stage{s} starts {lo} before its input arrives at {t}"))
            elif cross:
                if lo < t:
                    out.append(Violation("CrossDeviceViolation", d,
                                         f"{op} mb{mb} stage{s} starts {lo} before stage{ps} finishes at {t}"))
            else:
                # same chunk: inputs are needed only by the consuming units, so compare with unit spans
                pend = ops[(pop, pmb, ps)][1]
                if lo < pend:
                    out.append(Violation("IntraChunkViolation", d,
                                         f"{op} mb{mb} stage{s} starts {lo} before {pop} ends at {pend}"))

    # every (mb, stage) gets a forward and a complete backward
    for s in range(S):
        d = order[s][0]
        for mb in range(prog.cfg.m):
            full = ("Bfull", mb, s) in ops
            split = ("Bact", mb, s) in ops and ("W", mb, s) in ops
            if ("F", mb, s) not in ops or full == split:
                out.append(Violation("MissingWork", d, f"mb{mb} stage{s} is not completely executed"))

    # all-reduces run after the unit they reduce and before the unit that consumes them
    units = {}
    for e in entries:
        if e.stream == "Compute" and e.kind != "stall":
            units[(e.device, e.action, e.unit)] = e
    for e in entries:
        if e.stream != "TpComm":
            continue
        anchor = units.get((e.device, e.action, e.anchor))
        # a Bfull unit emits its gradient before its weight-gradient tail, so the
        # all-reduce only has to wait for the unit to have started
        produced_at = None if anchor is None else anchor.start if anchor.op == "Bfull" else anchor.end
        if anchor is not None and (e.start < produced_at or (anchor.op == "Bfull" and e.start <= anchor.start
                                                             and anchor.end > anchor.start)):
            out.append(Violation("ArOverlapViolation", e.device,
                                 f"all-reduce of {anchor.kind} mb{anchor.mb} starts before its producer ends"))
        cons = units.get((e.device, e.action, e.consumer))
        if cons is not None and cons.start < e.end:
            out.append(Violation("ArOverlapViolation", e.device,
                                 f"{cons.kind} mb{cons.mb} starts before the all-reduce it consumes ends"))

    # reloads complete before the backward work that consumes them
    for e in entries:
        if e.stream != "H2D":
            continue
        s = stage[tuple(e.chunk)]
        users = ("W",) if e.op == "wgrad" else ("Bact", "Bfull", "W")
        for op in users:
            rec = ops.get((op, e.mb, s))
            if rec is not None and rec[0] < e.end and not (op == "W" and e.op == "act" and ("Bact", e.mb, s) in ops
                                                          and ops[("Bact", e.mb, s)][0] >= e.end):
                out.append(Violation("ReloadMiss", e.device, f"{op} mb{e.mb} stage{s} starts before reload ends"))

    # memory ledger
    for d, steps in enumerate(result.memory.device_steps):
        if any(lvl < 0 for _, lvl in steps):
            out.append(Violation("MemoryViolation", d, "device memory goes negative"))
        if steps and steps[-1][1] != 0:
            out.append(Violation("MemoryViolation", d, f"device memory ends at {steps[-1][1]}"))
    for d, steps in enumerate(result.memory.host_steps):
        if steps and steps[-1][1] != 0:
            out.append(Violation("MemoryViolation", d, f"host memory ends at {steps[-1][1]}"))
    return out


# ---------------------------------------------------------------- bubble report

@dataclass(frozen=True)
class DeviceBubble:
    device: int
    first_start: Fraction
    busy: Fraction
    pp_bubble: Fraction
    tp_stall: Fraction
    bubble_rate: Fraction  # (pp bubble + tp stall) / makespan
    by_phase: dict  # phase -> pp bubble attributed to it


@dataclass(frozen=True)
class BubbleReport:
    makespan: Fraction
    devices: tuple

    @property
    def pp_total(self) -> Fraction:
        return sum((r.pp_bubble for r in self.devices), ZERO)

    @property
    def tp_total(self) -> Fraction:
        return sum((r.tp_stall for r in self.devices), ZERO)

    def to_dict(self) -> dict:
        return {
            "makespan": _q(self.makespan),
            "devices": [{
                "device": r.device,
                "first_start": _q(r.first_start),
                "busy": _q(r.busy),
                "pp_bubble": _q(r.pp_bubble),
                "tp_stall": _q(r.tp_stall),
                "bubble_rate": _q(r.bubble_rate),
                "by_phase": {k: _q(v) for k, v in r.by_phase.items()},
            } for r in self.devices],
        }

    def render(self) -> str:
        phases = sorted({k for r in self.devices for k in r.by_phase})
        head = ["dev", "pp_bubble", "tp_stall", "rate"] + phases
        rows = [head]
        for r in self.devices:
            rows.append([str(r.device), f"{float(r.pp_bubble):g}", f"{float(r.tp_stall):g}",
                         f"{float(r.bubble_rate):.3f}"] + [f"{float(r.by_phase.get(k, 0)):g}" for k in phases])
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows)


def bubble_report(result: SimResult, cm: CostModel | None = None, cfg: ParallelConfig | None = None) -> BubbleReport:
    """Split each device's idle time into PP bubble and exposed-TP stall, by schedule phase.

    An idle gap on the compute stream is charged to the phase of the action
    that ends it; the gap after a device's last action is charged to that
    action's phase. Without phase information everything lands in "all".
    """
    p = cfg.p if cfg is not None else result.meta.get("p", len(result.pp_bubble))
    phases = result.meta.get("phases")
    rows = []
    for d in range(p):
        comp = sorted((e for e in result.entries if e.device == d and e.stream == "Compute"),
                      key=lambda e: (e.start, e.end))
        if not comp:
            rows.append(DeviceBubble(d, ZERO, ZERO, ZERO, ZERO, ZERO, {}))
            continue

        def phase(e):
            if phases and 0 <= e.action < len(phases[d]):
                return phases[d][e.action]
            return "all"
        by_phase: dict = {}
        t = comp[0].start
        for e in comp:
            if e.start > t:
                by_phase[phase(e)] = by_phase.get(phase(e), ZERO) + (e.start - t)
            t = max(t, e.end)
        if result.makespan > t:
            last = comp[-1]
            by_phase[phase(last)] = by_phase.get(phase(last), ZERO) + (result.makespan - t)
        busy = sum((e.end - e.start for e in comp if e.kind != "stall"), ZERO)
        stall = result.tp_exposed[d]
        pp = result.pp_bubble[d]
        rate = (pp + stall) / result.makespan if result.makespan else ZERO
        rows.append(DeviceBubble(d, comp[0].start, busy, pp, stall, rate, by_phase))
    return BubbleReport(result.makespan, tuple(rows))
