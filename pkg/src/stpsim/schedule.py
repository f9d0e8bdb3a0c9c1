"""Schedule generators: 1F1B-Interleaved, ZB-V and the synergistic schedule.

1F1B-I and ZB-V are static constructions. The synergistic schedule is
produced by a greedy, time-driven planner that runs on the simulator's own
executor: whenever a device becomes free it picks the highest-priority
ready action under the schedule's policy. The per-device orders extracted
from such a run are consistent with a valid global timeline, so the program
is deadlock-free under any cost model. The planner uses the cost model it is
given (or a nominal one) only to decide the order; the program itself
carries no times.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from .errors import NotStpProgram, OffloadTooSlow, ScheduleError, TooFewMicrobatches
from .program import Action, ScheduleProgram
from .sim import ZERO, Executor, simulate
from .workload import CostModel, ParallelConfig, StagePlan, as_time, build_uniform_stage_plan

THROUGHPUT = "Throughput"
MEMORY_EFFICIENT = "MemoryEfficient"

# order-deciding costs when the caller supplies none; ratios follow the usual
# t_f ≈ t_b ≈ 2·t_w regime with a visible all-reduce
NOMINAL_COSTS = CostModel(t_f=4, t_b=4, t_w=2, t_ar=1)


def _check(plan: StagePlan, cfg: ParallelConfig):
    cfg.require_two_virtual_stages()
    if plan.p != cfg.p or plan.v != cfg.v:
        raise ScheduleError(f"plan is for p={plan.p}, v={plan.v} but config has p={cfg.p}, v={cfg.v}")


# ---------------------------------------------------------------- 1F1B-I

def _interleaved_order(m: int, p: int, v: int, backward: bool) -> list[tuple[int, int]]:
    """(chunk, mb) sequence of Megatron's interleaved schedule.

    Microbatches are taken in groups of p (the last group may be short); each
    group runs through chunk 0, then chunk 1 (reversed for the backward).
    """
    out = []
    for g in range(0, m, p):
        group = range(g, min(g + p, m))
        chunks = reversed(range(v)) if backward else range(v)
        for c in chunks:
            out.extend((c, mb) for mb in group)
    return out


def _interleaved_stalls(p: int, v: int, orders) -> list[int]:
    """Run per-device (op, chunk, mb) orders on dependencies alone.

    Returns each device's position when nothing can progress (equal to the
    order length for finished devices). Stage s = chunk * p + device.
    """
    done, ptr, last = set(), [0] * p, v * p - 1
    progress = True
    while progress:
        progress = False
        for d in range(p):
            while ptr[d] < len(orders[d]):
                op, c, mb = orders[d][ptr[d]]
                s = c * p + d
                need = ("F", s - 1, mb) if op == "F" else ("F", s, mb) if s == last else ("B", s + 1, mb)
                if op == "F" and s == 0:
                    need = None
                if need is not None and need not in done:
                    break
                done.add(("F" if op == "F" else "B", s, mb))
                ptr[d] += 1
                progress = True
    return ptr


def _interleaved_device(fwd, bwd, warm: int) -> list[tuple[str, int, int, str]]:
    total = len(fwd)
    out = [("F", c, mb, "warmup") for c, mb in fwd[:warm]]
    for i in range(total - warm):
        out.append(("F", *fwd[warm + i], "steady"))
        out.append(("Bfull", *bwd[i], "steady"))
    out.extend(("Bfull", c, mb, "cooldown") for c, mb in bwd[total - warm:])
    return out


def schedule_1f1b_interleaved(plan: StagePlan, cfg: ParallelConfig) -> ScheduleProgram:
    """Megatron's interleaved 1F1B with a 2(p-d-1) + (v-1)p forward warm-up.

    m need not be a multiple of p, but for some such m the short last group
    makes the 1F1B pairing wait on itself; those configurations are rejected.
    """
    _check(plan, cfg)
    p, m, v = cfg.p, cfg.m, cfg.v
    fwd = _interleaved_order(m, p, v, backward=False)
    bwd = _interleaved_order(m, p, v, backward=True)
    total = m * v
    depth = tuple(total if m == p else min((p - d - 1) * 2 + (v - 1) * p, total) for d in range(p))
    devs = [_interleaved_device(fwd, bwd, w) for w in depth]
    ptr = _interleaved_stalls(p, v, [[(op[0], c, mb) for op, c, mb, _ in acts] for acts in devs])
    if any(i < len(acts) for i, acts in zip(ptr, devs)):
        raise ScheduleError(f"interleaved 1F1B deadlocks for p={p}, m={m}; use m a multiple of p")
    per_device = tuple(tuple(Action(op, c, mb) for op, c, mb, _ in acts) for acts in devs)
    phases = tuple(tuple(ph for *_, ph in acts) for acts in devs)
    return ScheduleProgram("1f1b-i", cfg, per_device, "parallel", None, depth, phases)


# ---------------------------------------------------------------- planner

@dataclass
class _DeviceState:
    next_f: list
    next_b: list
    pending_w: list  # (chunk, mb), oldest first
    acts: list
    phases: list
    braids: int = 0
    b_on_chunk0: int = 0


class _Planner:
    def __init__(self, plan, cfg, cm, policy):
        self.cfg = cfg
        self.ex = Executor(plan, cm, cfg, "v")
        self.policy = policy
        self.dev = [_DeviceState([0] * cfg.v, [0] * cfg.v, [], [], []) for _ in range(cfg.p)]

    def remaining_forwards(self, d) -> int:
        return sum(self.cfg.m - n for n in self.dev[d].next_f)

    def ready(self, d, a: Action):
        return self.ex.action_ready(d, a)

    def run(self):
        ex, cfg = self.ex, self.cfg
        while True:
            best = None
            for d in range(cfg.p):
                opts = self.policy.options(self, d)
                timed = []
                for prio, a in opts:
                    r = self.ready(d, a)
                    if r is not None:
                        timed.append((r, prio, a))
                if not timed:
                    continue
                t = max(ex.compute_free[d], min(r for r, _, _ in timed))
                choice = min((prio, a.label()) for r, prio, a in timed if r <= t)
                a = next(a for r, prio, a in timed if r <= t and (prio, a.label()) == choice)
                if best is None or (t, d) < best[:2]:
                    best = (t, d, a)
            if best is None and hasattr(self.policy, "fallback"):
                best = self._fallback()
            if best is None:
                if any(self.remaining(d) for d in range(cfg.p)):
                    raise ScheduleError("planner stalled: " + "; ".join(
                        f"dev{d}: f={s.next_f} b={s.next_b} w={len(s.pending_w)}"
                        for d, s in enumerate(self.dev)))
                break
            t, d, a = best
            self._apply(d, a, t)
        return self.dev

    def _fallback(self):
        """Earliest ready un-braided action that breaks a braid-coupling stall."""
        best = None
        for d in range(self.cfg.p):
            for prio, a in self.policy.fallback(self, d):
                r = self.ready(d, a)
                if r is not None:
                    t = max(self.ex.compute_free[d], r)
                    if best is None or (prio, t, d) < best[0]:
                        best = ((prio, t, d), t, d, a)
        return None if best is None else best[1:]

    def remaining(self, d) -> bool:
        s = self.dev[d]
        m = self.cfg.m
        return any(n < m for n in s.next_f) or any(n < m for n in s.next_b) or bool(s.pending_w)

    def _apply(self, d, a: Action, t):
        s = self.dev[d]
        phase = self.policy.phase(self, d, a)
        self.ex.commit(d, a, t, len(s.acts))
        s.acts.append(a)
        s.phases.append(phase)
        for op, mb, c in a.ops():
            if op == "F":
                s.next_f[c] += 1
            elif op in ("Bact", "Bfull"):
                s.next_b[c] += 1
                if c == 0:
                    s.b_on_chunk0 += 1
                if op == "Bact":
                    s.pending_w.append((c, mb))
            elif op == "W":
                s.pending_w.remove((c, mb))
        if a.braided:
            s.braids += 1


# ---------------------------------------------------------------- ZB-V

def schedule_zbv(plan: StagePlan, cfg: ParallelConfig) -> ScheduleProgram:
    """Zero-bubble V schedule with a 2p activation budget.

    Rank r first runs 2(p-r)-1 chunk-0 forwards, then interleaves chunk-1 and
    chunk-0 forwards until its first chunk-1 backward can start, then settles
    into F0 B0 W0 F1 B1 W1 rounds. The cool-down drains the backwards with
    the deferred weight passes filling the gaps. The construction is laid out
    for max(m, 2p-1) microbatches and entries beyond m are dropped.
    """
    _check(plan, cfg)
    p, m = cfg.p, cfg.m
    n = max(2 * p - 1, m)
    per_device, phases = [], []
    for r in range(p):
        acts, ph = [], []
        f, b = [0, 0], [0, 0]

        def add(kind, c, mb, phase):
            acts.append(Action(kind, c, mb))
            ph.append(phase)

        def fwd(c, phase):
            add("F", c, f[c], phase)
            f[c] += 1

        def bwd(c, phase, with_w=True):
            add("Bact", c, b[c], phase)
            if with_w:
                add("W", c, b[c], phase)
            b[c] += 1

        for _ in range(2 * (p - r) - 1):
            fwd(0, "warmup")
        for _ in range(r):
            fwd(1, "warmup")
            fwd(0, "warmup")
        for _ in range(p - r):
            fwd(1, "warmup")
            bwd(1, "warmup")
        while f[1] < f[0] or f[0] < n:
            if f[0] < n:
                fwd(0, "steady")
            bwd(0, "steady")
            fwd(1, "steady")
            bwd(1, "steady")
        w = list(b)
        for _ in range(r):
            bwd(0, "cooldown", with_w=False)
            bwd(1, "cooldown", with_w=False)
        for _ in range(p - r):
            bwd(0, "cooldown", with_w=False)
            add("W", 0, w[0], "cooldown")
            w[0] += 1
        for c in (1, 0):
            while w[c] < b[c]:
                add("W", c, w[c], "cooldown")
                w[c] += 1
        keep = [i for i, a in enumerate(acts) if a.mb < m]
        per_device.append(tuple(acts[i] for i in keep))
        phases.append(tuple(ph[i] for i in keep))
    depth = tuple(2 * (p - r) - 1 + r for r in range(p))
    return ScheduleProgram("zbv", cfg, tuple(per_device), "v", None, depth, tuple(phases))


# ---------------------------------------------------------------- synergistic

class _StpPolicy:
    """Action choice for the synergistic schedule.

    Each virtual stage s (position in the V) runs ``2p - s`` bare forwards
    before braiding, which is the lead the steady state needs: in steady
    state a microbatch's backward reaches stage s 2p - s periods after its
    forward. That makes 2p + 1 bare forwards per device. Beyond the lead,
    a forward may be braided with a stored weight pass (F&W) while the
    device holds fewer than ``cap`` activations. Braids prefer chunk 1;
    bare weight passes fill only otherwise idle time.

    Weight separation: on in the warm-up (except at the loss stage, whose
    gradient has nowhere upstream to wait for), off in the steady phase,
    and on again once the device has fewer forwards left than backwards.
    The memory-efficient variant runs one more bare forward on chunk 1,
    keeps separation on throughout and adds no F&W extras.
    """

    def __init__(self, cfg: ParallelConfig, order, memory_efficient: bool):
        p, m = cfg.p, cfg.m
        self.cfg = cfg
        self.me = memory_efficient
        self.stage = {slot: s for s, slot in enumerate(order)}
        self.lead = {}
        for slot, s in self.stage.items():
            extra = 1 if memory_efficient and slot[1] == 1 else 0
            self.lead[slot] = min(m, 2 * p - s + extra)
        self.cap = sum(self.lead[(0, c)] for c in range(cfg.v)) if memory_efficient else 3 * p
        self.loss_slot = order[-1]

    def live(self, pl, d) -> int:
        s = pl.dev[d]
        return sum(s.next_f) - sum(s.next_b) + len(s.pending_w)

    def phase_name(self, pl, d) -> str:
        s = pl.dev[d]
        if s.b_on_chunk0 == 0:
            return "warmup"
        if all(n < self.cfg.m for n in s.next_f):
            return "steady"
        return "degraded" if pl.remaining_forwards(d) else "cooldown"

    def phase(self, pl, d, a) -> str:
        return self.phase_name(pl, d)

    def separate(self, pl, d, c) -> bool:
        if self.me:
            return True
        ph = self.phase_name(pl, d)
        if ph == "warmup":
            return True
        s = pl.dev[d]
        left_b = sum(self.cfg.m - n for n in s.next_b)
        return pl.remaining_forwards(d) < left_b and ph != "steady"

    def options(self, pl, d):
        s = pl.dev[d]
        m = self.cfg.m
        live = self.live(pl, d)
        out = []
        for c in reversed(range(self.cfg.v)):
            nf, nb = s.next_f[c], s.next_b[c]
            if nf < self.lead[(d, c)]:
                out.append(((0, -c), Action("F", c, nf)))
                continue
            if nf < m and nb < nf:
                out.append(((0, -c), Action("FandB", c, nf, nb, self.separate(pl, d, c))))
            if nf < m and live < self.cap and s.pending_w and not self.me:
                wc, wm = s.pending_w[0]
                out.append(((1, -c), Action("FandW", c, nf, wm, w_chunk=wc)))
            if nf >= m and nb < m:
                out.append(((0, -c), Action("Bfull", c, nb)))
        if s.pending_w:
            c, mb = s.pending_w[0]
            # the memory-efficient variant drains stored weight passes
            # before taking on more activations than its budget
            urgent = self.me and live >= self.cap
            out.append(((-1 if urgent else 4, 0), Action("W", c, mb)))
        return out

    def fallback(self, pl, d):
        """Split braids when every device waits on one: a braid needs its
        forward input from upstream and its gradient from downstream, and
        both neighbours can end up waiting on each other's braid. A bare
        backward (no exposed all-reduce when full) is preferred over a bare
        forward."""
        s = pl.dev[d]
        out = []
        for c in reversed(range(self.cfg.v)):
            nf, nb = s.next_f[c], s.next_b[c]
            if nb < nf:
                sep = self.separate(pl, d, c)
                out.append((0, Action("Bact" if sep else "Bfull", c, nb)))
            if nf < self.cfg.m:
                out.append((1, Action("F", c, nf)))
        return out


def warmup_depth(acts) -> int:
    """Bare forwards a device runs before its first F&B."""
    n = 0
    for a in acts:
        if a.kind == "FandB":
            return n
        n += a.kind == "F"
    return n


def schedule_stp(plan: StagePlan, cfg: ParallelConfig, warmup: str = THROUGHPUT,
                 cm: CostModel | None = None) -> ScheduleProgram:
    """Synergistic schedule: V-shape dataflow built from braided F&B blocks.

    ``warmup`` selects the throughput-oriented warm-up (default) or the
    memory-efficient one. ``cm`` only steers the planner's ordering
    decisions.
    """
    _check(plan, cfg)
    if warmup not in (THROUGHPUT, MEMORY_EFFICIENT):
        raise ScheduleError(f"unknown warm-up variant {warmup!r}")
    # leads are clamped to m; a braid needs two microbatches
    if cfg.m < 2:
        raise TooFewMicrobatches(cfg.m, 2)
    policy = _StpPolicy(cfg, plan.traversal("v"), warmup == MEMORY_EFFICIENT)
    dev = _Planner(plan, cfg, cm or NOMINAL_COSTS, policy).run()
    per_device = tuple(tuple(s.acts) for s in dev)
    phases = tuple(tuple(s.phases) for s in dev)
    depth = tuple(warmup_depth(acts) for acts in per_device)
    return ScheduleProgram("stp", cfg, per_device, "v", warmup, depth, phases)


# ---------------------------------------------------------------- offloading

@dataclass
class _Transfer:
    mb: int
    chunk: int
    target: str
    alpha: Fraction
    after: int  # index of the producing action
    ready: Fraction
    consumer: int  # index of the consuming action
    deadline: Fraction


def apply_offloading(prog: ScheduleProgram, cm: CostModel, alpha_warmup, alpha_steady,
                     plan: StagePlan | None = None) -> ScheduleProgram:
    """Insert Offload/Reload actions into a synergistic-schedule program.

    Chunk-0 activations are offloaded after their forward (fraction
    ``alpha_warmup`` during the warm-up, ``alpha_steady`` afterwards); chunk-1
    activations are left on the device. Activations kept alive for a
    deferred weight pass are offloaded with ``alpha_steady`` after the
    activation backward. Reloads are placed statically: the program is
    simulated once without transfers and each Reload is attached to the
    latest action whose start still lets the copy finish before its consumer
    begins. Transfers that cannot be made in time are left out.
    """
    if prog.kind != "stp":
        raise NotStpProgram(f"offloading applies to synergistic programs, got {prog.kind!r}")
    a_w, a_s = as_time(alpha_warmup), as_time(alpha_steady)
    for name, a in (("alpha_warmup", a_w), ("alpha_steady", a_s)):
        if not 0 <= a <= 1:
            raise ScheduleError(f"{name} must lie in [0, 1], got {a}")
        if cm.offload_time(a) >= cm.t_f:
            raise OffloadTooSlow(cm.offload_time(a), cm.t_f)
    if a_w == 0 and a_s == 0:
        return prog
    cfg = prog.cfg
    plan = plan or build_uniform_stage_plan(cfg)
    base = simulate(prog, plan, cm, cfg)
    ex = Executor(plan, cm, cfg, prog.dataflow)

    new_lists = []
    for d, acts in enumerate(prog.per_device):
        start, end = {}, {}
        for e in base.entries:
            if e.device == d and e.stream in ("Compute", "TpComm") and e.action >= 0:
                start[e.action] = min(start.get(e.action, e.start), e.start)
                end[e.action] = max(end.get(e.action, e.end), e.end)
        where = {}
        for i, a in enumerate(acts):
            for op, mb, c in a.ops():
                where[(op, mb, c)] = i
        items = []
        for i, a in enumerate(acts):
            phase = prog.phase_of(d, i)
            for op, mb, c in a.ops():
                if op == "F" and c == 0:
                    alpha = a_w if phase == "warmup" else a_s
                    j = where.get(("Bfull", mb, c), where.get(("Bact", mb, c)))
                    if alpha > 0 and j is not None:
                        items.append(_Transfer(mb, c, "act", alpha, i, end[i], j, start[j]))
                elif op == "Bact" and phase != "warmup" and a_s > 0:
                    j = where[("W", mb, c)]
                    items.append(_Transfer(mb, c, "wgrad", a_s, i, end[i], j, start[j]))
        # D2H copies run in readiness order, H2D copies in consumer order
        after: dict = {}
        d2h = h2d = ZERO
        placed = []
        for it in sorted(items, key=lambda it: (it.ready, it.after)):
            dur = it.alpha * ex.mem_of(d, it.chunk) / cm.pcie_bw
            st = max(it.ready, d2h)
            it_end = st + dur
            if it_end + dur > it.deadline:
                continue
            d2h = it_end
            placed.append((it, it_end, dur))
        for it, off_end, dur in sorted(placed, key=lambda x: (x[0].deadline, x[0].consumer)):
            for j in range(it.consumer - 1, it.after - 1, -1):
                st = max(start[j], h2d, off_end)
                if st + dur <= it.deadline:
                    break
            else:
                continue
            h2d = st + dur
            after.setdefault(it.after, []).append(Action("Offload", it.chunk, it.mb, alpha=it.alpha, target=it.target))
            after.setdefault(j, []).append(Action("Reload", it.chunk, it.mb, alpha=it.alpha, target=it.target))
        out, ph = [], []
        for i, a in enumerate(acts):
            out.append(a)
            ph.append(prog.phase_of(d, i))
            # offloads of action i come before reloads scheduled behind it
            extra = sorted(after.get(i, []), key=lambda x: x.kind != "Offload")
            out.extend(extra)
            ph.extend(ph[-1] for _ in extra)
        new_lists.append(tuple(out))
        # keep phases parallel to the lists
        new_lists[-1] = (tuple(out), tuple(ph))
    return replace(prog, per_device=tuple(x for x, _ in new_lists), phases=tuple(y for _, y in new_lists),
                   offload={"alpha_warmup": a_w, "alpha_steady": a_s})
