"""Braided execution blocks.

A chunk's forward and backward are cut into four units each (Pre-Attn, Attn,
Pre-MLP, MLP). Each pass direction carries two tensor-parallel all-reduces,
one reducing the Attn output and one reducing the MLP output. A braid
interleaves the forward units of one microbatch with the backward units of
an older microbatch on the same chunk so each all-reduce runs on the
communication stream while a unit of the other pass occupies the compute
stream.

Timing semantics used by :func:`place_block`:

* An all-reduce tagged ``overlap=None`` is *exposed*: the compute stream
  blocks right after its anchor until the all-reduce finishes.
* A tagged all-reduce runs asynchronously; the compute stream only waits if
  its ``consumer`` unit is reached first. An all-reduce with no consumer in
  the block may spill past the last compute unit; it then delays the block's
  outputs and the communication stream, not the compute stream.
* Units tagged as overlap windows are slowed by the contention factor. When
  a full-backward unit hides its own all-reduce, only its weight-gradient
  sub-span is slowed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ChunkMismatch, OrderViolation
from .workload import UNIT_KINDS, ChunkCosts, CostModel

PRE_ATTN, ATTN, PRE_MLP, MLP = UNIT_KINDS
PASSES = ("F", "Bact", "Bw", "Bfull")

ZERO = Fraction(0)


@dataclass(frozen=True)
class ComputationUnit:
    kind: str
    pass_: str
    microbatch: int
    chunk: tuple
    duration: Fraction
    # Bfull only: trailing weight-gradient part of ``duration``
    w_duration: Fraction = ZERO

    def __post_init__(self):
        if self.kind not in UNIT_KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.pass_ not in PASSES:
            raise ValueError(f"unknown pass {self.pass_!r}")
        if self.pass_ == "Bw" and self.kind in (PRE_ATTN, PRE_MLP):
            raise ValueError("Pre-Attn/Pre-MLP units have no weight-gradient pass")
        if self.duration < 0 or not (0 <= self.w_duration <= self.duration):
            raise ValueError(f"bad durations on {self}")

    @property
    def label(self) -> str:
        return f"{self.pass_}.{self.kind}"


@dataclass(frozen=True)
class ArOp:
    direction: str  # "Fwd" | "Bwd"
    anchor: int  # index in compute_seq of the unit whose output is reduced
    duration: Fraction
    overlap: int | None = None  # index of the unit hiding it; None means exposed
    consumer: int | None = None  # first unit needing the result; None: leaves the block

    @property
    def exposed(self) -> bool:
        return self.overlap is None


@dataclass(frozen=True)
class ExecutionBlock:
    pattern: str
    compute_seq: tuple
    comm_seq: tuple
    fwd_mb: int | None = None
    bwd_mb: int | None = None
    deferred_w: tuple = ()

    @property
    def chunk(self):
        units = self.compute_seq or self.deferred_w
        return units[0].chunk if units else None

    def compute_total(self) -> Fraction:
        return sum((u.duration for u in self.compute_seq), ZERO)


# ---------------------------------------------------------------- unit lists

def forward_units(cc: ChunkCosts, mb: int, chunk) -> list[ComputationUnit]:
    return [ComputationUnit(k, "F", mb, chunk, d) for k, d in zip(UNIT_KINDS, cc.f)]


def backward_units(cc: ChunkCosts, mb: int, chunk, separate_w: bool) -> list[ComputationUnit]:
    """Backward units in execution order (MLP side first).

    Without separation every unit is ``Bfull``; with separation the Bact
    units come first and the two ``Bw`` units follow.
    """
    order = (3, 2, 1, 0)
    if not separate_w:
        return [ComputationUnit(UNIT_KINDS[i], "Bfull", mb, chunk, cc.b[i] + cc.w[i], cc.w[i])
                for i in order]
    acts = [ComputationUnit(UNIT_KINDS[i], "Bact", mb, chunk, cc.b[i]) for i in order]
    ws = [ComputationUnit(UNIT_KINDS[i], "Bw", mb, chunk, cc.w[i]) for i in (3, 1)]
    return acts + ws


def weight_units(cc: ChunkCosts, mb: int, chunk) -> list[ComputationUnit]:
    return [ComputationUnit(UNIT_KINDS[i], "Bw", mb, chunk, cc.w[i]) for i in (3, 1)]


def _by_kind(units, passes):
    out = {}
    for u in units:
        if u.pass_ in passes:
            if u.kind in out:
                raise ValueError(f"duplicate {u.pass_} {u.kind} unit")
            out[u.kind] = u
    return out


def _check_same_chunk(units):
    chunks = {u.chunk for u in units}
    if len(chunks) > 1:
        raise ChunkMismatch(f"units span several chunks: {sorted(chunks)}")
    mbs = {}
    for u in units:
        mbs.setdefault(u.pass_ == "F", set()).add(u.microbatch)
    for side, s in mbs.items():
        if len(s) > 1:
            raise ChunkMismatch(f"{'forward' if side else 'backward'} units span microbatches {sorted(s)}")


# ---------------------------------------------------------------- builders

def braid_block(fwd_chunk_units, bwd_chunk_units, separate_w: bool = False,
                ar: Fraction = ZERO) -> ExecutionBlock:
    """Braid a forward with an older backward on the same chunk.

    ``ar`` is the duration of one all-reduce op. With a full backward the
    forward goes first: forward all-reduces hide under the next backward
    unit, the post-MLP backward all-reduce under the forward MLP, and the
    post-Attn backward all-reduce under the Attn unit's own weight-gradient
    tail. With separation the backward goes first so that every all-reduce
    is followed by a unit of the other pass; the ``Bw`` units are returned
    in ``deferred_w``.
    """
    fwd_chunk_units, bwd_chunk_units = list(fwd_chunk_units), list(bwd_chunk_units)
    _check_same_chunk(fwd_chunk_units + bwd_chunk_units)
    f = _by_kind(fwd_chunk_units, ("F",))
    if len(f) != 4:
        raise ValueError("a braid needs the four forward units")
    fwd_mb = fwd_chunk_units[0].microbatch
    bwd_mb = bwd_chunk_units[0].microbatch
    if fwd_mb <= bwd_mb:
        raise OrderViolation(f"forward microbatch {fwd_mb} must exceed backward microbatch {bwd_mb}")

    if not separate_w:
        b = _by_kind(bwd_chunk_units, ("Bfull",))
        if len(b) != 4:
            raise ValueError("full-backward braid needs four Bfull units")
        seq = (f[PRE_ATTN], f[ATTN], b[MLP], f[PRE_MLP], f[MLP], b[PRE_MLP], b[ATTN], b[PRE_ATTN])
        comm = (
            ArOp("Fwd", 1, ar, overlap=2, consumer=3),
            ArOp("Bwd", 2, ar, overlap=4, consumer=5),
            ArOp("Fwd", 4, ar, overlap=6, consumer=None),
            ArOp("Bwd", 6, ar, overlap=6, consumer=7),
        )
        return ExecutionBlock("FullBackward", seq, comm, fwd_mb, bwd_mb)

    b = _by_kind(bwd_chunk_units, ("Bact",))
    w = tuple(u for u in bwd_chunk_units if u.pass_ == "Bw")
    if len(b) != 4:
        raise ValueError("separated braid needs four Bact units")
    seq = (b[MLP], f[PRE_ATTN], f[ATTN], b[PRE_MLP], b[ATTN], f[PRE_MLP], f[MLP], b[PRE_ATTN])
    comm = (
        ArOp("Bwd", 0, ar, overlap=2, consumer=3),
        ArOp("Fwd", 2, ar, overlap=4, consumer=5),
        ArOp("Bwd", 4, ar, overlap=6, consumer=7),
        ArOp("Fwd", 6, ar, overlap=7, consumer=None),
    )
    return ExecutionBlock("ActBackward", seq, comm, fwd_mb, bwd_mb, w)


def forward_only_block(units, ar: Fraction = ZERO) -> ExecutionBlock:
    _check_same_chunk(units)
    f = _by_kind(units, ("F",))
    seq = (f[PRE_ATTN], f[ATTN], f[PRE_MLP], f[MLP])
    comm = (ArOp("Fwd", 1, ar), ArOp("Fwd", 3, ar))
    return ExecutionBlock("Forward", seq, comm, fwd_mb=seq[0].microbatch)


def backward_only_block(units, separate_w: bool = False, ar: Fraction = ZERO) -> ExecutionBlock:
    """Un-braided backward.

    A full backward hides each all-reduce under the same unit's
    weight-gradient tail; an activation-only backward has nothing to hide
    behind.
    """
    _check_same_chunk(units)
    if not separate_w:
        b = _by_kind(units, ("Bfull",))
        seq = (b[MLP], b[PRE_MLP], b[ATTN], b[PRE_ATTN])
        comm = (ArOp("Bwd", 0, ar, overlap=0, consumer=1),
                ArOp("Bwd", 2, ar, overlap=2, consumer=3))
        return ExecutionBlock("FullBackward", seq, comm, bwd_mb=seq[0].microbatch)
    b = _by_kind(units, ("Bact",))
    w = tuple(u for u in units if u.pass_ == "Bw")
    seq = (b[MLP], b[PRE_MLP], b[ATTN], b[PRE_ATTN])
    comm = (ArOp("Bwd", 0, ar), ArOp("Bwd", 2, ar))
    return ExecutionBlock("ActBackward", seq, comm, bwd_mb=seq[0].microbatch, deferred_w=w)


def weight_only_block(units) -> ExecutionBlock:
    _check_same_chunk(units)
    w = _by_kind(units, ("Bw",))
    seq = (w[MLP], w[ATTN])
    return ExecutionBlock("Weight", seq, (), bwd_mb=seq[0].microbatch)


def forward_weight_block(fwd_units, w_units, ar: Fraction = ZERO) -> ExecutionBlock:
    """Forward braided with a stored weight-gradient pass (F&W).

    The weight-gradient units may come from the device's other chunk: they
    carry no all-reduce and depend on nothing the forward produces.
    """
    _check_same_chunk(fwd_units)
    _check_same_chunk(w_units)
    f = _by_kind(fwd_units, ("F",))
    w = _by_kind(w_units, ("Bw",))
    seq = (f[PRE_ATTN], f[ATTN], w[MLP], f[PRE_MLP], f[MLP], w[ATTN])
    comm = (ArOp("Fwd", 1, ar, overlap=2, consumer=3),
            ArOp("Fwd", 4, ar, overlap=5, consumer=None))
    return ExecutionBlock("ForwardWeight", seq, comm, fwd_mb=seq[0].microbatch, bwd_mb=seq[2].microbatch)


# ---------------------------------------------------------------- timing

@dataclass
class BlockTiming:
    units: list  # (start, end) per compute_seq entry
    ars: list  # (start, end) per comm_seq entry
    compute_end: Fraction
    end: Fraction  # compute_end or the last all-reduce end, whichever is later
    exposed: Fraction
    stalls: list = field(default_factory=list)  # (start, end, ar index)


def _inflation(block: ExecutionBlock):
    """Map unit index -> "all" or "w" for units slowed by overlapped communication."""
    out = {}
    for a in block.comm_seq:
        if a.overlap is None:
            continue
        if a.overlap == a.anchor and block.compute_seq[a.anchor].pass_ == "Bfull":
            out.setdefault(a.overlap, "w")
        else:
            out[a.overlap] = "all"
    return out


def place_block(block: ExecutionBlock, contention: Fraction = Fraction(1),
                start: Fraction = ZERO, comm_free: Fraction = ZERO) -> BlockTiming:
    """Lay a block out on one compute stream and one TP communication stream."""
    infl = _inflation(block)
    by_anchor: dict[int, list[int]] = {}
    by_consumer: dict[int, list[int]] = {}
    for j, a in enumerate(block.comm_seq):
        by_anchor.setdefault(a.anchor, []).append(j)
        if a.overlap is not None and a.consumer is not None:
            by_consumer.setdefault(a.consumer, []).append(j)

    t = start
    exposed = ZERO
    units, stalls = [], []
    ars: list = [None] * len(block.comm_seq)
    for i, u in enumerate(block.compute_seq):
        waits = [ars[j][1] for j in by_consumer.get(i, ())]
        if waits and max(waits) > t:
            stalls.append((t, max(waits), by_consumer[i][0]))
            exposed += max(waits) - t
            t = max(waits)
        w = u.w_duration
        act = u.duration - w
        mode = infl.get(i)
        if mode == "all":
            act, w = act * contention, w * contention
        elif mode == "w":
            w = w * contention
        units.append((t, t + act + w))
        ready = t + act if u.pass_ == "Bfull" else t + act + w
        t = t + act + w
        for j in by_anchor.get(i, ()):
            a = block.comm_seq[j]
            s = max(ready, comm_free)
            ars[j] = (s, s + a.duration)
            comm_free = s + a.duration
            if a.overlap is None and ars[j][1] > t:
                stalls.append((t, ars[j][1], j))
                exposed += ars[j][1] - t
                t = ars[j][1]
    end = max([t] + [e for _, e in ars])
    return BlockTiming(units, ars, t, end, exposed, stalls)


def block_span(b: ExecutionBlock, cm: CostModel) -> tuple[Fraction, Fraction]:
    """(compute-stream duration, exposed communication) of a block started on idle streams."""
    timing = place_block(b, cm.contention)
    return timing.compute_end, timing.exposed
