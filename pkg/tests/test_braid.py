from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from stpsim.braid import (backward_only_block, backward_units, block_span, braid_block, forward_only_block,
                          forward_units, forward_weight_block, place_block, weight_units)
from stpsim.errors import ChunkMismatch, OrderViolation
from stpsim.workload import CostModel, LmLayers, chunk_costs

SLOT = (0, 0)


def costs(**kw):
    kw.setdefault("t_f", 4)
    kw.setdefault("t_b", 4)
    kw.setdefault("t_w", 2)
    kw.setdefault("t_ar", 1)
    cm = CostModel(**kw)
    return cm, chunk_costs(LmLayers(1), cm)


def fullbraid(cc, f=2, b=1, sep=False):
    return braid_block(forward_units(cc, f, SLOT), backward_units(cc, b, SLOT, sep), sep, ar=cc.ar)


def test_full_braid_hides_all_reduces():
    cm, cc = costs()
    dur, exposed = block_span(fullbraid(cc), cm)
    assert exposed == 0
    assert dur == 10  # t_f + t_b + t_w


def test_separated_braid_hides_all_reduces():
    cm, cc = costs()
    block = fullbraid(cc, sep=True)
    dur, exposed = block_span(block, cm)
    assert exposed == 0 and dur == 8
    assert sum(u.duration for u in block.deferred_w) == 2


def test_braid_order_rule():
    _, cc = costs()
    with pytest.raises(OrderViolation):
        fullbraid(cc, f=1, b=1)
    with pytest.raises(OrderViolation):
        fullbraid(cc, f=1, b=2)


def test_braid_chunk_mismatch():
    _, cc = costs()
    with pytest.raises(ChunkMismatch):
        braid_block(forward_units(cc, 2, (0, 0)), backward_units(cc, 1, (0, 1), False), ar=cc.ar)


def test_exposed_remainder_when_all_reduce_longer_than_window():
    # all-reduce of 3 hidden behind a unit of 2 leaves 1 exposed
    cm = CostModel(t_f=10, t_b=10, t_w=5, t_ar=6, unit_split=(0.1, 0.4, 0.3, 0.2))
    cc = chunk_costs(LmLayers(1), cm)
    # the Attn forward all-reduce (3) hides under the backward MLP unit (Bfull MLP = 2 + 2.?)
    block = braid_block(forward_units(cc, 2, SLOT), backward_units(cc, 1, SLOT, True), True, ar=cc.ar)
    # separated order: Bact.Mlp(2) F.PreAttn(1) F.Attn(4) Bact.PreMlp(3) Bact.Attn(4) F.PreMlp(3) F.Mlp(2) Bact.PreAttn(1)
    t = place_block(block)
    compute = sum(u.duration for u in block.compute_seq)
    assert t.compute_end == compute + t.exposed
    # Bwd AR after Bact.Mlp (3) overlaps F.Attn; its consumer Bact.PreMlp starts at 2+1+4=7 >= 5: hidden.
    # Fwd AR after F.Mlp (3) overlaps Bact.PreAttn (1): spills past compute without stalling it.
    assert t.exposed == 0
    assert t.end > t.compute_end


def test_exposed_stall_on_short_window():
    cm = CostModel(t_f=10, t_b=10, t_w=4, t_ar=6)
    cc = chunk_costs(LmLayers(1), cm)  # units (1,4,1,4), ar 3
    block = fullbraid(cc)
    # full order: F.PA(1) F.A(4) B.M(4+2) F.PM(1) F.M(4) B.PM(1) B.A(4+2) B.PA(1)
    # Bwd AR of B.M is ready after its Bact part (4) and hides under F.M. The Bwd AR of
    # B.A can only overlap that unit's own weight tail (2 < 3), so one unit of it stalls.
    t = place_block(block)
    assert t.exposed == 1
    assert t.stalls == [(23, 24, 3)]


def test_forward_only_exposes_t_ar():
    cm, cc = costs()
    dur, exposed = block_span(forward_only_block(forward_units(cc, 0, SLOT), ar=cc.ar), cm)
    assert exposed == 1
    assert dur == 5  # t_f + t_ar


def test_backward_only():
    cm, cc = costs()
    full = backward_only_block(backward_units(cc, 0, SLOT, False), False, ar=cc.ar)
    assert block_span(full, cm) == (6, 0)
    act = backward_only_block(backward_units(cc, 0, SLOT, True), True, ar=cc.ar)
    assert block_span(act, cm) == (5, 1)


def test_forward_weight_block_hides():
    cm, cc = costs()
    blk = forward_weight_block(forward_units(cc, 3, SLOT), weight_units(cc, 1, (0, 1)), ar=cc.ar)
    assert block_span(blk, cm) == (6, 0)


def test_contention_inflates_overlapped_unit():
    # a single overlapped unit of 8.605 with contention 9.251/8.605 takes 9.251
    c = Fraction("9.251") / Fraction("8.605")
    cm = CostModel(t_f=Fraction("8.605"), t_b=Fraction("8.605"), t_w=Fraction("4.3025"), t_ar=1,
                   unit_split=(0, 1, 0, 0), contention=c)
    cc = chunk_costs(LmLayers(1), cm)
    blk = forward_weight_block(forward_units(cc, 1, SLOT), weight_units(cc, 0, SLOT), ar=cc.ar)
    t = place_block(blk, cm.contention)
    # F.Attn (8.605) is not overlapped; the W.Attn tail (all of t_w) hides the second AR
    units = dict(zip((u.label + str(u.microbatch) for u in blk.compute_seq), t.units))
    w_attn = units["Bw.Attn0"]
    assert w_attn[1] - w_attn[0] == Fraction("4.3025") * c


def test_contention_exact_table_value():
    c = Fraction("9.251") / Fraction("8.605")
    cm = CostModel(t_f=Fraction("8.605"), t_b=Fraction("8.605"), t_w=1, t_ar=1,
                   unit_split={"F": (0, 0, 0, 1), "B": (0, 0, 0, 1), "W": (0, 0, 0, 1)}, contention=c)
    cc = chunk_costs(LmLayers(1), cm)
    # in a separated braid the backward all-reduce after Bact.Mlp hides under F.Mlp (8.605)
    blk = braid_block(forward_units(cc, 1, SLOT), backward_units(cc, 0, SLOT, True), True, ar=cc.ar)
    t = place_block(blk, cm.contention)
    i = next(i for i, u in enumerate(blk.compute_seq) if u.pass_ == "F" and u.kind == "Mlp")
    s, e = t.units[i]
    assert e - s == Fraction("9.251")


def test_braiding_preserves_compute():
    _, cc = costs()
    braided = fullbraid(cc)
    f = forward_only_block(forward_units(cc, 2, SLOT), ar=cc.ar)
    b = backward_only_block(backward_units(cc, 1, SLOT, False), False, ar=cc.ar)
    assert braided.compute_total() == f.compute_total() + b.compute_total()


durations = st.fractions(min_value=Fraction(1, 10), max_value=20)


@settings(max_examples=60, deadline=None)
@given(durations, durations, durations, st.fractions(min_value=0, max_value=2), st.booleans())
def test_zero_exposure_when_windows_cover_all_reduces(t_f, t_b, t_w, t_ar, sep):
    # every overlap window is at least as long as the all-reduce it hides
    cm = CostModel(t_f=t_f, t_b=t_b, t_w=t_w, t_ar=t_ar)
    cc = chunk_costs(LmLayers(1), cm)
    block = fullbraid(cc, sep=sep)
    windows = []
    for a in block.comm_seq:
        u = block.compute_seq[a.overlap]
        windows.append(u.w_duration if a.overlap == a.anchor else u.duration)
    ok = all(w >= a.duration for w, a in zip(windows, block.comm_seq))
    if ok:
        assert block_span(block, cm)[1] == 0


@settings(max_examples=60, deadline=None)
@given(durations, durations, durations, st.fractions(min_value=0, max_value=5), st.fractions(min_value=0, max_value=5),
       st.booleans())
def test_exposure_monotone_in_all_reduce(t_f, t_b, t_w, ar1, ar2, sep):
    lo, hi = sorted((ar1, ar2))
    out = []
    for ar in (lo, hi):
        cm = CostModel(t_f=t_f, t_b=t_b, t_w=t_w, t_ar=ar)
        out.append(block_span(fullbraid(chunk_costs(LmLayers(1), cm), sep=sep), cm)[1])
    assert out[0] <= out[1]


@settings(max_examples=60, deadline=None)
@given(durations, durations, durations, st.fractions(min_value=0, max_value=5), st.integers(1, 4), st.booleans())
def test_exposure_antitone_in_compute(t_f, t_b, t_w, ar, k, sep):
    out = []
    for scale in (1, k):
        cm = CostModel(t_f=t_f * scale, t_b=t_b * scale, t_w=t_w * scale, t_ar=ar)
        out.append(block_span(fullbraid(chunk_costs(LmLayers(1), cm), sep=sep), cm)[1])
    assert out[1] <= out[0]


@settings(max_examples=40, deadline=None)
@given(durations, durations, durations, st.fractions(min_value=0, max_value=5), st.booleans())
def test_all_reduces_respect_dependencies(t_f, t_b, t_w, ar, sep):
    cm = CostModel(t_f=t_f, t_b=t_b, t_w=t_w, t_ar=ar)
    block = fullbraid(chunk_costs(LmLayers(1), cm), sep=sep)
    t = place_block(block)
    for a, (s, e) in zip(block.comm_seq, t.ars):
        anchor = block.compute_seq[a.anchor]
        us, ue = t.units[a.anchor]
        ready = ue - anchor.w_duration if anchor.pass_ == "Bfull" else ue
        assert s >= ready
        if a.consumer is not None:
            assert t.units[a.consumer][0] >= e
        if a.overlap is not None and a.overlap != a.anchor:
            # the hiding unit is of the other pass, so neither depends on the other
            assert block.compute_seq[a.overlap].microbatch != anchor.microbatch
