from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from stpsim.errors import NotStpProgram, OffloadTooSlow, ScheduleError, TooFewMicrobatches, UnsupportedVirtualStages
from stpsim.program import check_program
from stpsim.schedule import (MEMORY_EFFICIENT, THROUGHPUT, apply_offloading, schedule_1f1b_interleaved, schedule_stp,
                             schedule_zbv, warmup_depth)
from stpsim.sim import simulate, validate_dependencies
from stpsim.workload import CostModel, ParallelConfig, build_uniform_stage_plan

CM = CostModel(t_f=4, t_b=4, t_w=2, t_ar=1, pcie_bw=1)


def setup(p, m):
    cfg = ParallelConfig(p, m)
    return cfg, build_uniform_stage_plan(cfg)


def all_programs(p, m):
    cfg, plan = setup(p, m)
    if (p, m) not in DEADLOCKING_1F1B:
        yield schedule_1f1b_interleaved(plan, cfg)
    yield schedule_zbv(plan, cfg)
    yield schedule_stp(plan, cfg, THROUGHPUT, CM)
    yield schedule_stp(plan, cfg, MEMORY_EFFICIENT, CM)


GRID = [(p, m) for p in (1, 2, 4, 8) for m in range(max(p, 2), 3 * p + 1)]
# configurations whose short last group deadlocks the interleaved 1F1B order
DEADLOCKING_1F1B = {(8, 10), (8, 11), (8, 12), (8, 13), (8, 18), (8, 19), (8, 20), (8, 21)}


@pytest.mark.parametrize("p,m", GRID)
def test_programs_complete(p, m):
    for prog in all_programs(p, m):
        assert check_program(prog) == [], prog.kind


@pytest.mark.parametrize("p,m", [(1, 2), (2, 4), (2, 6), (4, 8), (4, 12), (8, 24)])
def test_programs_execute_cleanly(p, m):
    cfg, plan = setup(p, m)
    for prog in all_programs(p, m):
        r = simulate(prog, plan, CM, cfg)
        assert validate_dependencies(r, prog, plan) == [], prog.kind


def test_1f1b_has_no_weight_passes_and_zbv_no_full_backwards():
    for p, m in [(2, 4), (4, 12), (8, 16)]:
        progs = list(all_programs(p, m))
        assert progs[0].counts()["W"] == 0
        assert progs[0].counts()["Bact"] == 0
        assert progs[1].counts()["Bfull"] == 0


def test_1f1b_p2_m3_hand_trace():
    cfg, plan = setup(2, 3)
    prog = schedule_1f1b_interleaved(plan, cfg)
    labels = [[a.label() for a in acts] for acts in prog.per_device]
    # warm-up of 2(p-d-1) + p forwards, groups of p microbatches per chunk
    assert labels[0] == ["F0c0", "F1c0", "F0c1", "F1c1", "F2c0", "Bfull0c1", "F2c1", "Bfull1c1",
                         "Bfull0c0", "Bfull1c0", "Bfull2c1", "Bfull2c0"]
    assert labels[1][:2] == ["F0c0", "F1c0"]
    assert prog.warmup_depth == (4, 2)


def test_1f1b_rejects_deadlocking_short_group():
    # p=8, m=10: device 0's warm-up covers every forward, including chunk-1
    # forwards that wait on device 7's work after its first chunk-0 backward
    cfg, plan = setup(8, 10)
    with pytest.raises(ScheduleError, match="multiple of p"):
        schedule_1f1b_interleaved(plan, cfg)
    # a short last group is fine when the pairing does not wait on itself
    for p, m in [(2, 3), (4, 6), (8, 9), (8, 16)]:
        cfg, plan = setup(p, m)
        prog = schedule_1f1b_interleaved(plan, cfg)
        assert validate_dependencies(simulate(prog, plan, CM, cfg), prog, plan) == []


def test_zbv_p2_m3_hand_trace():
    cfg, plan = setup(2, 3)
    prog = schedule_zbv(plan, cfg)
    labels = [[a.label() for a in acts] for acts in prog.per_device]
    assert labels[0] == ["F0c0", "F1c0", "F2c0", "F0c1", "Bact0c1", "W0c1", "F1c1", "Bact1c1", "W1c1",
                         "Bact0c0", "W0c0", "F2c1", "Bact2c1", "W2c1", "Bact1c0", "W1c0", "Bact2c0", "W2c0"]
    assert labels[1] == ["F0c0", "F0c1", "F1c0", "F1c1", "Bact0c1", "W0c1", "F2c0", "Bact0c0", "W0c0",
                         "F2c1", "Bact1c1", "W1c1", "Bact1c0", "Bact2c1", "Bact2c0", "W1c0", "W2c1", "W2c0"]


def test_stp_braids_need_later_forward():
    for p, m in GRID:
        for prog in list(all_programs(p, m))[2:]:
            for acts in prog.per_device:
                for a in acts:
                    if a.kind == "FandB":
                        assert a.mb > a.bwd_mb


def test_stp_lead_structure():
    cfg, plan = setup(4, 12)
    prog = schedule_stp(plan, cfg, THROUGHPUT, CM)
    for d, acts in enumerate(prog.per_device):
        first = next(i for i, a in enumerate(acts) if a.kind == "FandB")
        bare = [a for a in acts[:first] if a.kind == "F"]
        # 2p - d forwards on chunk 0, d + 1 on chunk 1
        assert sum(a.chunk == 0 for a in bare) == 8 - d
        assert sum(a.chunk == 1 for a in bare) == d + 1
    assert prog.warmup_depth == (9, 9, 9, 9)
    # the loss stage braids its second forward with the first backward
    first = next(a for a in prog.per_device[0] if a.kind == "FandB")
    assert (first.chunk, first.mb, first.bwd_mb) == (1, 1, 0)


def test_stp_phases():
    cfg, plan = setup(4, 12)
    prog = schedule_stp(plan, cfg, THROUGHPUT, CM)
    for d in range(4):
        ph = prog.phases[d]
        assert ph[0] == "warmup" and ph[-1] == "cooldown"
        seen = []
        for x in ph:
            if not seen or seen[-1] != x:
                seen.append(x)
        assert seen == [x for x in ("warmup", "steady", "degraded", "cooldown") if x in seen]


@pytest.mark.parametrize("p,m", GRID)
def test_stp_steady_phase_keeps_weights_fused(p, m):
    cfg, plan = setup(p, m)
    prog = schedule_stp(plan, cfg, THROUGHPUT, CM)
    for d, acts in enumerate(prog.per_device):
        for a, ph in zip(acts, prog.phases[d]):
            if ph == "steady":
                assert a.kind != "Bact"
                assert not (a.kind == "FandB" and a.separate_w)


def test_memory_efficient_variant():
    for p in (2, 3, 4, 8):
        for m in (2 * p, 3 * p):
            cfg, plan = setup(p, m)
            tp = schedule_stp(plan, cfg, THROUGHPUT, CM)
            me = schedule_stp(plan, cfg, MEMORY_EFFICIENT, CM)
            assert me.warmup == MEMORY_EFFICIENT
            assert [b - a for a, b in zip(tp.warmup_depth, me.warmup_depth)] == [1] * p
            # separation stays on: no fused full backward inside a braid
            assert not any(a.kind == "FandB" and not a.separate_w for acts in me.per_device for a in acts)
            assert not any(a.kind == "FandW" for acts in me.per_device for a in acts)
            if p >= 3:
                # at p=2 the extra leading forward outweighs the missing F&W extras
                assert max(simulate(me, plan, CM, cfg).peak_memory) < max(simulate(tp, plan, CM, cfg).peak_memory)


def test_warmup_depth_counts_bare_forwards():
    cfg, plan = setup(2, 4)
    prog = schedule_stp(plan, cfg, THROUGHPUT, CM)
    assert all(warmup_depth(acts) == n for acts, n in zip(prog.per_device, prog.warmup_depth))


def test_stp_errors():
    cfg, plan = setup(2, 4)
    with pytest.raises(TooFewMicrobatches) as exc:
        schedule_stp(plan, ParallelConfig(2, 1))
    assert exc.value.min_m == 2
    with pytest.raises(ScheduleError):
        schedule_stp(plan, cfg, "fast")
    with pytest.raises(ScheduleError):
        schedule_stp(build_uniform_stage_plan(ParallelConfig(4, 4)), cfg)
    with pytest.raises(UnsupportedVirtualStages):
        schedule_zbv(plan, ParallelConfig(2, 4, v=3))


def test_stp_deterministic():
    cfg, plan = setup(4, 12)
    assert schedule_stp(plan, cfg, THROUGHPUT, CM) == schedule_stp(plan, cfg, THROUGHPUT, CM)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(2, 14), st.sampled_from([THROUGHPUT, MEMORY_EFFICIENT]),
       st.fractions(Fraction(1, 2), 6), st.fractions(0, 3))
def test_stp_valid_under_any_costs(p, m, warmup, t_f, t_ar):
    """Programs planned with one cost model run cleanly under another."""
    cfg, plan = setup(p, m)
    prog = schedule_stp(plan, cfg, warmup, CostModel(t_f=t_f, t_b=t_f, t_w=t_f / 2, t_ar=t_ar))
    r = simulate(prog, plan, CM, cfg)
    assert validate_dependencies(r, prog, plan) == []


# ---------------------------------------------------------------- offloading

def offload_case(aw, as_, cm=CM):
    cfg, plan = setup(4, 12)
    base = schedule_stp(plan, cfg, THROUGHPUT, cm)
    return cfg, plan, base, apply_offloading(base, cm, aw, as_, plan)


def test_offload_identity():
    _, _, base, prog = offload_case(0, 0)
    assert prog is base


def test_offload_time_limit():
    ok = CostModel(t_f=3, m_a=8, pcie_bw=4)
    assert ok.offload_time(1) == 2
    cfg, plan = setup(2, 4)
    apply_offloading(schedule_stp(plan, cfg, cm=ok), ok, 1, 0, plan)
    slow = CostModel(t_f=3, m_a=8, pcie_bw=2)
    with pytest.raises(OffloadTooSlow) as exc:
        apply_offloading(schedule_stp(plan, cfg, cm=slow), slow, 1, 0, plan)
    assert exc.value.t_o == 4
    with pytest.raises(OffloadTooSlow):
        apply_offloading(schedule_stp(plan, cfg, cm=slow), slow, 0, 1, plan)


def test_offload_rejects_other_schedules_and_bad_alpha():
    cfg, plan = setup(2, 4)
    with pytest.raises(NotStpProgram):
        apply_offloading(schedule_zbv(plan, cfg), CM, 0, Fraction(1, 2))
    with pytest.raises(ScheduleError):
        apply_offloading(schedule_stp(plan, cfg), CM, 0, Fraction(3, 2))


@pytest.mark.parametrize("aw,as_", [(0, Fraction(1, 2)), (Fraction(1, 2), Fraction(1, 2)), (1, 1)])
def test_offload_reload_order(aw, as_):
    cfg, plan, _, prog = offload_case(aw, as_)
    for d, acts in enumerate(prog.per_device):
        pos = {}
        for i, a in enumerate(acts):
            for op, mb, c in a.ops():
                pos.setdefault((op, mb, c), i)
            if a.kind in ("Offload", "Reload"):
                pos[(a.kind, a.mb, a.chunk, a.target)] = i
        for i, a in enumerate(acts):
            if a.kind == "Reload":
                assert pos[("Offload", a.mb, a.chunk, a.target)] < i
                users = ("W",) if a.target == "wgrad" else ("Bact", "Bfull")
                consumer = min(pos[(u, a.mb, c)] for u in users for c in (a.chunk,) if (u, a.mb, c) in pos)
                assert i < consumer
    assert len(prog.phases[0]) == len(prog.per_device[0])


def test_offload_only_chunk0_activations():
    _, _, _, prog = offload_case(1, 1)
    for acts in prog.per_device:
        for a in acts:
            if a.kind == "Offload" and a.target == "act":
                assert a.chunk == 0


def test_offload_lowers_peak_and_keeps_timeline_valid():
    cfg, plan, base, prog = offload_case(Fraction(1, 2), Fraction(1, 2))
    r0 = simulate(base, plan, CM, cfg)
    r = simulate(prog, plan, CM, cfg)
    assert validate_dependencies(r, prog, plan) == []
    assert max(r.peak_memory) < max(r0.peak_memory)
    assert all(x == 0 for x in r.memory.host_final)


def test_offload_peak_monotone_in_alpha():
    peaks = []
    for a in (0, Fraction(1, 2), 1):
        cfg, plan, _, prog = offload_case(Fraction(1, 2), a)
        peaks.append(max(simulate(prog, plan, CM, cfg).peak_memory))
    assert peaks == sorted(peaks, reverse=True)
