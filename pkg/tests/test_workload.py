from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from stpsim.errors import ConfigError, IndivisibleLayers, TooFewLayers, UnsupportedVirtualStages
from stpsim.workload import (CostModel, LmLayers, ParallelConfig, as_time, build_llm_stage_plan,
                             build_mllm_stage_plan, build_uniform_stage_plan, chunk_costs, v_shape_order)


def test_llm_plan_last_slot_two_short():
    plan = build_llm_stage_plan(30, ParallelConfig(4, 8))
    assert plan.layer_counts() == [4, 4, 4, 4, 4, 4, 4, 2]
    assert plan.spec((0, 1)).layers == 2  # final V-shape slot


def test_llm_plan_p8():
    plan = build_llm_stage_plan(46, ParallelConfig(8, 16))
    assert plan.layer_counts() == [3] * 15 + [1]


def test_llm_plan_indivisible():
    with pytest.raises(IndivisibleLayers) as exc:
        build_llm_stage_plan(8, ParallelConfig(4, 8))
    assert exc.value.suggestions == [22, 30]


def test_llm_plan_too_few_layers():
    with pytest.raises(TooFewLayers):
        build_llm_stage_plan(5, ParallelConfig(4, 8))


def test_mllm_plan_vit_first():
    plan = build_mllm_stage_plan(32, 33, 1, 1, ParallelConfig(4, 8))
    assert plan.spec((0, 0)).kind == "vit"
    assert plan.layer_counts()[1:] == [5, 5, 5, 5, 5, 5, 3]


def test_mllm_plan_p2():
    plan = build_mllm_stage_plan(26, 40, 1, 1, ParallelConfig(2, 4))
    assert plan.spec((0, 0)).layers == 26
    assert plan.layer_counts()[1:] == [14, 14, 12]


def test_mllm_imbalance_ratio():
    # LM slots [4, 4, 2] with equal unit costs, ViT of 4 layers
    plan = build_mllm_stage_plan(4, 10, 1, 1, ParallelConfig(2, 4))
    assert plan.layer_counts() == [4, 4, 4, 2]
    assert plan.imbalance == 2


def test_v_only():
    with pytest.raises(UnsupportedVirtualStages):
        build_uniform_stage_plan(ParallelConfig(2, 4, v=3))


def test_unit_split_scaling():
    cm = CostModel(t_f=10, unit_split=(0.2, 0.4, 0.1, 0.3))
    cc = chunk_costs(LmLayers(1), cm)
    assert cc.f == (2, 4, 1, 3)


def test_double_layers_double_costs():
    cm = CostModel(t_f=4, t_b=4, t_w=2, t_ar=1)
    one = chunk_costs(LmLayers(2), cm, reference_layers=2)
    two = chunk_costs(LmLayers(4), cm, reference_layers=2)
    assert two.f == tuple(2 * x for x in one.f)
    assert two.b == tuple(2 * x for x in one.b)
    assert two.w == tuple(2 * x for x in one.w)
    assert two.ar == 2 * one.ar


def test_two_half_all_reduces_per_chunk():
    cc = chunk_costs(LmLayers(1), CostModel(t_ar=1))
    assert cc.ar == Fraction(1, 2)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(contention=0.5)
    with pytest.raises(ConfigError):
        CostModel(unit_split=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        CostModel(t_f=-1)
    with pytest.warns(UserWarning):
        CostModel(t_b=1, t_w=2)


def test_parallel_config_validation():
    with pytest.raises(ConfigError):
        ParallelConfig(0, 1)


def test_as_time_is_exact():
    assert as_time(0.275) == Fraction(11, 40)
    assert as_time("3/7") == Fraction(3, 7)
    assert as_time(0.3, Fraction(1, 4)) == Fraction(1, 4)


@given(st.integers(1, 8), st.integers(3, 12))
def test_llm_plan_conserves_layers(p, x):
    layers = 2 * p * x - 2
    plan = build_llm_stage_plan(layers, ParallelConfig(p, p))
    assert plan.total_layers == layers
    assert sum(plan.layer_counts()) == layers


@given(st.integers(1, 16))
def test_v_shape_palindrome(p):
    order = v_shape_order(p)
    devs = [d for d, _ in order]
    assert devs == devs[::-1]
    assert len(set(order)) == 2 * p


@given(st.integers(1, 20), st.fractions(min_value=0, max_value=10))
def test_chunk_costs_homogeneous(k, t):
    cm = CostModel(t_f=t, t_b=t, t_w=t / 2 if t else 0, t_ar=t / 3)
    base = chunk_costs(LmLayers(1), cm, reference_layers=1)
    big = chunk_costs(LmLayers(k), cm, reference_layers=1)
    assert big.f == tuple(k * x for x in base.f)
    assert big.ar == k * base.ar
