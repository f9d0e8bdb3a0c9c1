"""Parallel configuration, cost model and stage partitioning.

Every time quantity in the package is an exact :class:`fractions.Fraction`;
:func:`as_time` converts user input (ints, decimal floats, ``"n/d"`` strings)
without picking up binary floating point noise.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from .errors import ConfigError, IndivisibleLayers, TooFewLayers, UnsupportedVirtualStages

UNIT_KINDS = ("PreAttn", "Attn", "PreMlp", "Mlp")
PASS_KINDS = ("F", "B", "W")

Slot = tuple  # (device, virtual stage)


def as_time(value, tick: Fraction | None = None) -> Fraction:
    """Convert a number to an exact Fraction, optionally snapped to ``tick``."""
    if isinstance(value, Fraction):
        out = value
    elif isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    elif isinstance(value, int):
        out = Fraction(value)
    elif isinstance(value, float):
        # str() gives the shortest repr, so 0.275 becomes 11/40 instead of a 53-bit mantissa
        out = Fraction(repr(value))
    elif isinstance(value, str):
        out = Fraction(value)
    else:
        raise ConfigError(f"expected a number, got {value!r}")
    if tick is not None:
        out = round(out / tick) * tick
    return out


@dataclass(frozen=True)
class ParallelConfig:
    p: int
    m: int
    v: int = 2
    t: int = 1

    def __post_init__(self):
        for name in ("p", "m", "v", "t"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")

    def require_two_virtual_stages(self):
        if self.v != 2:
            raise UnsupportedVirtualStages(self.v)

    @property
    def num_stages(self) -> int:
        return self.p * self.v


def _normalise_split(split, name: str) -> tuple[Fraction, ...]:
    if len(split) != 4:
        raise ConfigError(f"{name} needs 4 fractions, got {len(split)}")
    fr = tuple(as_time(x) for x in split)
    if any(x < 0 or x > 1 for x in fr):
        raise ConfigError(f"{name} fractions must lie in [0, 1]: {split}")
    if sum(fr) != 1:
        raise ConfigError(f"{name} fractions must sum to 1, got {sum(fr)}")
    return fr


DEFAULT_SPLIT = {
    "F": (Fraction(1, 10), Fraction(4, 10), Fraction(1, 10), Fraction(4, 10)),
    "B": (Fraction(1, 10), Fraction(4, 10), Fraction(1, 10), Fraction(4, 10)),
    "W": (Fraction(0), Fraction(1, 2), Fraction(0), Fraction(1, 2)),
}


def _split_from(value) -> dict[str, tuple[Fraction, ...]]:
    """Accept either one 4-tuple (used for F and B) or a mapping per pass kind.

    A single tuple cannot be used as-is for W because the pre-units carry no
    weight gradients; the Attn/Mlp fractions are renormalised instead.
    """
    if value is None:
        return dict(DEFAULT_SPLIT)
    if isinstance(value, Mapping):
        unknown = set(value) - set(PASS_KINDS)
        if unknown:
            raise ConfigError(f"unknown unit_split key(s): {sorted(unknown)}")
        out = dict(DEFAULT_SPLIT)
        for k, v in value.items():
            out[k] = _normalise_split(v, f"unit_split[{k}]")
        if "W" not in value and "F" in value:
            out["W"] = _weight_split(out["F"])
        return out
    fb = _normalise_split(value, "unit_split")
    return {"F": fb, "B": fb, "W": _weight_split(fb)}


def _weight_split(split) -> tuple[Fraction, ...]:
    attn, mlp = split[1], split[3]
    if attn + mlp == 0:
        return DEFAULT_SPLIT["W"]
    return (Fraction(0), attn / (attn + mlp), Fraction(0), mlp / (attn + mlp))


@dataclass(frozen=True)
class CostModel:
    """Per-chunk costs for a uniform reference chunk.

    ``t_ar`` is the total TP all-reduce time of one chunk in one pass
    direction; it is carried by two all-reduce ops (after Attn and after MLP).
    """

    t_f: Fraction = Fraction(1)
    t_b: Fraction = Fraction(1)
    t_w: Fraction = Fraction(1)
    t_ar: Fraction = Fraction(0)
    m_a: Fraction = Fraction(1)
    unit_split: Mapping = field(default=None)
    pcie_bw: Fraction = Fraction(1)
    contention: Fraction = Fraction(1)
    pp_comm_time: Fraction = Fraction(0)

    def __post_init__(self):
        for name in ("t_f", "t_b", "t_w", "t_ar", "m_a", "pcie_bw", "contention", "pp_comm_time"):
            object.__setattr__(self, name, as_time(getattr(self, name)))
        object.__setattr__(self, "unit_split", _split_from(self.unit_split))
        for name in ("t_f", "t_b", "t_w", "t_ar", "m_a", "pp_comm_time"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pcie_bw <= 0:
            raise ConfigError("pcie_bw must be > 0")
        if self.contention < 1:
            raise ConfigError(f"contention must be >= 1, got {self.contention}")
        w = self.unit_split["W"]
        if w[0] != 0 or w[2] != 0:
            raise ConfigError("PreAttn/PreMlp carry no weight-gradient work; unit_split[W] must be 0 there")
        if self.t_b <= self.t_w:
            warnings.warn(
                f"t_b={self.t_b} <= t_w={self.t_w}; closed-form bubble expressions assume t_b > t_w",
                stacklevel=2,
            )

    def offload_time(self, alpha) -> Fraction:
        return as_time(alpha) * self.m_a / self.pcie_bw

    def to_dict(self) -> dict:
        return {
            "t_f": str(self.t_f),
            "t_b": str(self.t_b),
            "t_w": str(self.t_w),
            "t_ar": str(self.t_ar),
            "m_a": str(self.m_a),
            "unit_split": {k: [str(x) for x in v] for k, v in self.unit_split.items()},
            "pcie_bw": str(self.pcie_bw),
            "contention": str(self.contention),
            "pp_comm_time": str(self.pp_comm_time),
        }


@dataclass(frozen=True)
class ChunkSpec:
    kind: str  # "lm" | "vit"
    layers: int
    # time of one layer of this kind relative to one LM layer
    cost_ratio: Fraction = Fraction(1)

    def __post_init__(self):
        if self.kind not in ("lm", "vit"):
            raise ConfigError(f"unknown chunk kind {self.kind!r}")
        if self.layers < 1:
            raise ConfigError("a chunk must hold at least one layer")


def LmLayers(count: int) -> ChunkSpec:
    return ChunkSpec("lm", count)


def VitEncoder(count: int, cost_ratio=1) -> ChunkSpec:
    return ChunkSpec("vit", count, as_time(cost_ratio))


def v_shape_order(p: int) -> tuple:
    return tuple((d, 0) for d in range(p)) + tuple((d, 1) for d in reversed(range(p)))


def parallel_order(p: int) -> tuple:
    return tuple((d, 0) for d in range(p)) + tuple((d, 1) for d in range(p))


@dataclass(frozen=True)
class StagePlan:
    p: int
    v: int
    slots: tuple  # ((device, vs), ChunkSpec) pairs, sorted by slot
    order: tuple  # V-shape forward traversal of slots
    reference_layers: int
    slot_times: tuple = ()  # per-slot time estimate, traversal order (MLLM plans)

    def __post_init__(self):
        keys = [s for s, _ in self.slots]
        if len(keys) != self.p * self.v or len(set(keys)) != len(keys):
            raise ConfigError(f"plan must have exactly p*v={self.p * self.v} distinct slots")
        for d in range(self.p):
            if sum(1 for k in keys if k[0] == d) != self.v:
                raise ConfigError(f"device {d} must hold exactly {self.v} slots")

    def spec(self, slot) -> ChunkSpec:
        for s, c in self.slots:
            if s == tuple(slot):
                return c
        raise KeyError(slot)

    @property
    def total_layers(self) -> int:
        return sum(c.layers for _, c in self.slots)

    def layer_counts(self) -> list[int]:
        """Layer counts in V-shape traversal order."""
        return [self.spec(s).layers for s in self.order]

    def traversal(self, dataflow: str = "v") -> tuple:
        if dataflow == "v":
            return self.order
        if dataflow == "parallel":
            return parallel_order(self.p)
        raise ValueError(f"unknown dataflow {dataflow!r}")

    @property
    def imbalance(self) -> Fraction:
        times = self.slot_times or tuple(
            Fraction(self.spec(s).layers) * self.spec(s).cost_ratio for s in self.order
        )
        return max(times) / min(times)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "v": self.v,
            "reference_layers": self.reference_layers,
            "order": [list(s) for s in self.order],
            "slots": [
                {"slot": list(s), "kind": c.kind, "layers": c.layers, "cost_ratio": str(c.cost_ratio)}
                for s, c in self.slots
            ],
        }


def _suggest(target_slots: int, layers: int) -> list[int]:
    """Nearest layer counts that satisfy the "last slot two fewer" split."""
    lo = max(3, round((layers + 2) / target_slots) - 1)  # the short slot needs at least one layer
    cands = {target_slots * k - 2 for k in range(lo, lo + 3)}
    return sorted(cands, key=lambda c: (abs(c - layers), c))[:2]


def _uniform_minus_two(layers: int, nslots: int) -> int:
    if layers < nslots:
        raise TooFewLayers(layers, nslots)
    if (layers + 2) % nslots:
        raise IndivisibleLayers(layers, nslots, _suggest(nslots, layers))
    x = (layers + 2) // nslots
    if x - 2 < 1:
        raise IndivisibleLayers(layers, nslots, _suggest(nslots, layers))
    return x


def _make_plan(p, v, chunks_in_order, reference_layers, slot_times=()):
    order = v_shape_order(p)
    slots = tuple(sorted(zip(order, chunks_in_order)))
    return StagePlan(p=p, v=v, slots=slots, order=order,
                     reference_layers=reference_layers, slot_times=tuple(slot_times))


def build_llm_stage_plan(layers: int, cfg: ParallelConfig) -> StagePlan:
    """Uniform split with the final V-shape slot (device 0, stage 1) two layers short."""
    cfg.require_two_virtual_stages()
    n = cfg.p * cfg.v
    x = _uniform_minus_two(layers, n)
    counts = [x] * (n - 1) + [x - 2]
    return _make_plan(cfg.p, cfg.v, [LmLayers(c) for c in counts], x)


def build_uniform_stage_plan(cfg: ParallelConfig, layers_per_slot: int = 1) -> StagePlan:
    """Every slot holds the same number of layers (the setting closed forms assume)."""
    cfg.require_two_virtual_stages()
    n = cfg.p * cfg.v
    return _make_plan(cfg.p, cfg.v, [LmLayers(layers_per_slot)] * n, layers_per_slot)


def build_mllm_stage_plan(vit_layers: int, lm_layers: int, vit_unit_cost, lm_unit_cost,
                          cfg: ParallelConfig) -> StagePlan:
    """ViT on (device 0, stage 0); LM spread over the remaining slots.

    The resulting imbalance is reported on the plan, never corrected.
    """
    cfg.require_two_virtual_stages()
    n = cfg.p * cfg.v
    if n < 2:
        raise ConfigError("MLLM plans need at least two slots")
    if vit_layers < 1:
        raise ConfigError("vit_layers must be >= 1")
    x = _uniform_minus_two(lm_layers, n - 1)
    vit_cost, lm_cost = as_time(vit_unit_cost), as_time(lm_unit_cost)
    if lm_cost <= 0 or vit_cost <= 0:
        raise ConfigError("unit costs must be positive")
    counts = [x] * (n - 2) + [x - 2]
    chunks = [VitEncoder(vit_layers, vit_cost / lm_cost)] + [LmLayers(c) for c in counts]
    times = [vit_layers * vit_cost] + [c * lm_cost for c in counts]
    return _make_plan(cfg.p, cfg.v, chunks, x, times)


@dataclass(frozen=True)
class ChunkCosts:
    """Per-unit durations of one chunk, ordered as UNIT_KINDS."""

    f: tuple
    b: tuple
    w: tuple
    ar: Fraction  # duration of each of the two all-reduce ops per pass direction
    mem: Fraction

    @property
    def t_f(self):
        return sum(self.f)

    @property
    def t_b(self):
        return sum(self.b)

    @property
    def t_w(self):
        return sum(self.w)


def chunk_costs(spec: ChunkSpec, cm: CostModel, reference_layers: int = None,
                per_layer: bool = False) -> ChunkCosts:
    """Scale the reference chunk costs to ``spec`` and split them into units.

    With ``per_layer`` the cost model is read as per-layer times; otherwise as
    times of a chunk holding ``reference_layers`` layers (default: the chunk itself).
    """
    if per_layer:
        scale = Fraction(spec.layers)
    else:
        ref = reference_layers or spec.layers
        scale = Fraction(spec.layers, ref)
    mem = cm.m_a * scale
    scale *= spec.cost_ratio
    split = cm.unit_split
    return ChunkCosts(
        f=tuple(cm.t_f * scale * s for s in split["F"]),
        b=tuple(cm.t_b * scale * s for s in split["B"]),
        w=tuple(cm.t_w * scale * s for s in split["W"]),
        ar=cm.t_ar * scale / 2,
        mem=mem,
    )
