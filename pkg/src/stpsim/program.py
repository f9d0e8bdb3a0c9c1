"""Actions and per-device schedule programs."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .workload import ParallelConfig

COMPUTE_KINDS = ("F", "Bfull", "Bact", "W", "FandB", "FandW")
TRANSFER_KINDS = ("Offload", "Reload")
ACTION_KINDS = COMPUTE_KINDS + TRANSFER_KINDS


@dataclass(frozen=True)
class Action:
    """One entry of a device's program.

    ``chunk`` is the virtual stage on the owning device. Braided kinds carry
    the forward microbatch in ``mb`` and the partner (backward or weight)
    microbatch in ``bwd_mb``. A forward may be braided with the stored
    weight-gradient pass of the device's other chunk; ``w_chunk`` names it.
    Offload/Reload move ``alpha`` of the
    activation of (``mb``, ``chunk``); ``target`` says which copy: ``"act"``
    for a stored forward activation, ``"wgrad"`` for the part kept alive for
    a deferred weight gradient.
    """

    kind: str
    chunk: int
    mb: int
    bwd_mb: int | None = None
    separate_w: bool = False
    alpha: Fraction = Fraction(0)
    target: str = ""
    w_chunk: int | None = None

    def __post_init__(self):
        if self.kind == "FandW" and self.w_chunk is None:
            object.__setattr__(self, "w_chunk", self.chunk)
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind in ("FandB", "FandW"):
            if self.bwd_mb is None:
                raise ValueError(f"{self.kind} needs two microbatches")
            if self.kind == "FandB" and self.mb <= self.bwd_mb:
                raise ValueError(f"braided forward mb {self.mb} must exceed backward mb {self.bwd_mb}")
        if self.kind in TRANSFER_KINDS:
            if not (0 < self.alpha <= 1):
                raise ValueError("offload fraction must lie in (0, 1]")
            if self.target not in ("act", "wgrad"):
                raise ValueError(f"unknown offload target {self.target!r}")

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS

    @property
    def braided(self) -> bool:
        return self.kind in ("FandB", "FandW")

    def ops(self) -> list[tuple[str, int, int]]:
        """Elementary (op, mb, chunk) triples; op is one of F, Bfull, Bact, W."""
        k, c = self.kind, self.chunk
        if k == "FandB":
            return [("F", self.mb, c), ("Bact" if self.separate_w else "Bfull", self.bwd_mb, c)]
        if k == "FandW":
            return [("F", self.mb, c), ("W", self.bwd_mb, self.w_chunk)]
        if k in COMPUTE_KINDS:
            return [(k, self.mb, c)]
        return []

    def label(self) -> str:
        if self.kind == "FandB":
            return f"F{self.mb}&{'Ba' if self.separate_w else 'B'}{self.bwd_mb}c{self.chunk}"
        if self.kind == "FandW":
            if self.w_chunk != self.chunk:
                return f"F{self.mb}c{self.chunk}&W{self.bwd_mb}c{self.w_chunk}"
            return f"F{self.mb}&W{self.bwd_mb}c{self.chunk}"
        if self.kind in TRANSFER_KINDS:
            return f"{self.kind}[{self.target}]{self.mb}c{self.chunk}"
        return f"{self.kind}{self.mb}c{self.chunk}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "chunk": self.chunk, "mb": self.mb}
        if self.bwd_mb is not None:
            d["mb"] = [self.mb, self.bwd_mb]
        if self.kind == "FandB":
            d["separate_w"] = self.separate_w
        if self.kind == "FandW":
            d["w_chunk"] = self.w_chunk
        if self.kind in TRANSFER_KINDS:
            d["alpha"] = str(self.alpha)
            d["target"] = self.target
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        mb = d["mb"]
        bwd = None
        if isinstance(mb, list):
            mb, bwd = mb
        return cls(d["kind"], d["chunk"], mb, bwd, d.get("separate_w", False),
                   Fraction(d.get("alpha", "0")), d.get("target", ""), d.get("w_chunk"))


F = lambda c, mb: Action("F", c, mb)  # noqa: E731
Bfull = lambda c, mb: Action("Bfull", c, mb)  # noqa: E731
Bact = lambda c, mb: Action("Bact", c, mb)  # noqa: E731
W = lambda c, mb: Action("W", c, mb)  # noqa: E731


@dataclass(frozen=True)
class ScheduleProgram:
    kind: str  # "1f1b-i" | "zbv" | "stp"
    cfg: ParallelConfig
    per_device: tuple
    dataflow: str = "v"
    warmup: str | None = None
    warmup_depth: tuple = ()
    # phase label for every action, parallel to per_device
    phases: tuple = ()
    offload: dict = field(default_factory=dict)

    def device(self, d: int) -> tuple:
        return self.per_device[d]

    def phase_of(self, d: int, i: int) -> str:
        if not self.phases:
            return "all"
        return self.phases[d][i]

    def counts(self) -> Counter:
        """Counter over (op, mb, device, chunk)."""
        out = Counter()
        for d, acts in enumerate(self.per_device):
            for a in acts:
                for op, mb, c in a.ops():
                    out[(op, mb, d, c)] += 1
        return out

    def render(self) -> str:
        return "\n".join(f"dev{d}: " + " ".join(a.label() for a in acts)
                         for d, acts in enumerate(self.per_device))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cfg": {"p": self.cfg.p, "m": self.cfg.m, "v": self.cfg.v, "t": self.cfg.t},
            "dataflow": self.dataflow,
            "warmup": self.warmup,
            "warmup_depth": list(self.warmup_depth),
            "offload": {k: str(v) for k, v in self.offload.items()},
            "per_device": [
                [dict(a.to_dict(), phase=self.phase_of(d, i)) for i, a in enumerate(acts)]
                for d, acts in enumerate(self.per_device)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleProgram":
        cfg = ParallelConfig(**d["cfg"])
        per_device = tuple(tuple(Action.from_dict(a) for a in acts) for acts in d["per_device"])
        phases = tuple(tuple(a.get("phase", "all") for a in acts) for acts in d["per_device"])
        return cls(d["kind"], cfg, per_device, d.get("dataflow", "v"), d.get("warmup"),
                   tuple(d.get("warmup_depth", ())), phases,
                   {k: Fraction(v) for k, v in d.get("offload", {}).items()})


def check_program(prog: ScheduleProgram) -> list[str]:
    """Structural problems in a program; empty when it is complete and well ordered."""
    problems = []
    cfg = prog.cfg
    for d, acts in enumerate(prog.per_device):
        seen: dict = {}
        for i, a in enumerate(acts):
            for op, mb, c in a.ops():
                key = (op, mb, c)
                if key in seen:
                    problems.append(f"dev{d}: duplicate {op} mb{mb} chunk{a.chunk}")
                seen[key] = i
        for (op, mb, c), i in seen.items():
            if op in ("Bact", "Bfull") and seen.get(("F", mb, c), len(acts)) > i:
                problems.append(f"dev{d}: {op} mb{mb} chunk{c} before its forward")
            if op == "W" and seen.get(("Bact", mb, c), len(acts)) > i:
                problems.append(f"dev{d}: W mb{mb} chunk{c} before its Bact")
        for c in range(cfg.v):
            for mb in range(cfg.m):
                if ("F", mb, c) not in seen:
                    problems.append(f"dev{d}: missing F mb{mb} chunk{c}")
                full = ("Bfull", mb, c) in seen
                split = ("Bact", mb, c) in seen and ("W", mb, c) in seen
                if full == split:
                    problems.append(f"dev{d}: backward of mb{mb} chunk{c} is {'doubled' if full else 'incomplete'}")
    return problems
