"""Budgeted two-tier expert-memory simulator with FIFO eviction.

Experts are the placement unit, keyed (layer, expert id). The fast tier has
a byte budget; loads cost bytes/bandwidth plus a fixed per-transfer latency,
and evictions are free (experts are read-only, nothing is written back).

Eviction policy, applied in FIFO (arrival) order within each class:

  1. residents not required by the batch being planned;
  2. residents required only by already-completed layers (the spec'd
     layer-progressive relaxation);
  3. residents required by future layers (they are reloaded by their own
     layer's plan group later);
  4. residents required by the layer currently being planned (only possible
     when a single layer's working set exceeds the budget; compute is
     assumed to consume experts in load order, so the oldest loaded can go).

A plan is a sequence of per-layer groups. A group is marked prefetchable
when issuing it one layer ahead (during compute of the previous layer) is
safe, i.e. it evicts nothing the previous layer is still using; otherwise
the serving loop issues it synchronously at its own layer's compute start.

Routers never occupy the fast tier in hash-driven serving; only expert
bytes are accounted here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, UnservableError

Key = tuple[int, int]  # (layer, expert id)


@dataclass
class MemoryBudget:
    fast_tier_bytes: int
    bandwidth_bytes_per_s: float = 16e9
    per_transfer_latency_s: float = 50e-6

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ContractError("bandwidth must be positive")
        if self.fast_tier_bytes < 0:
            raise ContractError("fast tier budget must be non-negative")


@dataclass
class ResidencyState:
    """Fast-tier contents: sizes per resident expert plus FIFO arrival order."""

    resident: dict[Key, int] = field(default_factory=dict)
    fifo_order: list[Key] = field(default_factory=list)
    used_bytes: int = 0

    def copy(self) -> "ResidencyState":
        return ResidencyState(dict(self.resident), list(self.fifo_order), self.used_bytes)

    def fingerprint(self) -> tuple:
        return (tuple(self.fifo_order), self.used_bytes)

    def check(self) -> None:
        if sorted(self.fifo_order) != sorted(self.resident):
            raise ContractError("fifo_order is not a permutation of resident")
        if self.used_bytes != sum(self.resident.values()):
            raise ContractError("used_bytes does not match resident sizes")


@dataclass
class PlanGroup:
    """One layer's placement steps in execution order.

    ``steps`` interleaves ("evict", key) / ("load", key) exactly as planned;
    evictions always precede the load that needed the space, so the budget
    holds after every step. A key may be both loaded and later evicted within
    one group when the layer's working set exceeds the budget.
    """

    layer: int
    steps: list[tuple[str, Key]]
    prefetchable: bool
    transfer_s: float

    @property
    def loads(self) -> list[Key]:
        return [k for op, k in self.steps if op == "load"]

    @property
    def evictions(self) -> list[Key]:
        return [k for op, k in self.steps if op == "evict"]


@dataclass
class PlacementPlan:
    groups: list[PlanGroup]
    budget_bytes: int
    expert_bytes: int
    source_fingerprint: tuple

    @property
    def loads(self) -> list[Key]:
        return [k for g in self.groups for k in g.loads]

    @property
    def evictions(self) -> list[Key]:
        return [k for g in self.groups for k in g.evictions]

    @property
    def estimated_transfer_s(self) -> float:
        return sum(g.transfer_s for g in self.groups)


def _required_layers_from_table(table) -> list[set[int]]:
    return table.required_by_layer()


def plan_placement(
    table,
    state: ResidencyState,
    budget: MemoryBudget,
    expert_bytes: int,
) -> PlacementPlan:
    """Plan loads/evictions so each layer's required experts are resident in turn.

    ``expert_bytes`` is the uniform per-expert size. Raises UnservableError
    when a single expert exceeds the budget.
    """
    if expert_bytes > budget.fast_tier_bytes:
        raise UnservableError(
            f"expert of {expert_bytes} bytes exceeds budget {budget.fast_tier_bytes}"
        )
    required_layers = _required_layers_from_table(table)
    groups = _plan_groups(required_layers, state, budget, expert_bytes)
    return PlacementPlan(
        groups=groups,
        budget_bytes=budget.fast_tier_bytes,
        expert_bytes=expert_bytes,
        source_fingerprint=state.fingerprint(),
    )


def _victim_class(key: Key, planning_layer: int, required_layers) -> int:
    layer = key[0]
    required = layer < len(required_layers) and key[1] in required_layers[layer]
    if not required:
        return 1
    if layer < planning_layer:
        return 2
    if layer > planning_layer:
        return 3
    return 4


def _plan_groups(
    required_layers: list[set[int]],
    state: ResidencyState,
    budget: MemoryBudget,
    expert_bytes: int,
) -> list[PlanGroup]:
    sim = state.copy()
    groups = []
    for layer, req in enumerate(required_layers):
        loads = [(layer, e) for e in sorted(req) if (layer, e) not in sim.resident]
        steps: list[tuple[str, Key]] = []
        prefetchable = True
        for key in loads:
            while sim.used_bytes + expert_bytes > budget.fast_tier_bytes:
                victim = None
                for cls in (1, 2, 3, 4):
                    for cand in sim.fifo_order:
                        if _victim_class(cand, layer, required_layers) == cls:
                            victim = cand
                            break
                    if victim is not None:
                        break
                if victim is None:
                    raise UnservableError("nothing evictable while over budget")
                # evicting something the just-finished layer may still be
                # computing with forces synchronous issue
                vcls = _victim_class(victim, layer, required_layers)
                if vcls == 4 or (vcls == 2 and victim[0] == layer - 1):
                    prefetchable = False
                sim.resident.pop(victim)
                sim.fifo_order.remove(victim)
                sim.used_bytes -= expert_bytes
                steps.append(("evict", victim))
            sim.resident[key] = expert_bytes
            sim.fifo_order.append(key)
            sim.used_bytes += expert_bytes
            steps.append(("load", key))
        transfer_s = (
            len(loads) * expert_bytes / budget.bandwidth_bytes_per_s
            + budget.per_transfer_latency_s * len(loads)
        )
        groups.append(
            PlanGroup(
                layer=layer,
                steps=steps,
                prefetchable=prefetchable,
                transfer_s=transfer_s,
            )
        )
    return groups


def apply_group_inplace(state: ResidencyState, group: PlanGroup, budget_bytes: int,
                        expert_bytes: int) -> None:
    for op, key in group.steps:
        if op == "evict":
            if key not in state.resident:
                raise ContractError(f"plan/state mismatch: evicting non-resident {key}")
            state.used_bytes -= state.resident.pop(key)
            state.fifo_order.remove(key)
        else:
            if key in state.resident:
                raise ContractError(f"plan/state mismatch: loading resident {key}")
            if state.used_bytes + expert_bytes > budget_bytes:
                raise ContractError("plan exceeds budget mid-application")
            state.resident[key] = expert_bytes
            state.fifo_order.append(key)
            state.used_bytes += expert_bytes


def apply_plan(state: ResidencyState, plan: PlacementPlan) -> tuple[ResidencyState, float]:
    """Execute a plan on the state it was computed from.

    Returns (new state, simulated elapsed seconds). The originating state is
    not mutated; the budget holds after every eviction/load step.
    """
    if plan.source_fingerprint != state.fingerprint():
        raise ContractError("plan/state mismatch: plan was computed from a different state")
    new = state.copy()
    for group in plan.groups:
        apply_group_inplace(new, group, plan.budget_bytes, plan.expert_bytes)
    new.check()
    return new, plan.estimated_transfer_s


def ensure_layer_resident(
    state: ResidencyState,
    layer: int,
    expert_ids,
    budget: MemoryBudget,
    expert_bytes: int,
) -> PlanGroup:
    """Reactive single-layer load for standard serving: evict FIFO among
    residents not required by this layer, then load the missing experts.
    Mutates the state and returns the executed group."""
    if expert_bytes > budget.fast_tier_bytes:
        raise UnservableError(
            f"expert of {expert_bytes} bytes exceeds budget {budget.fast_tier_bytes}"
        )
    req = {int(e) for e in expert_ids}
    loads = [(layer, e) for e in sorted(req) if (layer, e) not in state.resident]
    steps: list[tuple[str, Key]] = []
    for key in loads:
        while state.used_bytes + expert_bytes > budget.fast_tier_bytes:
            victim = None
            for cand in state.fifo_order:
                if not (cand[0] == layer and cand[1] in req):
                    victim = cand
                    break
            if victim is None:
                victim = state.fifo_order[0]  # working set exceeds budget
            state.used_bytes -= state.resident.pop(victim)
            state.fifo_order.remove(victim)
            steps.append(("evict", victim))
        state.resident[key] = expert_bytes
        state.fifo_order.append(key)
        state.used_bytes += expert_bytes
        steps.append(("load", key))
    transfer_s = (
        len(loads) * expert_bytes / budget.bandwidth_bytes_per_s
        + budget.per_transfer_latency_s * len(loads)
    )
    return PlanGroup(layer=layer, steps=steps, prefetchable=False,
                     transfer_s=transfer_s)


def effective_utilization(state: ResidencyState, activated: set[Key]) -> float:
    """Bytes of activated resident experts over all resident bytes."""
    missing = [k for k in activated if k not in state.resident]
    if missing:
        raise ContractError(f"activated experts not resident: {missing[:3]}")
    if state.used_bytes == 0:
        return 1.0
    active_bytes = sum(state.resident[k] for k in activated)
    return active_bytes / state.used_bytes


def memory_reduction(table, model) -> float:
    """1 - (bytes of distinct experts the table requires) / (total expert bytes).

    Non-expert parameters are excluded from both terms; report them
    separately via ``model.non_expert_bytes()``.
    """
    required = table.required_experts()
    required_bytes = len(required) * model.expert_bytes_each()
    return 1.0 - required_bytes / model.total_expert_bytes()
