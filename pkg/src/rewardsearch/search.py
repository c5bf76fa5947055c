"""Weight-group search: magnitude-balanced init, directed mutation/crossover
rounds driven by a chat backend, and a naive random baseline.

Population protocol: every round holds exactly K groups. A backend exchange
proposes K replacement directives (mutations of / crossovers between the
current groups); training verdicts on the new groups feed the next round.
The loop stops at the first group whose requirements all read YES, or when
the round budget is exhausted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import analyzer, prompts, rewards, td3
from .analyzer import ParetoArchive, TrainingSummary, summarize, tail_metrics
from .llm import Backend, ChatRequest
from .rewards import MagnitudeReport, Requirement, WeightedReward, probe_values

__all__ = [
    "WeightGroup",
    "Op",
    "Directive",
    "DirectiveError",
    "SearchError",
    "SearchResult",
    "balanced_weights",
    "init_weights",
    "apply_mutation",
    "apply_crossover",
    "apply_directive",
    "validate_directives",
    "naive_directives",
    "next_generation",
    "search_loop",
    "EMPHASIS_SCHEDULE",
]

OP_NAMES = ("KEEP", "SCALE", "FINETUNE")
FINETUNE_LO = 0.8
FINETUNE_HI = 1.25
MAGNITUDE_EPS = 1e-9

# Multiplier schedules applied on top of the balanced weights to diversify
# the initial population: slot 1 keeps the balance, later slots emphasize
# service throughput, energy thrift, safety, and a service-vs-energy trade.
EMPHASIS_SCHEDULE: tuple[dict[str, float], ...] = (
    {},
    {"w_service": 5.0},
    {"w_ec": 5.0},
    {"w_col": 5.0, "w_border": 5.0},
    {"w_service": 5.0, "w_ec": 0.2},
)


class SearchError(Exception):
    pass


class DirectiveError(Exception):
    """Invalid directive payload; `code` names the specific violation."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class WeightGroup:
    id: str
    weights: dict[str, float]
    origin: str = "init"  # init | mutation | crossover
    base_id: str | None = None
    parent_ids: tuple[str, ...] = ()
    ops_applied: dict[str, str] = field(default_factory=dict)

    def lineage(self) -> dict:
        return {
            "origin": self.origin,
            "base": self.base_id,
            "parents": list(self.parent_ids),
            "ops": dict(self.ops_applied),
        }

    def to_dict(self) -> dict:
        return {"id": self.id, "weights": dict(self.weights), "lineage": self.lineage()}


@dataclass(frozen=True)
class Op:
    op: str
    factor: float | None = None

    def describe(self) -> str:
        if self.op == "KEEP":
            return "KEEP"
        return f"{self.op} x{self.factor!r}"


@dataclass(frozen=True)
class Directive:
    slot: int
    base: str
    ops: dict[str, Op]
    crossover: tuple[str, ...] = ()


def balanced_weights(report: MagnitudeReport, target_scale: float = 1.0) -> dict[str, float]:
    """w_k = target_scale / (mean |component value| + eps).

    Scales every weighted term onto a comparable magnitude so no component
    silently dominates the summed reward from step one.
    """
    out: dict[str, float] = {}
    for cid in sorted(report.stats):
        mean_abs = report.stats[cid]["mean_abs"]
        if not math.isfinite(mean_abs) or mean_abs < 0:
            raise SearchError(f"invalid probe magnitude for component {cid}: {mean_abs!r}")
        if mean_abs <= 0:
            raise SearchError(
                f"component {cid} never produced a nonzero value under the probe policy; "
                "it cannot be balanced"
            )
        out[cid] = target_scale / (mean_abs + MAGNITUDE_EPS)
    return out


def init_weights(
    report: MagnitudeReport,
    k: int = 5,
    target_scale: float = 1.0,
    multipliers: Mapping[str, float] | None = None,
) -> list[WeightGroup]:
    """Initial population: balanced weights times the emphasis schedule.

    `multipliers` optionally perturbs every group's weights after the
    schedule (used to study recovery from a deliberately bad scale).
    """
    if k < 1:
        raise SearchError(f"population size must be >= 1, got {k}")
    base = balanced_weights(report, target_scale)
    groups = []
    for slot in range(1, k + 1):
        schedule = EMPHASIS_SCHEDULE[(slot - 1) % len(EMPHASIS_SCHEDULE)]
        weights = dict(base)
        applied = {}
        for name, factor in schedule.items():
            if name in weights:
                weights[name] *= factor
                applied[name] = f"SCALE x{factor!r}"
        if multipliers:
            for name, factor in multipliers.items():
                if name not in weights:
                    raise SearchError(f"initial multiplier names unknown component {name}")
                weights[name] *= factor
        groups.append(WeightGroup(id=f"g{slot}", weights=weights, origin="init", ops_applied=applied))
    return groups


def apply_mutation(base: WeightGroup, ops: Mapping[str, Op], new_id: str) -> WeightGroup:
    weights = dict(base.weights)
    applied = {}
    for name in sorted(ops):
        op = ops[name]
        if name not in weights:
            raise DirectiveError("unknown_weight", f"{name} is not a component weight")
        if op.op == "KEEP":
            applied[name] = "KEEP"
            continue
        weights[name] = weights[name] * float(op.factor)
        applied[name] = op.describe()
    return WeightGroup(
        id=new_id,
        weights=weights,
        origin="mutation",
        base_id=base.id,
        ops_applied=applied,
    )


def apply_crossover(start: WeightGroup, parents: Sequence[WeightGroup], new_id: str) -> WeightGroup:
    """Combine each parent's change relative to `start` multiplicatively:

        w_k(out) = w_k(start) * prod_p (w_k(p) / w_k(start))
                 = prod_p w_k(p) / w_k(start)^(len(parents) - 1)

    Computed in the second form: a single parent carries over bit-exact
    (`p / 1.0`), and two parents commute bit-exact in the numerator; the
    ratio form would round twice and miss both identities.
    """
    if not parents:
        raise DirectiveError("unknown_parent", "crossover requires at least one parent")
    weights = {}
    for name, start_val in start.weights.items():
        prod = 1.0
        for p in parents:
            prod *= p.weights[name]
        weights[name] = prod / start_val ** (len(parents) - 1)
    return WeightGroup(
        id=new_id,
        weights=weights,
        origin="crossover",
        base_id=start.id,
        parent_ids=tuple(p.id for p in parents),
    )


def apply_directive(inputs: Mapping[str, WeightGroup], directive: Directive, new_id: str) -> WeightGroup:
    base = inputs[directive.base]
    if directive.crossover:
        group = apply_crossover(base, [inputs[p] for p in directive.crossover], new_id)
        if directive.ops:
            mutated = apply_mutation(group, directive.ops, new_id)
            group = WeightGroup(
                id=new_id,
                weights=mutated.weights,
                origin="crossover",
                base_id=base.id,
                parent_ids=group.parent_ids,
                ops_applied=mutated.ops_applied,
            )
        return group
    if directive.ops:
        return apply_mutation(base, directive.ops, new_id)
    return WeightGroup(id=new_id, weights=dict(base.weights), origin="mutation", base_id=base.id,
                       ops_applied={})


def validate_directives(
    payload,
    weight_names: Sequence[str],
    input_ids: Sequence[str],
    k: int,
) -> list[Directive]:
    """Parse and validate a directive payload (JSON text or parsed object).

    Raises DirectiveError with a distinct code per violation class:
    bad_json, wrong_count, slot_range, slot_duplicate, unknown_base,
    unknown_weight, bad_op, bad_factor, finetune_band, unknown_parent,
    parent_is_base.
    """
    if isinstance(payload, str):
        text = payload.strip()
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            raise DirectiveError("bad_json", "no JSON object in reply")
        try:
            payload = json.loads(text[start:end + 1])
        except json.JSONDecodeError as err:
            raise DirectiveError("bad_json", f"reply is not valid JSON: {err}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("directives"), list):
        raise DirectiveError("bad_json", 'top level must be {"directives": [...]}')
    entries = payload["directives"]
    if len(entries) != k:
        raise DirectiveError("wrong_count", f"expected {k} directives, got {len(entries)}")

    names = set(weight_names)
    ids = set(input_ids)
    seen_slots: set[int] = set()
    out: list[Directive] = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise DirectiveError("bad_json", "each directive must be an object")
        slot = entry.get("slot")
        if not isinstance(slot, int) or isinstance(slot, bool) or not (1 <= slot <= k):
            raise DirectiveError("slot_range", f"slot must be an integer in 1..{k}, got {slot!r}")
        if slot in seen_slots:
            raise DirectiveError("slot_duplicate", f"slot {slot} appears more than once")
        seen_slots.add(slot)
        base = entry.get("base")
        if base not in ids:
            raise DirectiveError("unknown_base", f"base {base!r} is not a current group id")
        ops_raw = entry.get("ops", {})
        if not isinstance(ops_raw, dict):
            raise DirectiveError("bad_json", "ops must be an object")
        ops: dict[str, Op] = {}
        for name, spec in ops_raw.items():
            if name not in names:
                raise DirectiveError("unknown_weight", f"{name!r} is not a component weight")
            if not isinstance(spec, dict):
                raise DirectiveError("bad_json", f"op for {name} must be an object")
            op = spec.get("op")
            if op not in OP_NAMES:
                raise DirectiveError("bad_op", f"op for {name} must be one of {OP_NAMES}, got {op!r}")
            factor = spec.get("factor")
            if op == "KEEP":
                if factor is not None:
                    raise DirectiveError("bad_op", f"KEEP for {name} must not carry a factor")
                ops[name] = Op("KEEP")
                continue
            if not isinstance(factor, (int, float)) or isinstance(factor, bool) \
                    or not math.isfinite(float(factor)) or float(factor) <= 0:
                raise DirectiveError("bad_factor", f"factor for {name} must be a positive finite number, got {factor!r}")
            factor = float(factor)
            if op == "FINETUNE" and not (FINETUNE_LO <= factor <= FINETUNE_HI):
                raise DirectiveError(
                    "finetune_band",
                    f"FINETUNE factor for {name} must lie in [{FINETUNE_LO}, {FINETUNE_HI}], got {factor!r}",
                )
            ops[name] = Op(op, factor)
        cross_raw = entry.get("crossover", [])
        if not isinstance(cross_raw, list):
            raise DirectiveError("bad_json", "crossover must be a list of group ids")
        parents = []
        for pid in cross_raw:
            if pid not in ids:
                raise DirectiveError("unknown_parent", f"crossover parent {pid!r} is not a current group id")
            if pid == base:
                raise DirectiveError("parent_is_base", f"crossover parent {pid!r} equals the base group")
            parents.append(pid)
        out.append(Directive(slot=slot, base=base, ops=ops, crossover=tuple(parents)))
    out.sort(key=lambda d: d.slot)
    return out


def naive_directives(
    input_ids: Sequence[str],
    weight_names: Sequence[str],
    k: int,
    rng: np.random.Generator,
) -> list[Directive]:
    """Baseline proposer: each slot rescales one random weight of one random
    group by a uniform factor in [0.5, 2]."""
    ids = sorted(input_ids, key=_gid_key)
    names = sorted(weight_names)
    out = []
    for slot in range(1, k + 1):
        base = ids[int(rng.integers(len(ids)))]
        name = names[int(rng.integers(len(names)))]
        factor = float(rng.uniform(0.5, 2.0))
        out.append(Directive(slot=slot, base=base, ops={name: Op("SCALE", factor)}))
    return out


def _gid_key(gid: str):
    digits = "".join(ch for ch in gid if ch.isdigit())
    return (int(digits) if digits else 0, gid)


def _requirements_block(requirements: Mapping[str, Requirement]) -> str:
    lines = []
    for rid in sorted(requirements):
        req = requirements[rid]
        lines.append(
            f"- {req.id} ({req.kind}): metric {req.metric} {req.comparator} {req.threshold!r}"
        )
    return "\n".join(lines)


def next_generation(
    inputs: Mapping[str, WeightGroup],
    summaries: Mapping[str, TrainingSummary],
    requirements: Mapping[str, Requirement],
    backend: Backend | None,
    strategy: str,
    rng: np.random.Generator,
    round_index: int,
    budget_left: int,
    new_ids: Sequence[str],
) -> list[WeightGroup]:
    """Produce the next K groups from the current population.

    erfsl strategy: two backend exchanges (free-text suggestion, then strict
    JSON emission); one corrective re-prompt is allowed if the JSON is
    invalid. naive strategy: random single-weight rescales, no backend.
    """
    k = len(inputs)
    if len(new_ids) != k:
        raise SearchError(f"need {k} new ids, got {len(new_ids)}")
    weight_names = sorted(next(iter(inputs.values())).weights)
    input_ids = sorted(inputs, key=_gid_key)

    if strategy == "naive":
        directives = naive_directives(input_ids, weight_names, k, rng)
    elif strategy == "erfsl":
        if backend is None:
            raise SearchError("erfsl strategy requires a backend")
        groups_json = prompts.build_groups_block(
            {gid: g.weights for gid, g in inputs.items()}, dict(summaries)
        )
        req_block = _requirements_block(requirements)
        suggest = backend.complete(prompts.render("search_suggest", {
            "round": round_index,
            "budget_left": budget_left,
            "requirements_block": req_block,
            "groups_json": groups_json,
            "n_slots": k,
        }))
        suggestions = suggest.text
        attempt_notes = ""
        directives = None
        for _ in range(2):  # one corrective re-prompt on invalid JSON
            emit = backend.complete(prompts.render("search_emit", {
                "groups_json": groups_json,
                "suggestions": suggestions + attempt_notes,
                "n_slots": k,
            }))
            try:
                directives = validate_directives(emit.text, weight_names, input_ids, k)
                break
            except DirectiveError as err:
                attempt_notes = (
                    f"\n\nPrevious attempt was rejected ({err.code}): {err.message}. "
                    "Reply again with only the corrected JSON object."
                )
                last_err = err
        if directives is None:
            raise SearchError(f"backend produced invalid directives twice: {last_err}")
    else:
        raise SearchError(f"unknown strategy {strategy!r} (expected erfsl or naive)")

    return [
        apply_directive(inputs, d, new_ids[d.slot - 1])
        for d in directives
    ]


@dataclass
class SearchResult:
    satisfied: bool
    iterations: int | None
    satisfying_group: str | None
    final_weights: dict[str, float] | None
    best_group: str
    best_verdicts: dict[str, str]
    rounds: list[dict]
    ratio_history: list[float | None]
    pareto: ParetoArchive
    strategy: str

    def unsatisfied_requirements(self) -> list[str]:
        return [rid for rid, v in sorted(self.best_verdicts.items()) if v != "YES"]

    def to_dict(self) -> dict:
        return {
            "satisfied": self.satisfied,
            "iterations": self.iterations,
            "satisfying_group": self.satisfying_group,
            "final_weights": self.final_weights,
            "best_group": self.best_group,
            "best_verdicts": dict(self.best_verdicts),
            "unsatisfied_requirements": self.unsatisfied_requirements(),
            "ratio_history": list(self.ratio_history),
            "rounds": self.rounds,
            "strategy": self.strategy,
        }


def _service_energy_ratio(weights: Mapping[str, float]) -> float | None:
    if "w_service" in weights and "w_ec" in weights and weights["w_ec"] != 0:
        return weights["w_service"] / weights["w_ec"]
    return None


def _notify(sink, method: str, *args) -> None:
    fn = getattr(sink, method, None)
    if fn is not None:
        fn(*args)


def search_loop(
    world_config,
    components: Mapping[str, rewards.RewardComponent],
    requirements: Mapping[str, Requirement],
    backend: Backend | None = None,
    td3_config: td3.TD3Config | None = None,
    k: int = 5,
    max_iters: int = 10,
    strategy: str = "erfsl",
    target_scale: float = 1.0,
    seed: int = 0,
    probe_episodes: int = 30,
    initial_multipliers: Mapping[str, float] | None = None,
    initial_groups: Sequence[WeightGroup] | None = None,
    magnitudes: MagnitudeReport | None = None,
    trainer: Callable[[dict[str, float], int, str, int], td3.TrainingLog] | None = None,
    sink=None,
) -> SearchResult:
    """Run the full weight search.

    Iteration counting: the initial population is iteration 0; each
    mutation round adds one. `iterations` in the result is the round index
    whose population first contained an all-YES group (0 when the initial
    groups already satisfy everything), or None if the budget ran out.

    `trainer` defaults to fresh policy training per group; callers may
    substitute a caching wrapper (e.g. to resume a run from disk).
    """
    td3_config = td3_config or td3.TD3Config()
    rng = np.random.default_rng([seed, 0xC0FFEE])

    if trainer is None:
        def trainer(weights: dict[str, float], train_seed: int, group_id: str, round_index: int) -> td3.TrainingLog:
            return td3.train(world_config, weights, components, td3_config, seed=train_seed)

    if initial_groups is not None:
        groups = list(initial_groups)
        if len(groups) != k:
            raise SearchError(f"initial_groups must contain {k} groups, got {len(groups)}")
        report = magnitudes
    else:
        report = magnitudes if magnitudes is not None else probe_values(
            world_config, components, episodes=probe_episodes, seed=seed
        )
        _notify(sink, "on_probe", report)
        groups = init_weights(report, k=k, target_scale=target_scale, multipliers=initial_multipliers)
    _notify(sink, "on_init", groups)

    pareto = ParetoArchive()
    rounds: list[dict] = []
    ratio_history: list[float | None] = []
    best_group: WeightGroup | None = None
    best_summary: TrainingSummary | None = None
    best_key: tuple | None = None

    for round_index in range(max_iters + 1):
        _notify(sink, "on_round_start", round_index, groups)
        summaries: dict[str, TrainingSummary] = {}
        group_records = []
        for slot, group in enumerate(groups, start=1):
            train_seed = int(np.random.SeedSequence((seed, round_index, slot)).generate_state(1)[0])
            log = trainer(group.weights, train_seed, group.id, round_index)
            summary = summarize(log, group.weights, requirements, group_id=group.id)
            summaries[group.id] = summary
            tail = summary.tail_metrics
            pareto.update(tail.get("total_energy", 0.0), tail.get("overflow_per_node", 0.0),
                          group.id, round_index)
            _notify(sink, "on_group_result", round_index, group, log, summary)
            group_records.append({
                "id": group.id,
                "weights": dict(group.weights),
                "lineage": group.lineage(),
                "verdicts": {rid: d.verdict for rid, d in sorted(summary.verdicts.items())},
                "tail": dict(tail),
                "train_seed": train_seed,
            })
            n_yes = sum(1 for d in summary.verdicts.values() if d.verdict == "YES")
            min_margin = min((d.margin for d in summary.verdicts.values()), default=0.0)
            key = (n_yes, min_margin, -_gid_key(group.id)[0])
            if best_key is None or key > best_key:
                best_key, best_group, best_summary = key, group, summary

        ratios = [_service_energy_ratio(g.weights) for g in groups]
        present = [r for r in ratios if r is not None]
        round_ratio = max(present) if present else None
        ratio_history.append(round_ratio)

        winner = None
        for group in groups:  # lowest slot wins ties
            if summaries[group.id].all_yes():
                winner = group
                break
        rounds.append({
            "round": round_index,
            "groups": group_records,
            "max_service_energy_ratio": round_ratio,
            "satisfied_by": winner.id if winner is not None else None,
        })
        _notify(sink, "on_round_end", round_index, rounds[-1])

        if winner is not None:
            result = SearchResult(
                satisfied=True,
                iterations=round_index,
                satisfying_group=winner.id,
                final_weights=dict(winner.weights),
                best_group=winner.id,
                best_verdicts={rid: "YES" for rid in summaries[winner.id].verdicts},
                rounds=rounds,
                ratio_history=ratio_history,
                pareto=pareto,
                strategy=strategy,
            )
            _notify(sink, "on_result", result)
            return result

        if round_index == max_iters:
            break
        new_ids = [f"g{(round_index + 1) * k + s}" for s in range(1, k + 1)]
        groups = next_generation(
            {g.id: g for g in groups},
            summaries,
            requirements,
            backend,
            strategy,
            rng,
            round_index + 1,
            max_iters - round_index - 1,
            new_ids,
        )

    assert best_group is not None and best_summary is not None
    result = SearchResult(
        satisfied=False,
        iterations=None,
        satisfying_group=None,
        final_weights=dict(best_group.weights),
        best_group=best_group.id,
        best_verdicts={rid: d.verdict for rid, d in sorted(best_summary.verdicts.items())},
        rounds=rounds,
        ratio_history=ratio_history,
        pareto=pareto,
        strategy=strategy,
    )
    _notify(sink, "on_result", result)
    return result
