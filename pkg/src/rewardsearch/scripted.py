"""Deterministic rule table standing in for a language model.

Every pipeline exchange (component writing, critic repair, search
steering) gets an ordered rule keyed on the request content. Responses are
pure functions of the prompt, so scripted runs are bit-reproducible and the
transcript hash chain is stable across re-runs.
"""

from __future__ import annotations

import json
import re
from typing import Mapping

from . import prompts, rdsl, rewards
from .analyzer import DOMINANCE_PHRASE
from .llm import ChatRequest, ScriptedBackend, ScriptedRule

__all__ = [
    "default_rules",
    "scripted_backend",
    "parse_suggestion_lines",
    "propose_slots",
]

_REQ_RE = re.compile(r"^requirement:\s*(\S+)", re.MULTILINE)
_NSLOTS_RE = re.compile(r"exactly (\d+) replacement groups|per slot 1\.\.(\d+)")

_COLLISION_SIGN_REASON = "collision events increase this component's value"
_BORDER_SIGN_REASON = "border crossings increase this component's value"
_OVERFLOW_SIGN_REASON = "overflow events increase this component's value"


def _req_id(request: ChatRequest) -> str | None:
    m = _REQ_RE.search(request.text())
    return m.group(1) if m else None


def _reference_source(req_id: str) -> str | None:
    cid = rewards.COMPONENT_FOR_REQUIREMENT.get(req_id)
    if cid is None:
        return None
    comp = rewards.reference_components()[cid]
    return rdsl.print_program(comp.program)


def _fence(source: str) -> str:
    return f"```rdsl\n{source}\n```"


# ---------------------------------------------------------------------------
# search steering


def _gid_num(gid: str) -> int:
    digits = "".join(ch for ch in gid if ch.isdigit())
    return int(digits) if digits else 0


def _ratio(weights: Mapping[str, float]) -> float | None:
    if "w_service" in weights and weights.get("w_ec"):
        return weights["w_service"] / weights["w_ec"]
    return None


def propose_slots(groups: dict, n_slots: int) -> tuple[str, list[str]]:
    """Case analysis over the population; returns (rationale, slot lines).

    Case order: energy-dominated stall (all groups overflowing, energy term
    dominating) -> service shortfall -> safety failure -> energy overrun ->
    fine-tune fallback. Each case keeps one slot on the group with the best
    service-to-energy weight ratio while no group has fixed the overflow yet,
    so the best ratio found so far is never thrown away.
    """
    gids = sorted(groups, key=_gid_num)
    verdict_sets = {gid: groups[gid].get("verdicts", {}) for gid in gids}
    weight_sets = {gid: groups[gid].get("weights", {}) for gid in gids}

    def n_yes(gid: str) -> int:
        return sum(1 for v in verdict_sets[gid].values() if v == "YES")

    def min_margin(gid: str) -> float:
        margins = groups[gid].get("margins", {})
        return min(margins.values(), default=0.0)

    best = max(gids, key=lambda g: (n_yes(g), min_margin(g), -_gid_num(g)))
    ratios = {gid: _ratio(weight_sets[gid]) for gid in gids}
    with_ratio = [gid for gid in gids if ratios[gid] is not None]
    rmax = max(with_ratio, key=lambda g: (ratios[g], -_gid_num(g))) if with_ratio else None

    standard = (
        {"no_collision", "no_border", "overflow", "energy"} <= set(verdict_sets[best])
        and {"w_col", "w_border", "w_service", "w_ec"} <= set(weight_sets[best])
    )

    def line(slot: int, base: str, *clauses: str) -> str:
        return f"slot {slot}: base {base}, " + ", ".join(clauses)

    lines: list[str] = []
    rationale = ""
    if standard and rmax is not None:
        all_overflow_no = all(verdict_sets[g].get("overflow") == "NO" for g in gids)
        energy_frozen = any(
            groups[g].get("dominant") == "w_ec"
            and groups[g].get("dominance", {}).get("w_ec", 0.0) > 0.5
            for g in gids
        )
        v = verdict_sets[best]
        if all_overflow_no and energy_frozen:
            rationale = (
                "The energy term dominates every group and the vehicles idle while "
                "node buffers overflow; cutting the energy weight on the best-ratio "
                "group restores the service-to-energy balance."
            )
            lines = [
                line(1, rmax, "SCALE w_ec x0.04"),
                line(2, rmax, "SCALE w_ec x0.2", "SCALE w_service x5"),
                line(3, rmax, "SCALE w_ec x0.008"),
                line(4, rmax, "SCALE w_service x5"),
                line(5, rmax, "KEEP"),
            ]
        elif v.get("overflow") == "NO":
            rationale = (
                "Data service still falls short in the best group; boosting the "
                "service weight at several strengths while keeping the best "
                "service-to-energy ratio seen so far."
            )
            lines = [
                line(1, best, "SCALE w_service x5"),
                line(2, best, "SCALE w_service x2"),
                line(3, best, "SCALE w_ec x0.2"),
                line(4, best, "SCALE w_service x5", "SCALE w_border x2"),
                line(5, rmax, "KEEP"),
            ]
        elif v.get("no_collision") == "NO" or v.get("no_border") == "NO":
            failing = []
            if v.get("no_collision") == "NO":
                failing.append("w_col")
            if v.get("no_border") == "NO":
                failing.append("w_border")
            boost = lambda f: [f"SCALE {w} x{f}" for w in failing]
            rationale = (
                "Service and energy hold but safety events persist; raising the "
                "failing safety weights at several strengths."
            )
            lines = [
                line(1, best, *boost(5)),
                line(2, best, *boost(2)),
                line(3, best, *boost(5), "FINETUNE w_ec x1.25"),
                line(4, best, *boost(3)),
                line(5, best, "KEEP"),
            ]
        elif v.get("energy") == "NO":
            rationale = (
                "Only the energy budget is exceeded; raising the energy weight to "
                "damp motion, with a mild service reduction as a variant."
            )
            lines = [
                line(1, best, "SCALE w_ec x5"),
                line(2, best, "SCALE w_ec x2"),
                line(3, best, "SCALE w_ec x5", "FINETUNE w_service x0.8"),
                line(4, best, "SCALE w_ec x10"),
                line(5, best, "KEEP"),
            ]

    if not lines:
        rationale = "No single failure pattern stands out; fine-tuning around the best group."
        names = sorted(weight_sets[best]) or ["w"]
        factors = ["x1.1", "x0.9", "x1.25", "x0.8"]
        lines = []
        for slot in range(1, 6):
            if slot <= len(factors):
                name = names[(slot - 1) % len(names)]
                lines.append(line(slot, best, f"FINETUNE {name} {factors[slot - 1]}"))
            else:
                lines.append(line(slot, best, "KEEP"))

    # pad or trim to the requested slot count
    while len(lines) < n_slots:
        lines.append(line(len(lines) + 1, best, "KEEP"))
    lines = lines[:n_slots]
    lines = [re.sub(r"^slot \d+", f"slot {i + 1}", ln) for i, ln in enumerate(lines)]
    return rationale, lines


_LINE_RE = re.compile(r"^\s*slot\s+(\d+)\s*:\s*base\s+(\S+?)\s*,\s*(.+?)\s*$", re.IGNORECASE)
_SCALE_RE = re.compile(r"^(SCALE|FINETUNE)\s+(\S+)\s+x([-+0-9.eE]+)$", re.IGNORECASE)
_CROSS_RE = re.compile(r"^CROSSOVER\s+(.+)$", re.IGNORECASE)


def parse_suggestion_lines(text: str) -> list[dict]:
    """Parse slot suggestion lines back into directive dicts.

    Lines that do not match the slot grammar (rationale sentences, rejection
    notes) are ignored.
    """
    out = []
    for raw in text.splitlines():
        m = _LINE_RE.match(raw)
        if not m:
            continue
        slot, base, rest = int(m.group(1)), m.group(2), m.group(3)
        ops: dict[str, dict] = {}
        crossover: list[str] = []
        ok = True
        for clause in (c.strip() for c in rest.split(",")):
            if not clause:
                continue
            if clause.upper() == "KEEP":
                continue
            sm = _SCALE_RE.match(clause)
            if sm:
                ops[sm.group(2)] = {"op": sm.group(1).upper(), "factor": float(sm.group(3))}
                continue
            cm = _CROSS_RE.match(clause)
            if cm:
                crossover.extend(cm.group(1).split())
                continue
            ok = False
        if ok:
            out.append({"slot": slot, "base": base, "ops": ops, "crossover": crossover})
    out.sort(key=lambda d: d["slot"])
    return out


def _n_slots(text: str, default: int) -> int:
    m = _NSLOTS_RE.search(text)
    if m:
        return int(m.group(1) or m.group(2))
    return default


# ---------------------------------------------------------------------------
# rule table


def default_rules(component_overrides: Mapping[str, str] | None = None) -> list[ScriptedRule]:
    """The standard table. `component_overrides` maps requirement id to an
    expression source that the component-writing rule returns instead of the
    built-in reference (used to study the critic repairing a flawed draft)."""
    overrides = dict(component_overrides or {})

    def gen_matches(req: ChatRequest) -> bool:
        if req.template_id != "component_gen":
            return False
        rid = _req_id(req)
        return rid is not None and (rid in overrides or _reference_source(rid) is not None)

    def gen_respond(req: ChatRequest) -> str:
        rid = _req_id(req)
        src = overrides.get(rid) or _reference_source(rid)
        return f"Component for {rid}: dense guidance plus an event penalty.\n{_fence(src)}"

    def critic_matches(req: ChatRequest) -> bool:
        if req.template_id != "critic":
            return False
        rid = _req_id(req)
        return rid is not None and _reference_source(rid) is not None

    def critic_respond(req: ChatRequest) -> str:
        rid = _req_id(req)
        text = req.text()
        corrected = _reference_source(rid)
        if _COLLISION_SIGN_REASON in text:
            diagnosis = (
                "The component's return rises with collision counts, so it pays a "
                "bonus for closing distance inside the collision zone; the proximity "
                "term must enter with a negative sign."
            )
        elif _BORDER_SIGN_REASON in text:
            diagnosis = (
                "The component's return rises with border crossings, so it rewards "
                "leaving the safe region; the margin term must enter with a negative sign."
            )
        elif _OVERFLOW_SIGN_REASON in text:
            diagnosis = (
                "The component's return rises with overflow events, so it rewards "
                "letting buffers fill; overflow must be penalized, not paid."
            )
        else:
            diagnosis = "The component does not reward the behaviour its requirement asks for."
        return f"{diagnosis}\n{_fence(corrected)}"

    def suggest_matches(req: ChatRequest) -> bool:
        return req.template_id == "search_suggest" and "[GROUPS]" in req.text()

    def suggest_respond(req: ChatRequest) -> str:
        text = req.text()
        groups = prompts.parse_groups_block(text)
        rationale, lines = propose_slots(groups, _n_slots(text, len(groups)))
        return rationale + "\n" + "\n".join(lines)

    def emit_matches(req: ChatRequest) -> bool:
        return req.template_id == "search_emit" and "[SUGGESTIONS]" in req.text()

    def emit_respond(req: ChatRequest) -> str:
        text = req.text()
        directives = parse_suggestion_lines(prompts.parse_suggestions_block(text))
        return json.dumps({"directives": directives})

    def init_matches(req: ChatRequest) -> bool:
        return req.template_id == "weight_init"

    def init_respond(req: ChatRequest) -> str:
        text = req.text()
        m = re.search(r"target scale ([-+0-9.eE]+)", text)
        target = float(m.group(1)) if m else 1.0
        start, end = text.find("{"), text.rfind("}")
        weights = {}
        if start >= 0 and end > start:
            try:
                stats = json.loads(text[start:end + 1])
                for cid, entry in stats.items():
                    mean = entry["mean_abs"] if isinstance(entry, dict) else float(entry)
                    if mean > 0:
                        weights[cid] = target / (mean + 1e-9)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                weights = {}
        return json.dumps(weights, sort_keys=True)

    def advise_matches(req: ChatRequest) -> bool:
        return req.template_id == "meta_advise"

    def advise_respond(req: ChatRequest) -> str:
        text = req.text()
        hints = []
        if "overflow" in text and "NO" in text:
            hints.append(
                "raise the per-node overflow allowance or lower the node fill rates "
                "so the service demand matches what the fleet can reach in one episode"
            )
        if "energy" in text and "NO" in text:
            hints.append("loosen the energy budget or shorten the episode")
        if DOMINANCE_PHRASE in text:
            hints.append("re-balance the weights before searching further")
        if not hints:
            hints.append(
                "verify that each requirement is attainable in isolation before "
                "combining them"
            )
        return (
            "The remaining failures look structural rather than a weight issue: "
            + "; ".join(hints)
            + "."
        )

    def rephrase_matches(req: ChatRequest) -> bool:
        return req.template_id == "summarize_rephrase"

    def rephrase_respond(req: ChatRequest) -> str:
        text = req.text()
        marker = "keeping every number:"
        idx = text.find(marker)
        body = text[idx + len(marker):].strip() if idx >= 0 else text.strip()
        return body

    return [
        ScriptedRule("critic", critic_matches, critic_respond),
        ScriptedRule("component_gen", gen_matches, gen_respond),
        ScriptedRule("search_suggest", suggest_matches, suggest_respond),
        ScriptedRule("search_emit", emit_matches, emit_respond),
        ScriptedRule("weight_init", init_matches, init_respond),
        ScriptedRule("meta_advise", advise_matches, advise_respond),
        ScriptedRule("summarize_rephrase", rephrase_matches, rephrase_respond),
    ]


def scripted_backend(component_overrides: Mapping[str, str] | None = None) -> ScriptedBackend:
    return ScriptedBackend(default_rules(component_overrides))
