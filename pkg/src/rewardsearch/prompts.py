"""Prompt templates for every backend exchange.

Templates are `string.Template` texts ($name placeholders) so literal JSON
braces never collide with substitution. `render` is pure: same template id
and context always produce the same messages, and a missing context key
raises instead of leaving a placeholder behind.
"""

from __future__ import annotations

import json
from string import Template

from .llm import ChatRequest

__all__ = [
    "TEMPLATE_IDS",
    "render",
    "build_groups_block",
    "parse_groups_block",
    "parse_suggestions_block",
    "PromptError",
]


class PromptError(Exception):
    pass


_DSL_RULES = """\
Reward components are written in a small expression language:
  let name = expression;  (zero or more bindings, then one final expression)
Operators: + - * / unary-minus, comparisons (< <= > >= == !=) yielding 1.0/0.0.
Functions: min(a,b,...), max(a,b,...), abs(x), exp(x), sqrt(x), clamp(x,lo,hi),
if(cond, then, else). Only the listed observation names may be used."""

_SYSTEM: dict[str, str] = {
    "task_description": "You design reward functions for a multi-vehicle data-collection control task.",
    "meta_advise": "You review reinforcement-learning training outcomes and advise on environment or requirement changes.",
    "component_gen": "You write one reward component at a time in a small expression language.",
    "critic": "You repair reward components that failed their requirement during training.",
    "weight_init": "You propose initial scalar weights for combining reward components.",
    "search_suggest": "You steer a weight search over reward components using training feedback.",
    "search_emit": "You convert weight-adjustment suggestions into a strict JSON directive format.",
    "summarize_rephrase": "You rephrase training diagnostics into short plain language.",
}

_USER: dict[str, Template] = {
    "task_description": Template(
        """Environment:
$env_block

Requirements (each becomes one reward component):
$requirements_block

Observation names available to reward expressions:
$schema_block

"""
        + _DSL_RULES
    ),
    "component_gen": Template(
        """requirement: $req_id
description: $req_text
threshold: metric $metric must satisfy $comparator $threshold per episode.

Observation names available:
$schema_block

"""
        + _DSL_RULES
        + """

Write ONE reward component for this requirement only. Reward desired
behaviour with higher values. Reply with exactly one fenced block:
```rdsl
<expression>
```"""
    ),
    "critic": Template(
        """requirement: $req_id
current component:
```rdsl
$component_source
```
training verdict: $verdict
reason: $reason
episode tail metrics: $tail_block

Observation names available:
$schema_block

First state in one sentence what is wrong with the current component, then
reply with exactly one corrected component in a fenced block:
```rdsl
<expression>
```"""
    ),
    "meta_advise": Template(
        """The search finished without satisfying every requirement.

Requirements:
$requirements_block

Final verdicts:
$verdicts_block

Best group weights: $weights_block
Episode tail metrics: $tail_block

Suggest concrete changes to the environment configuration or to the
requirement thresholds that would make the remaining failures attainable.
Answer in plain prose."""
    ),
    "weight_init": Template(
        """Reward components and their measured magnitude statistics under a
uniform-random probe policy:
$magnitudes_block

Propose one positive weight per component so the weighted terms land on a
comparable scale (target scale $target_scale). Reply with a JSON object
mapping component name to weight."""
    ),
    "search_suggest": Template(
        """Weight search, round $round (rounds remaining after this one: $budget_left).
Requirements:
$requirements_block

Current weight groups with their training verdicts:
[GROUPS]
$groups_json
[/GROUPS]

Propose exactly $n_slots replacement groups, one line per slot, using ONLY
this grammar (factors must be positive; FINETUNE factors must stay within
[0.8, 1.25]):
  slot <k>: base <group-id>, KEEP
  slot <k>: base <group-id>, SCALE <weight> x<factor>[, SCALE <weight> x<factor>...]
  slot <k>: base <group-id>, FINETUNE <weight> x<factor>
  slot <k>: base <group-id>, CROSSOVER <parent-id> <parent-id>[...]
A CROSSOVER line combines the listed parents' changes relative to the base
group. Give one short sentence of rationale before the slot lines."""
    ),
    "search_emit": Template(
        """Convert the suggestions below into the strict directive JSON format.

[GROUPS]
$groups_json
[/GROUPS]

[SUGGESTIONS]
$suggestions
[/SUGGESTIONS]

Reply with ONLY a JSON object shaped exactly like:
{"directives": [{"slot": 1, "base": "<group-id>", "ops": {"<weight>": {"op": "SCALE", "factor": 0.2}}, "crossover": []}, ...]}
with one entry per slot 1..$n_slots. "op" is one of KEEP, SCALE, FINETUNE;
KEEP takes no factor. "crossover" lists parent group ids (empty when the
slot is a plain mutation)."""
    ),
    "summarize_rephrase": Template(
        """Rephrase this training diagnostic for a human reader in at most two
sentences, keeping every number:
$headline"""
    ),
}

TEMPLATE_IDS = tuple(sorted(_USER))


def render(template_id: str, context: dict, *, model: str = "scripted",
           temperature: float | None = None) -> ChatRequest:
    if template_id not in _USER:
        raise PromptError(f"unknown template id: {template_id}")
    try:
        body = _USER[template_id].substitute(context)
    except KeyError as err:
        raise PromptError(f"template {template_id} missing context key {err.args[0]!r}") from None
    kwargs = {}
    if temperature is not None:
        kwargs["temperature"] = temperature
    return ChatRequest(
        messages=(("system", _SYSTEM[template_id]), ("user", body)),
        model=model,
        template_id=template_id,
        **kwargs,
    )


def build_groups_block(groups: dict, summaries: dict) -> str:
    """JSON description of the current population for search prompts.

    `groups` maps group id -> weight mapping; `summaries` maps group id ->
    TrainingSummary (duck-typed: needs verdicts, dominance, headline,
    tail_metrics attributes).
    """
    payload = {}
    for gid in sorted(groups, key=_group_sort_key):
        summary = summaries[gid]
        dominant = max(summary.dominance, key=lambda k: (summary.dominance[k], k)) if summary.dominance else ""
        payload[gid] = {
            "weights": {k: groups[gid][k] for k in sorted(groups[gid])},
            "verdicts": {rid: d.verdict for rid, d in sorted(summary.verdicts.items())},
            "margins": {rid: d.margin for rid, d in sorted(summary.verdicts.items())},
            "trends": {rid: d.trend for rid, d in sorted(summary.verdicts.items())},
            "dominance": {k: summary.dominance[k] for k in sorted(summary.dominance)},
            "dominant": dominant,
            "headline": summary.headline,
            "tail": {k: summary.tail_metrics[k] for k in sorted(summary.tail_metrics)},
        }
    return json.dumps(payload, sort_keys=True, indent=1)


def _group_sort_key(gid: str):
    digits = "".join(ch for ch in gid if ch.isdigit())
    return (int(digits) if digits else 0, gid)


def parse_groups_block(text: str) -> dict:
    """Inverse of embedding build_groups_block between [GROUPS] markers."""
    start = text.find("[GROUPS]")
    end = text.find("[/GROUPS]")
    if start < 0 or end < 0 or end <= start:
        raise PromptError("no [GROUPS] block in prompt")
    return json.loads(text[start + len("[GROUPS]"):end])


def parse_suggestions_block(text: str) -> str:
    start = text.find("[SUGGESTIONS]")
    end = text.find("[/SUGGESTIONS]")
    if start < 0 or end < 0 or end <= start:
        raise PromptError("no [SUGGESTIONS] block in prompt")
    return text[start + len("[SUGGESTIONS]"):end].strip()
