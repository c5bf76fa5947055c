"""Rule-based training-log analysis and the Pareto archive.

Turns a raw training log into the compact, deterministic summary the weight
searcher consumes: per-requirement YES/NO verdicts with margins and trends,
per-component dominance shares of the weighted return, and a short headline.
Keeping this stage rule-based (an optional backend pass may re-phrase the
headline, never the numbers) makes every downstream search decision
reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rewards import (
    COMPONENT_FOR_REQUIREMENT,
    Requirement,
    check_requirement,
)
from .td3 import TrainingLog

__all__ = [
    "VerdictDetail",
    "TrainingSummary",
    "ParetoArchive",
    "summarize",
    "verdict_feedback",
    "tail_metrics",
]

HEADLINE_LIMIT = 600
# fraction of episodes composing the tail window that verdicts are read from
TAIL_FRACTION = 0.2
# relative margin change between first and last quintile counting as a trend
TREND_THRESHOLD = 0.10
# |Pearson correlation| between an event metric and a component's episode
# return above which the directional reason text fires
CORRELATION_THRESHOLD = 0.3

DOMINANCE_PHRASE = "energy term dominates the return"


@dataclass(frozen=True)
class VerdictDetail:
    verdict: str  # YES | NO
    margin: float
    trend: str  # improving | worsening | flat
    value: float


@dataclass(frozen=True)
class TrainingSummary:
    group_id: str
    verdicts: dict[str, VerdictDetail]
    dominance: dict[str, float]
    headline: str
    tail_metrics: dict[str, float]

    def all_yes(self) -> bool:
        return all(v.verdict == "YES" for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "verdicts": {
                rid: {
                    "verdict": v.verdict,
                    "margin": v.margin,
                    "trend": v.trend,
                    "value": v.value,
                }
                for rid, v in self.verdicts.items()
            },
            "dominance": self.dominance,
            "headline": self.headline,
            "tail_metrics": self.tail_metrics,
        }


def _tail_slice(n: int) -> int:
    return max(1, round(TAIL_FRACTION * n))


def tail_metrics(log: TrainingLog) -> dict[str, float]:
    """Mean episode metrics over the final window of training."""
    if not log.episodes:
        raise ValueError("empty training log")
    k = _tail_slice(len(log.episodes))
    window = log.episodes[-k:]
    out: dict[str, float] = {}
    for name in ("total_collisions", "total_border_hits", "overflow_per_node", "total_energy", "total_served"):
        out[name] = float(np.mean([getattr(e.metrics, name) for e in window]))
    return out


def _window_margin(log: TrainingLog, req: Requirement, episodes: Sequence) -> float:
    vals = [getattr(e.metrics, req.metric) for e in episodes]
    table = {req.metric: float(np.mean(vals))}
    _, margin = check_requirement(table, req)
    return margin


def _trend(log: TrainingLog, req: Requirement) -> str:
    n = len(log.episodes)
    k = max(1, round(0.2 * n))
    first = _window_margin(log, req, log.episodes[:k])
    last = _window_margin(log, req, log.episodes[-k:])
    denom = max(abs(first), 1e-9)
    change = (last - first) / denom
    if change > TREND_THRESHOLD:
        return "improving"
    if change < -TREND_THRESHOLD:
        return "worsening"
    return "flat"


def _dominance(log: TrainingLog, weights: Mapping[str, float]) -> dict[str, float]:
    """Share of Σ|w_k·return_k| per component over the whole log."""
    totals = {cid: 0.0 for cid in weights}
    for e in log.episodes:
        for cid in weights:
            totals[cid] += abs(weights[cid] * e.component_returns.get(cid, 0.0))
    grand = sum(totals.values())
    if grand <= 0.0:
        return {cid: 1.0 / len(totals) for cid in totals}
    return {cid: totals[cid] / grand for cid in totals}


def _headline(
    group_id: str,
    verdicts: Mapping[str, VerdictDetail],
    dominance: Mapping[str, float],
    tail: Mapping[str, float],
) -> str:
    parts: list[str] = []
    failing = [rid for rid, v in verdicts.items() if v.verdict == "NO"]
    if failing:
        frags = []
        for rid in failing:
            v = verdicts[rid]
            frags.append(f"{rid} NO (value {v.value:.3g}, margin {v.margin:.3g}, {v.trend})")
        parts.append(f"group {group_id} fails: " + "; ".join(frags) + ".")
    else:
        parts.append(f"group {group_id} satisfies every requirement.")
    top_id, top_share = max(dominance.items(), key=lambda kv: kv[1])
    if top_share > 0.5:
        if top_id == "w_ec":
            parts.append(f"{DOMINANCE_PHRASE} (share {top_share:.2f}).")
        else:
            parts.append(f"{top_id} dominates the return (share {top_share:.2f}).")
    parts.append(
        "tail: collisions {c:.2f}, border {b:.2f}, overflow/node {o:.2f}, energy {e:.0f}.".format(
            c=tail["total_collisions"],
            b=tail["total_border_hits"],
            o=tail["overflow_per_node"],
            e=tail["total_energy"],
        )
    )
    text = " ".join(parts)
    if len(text) > HEADLINE_LIMIT:
        text = text[: HEADLINE_LIMIT - 3] + "..."
    return text


def summarize(
    log: TrainingLog,
    weights: Mapping[str, float],
    requirements: Mapping[str, Requirement],
    group_id: str = "g?",
) -> TrainingSummary:
    """Deterministic digest of one training run against the requirements."""
    if not log.episodes:
        raise ValueError("empty training log")
    tail = tail_metrics(log)
    verdicts: dict[str, VerdictDetail] = {}
    for rid, req in requirements.items():
        verdict, margin = check_requirement(tail, req)
        verdicts[rid] = VerdictDetail(
            verdict=verdict,
            margin=margin,
            trend=_trend(log, req),
            value=tail[req.metric],
        )
    dominance = _dominance(log, weights)
    headline = _headline(group_id, verdicts, dominance, tail)
    return TrainingSummary(
        group_id=group_id,
        verdicts=verdicts,
        dominance=dominance,
        headline=headline,
        tail_metrics=tail,
    )


_EVENT_REASONS = {
    # metric -> (event indicator metric on episodes, directional reason)
    "total_collisions": "collision events increase this component's value",
    "total_border_hits": "border crossings increase this component's value",
    "overflow_per_node": "overflow events increase this component's value",
}


def verdict_feedback(
    component_id: str,
    log: TrainingLog,
    requirement: Requirement,
) -> tuple[str, str]:
    """Single-requirement verdict plus a one-line diagnostic reason.

    When the requirement fails and the component's per-episode return rises
    with the offending event count, the reason names that sign error: the
    component rewards exactly what it should punish.
    """
    if not log.episodes:
        raise ValueError("empty training log")
    tail = tail_metrics(log)
    verdict, margin = check_requirement(tail, requirement)
    if verdict == "YES":
        return "YES", (
            f"{requirement.id} satisfied: {requirement.metric} {tail[requirement.metric]:.3g} "
            f"vs {requirement.comparator} {requirement.threshold:.3g} (margin {margin:.3g})"
        )
    reason = (
        f"{requirement.id} unsatisfied: {requirement.metric} {tail[requirement.metric]:.3g} "
        f"vs {requirement.comparator} {requirement.threshold:.3g} (margin {margin:.3g})"
    )
    event_reason = _EVENT_REASONS.get(requirement.metric)
    if event_reason is not None and len(log.episodes) >= 3:
        xs = np.asarray([getattr(e.metrics, requirement.metric) for e in log.episodes])
        ys = np.asarray([e.component_returns.get(component_id, 0.0) for e in log.episodes])
        if xs.std() > 0 and ys.std() > 0:
            rho = float(np.corrcoef(xs, ys)[0, 1])
            if rho > CORRELATION_THRESHOLD:
                reason = event_reason
    return "NO", reason


@dataclass
class ParetoArchive:
    """Non-dominated (total_energy, overflow_per_node) outcomes.

    Smaller is better on both axes. A point enters unless some kept point is
    at least as good on both axes and better on one; entering evicts every
    point it dominates.
    """

    points: list[tuple[float, float, str, int]] = field(default_factory=list)

    def update(self, energy: float, overflow: float, group_id: str, iteration: int) -> bool:
        if not (math.isfinite(energy) and math.isfinite(overflow)):
            raise ValueError("pareto point coordinates must be finite")
        for e, o, _, _ in self.points:
            if e <= energy and o <= overflow and (e < energy or o < overflow):
                return False
            if e == energy and o == overflow:
                return False
        self.points = [
            (e, o, g, i)
            for e, o, g, i in self.points
            if not (energy <= e and overflow <= o and (energy < e or overflow < o))
        ]
        self.points.append((energy, overflow, group_id, iteration))
        return True

    def to_csv(self) -> str:
        lines = ["iteration,group,energy,overflow"]
        for e, o, g, i in sorted(self.points, key=lambda p: (p[3], p[2])):
            lines.append(f"{i},{g},{e!r},{o!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "ParetoArchive":
        archive = ParetoArchive()
        rows = [ln for ln in text.strip().splitlines() if ln][1:]
        for ln in rows:
            it, g, e, o = ln.split(",")
            archive.points.append((float(e), float(o), g, int(it)))
        return archive
