"""Full-run orchestration and run-directory persistence.

A run directory is the entire durable state of one pipeline execution:
configuration, generated components, probe magnitudes, per-iteration weight
groups and training logs, the backend transcript, and the final result.
Resume works by replaying the recorded transcript (hash-verified) and
reusing completed training logs, so an interrupted run continues from the
last finished group instead of retraining everything.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import prompts, rdsl, td3, world as world_mod
from .analyzer import TrainingSummary, tail_metrics, verdict_feedback
from .config import BackendSettings, RunConfig
from .llm import (
    Backend,
    BackendError,
    ChatResponse,
    HttpBackend,
    ReplayBackend,
    TranscriptRecorder,
    extract_component,
    load_transcript,
)
from .rewards import (
    COMPONENT_FOR_REQUIREMENT,
    COMPONENT_ORDER,
    MagnitudeReport,
    Requirement,
    RewardComponent,
    probe_values,
    validate_registry,
)
from .scripted import scripted_backend
from .search import SearchError, SearchResult, balanced_weights, search_loop
from .td3 import TD3Config, TrainingLog
from .world import WorldConfig

__all__ = [
    "NeedsUserInput",
    "PipelineError",
    "build_backend",
    "ChainBackend",
    "RunDirSink",
    "generate_components",
    "solo_train",
    "critic_revision",
    "run_pipeline",
    "write_ratio_csv",
]


class PipelineError(Exception):
    pass


class NeedsUserInput(Exception):
    """A component references names outside the observation schema; the run
    cannot proceed until the user defines them."""

    def __init__(self, where: str, names: list[str]):
        self.where = where
        self.names = list(names)
        super().__init__(
            f"{where} uses undefined names: {', '.join(names)}. "
            "Define these observations (or correct the component) and rerun."
        )


def _seed_int(parts) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


def build_backend(settings: BackendSettings) -> Backend | None:
    if settings.kind == "scripted":
        return scripted_backend()
    if settings.kind == "http":
        return HttpBackend(
            base_url=settings.base_url,
            model=settings.model,
            api_key_env=settings.api_key_env,
            timeout_s=settings.timeout_s,
        )
    if settings.kind == "replay":
        return ReplayBackend.from_file(settings.transcript_path)
    return None  # "none"


class ChainBackend:
    """Replay a recorded transcript while it matches, then go live.

    Powers resume: exchanges already answered in a previous partial run are
    served from the transcript (hash-verified), and the first novel request
    falls through to the real backend.
    """

    def __init__(self, entries: list[dict], fallback: Backend | None):
        self._replay = ReplayBackend(entries)
        self._fallback = fallback
        self._live = not entries

    def complete(self, request) -> ChatResponse:
        if not self._live:
            try:
                return self._replay.complete(request)
            except BackendError as err:
                if err.kind not in ("exhausted", "protocol"):
                    raise
                self._live = True
        if self._fallback is None:
            raise BackendError(
                "exhausted",
                "recorded transcript is exhausted and no live backend is configured",
            )
        return self._fallback.complete(request)


def _schema_block(schema: list[str]) -> str:
    return ", ".join(schema)


def _req_context(req: Requirement, schema: list[str]) -> dict:
    return {
        "req_id": req.id,
        "req_text": f"{req.kind} requirement: keep {req.metric} {req.comparator} {req.threshold!r}",
        "metric": req.metric,
        "comparator": req.comparator,
        "threshold": repr(req.threshold),
        "schema_block": _schema_block(schema),
    }


def generate_components(
    requirements: Mapping[str, Requirement],
    backend: Backend,
    schema: list[str],
    echo: Callable[[str], None] = lambda s: None,
) -> dict[str, RewardComponent]:
    """One backend exchange per requirement; each reply must contain a
    parseable component whose names all resolve against the schema."""
    out: dict[str, RewardComponent] = {}
    for rid in sorted(requirements):
        req = requirements[rid]
        cid = COMPONENT_FOR_REQUIREMENT.get(rid, f"w_{rid}")
        request = prompts.render("component_gen", _req_context(req, schema))
        response = backend.complete(request)
        try:
            program, unresolved = extract_component(response.text, schema)
        except (ValueError, rdsl.ParseError) as err:
            raise BackendError("protocol", f"component for {rid} is unusable: {err}") from None
        if unresolved:
            raise NeedsUserInput(f"generated component for {rid}", sorted(unresolved))
        out[cid] = RewardComponent(id=cid, requirement_id=rid, program=program)
        echo(f"component {cid} <- {rid}: {rdsl.print_program(program)}")
    return out


def solo_train(
    config: WorldConfig,
    component: RewardComponent,
    td3cfg: TD3Config,
    probe_episodes: int,
    seed: int,
) -> tuple[TrainingLog, dict[str, float]]:
    """Train on one component alone (equivalent to zero-weighting the rest),
    with its weight balanced from a solo probe."""
    try:
        report = probe_values(config, {component.id: component},
                              episodes=probe_episodes, seed=seed)
        weights = balanced_weights(report)
    except SearchError:
        weights = {component.id: 1.0}  # constant-valued component: scale is moot
    log = td3.train(config, weights, {component.id: component}, td3cfg, seed=seed)
    return log, weights


def critic_revision(
    component: RewardComponent,
    req: Requirement,
    verdict: str,
    reason: str,
    log: TrainingLog,
    schema: list[str],
    backend: Backend,
) -> RewardComponent:
    """One critic exchange: diagnosis in, corrected component out."""
    context = _req_context(req, schema)
    context.update({
        "component_source": rdsl.print_program(component.program),
        "verdict": verdict,
        "reason": reason,
        "tail_block": json.dumps(tail_metrics(log), sort_keys=True),
    })
    response = backend.complete(prompts.render("critic", context))
    try:
        program, unresolved = extract_component(response.text, schema)
    except (ValueError, rdsl.ParseError) as err:
        raise BackendError("protocol", f"critic reply for {req.id} is unusable: {err}") from None
    if unresolved:
        raise NeedsUserInput(f"revised component for {req.id}", sorted(unresolved))
    return RewardComponent(id=component.id, requirement_id=req.id, program=program)


def _component_order(components: Mapping[str, RewardComponent]) -> list[str]:
    ordered = [cid for cid in COMPONENT_ORDER if cid in components]
    ordered += sorted(set(components) - set(ordered))
    return ordered


class RunDirSink:
    """search_loop observer that persists every artifact as it appears, and
    a trainer that reuses completed logs on resume."""

    def __init__(
        self,
        root: Path,
        resume: bool,
        config: WorldConfig,
        components: Mapping[str, RewardComponent],
        td3cfg: TD3Config,
        echo: Callable[[str], None] = lambda s: None,
    ):
        self.root = Path(root)
        self.resume = resume
        self.config = config
        self.components = components
        self.td3cfg = td3cfg
        self.echo = echo
        self._slots: dict[tuple[int, str], int] = {}

    def _iter_dir(self, round_index: int) -> Path:
        return self.root / f"iter_{round_index}"

    def on_round_start(self, round_index: int, groups) -> None:
        it = self._iter_dir(round_index)
        it.mkdir(parents=True, exist_ok=True)
        for slot, group in enumerate(groups, start=1):
            self._slots[(round_index, group.id)] = slot
        payload = {"iteration": round_index, "groups": [g.to_dict() for g in groups]}
        (it / "weights.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    def trainer(self, weights: dict[str, float], train_seed: int, group_id: str, round_index: int) -> TrainingLog:
        slot = self._slots[(round_index, group_id)]
        gdir = self._iter_dir(round_index) / f"group_{slot}"
        log_json = gdir / "log.json"
        if self.resume and log_json.exists():
            try:
                data = json.loads(log_json.read_text())
                log = TrainingLog.from_dict(data)
                same = (
                    log.seed == train_seed
                    and sorted(log.weights) == sorted(weights)
                    and all(abs(log.weights[k] - weights[k]) <= 1e-12 * max(1.0, abs(weights[k]))
                            for k in weights)
                )
                if same:
                    self.echo(f"iter {round_index} group {group_id}: reusing recorded training log")
                    return log
            except (KeyError, ValueError, json.JSONDecodeError):
                pass  # unreadable or stale cache: retrain
        log = td3.train(self.config, weights, self.components, self.td3cfg, seed=train_seed)
        gdir.mkdir(parents=True, exist_ok=True)
        log_json.write_text(json.dumps(log.to_dict(), indent=2, sort_keys=True))
        (gdir / "log.csv").write_text(log.to_csv())
        return log

    def on_group_result(self, round_index: int, group, log: TrainingLog, summary: TrainingSummary) -> None:
        slot = self._slots[(round_index, group.id)]
        it = self._iter_dir(round_index)
        (it / f"summary_{slot}.txt").write_text(summary.headline + "\n")
        (it / f"summary_{slot}.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
        verdicts = " ".join(f"{rid}={d.verdict}" for rid, d in sorted(summary.verdicts.items()))
        self.echo(f"iter {round_index} group {group.id}: {verdicts}")


def _clear_run_dir(root: Path) -> None:
    for name in ("magnitudes.json", "pareto.csv", "transcript.jsonl", "result.json", "ratio.csv"):
        path = root / name
        if path.exists():
            path.unlink()
    comp_dir = root / "components"
    if comp_dir.exists():
        shutil.rmtree(comp_dir)
    for it in root.glob("iter_*"):
        if it.is_dir():
            shutil.rmtree(it)


def write_ratio_csv(root: Path, rounds: list[dict]) -> Path:
    """Per-iteration max service-to-energy weight ratio, one row per round."""
    lines = ["iteration,max_service_energy_ratio"]
    for record in rounds:
        ratio = record.get("max_service_energy_ratio")
        lines.append(f"{record['round']},{'' if ratio is None else repr(ratio)}")
    path = Path(root) / "ratio.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_pipeline(
    cfg: RunConfig,
    resume: bool = False,
    echo: Callable[[str], None] = lambda s: None,
) -> tuple[int, dict]:
    """Execute component generation -> critic loop -> balancing -> weight
    search -> report. Returns (exit code, result dict); 0 means every
    requirement was satisfied, 1 means the round budget ran out."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if not resume:
        _clear_run_dir(root)
    (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    core = build_backend(cfg.backend)
    transcript_path = root / "transcript.jsonl"
    if resume and transcript_path.exists():
        backend_inner: Backend | None = ChainBackend(load_transcript(str(transcript_path)), core)
    else:
        backend_inner = core
    backend = (
        TranscriptRecorder(backend_inner, str(transcript_path))
        if backend_inner is not None
        else None
    )

    schema = world_mod.binding_names(cfg.world)

    # --- components ---------------------------------------------------
    comp_dir = root / "components"
    comp_dir.mkdir(exist_ok=True)
    if cfg.components is not None:
        components: dict[str, RewardComponent] = {}
        for cid in sorted(cfg.components):
            entry = cfg.components[cid]
            try:
                program = rdsl.parse(entry["source"])
            except rdsl.ParseError as err:
                raise PipelineError(f"components.{cid}: {err}") from None
            components[cid] = RewardComponent(
                id=cid, requirement_id=entry["requirement"], program=program
            )
        echo(f"components: {len(components)} provided by config (generation skipped)")
    else:
        if backend is None:
            raise BackendError("network", "component generation requires an llm backend")
        components = generate_components(cfg.requirements, backend, schema, echo)
    validate_registry(components, cfg.requirements, schema)
    for cid, comp in components.items():
        (comp_dir / f"{cid}.rdsl").write_text(rdsl.print_program(comp.program) + "\n")

    # --- critic loop ----------------------------------------------------
    if cfg.search.critic_rounds > 0 and backend is not None:
        req_by_comp = {c.id: cfg.requirements[c.requirement_id] for c in components.values()}
        for idx, cid in enumerate(_component_order(components)):
            req = req_by_comp[cid]
            for attempt in range(cfg.search.critic_rounds):
                seed = _seed_int((cfg.seed, 7001, idx, attempt))
                log, _ = solo_train(cfg.world, components[cid], cfg.td3,
                                    cfg.search.probe_episodes, seed)
                verdict, reason = verdict_feedback(cid, log, req)
                echo(f"critic {cid} ({req.id}) round {attempt}: {verdict} - {reason}")
                if verdict == "YES":
                    break
                components[cid] = critic_revision(
                    components[cid], req, verdict, reason, log, schema, backend
                )
                (comp_dir / f"{cid}.rdsl").write_text(
                    rdsl.print_program(components[cid].program) + "\n"
                )
                echo(f"critic {cid}: revised -> {rdsl.print_program(components[cid].program)}")
    elif cfg.search.critic_rounds > 0:
        echo("critic loop skipped: no llm backend configured")

    # --- probe + balancing ----------------------------------------------
    report = probe_values(cfg.world, components,
                          episodes=cfg.search.probe_episodes, seed=cfg.seed)
    (root / "magnitudes.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    echo("probe magnitudes: " + ", ".join(
        f"{cid}={report.mean_abs(cid):.4g}" for cid in sorted(report.stats)
    ))

    # --- search -----------------------------------------------------------
    sink = RunDirSink(root, resume, cfg.world, components, cfg.td3, echo)
    result = search_loop(
        cfg.world,
        components,
        cfg.requirements,
        backend=backend,
        td3_config=cfg.td3,
        k=cfg.search.k,
        max_iters=cfg.search.max_iters,
        strategy=cfg.search.strategy,
        target_scale=cfg.search.target_scale,
        seed=cfg.seed,
        probe_episodes=cfg.search.probe_episodes,
        initial_multipliers=cfg.search.initial_multipliers or None,
        magnitudes=report,
        trainer=sink.trainer,
        sink=sink,
    )

    (root / "pareto.csv").write_text(result.pareto.to_csv())

    advice = None
    if not result.satisfied and backend is not None:
        best_tail = {}
        for record in result.rounds:
            for g in record["groups"]:
                if g["id"] == result.best_group:
                    best_tail = g["tail"]
        response = backend.complete(prompts.render("meta_advise", {
            "requirements_block": "\n".join(
                f"- {r.id} ({r.kind}): {r.metric} {r.comparator} {r.threshold!r}"
                for r in (cfg.requirements[rid] for rid in sorted(cfg.requirements))
            ),
            "verdicts_block": json.dumps(result.best_verdicts, sort_keys=True),
            "weights_block": json.dumps(result.final_weights, sort_keys=True),
            "tail_block": json.dumps(best_tail, sort_keys=True),
        }))
        advice = response.text
        echo("advice: " + advice)

    files = {
        "config": "config.json",
        "magnitudes": "magnitudes.json",
        "components": [f"components/{cid}.rdsl" for cid in sorted(components)],
        "pareto": "pareto.csv",
        "iterations": [f"iter_{r['round']}" for r in result.rounds],
    }
    if backend is not None:
        files["transcript"] = "transcript.jsonl"
    payload = result.to_dict()
    payload.update({"seed": cfg.seed, "advice": advice, "files": files})
    (root / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    if result.satisfied:
        echo(
            f"satisfied at iteration {result.iterations} by group {result.satisfying_group}"
        )
    else:
        echo(
            "round budget exhausted; unsatisfied: "
            + ", ".join(result.unsatisfied_requirements())
        )
    return (0 if result.satisfied else 1), payload
