"""Command-line surface.

Exit codes: 0 ok, 1 requirements unsatisfied within the round budget,
2 configuration problem, 3 needs user input (undefined observation names),
4 backend failure.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click

from . import prompts, rdsl, world as world_mod
from .analyzer import ParetoArchive, verdict_feedback
from .config import (
    BACKEND_KINDS,
    STRATEGIES,
    BackendSettings,
    ConfigError,
    RunConfig,
    SearchSettings,
    load_config,
)
from .llm import BackendError
from .pipeline import (
    NeedsUserInput,
    PipelineError,
    build_backend,
    critic_revision,
    run_pipeline,
    solo_train,
    write_ratio_csv,
)
from .rewards import (
    COMPONENT_FOR_REQUIREMENT,
    ComponentError,
    RewardComponent,
    default_requirements,
)
from .search import SearchError
from .td3 import TD3Config
from .world import WorldConfig, WorldConfigError

EXIT_OK = 0
EXIT_UNSATISFIED = 1
EXIT_CONFIG = 2
EXIT_NEEDS_USER = 3
EXIT_BACKEND = 4


@click.group()
def main() -> None:
    """Search for reward components and weights that satisfy explicit
    per-episode requirements in the multi-vehicle data-collection task."""


def _default_config(seed: int, backend_kind: str) -> RunConfig:
    world = WorldConfig()
    return RunConfig(
        seed=seed,
        out_dir=".",
        world=world,
        requirements=default_requirements(world),
        td3=TD3Config(),
        search=SearchSettings(),
        backend=BackendSettings(kind=backend_kind),
    )


def _load_or_default(config_path: str | None, seed: int | None, backend_kind: str | None) -> RunConfig:
    if config_path is not None:
        cfg = load_config(config_path)
    else:
        cfg = _default_config(seed if seed is not None else 0,
                              backend_kind if backend_kind is not None else "scripted")
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if backend_kind is not None:
        cfg = dataclasses.replace(cfg, backend=dataclasses.replace(cfg.backend, kind=backend_kind))
    cfg.validate()
    return cfg


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--backend", "backend_kind", type=click.Choice(BACKEND_KINDS), default=None,
              help="Override the backend kind.")
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None,
              help="Override the search strategy.")
@click.option("--max-iters", type=int, default=None, help="Override the mutation-round budget.")
@click.option("--resume", is_flag=True, help="Reuse completed iterations and the recorded "
              "transcript from the output directory; without it the directory is rebuilt.")
def run(config_path: str, seed: int | None, backend_kind: str | None,
        strategy: str | None, max_iters: int | None, resume: bool) -> None:
    """Full pipeline: components -> critic -> balancing -> weight search."""
    try:
        cfg = _load_or_default(config_path, seed, backend_kind)
        search = cfg.search
        if strategy is not None:
            search = dataclasses.replace(search, strategy=strategy)
        if max_iters is not None:
            search = dataclasses.replace(search, max_iters=max_iters)
        if search is not cfg.search:
            cfg = dataclasses.replace(cfg, search=search)
            cfg.validate()
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    try:
        code, _ = run_pipeline(cfg, resume=resume, echo=click.echo)
    except NeedsUserInput as err:
        click.echo(str(err), err=True)
        raise SystemExit(EXIT_NEEDS_USER)
    except BackendError as err:
        click.echo(f"backend error: {err}", err=True)
        raise SystemExit(EXIT_BACKEND)
    except (PipelineError, ConfigError, WorldConfigError, ComponentError, SearchError) as err:
        click.echo(f"config error: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    raise SystemExit(code)


@main.command()
@click.argument("component_path", type=click.Path())
@click.argument("requirement_id")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run config JSON for world/training/requirement context.")
@click.option("--seed", type=int, default=None)
@click.option("--backend", "backend_kind", type=click.Choice(BACKEND_KINDS), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the revised component (default: <input>.revised.rdsl).")
def critic(component_path: str, requirement_id: str, config_path: str | None,
           seed: int | None, backend_kind: str | None, out_path: str | None) -> None:
    """Train one component alone, diagnose it, and request a revision if it
    fails its requirement."""
    try:
        cfg = _load_or_default(config_path, seed, backend_kind)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    req = cfg.requirements.get(requirement_id)
    if req is None:
        click.echo(
            f"config error: unknown requirement {requirement_id!r} "
            f"(known: {', '.join(sorted(cfg.requirements))})",
            err=True,
        )
        raise SystemExit(EXIT_CONFIG)
    path = Path(component_path)
    if not path.exists():
        click.echo(f"config error: component file not found: {path}", err=True)
        raise SystemExit(EXIT_CONFIG)
    try:
        program = rdsl.parse(path.read_text())
    except rdsl.ParseError as err:
        click.echo(f"config error: component does not parse: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    schema = world_mod.binding_names(cfg.world)
    unresolved = rdsl.check(program, schema)
    if unresolved:
        click.echo(
            f"component uses undefined names: {', '.join(sorted(unresolved))}. "
            "Define these observations (or correct the component) and rerun.",
            err=True,
        )
        raise SystemExit(EXIT_NEEDS_USER)
    cid = COMPONENT_FOR_REQUIREMENT.get(requirement_id, f"w_{requirement_id}")
    component = RewardComponent(id=cid, requirement_id=requirement_id, program=program)
    backend = build_backend(cfg.backend)
    if backend is None:
        click.echo("backend error: critic requires an llm backend", err=True)
        raise SystemExit(EXIT_BACKEND)

    click.echo(f"training {cid} alone for {cfg.td3.train_steps} steps...")
    log, weights = solo_train(cfg.world, component, cfg.td3, cfg.search.probe_episodes, cfg.seed)
    verdict, reason = verdict_feedback(cid, log, req)
    click.echo(f"verdict: {verdict}")
    click.echo(f"reason: {reason}")
    if verdict == "YES":
        click.echo("component already satisfies its requirement; no revision written")
        raise SystemExit(EXIT_OK)
    try:
        revised = critic_revision(component, req, verdict, reason, log, schema, backend)
    except NeedsUserInput as err:
        click.echo(str(err), err=True)
        raise SystemExit(EXIT_NEEDS_USER)
    except BackendError as err:
        click.echo(f"backend error: {err}", err=True)
        raise SystemExit(EXIT_BACKEND)
    out = Path(out_path) if out_path else path.with_suffix(".revised.rdsl")
    out.write_text(rdsl.print_program(revised.program) + "\n")
    click.echo(f"revised component written to {out}")
    raise SystemExit(EXIT_OK)


@main.command()
@click.argument("description_path", type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--backend", "backend_kind", type=click.Choice(BACKEND_KINDS), default=None)
def advise(description_path: str, config_path: str | None, backend_kind: str | None) -> None:
    """Ask the backend for environment or requirement-threshold suggestions
    given a description of an unsatisfied outcome."""
    try:
        cfg = _load_or_default(config_path, None, backend_kind)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    backend = build_backend(cfg.backend)
    if backend is None:
        click.echo("backend error: advise requires an llm backend", err=True)
        raise SystemExit(EXIT_BACKEND)
    path = Path(description_path)
    if not path.exists():
        click.echo(f"config error: description file not found: {path}", err=True)
        raise SystemExit(EXIT_CONFIG)
    try:
        response = backend.complete(prompts.render("meta_advise", {
            "requirements_block": "\n".join(
                f"- {r.id} ({r.kind}): {r.metric} {r.comparator} {r.threshold!r}"
                for r in (cfg.requirements[rid] for rid in sorted(cfg.requirements))
            ),
            "verdicts_block": path.read_text().strip(),
            "weights_block": "(not provided)",
            "tail_block": "(not provided)",
        }))
    except BackendError as err:
        click.echo(f"backend error: {err}", err=True)
        raise SystemExit(EXIT_BACKEND)
    click.echo(response.text)
    raise SystemExit(EXIT_OK)


@main.command("env-schema")
@click.option("--config", "config_path", type=click.Path(), default=None)
def env_schema(config_path: str | None) -> None:
    """Print the JSON list of observation names reward expressions may use."""
    try:
        cfg = _load_or_default(config_path, None, None)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)
    click.echo(json.dumps(world_mod.binding_names(cfg.world), indent=2))
    raise SystemExit(EXIT_OK)


@main.command()
@click.argument("run_dir", type=click.Path())
def report(run_dir: str) -> None:
    """Emit plot-ready CSVs (pareto.csv, ratio.csv) and a textual summary
    for a finished run directory."""
    root = Path(run_dir)
    result_path = root / "result.json"
    if not result_path.exists():
        click.echo(f"config error: {root} has no result.json (not a finished run)", err=True)
        raise SystemExit(EXIT_CONFIG)
    try:
        result = json.loads(result_path.read_text())
    except json.JSONDecodeError as err:
        click.echo(f"config error: result.json is not valid JSON: {err}", err=True)
        raise SystemExit(EXIT_CONFIG)

    rounds = result.get("rounds", [])
    ratio_path = write_ratio_csv(root, rounds)
    pareto_path = root / "pareto.csv"
    if not pareto_path.exists():
        archive = ParetoArchive()
        for record in rounds:
            for g in record["groups"]:
                tail = g.get("tail", {})
                archive.update(tail.get("total_energy", 0.0), tail.get("overflow_per_node", 0.0),
                               g["id"], record["round"])
        pareto_path.write_text(archive.to_csv())

    if result.get("satisfied"):
        click.echo(
            f"satisfied at iteration {result.get('iterations')} "
            f"by group {result.get('satisfying_group')}"
        )
    else:
        missing = ", ".join(result.get("unsatisfied_requirements", [])) or "unknown"
        click.echo(f"unsatisfied after {len(rounds)} iterations (failing: {missing})")
    weights = result.get("final_weights") or {}
    for name in sorted(weights):
        click.echo(f"  {name} = {weights[name]!r}")
    click.echo(f"wrote {pareto_path}")
    click.echo(f"wrote {ratio_path}")
    raise SystemExit(EXIT_OK)


if __name__ == "__main__":
    main()
