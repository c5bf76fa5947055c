"""Reward search pipeline for a multi-AUV underwater data-collection task.

The package wires together a deterministic 2-D simulator, a small reward
expression language, a from-scratch TD3 trainer, a rule-based training-log
analyzer, and a weight-search engine whose mutation/crossover directives come
from a swappable chat backend (HTTP, scripted rule table, or transcript
replay).
"""

__version__ = "0.1.0"

from .world import WorldConfig, WorldConfigError, init_world, run_episode  # noqa: F401
from .rdsl import parse, ParseError, EvalError, RewardProgram  # noqa: F401
from .rewards import (  # noqa: F401
    Requirement,
    RewardComponent,
    WeightedReward,
    default_requirements,
    reference_components,
    probe_values,
    check_requirement,
)
from .td3 import TD3Config, TD3Agent, TrainingLog, train  # noqa: F401
from .analyzer import TrainingSummary, ParetoArchive, summarize, verdict_feedback  # noqa: F401
from .search import (  # noqa: F401
    WeightGroup,
    Directive,
    DirectiveError,
    SearchError,
    SearchResult,
    balanced_weights,
    init_weights,
    search_loop,
)
from .llm import (  # noqa: F401
    ChatRequest,
    ChatResponse,
    BackendError,
    ScriptedBackend,
    HttpBackend,
    ReplayBackend,
    TranscriptRecorder,
)
from .scripted import scripted_backend  # noqa: F401
from .config import RunConfig, ConfigError, load_config, config_from_dict  # noqa: F401
from .pipeline import run_pipeline, NeedsUserInput  # noqa: F401
