"""Group-aware retrieval and reasoning over knowledge-dense multiple-choice questions."""

from .errors import BackendError, ConfigError, InputError, ScriptError, StageError, TrainingError
from .pipeline import PipelineDeps, Switch, run_pipeline
from .policy import PolicyParams, RoleLabels, SelectionInstance, WifParams, train_policy, wif_score
from .records import PipelineTrace, Question, load_dataset
from .retrieval import ChunkingConfig, Index, build_index, ingest_corpus, retrieve

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ChunkingConfig",
    "ConfigError",
    "Index",
    "InputError",
    "PipelineDeps",
    "PipelineTrace",
    "PolicyParams",
    "Question",
    "RoleLabels",
    "ScriptError",
    "SelectionInstance",
    "StageError",
    "Switch",
    "TrainingError",
    "WifParams",
    "build_index",
    "ingest_corpus",
    "load_dataset",
    "retrieve",
    "run_pipeline",
    "train_policy",
    "wif_score",
]
