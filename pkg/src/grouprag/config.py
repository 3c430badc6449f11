"""Run configuration: one declarative YAML/JSON document per run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import yaml

from .errors import ConfigError, InputError
from .pipeline import ALL_SWITCHES, GROUPING_MODES, SELECTORS, Switch
from .policy import WifParams
from .retrieval import ChunkingConfig

PROTOCOLS = ("none", "leave_one_out", "progressive")
# Canonical row order: every trained model first, then every retrieval component
LEAVE_ONE_OUT_ORDER = tuple(sw for sw in ALL_SWITCHES if sw.kind == "train") + tuple(
    sw for sw in ALL_SWITCHES if sw.kind == "rag"
)


@dataclass(frozen=True)
class AblationSpec:
    protocol: str = "none"
    switches: Tuple[Switch, ...] = ()

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"ablation.protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if len(set(self.switches)) != len(self.switches):
            raise ConfigError("ablation switches repeat")

    def ordered(self) -> Tuple[Switch, ...]:
        """Switches in protocol order; all eight when none were listed."""
        chosen = set(self.switches) if self.switches else set(ALL_SWITCHES)
        order = ALL_SWITCHES if self.protocol == "progressive" else LEAVE_ONE_OUT_ORDER
        return tuple(sw for sw in order if sw in chosen)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "AblationSpec":
        data = data or {}
        try:
            switches = tuple(Switch.parse(str(s)) for s in data.get("switches", []))
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(str(data.get("protocol", "none")), switches)


@dataclass
class RunConfig:
    dataset: Path
    seed: int
    output_dir: Optional[Path] = None
    corpus: Optional[Path] = None
    index: Optional[Path] = None
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    backend: Dict[str, Any] = field(default_factory=dict)
    stage_backends: Dict[str, Any] = field(default_factory=dict)
    base_backend: Optional[Dict[str, Any]] = None
    base_stage_backends: Dict[str, Any] = field(default_factory=dict)
    selector: str = "policy"
    policy: Optional[Path] = None
    grouping_mode: str = "deterministic"
    tau: float = 0.4
    keypoint_k: int = 5
    group_k: int = 8
    option_k: int = 3
    rollouts: int = 8
    wif: WifParams = field(default_factory=WifParams)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    prompts_dir: Optional[Path] = None
    judge: bool = True
    derive_roles: bool = False
    base_dir: Path = Path(".")
    source: Optional[Path] = None
    raw: Dict[str, Any] = field(default_factory=dict)

    def fingerprint(self, switches: Iterable[Switch] = ()) -> str:
        """Hash of everything that shapes pipeline outputs, plus the active switches.

        The seed and output location are recorded separately and left out, so
        runs that differ only in seed share a fingerprint.
        """
        doc = {k: v for k, v in self.raw.items() if k not in ("seed", "output_dir", "ablation")}
        active = set(switches)
        doc["active_switches"] = [sw.name for sw in ALL_SWITCHES if sw in active]
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _path(base: Path, value: Optional[str], what: str, must_exist: bool = True) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _check_backend(cfg: Any, where: str, base: Path) -> Dict[str, Any]:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where} must be a mapping")
    if cfg.get("kind") not in ("http", "mock"):
        raise ConfigError(f"{where}.kind must be 'http' or 'mock'")
    if cfg["kind"] == "mock" and "script" in cfg:
        _path(base, cfg["script"], f"{where}.script")
    return cfg


def config_from_dict(
    data: Dict[str, Any],
    base_dir: Union[str, Path] = ".",
    seed: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    base = Path(base_dir)
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if data.get("seed") is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    if "dataset" not in data:
        raise ConfigError("config needs 'dataset'")
    if not data.get("corpus") and not data.get("index"):
        raise ConfigError("config needs 'corpus' or 'index'")
    if "backend" not in data:
        raise ConfigError("config needs a 'backend' section")

    grouping = data.get("grouping") or {}
    chunking = data.get("chunking") or {}
    try:
        cfg = RunConfig(
            dataset=_path(base, data["dataset"], "dataset"),
            seed=int(data["seed"]),
            output_dir=Path(output_dir) if output_dir else _path(base, data.get("output_dir"), "output_dir", False),
            corpus=_path(base, data.get("corpus"), "corpus"),
            index=_path(base, data.get("index"), "index"),
            chunking=ChunkingConfig(int(chunking.get("max_tokens", 256)), int(chunking.get("overlap_tokens", 32))),
            backend=_check_backend(data["backend"], "backend", base),
            stage_backends={
                k: _check_backend(v, f"stage_backends.{k}", base) for k, v in (data.get("stage_backends") or {}).items()
            },
            base_backend=_check_backend(data["base_backend"], "base_backend", base) if data.get("base_backend") else None,
            base_stage_backends={
                k: _check_backend(v, f"base_stage_backends.{k}", base)
                for k, v in (data.get("base_stage_backends") or {}).items()
            },
            selector=str(data.get("selector", "policy")),
            policy=_path(base, data.get("policy"), "policy"),
            grouping_mode=str(grouping.get("mode", "deterministic")),
            tau=float(grouping.get("tau", 0.4)),
            keypoint_k=int(grouping.get("keypoint_k", 5)),
            group_k=int(grouping.get("group_k", 8)),
            option_k=int(grouping.get("option_k", 3)),
            rollouts=int(data.get("rollouts", 8)),
            wif=WifParams.from_dict(data.get("wif")),
            ablation=AblationSpec.from_dict(data.get("ablation")),
            prompts_dir=_path(base, data.get("prompts_dir"), "prompts_dir"),
            judge=bool(data.get("judge", True)),
            derive_roles=bool(data.get("derive_roles", False)),
            base_dir=base,
            raw=data,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    if cfg.selector not in SELECTORS:
        raise ConfigError(f"selector must be one of {SELECTORS}")
    if cfg.grouping_mode not in GROUPING_MODES:
        raise ConfigError(f"grouping.mode must be one of {GROUPING_MODES}")
    if min(cfg.keypoint_k, cfg.group_k, cfg.option_k) < 1:
        raise ConfigError("retrieval k values must be >= 1")
    return cfg


def load_config(
    path: Union[str, Path], seed: Optional[int] = None, output_dir: Optional[Union[str, Path]] = None
) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    cfg = config_from_dict(data, path.parent, seed=seed, output_dir=output_dir)
    cfg.source = path.resolve()
    return cfg
