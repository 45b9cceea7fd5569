"""
Run configuration: one record merging every section a command needs.

Config files are plain ``key = value`` text with dotted section keys::

    # tiny desk-scale run
    model.interaction_width = 8
    optim.lr = 1e-3
    augment.flip_axis = horizontal
    corpus.sod = data/sod

A run starts from a named profile (``full`` or ``tiny``), applies the
file, then ``--set key=value`` overrides and dedicated command flags.
The merged record is what gets written next to a command's outputs and
what the config digest in checkpoints is computed from.

``AFIU_OUTPUT_ROOT`` in the environment (or a ``.env`` file) sets the
default output root.
"""
import hashlib
import logging
import os
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, PositiveInt, field_validator

from data import AugmentConfig
from network import AFIUConfig
from store import format_kv, parse_kv, write_text
from training import OptimConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"


def default_output_root() -> str:
    return os.getenv("AFIU_OUTPUT_ROOT", "runs")


def _as_list(value: Any) -> Any:
    if value is None:
        return []
    return [value] if isinstance(value, str) else value


class CorpusPaths(BaseModel):
    sod: Optional[str] = None
    dbd: Optional[str] = None
    # one or more evaluation corpora, scored separately
    eval: List[str] = Field(default_factory=list)
    image_dir: str = "images"
    mask_dir: str = "masks"

    @field_validator("eval", mode="before")
    @classmethod
    def _eval_list(cls, value: Any) -> Any:
        return _as_list(value)


class SynthConfig(BaseModel):
    count: PositiveInt = 8
    seed: int = 0
    size: Tuple[PositiveInt, PositiveInt] = (64, 64)


class EvalConfig(BaseModel):
    checkpoint: Optional[str] = None
    # report names, parallel to corpus.eval; blank entries fall back to the directory name
    datasets: List[str] = Field(default_factory=list)
    workers: PositiveInt = 1

    @field_validator("datasets", mode="before")
    @classmethod
    def _datasets_list(cls, value: Any) -> Any:
        return _as_list(value)


class RunConfig(BaseModel):
    profile: Literal["full", "tiny"] = "full"
    model: AFIUConfig = Field(default_factory=AFIUConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    corpus: CorpusPaths = Field(default_factory=CorpusPaths)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    evaluate: EvalConfig = Field(default_factory=EvalConfig)
    init_checkpoint: Optional[str] = None
    output_dir: str = Field(default_factory=default_output_root)

    @classmethod
    def for_profile(cls, profile: str) -> "RunConfig":
        if profile == "tiny":
            model = AFIUConfig.tiny()
            return cls(
                profile="tiny",
                model=model,
                optim=OptimConfig.tiny(),
                augment=AugmentConfig(target_size=model.input_size),
            )
        if profile == "full":
            return cls()
        raise ValueError(f"unknown profile {profile!r}; expected 'full' or 'tiny'")


def _assign(tree: Dict[str, Any], key: str, value: Any, where: str) -> None:
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.get(part) if isinstance(node, dict) else None
        if not isinstance(child, dict):
            raise ValueError(f"{where}: unknown config key {key!r}")
        node = child
    if parts[-1] not in node:
        raise ValueError(f"{where}: unknown config key {key!r}")
    node[parts[-1]] = value


def parse_overrides(pairs: Iterable[str]) -> List[Tuple[str, str, Any]]:
    """Turn ``key=value`` strings into ``(where, key, value)`` entries."""
    entries = []
    for index, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ValueError(f"--set #{index}: expected key=value, got {pair!r}")
        (_, key, value), = parse_kv(pair.replace("=", " = ", 1))
        entries.append((f"--set #{index}", key, value))
    return entries


def load_run_config(
    path: Optional[str] = None,
    profile: Optional[str] = None,
    overrides: Iterable[str] = (),
    extra: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Merge profile defaults, a config file, ``--set`` pairs and flag values."""
    entries: List[Tuple[str, str, Any]] = []
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        for number, key, value in parse_kv(text):
            entries.append((f"{path}: line {number}", key, value))
    # an explicit profile argument wins over the file's own profile line
    file_profile = next((value for _, key, value in entries if key == "profile"), None)
    base_profile = profile or file_profile or "full"
    tree = RunConfig.for_profile(base_profile).model_dump(mode="json")
    entries = [entry for entry in entries if entry[1] != "profile"]

    entries.extend(parse_overrides(overrides))
    entries.extend(("flag", key, value) for key, value in (extra or {}).items() if value is not None)

    explicit = set()
    for where, key, value in entries:
        _assign(tree, key, value, where)
        explicit.add(key)
    if "augment.target_size" not in explicit:
        tree["augment"]["target_size"] = tree["model"]["input_size"]
    return RunConfig.model_validate(tree)


def dump_run_config(config: RunConfig) -> str:
    return format_kv(config.model_dump(mode="json"))


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(config).encode("utf-8")).hexdigest()


def write_effective_config(config: RunConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, CONFIG_FILE)
    write_text(path, dump_run_config(config))
    logger.debug("effective config written to %s", path)
    return path
