"""Experiment configuration: an INI file with one section per pipeline part.

Every section must be present (it may be empty, in which case defaults
apply) and every key must be one listed below; anything else is rejected so
that a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from graphbid.auction.types import AuctionConfig
from graphbid.bidders import BidderConfig
from graphbid.errors import ConfigurationError


@dataclass
class DataSection:
    episodes: int = 200
    heldout_episodes: int = 16
    shard_size: int = 100
    p_uniform: float = 0.5
    alpha_low: float = 0.3
    alpha_high: float = 1.5

    def bidders(self) -> BidderConfig:
        return BidderConfig(p_uniform=self.p_uniform, alpha_low=self.alpha_low,
                            alpha_high=self.alpha_high)


@dataclass
class GraphSection:
    dim: int = 64
    layers: int = 2
    cap_m: int = 64
    ec: bool = False
    spl: bool = False
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    kd_episodes: int = 40
    kd_steps: int = 500
    kd_lr: float = 1e-3
    belief_h: int = 4


@dataclass
class LdmSection:
    window: int = 16
    diffusion_steps: int = 100
    channels: int = 64
    blocks: int = 4
    kernel: int = 5
    emb_dim: int = 64
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    p_unconditional: float = 0.1
    stride: int = 1
    x0_clip: float = 6.0
    joint_steps: int = 200
    joint_lr: float = 2e-4
    joint_gnn_lr: float = 5e-5


@dataclass
class AlignSection:
    expectile: float = 0.7
    value_hidden: int = 64
    value_steps: int = 1500
    value_lr: float = 1e-3
    w_return: float = 1.0
    w_cpa: float = -0.25
    w_roi: float = 0.25
    w_win_rate: float = 0.25
    w_social_welfare: float = 0.25
    candidates: int = 16
    slack: float = 1.0
    raft_rounds: int = 2
    raft_m: int = 256
    raft_q: float = 0.25
    raft_steps: int = 50
    raft_lr: float = 1e-4
    raft_batch: int = 16
    raft_group: int = 4
    raft_stride: int = 4


@dataclass
class EvalSection:
    seeds: int = 64
    seed_base: int = 900
    forecast_split: int = 12
    forecast_draws: int = 8
    baseline_alpha: float = 0.6708203932499369   # sqrt(0.3 * 1.5)
    controlled_agent: int = 0
    hard_budget: bool = True
    opponent_p_uniform: float = 1.0


SECTIONS = {"auction": AuctionConfig, "data": DataSection, "graph": GraphSection,
            "ldm": LdmSection, "align": AlignSection, "eval": EvalSection}


@dataclass
class ExperimentConfig:
    auction: AuctionConfig = field(default_factory=AuctionConfig)
    data: DataSection = field(default_factory=DataSection)
    graph: GraphSection = field(default_factory=GraphSection)
    ldm: LdmSection = field(default_factory=LdmSection)
    align: AlignSection = field(default_factory=AlignSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def section_hash(self, *names: str) -> str:
        """Digest of the named sections only, so a stage is not invalidated by later ones."""
        blob = json.dumps({n: asdict(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def config_hash(self) -> str:
        return self.section_hash(*SECTIONS)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(section: str, key: str, raw: str, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw.strip()
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: cannot read {raw!r} as {kind}") from None
    raise ConfigurationError(f"[{section}] {key}: unsupported field type {kind}")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"{source}: unknown section(s) {sorted(unknown)}")
    missing = [name for name in SECTIONS if name not in parser]
    if missing:
        raise ConfigurationError(f"{source}: missing section(s) {missing}")
    built = {}
    for name, cls in SECTIONS.items():
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in parser[name].items():
            if key not in types:
                raise ConfigurationError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _parse(name, key, raw, types[key])
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{source}: [{name}] {exc}") from None
    return ExperimentConfig(**built)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def toy_config_text() -> str:
    return resources.files("graphbid.harness").joinpath("toy.ini").read_text()


def toy_config() -> ExperimentConfig:
    return parse_config(toy_config_text(), "toy.ini")
