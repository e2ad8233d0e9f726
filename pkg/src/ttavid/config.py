"""Run configuration: INI-style sections of flat ``key = value`` pairs.

Every key has a default, so an empty file is a valid config. Unknown keys and
malformed values are rejected with the offending line number.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from . import grpo
from .orchestrator import AdaptationConfig
from .reward import RewardParams


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    backend: str = "sim"  # sim | remote
    seed: int = 0
    out: str = "runs/out"
    samples: str = ""  # remote mode: samples-v1 file
    eval_samples: str = ""
    labels: str = ""
    created_unix: int | None = None  # None: 0 in sim mode, wall clock in remote mode


@dataclass
class PolicySettings:
    policy: str = "none"  # none | toy
    evidence_weight: float = 1.0


@dataclass
class SimSettings:
    videos: int = 8
    T: int = 40
    M: int = 10
    informative_count: int = 4
    p_base: float | None = None
    gain: float | None = None
    m: int | None = None
    shared_prior: str = "none"  # none | gaussian
    prior_width: float = 3.0
    text_mode: bool = True
    clip_scores: bool = True
    eval_videos: int = 32


@dataclass
class InferSettings:
    frames: int = 32
    mode: str = "sample"  # sample | topk
    votes: int = 1
    baseline: str = "learned"  # learned | random | clip | blend | self-consistency
    w_clip: float = 0.0
    w_dist: float = 1.0


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    train: grpo.TrainConfig = field(default_factory=grpo.TrainConfig)
    policy: PolicySettings = field(default_factory=PolicySettings)
    sim: SimSettings = field(default_factory=SimSettings)
    infer: InferSettings = field(default_factory=InferSettings)

    def adaptation(self) -> AdaptationConfig:
        """AdaptationConfig with the reward/train sections and run seed folded in."""
        return replace(self.adapt, reward=self.reward, train=replace(self.train, epochs=self.adapt.epochs),
                       seed=self.run.seed)


# section name -> RunConfig attribute
_SECTIONS = {
    "run": "run",
    "adapt": "adapt",
    "reward": "reward",
    "train": "train",
    "policy": "policy",
    "sim": "sim",
    "infer": "infer",
}
_SKIP = {"adapt": {"reward", "train", "seed"}, "train": {"epochs"}}


def _field_types(obj) -> dict[str, str]:
    return {f.name: f.type for f in fields(obj)}


def _coerce(raw: str, type_str: str, default):
    text = raw.strip()
    optional = "None" in str(type_str)
    if optional and text.lower() in ("", "none", "null"):
        return None
    t = str(type_str).replace(" | None", "").replace("None | ", "")
    if t == "bool" or isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if t == "int":
        return int(text)
    if t == "float":
        return float(text)
    if "Grouping" in t:
        return grpo.Grouping(text)
    return text


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
        elif current == section and s.split("=", 1)[0].strip() == key:
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (T, M, K, F, N)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, section) or '?'}: unknown section [{section}]")
        target = getattr(cfg, _SECTIONS[section])
        types = _field_types(target)
        updates = {}
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line}" if line else source
            if key not in types or key in _SKIP.get(section, ()):
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            try:
                updates[key] = _coerce(raw, types[key], getattr(target, key))
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None
        try:
            setattr(cfg, _SECTIONS[section], replace(target, **updates))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: section [{section}]: {exc}") from None
    _validate(cfg, source)
    return cfg


def _validate(cfg: RunConfig, source: str):
    checks = [
        (cfg.run.backend in ("sim", "remote"), "run.backend must be 'sim' or 'remote'"),
        (cfg.policy.policy in ("none", "toy"), "policy.policy must be 'none' or 'toy'"),
        (cfg.sim.shared_prior in ("none", "gaussian"), "sim.shared_prior must be 'none' or 'gaussian'"),
        (cfg.infer.mode in ("sample", "topk"), "infer.mode must be 'sample' or 'topk'"),
        (cfg.infer.baseline in ("learned", "random", "clip", "blend", "self-consistency"),
         "infer.baseline must be learned|random|clip|blend|self-consistency"),
        (cfg.infer.votes >= 1, "infer.votes must be >= 1"),
        (cfg.sim.videos >= 1 and cfg.sim.eval_videos >= 1, "sim.videos and sim.eval_videos must be >= 1"),
        (cfg.adapt.F <= cfg.sim.T or cfg.run.backend != "sim", "adapt.F must not exceed sim.T"),
        (not (cfg.policy.policy == "toy" and cfg.run.backend == "remote"),
         "the toy policy only runs against the sim backend"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"{source}: {msg}")


def load_config(path_or_preset: str | Path) -> RunConfig:
    """Load a config file, or a bundled preset by name (``quick``, ``bandit``, ...)."""
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(encoding="utf-8"), str(p))
    name = str(path_or_preset)
    if name in preset_names():
        text = resources.files("ttavid.presets").joinpath(f"{name}.ini").read_text(encoding="utf-8")
        return parse_config(text, f"preset:{name}")
    raise ConfigError(f"config file not found and not a preset: {path_or_preset}")


def preset_names() -> list[str]:
    return sorted(f.name[:-4] for f in resources.files("ttavid.presets").iterdir()
                  if f.name.endswith(".ini"))


def render_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, attr in _SECTIONS.items():
        target = getattr(cfg, attr)
        out.write(f"[{section}]\n")
        for f in fields(target):
            if f.name in _SKIP.get(section, ()):
                continue
            out.write(f"{f.name} = {_render(getattr(target, f.name))}\n")
        out.write("\n")
    return out.getvalue()
