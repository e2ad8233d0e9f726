"""Post-adaptation frame distributions: global prior, regridding, blending, persistence."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bandit import FrameDistribution, sample_subset

FDIST_VERSION = "fdist-v1"


class DistFormatError(ValueError):
    """Malformed distribution file."""

    def __init__(self, msg: str, offset: int | None = None, path=None):
        where = f"{path}: " if path is not None else ""
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{msg}{at}")
        self.offset = offset


class SelectMode(str, enum.Enum):
    SAMPLE = "sample"
    TOPK = "topk"


@dataclass(frozen=True)
class GlobalPrior:
    probs: np.ndarray
    source_count: int

    @property
    def T(self) -> int:
        return len(self.probs)

    def __eq__(self, other):
        if not isinstance(other, GlobalPrior):
            return NotImplemented
        return self.source_count == other.source_count and np.array_equal(self.probs, other.probs)


@dataclass(frozen=True)
class BlendSpec:
    w_clip: float
    w_dist: float

    def __post_init__(self):
        if not (0 <= self.w_clip <= 1 and 0 <= self.w_dist <= 1):
            raise ValueError("blend weights must lie in [0, 1]")
        if abs(self.w_clip + self.w_dist - 1.0) > 1e-12:
            raise ValueError(f"blend weights must sum to 1, got {self.w_clip} + {self.w_dist}")


def _probs_of(d) -> np.ndarray:
    if isinstance(d, (FrameDistribution, GlobalPrior)):
        return d.probs
    return np.asarray(d, dtype=float)


def average_distributions(dists: Sequence) -> GlobalPrior:
    if not dists:
        raise ValueError("cannot average an empty list of distributions")
    rows = [_probs_of(d) for d in dists]
    grids = sorted({len(r) for r in rows})
    if len(grids) != 1:
        raise ValueError(f"mixed frame grids {grids}; interpolate to a common grid first")
    stacked = np.stack(rows)
    mean = np.array([math.fsum(col) for col in stacked.T]) / len(rows)
    return GlobalPrior(mean, len(rows))


def interpolate(probs, T_dst: int) -> np.ndarray:
    """Piecewise-linear resampling onto a ``T_dst`` grid over normalized positions, renormalized."""
    src = _probs_of(probs)
    if len(src) < 2:
        raise ValueError(f"need at least 2 source frames, got {len(src)}")
    if T_dst < 1:
        raise ValueError("T_dst must be >= 1")
    if T_dst == len(src):
        return src / math.fsum(src)
    x_src = np.arange(len(src)) / (len(src) - 1)
    x_dst = np.array([0.5]) if T_dst == 1 else np.arange(T_dst) / (T_dst - 1)
    raw = np.interp(x_dst, x_src, src)
    return raw / math.fsum(raw)


def blend(clip_probs, learned_probs, spec: BlendSpec) -> np.ndarray:
    c = _probs_of(clip_probs)
    d = _probs_of(learned_probs)
    if c.shape != d.shape:
        raise ValueError(f"length mismatch: {len(c)} vs {len(d)}")
    if spec.w_dist == 0.0:
        return c.copy()
    if spec.w_clip == 0.0:
        return d.copy()
    mix = spec.w_clip * c + spec.w_dist * d
    return mix / math.fsum(mix)


def select_inference_frames(probs, F_out: int, mode: SelectMode | str = SelectMode.SAMPLE,
                            rng: np.random.Generator | None = None) -> tuple[int, ...]:
    p = _probs_of(probs)
    if F_out > len(p):
        raise ValueError(f"F_out={F_out} exceeds grid size {len(p)}")
    if SelectMode(mode) is SelectMode.TOPK:
        # stable sort on -p keeps lower indices first among ties
        order = np.argsort(-p, kind="stable")
        return tuple(sorted(int(i) for i in order[:F_out]))
    if rng is None:
        raise ValueError("sampling mode needs an rng")
    return sample_subset(p, F_out, rng)


# -- fdist-v1 ------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("non-finite value in distribution")
    return format(x, ".17g")


def _render(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_render(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_render(v) for v in obj) + "]"
    raise TypeError(f"cannot render {type(obj).__name__}")


def render_fdist(doc: dict) -> str:
    lines = ["{"]
    items = list(doc.items())
    for i, (k, v) in enumerate(items):
        sep = "," if i < len(items) - 1 else ""
        lines.append(f"  {json.dumps(k)}: {_render(v)}{sep}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def fdist_doc(dist: FrameDistribution, video_id: str = "", question_id: str = "",
              created_unix: int = 0) -> dict:
    return {
        "version": FDIST_VERSION,
        "num_frames": dist.T,
        "init": dist.init_kind,
        "weights": [float(x) for x in dist.weights],
        "probs": [float(x) for x in dist.probs],
        "step_count": dist.step_count,
        "meta": {"video_id": video_id, "question_id": question_id, "created_unix": int(created_unix)},
    }


def prior_doc(prior: GlobalPrior, created_unix: int = 0, video_id: str = "",
              question_id: str = "") -> dict:
    probs = [float(x) for x in prior.probs]
    return {
        "version": FDIST_VERSION,
        "kind": "global",
        "num_frames": prior.T,
        "init": "uniform",
        "weights": probs,
        "probs": probs,
        "step_count": 0,
        "source_count": prior.source_count,
        "meta": {"video_id": video_id, "question_id": question_id, "created_unix": int(created_unix)},
    }


def write_fdist(path, obj, **meta) -> None:
    doc = obj if isinstance(obj, dict) else (
        prior_doc(obj, **meta) if isinstance(obj, GlobalPrior) else fdist_doc(obj, **meta))
    Path(path).write_text(render_fdist(doc), encoding="utf-8")


def parse_fdist(text: str | bytes, path=None) -> dict:
    """Parse and validate an fdist-v1 document; errors carry a byte offset."""
    if isinstance(text, bytes):
        raw = text
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DistFormatError(f"invalid UTF-8: {exc.reason}", exc.start, path) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DistFormatError(f"invalid JSON: {exc.msg}", offset, path) from None
    if not isinstance(doc, dict):
        raise DistFormatError("top level must be an object", 0, path)

    def field_offset(name: str) -> int:
        i = text.find(json.dumps(name))
        return len(text[: max(i, 0)].encode("utf-8"))

    if doc.get("version") != FDIST_VERSION:
        raise DistFormatError(f"version must be {FDIST_VERSION!r}", field_offset("version"), path)
    for name in ("num_frames", "init", "weights", "probs", "step_count", "meta"):
        if name not in doc:
            raise DistFormatError(f"missing field {name!r}", len(text.encode("utf-8")), path)
    T = doc["num_frames"]
    if not isinstance(T, int) or T < 1:
        raise DistFormatError("num_frames must be a positive integer", field_offset("num_frames"), path)
    for name in ("weights", "probs"):
        v = doc[name]
        if (not isinstance(v, list) or len(v) != T
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            raise DistFormatError(f"{name} must be a list of {T} numbers", field_offset(name), path)
        if any(x < 0 for x in v):
            raise DistFormatError(f"{name} has negative entries", field_offset(name), path)
    if doc["init"] not in ("uniform", "clip"):
        raise DistFormatError("init must be 'uniform' or 'clip'", field_offset("init"), path)
    if doc.get("kind") == "global" and not isinstance(doc.get("source_count"), int):
        raise DistFormatError("global prior needs integer source_count", field_offset("kind"), path)
    return doc


def read_fdist(path) -> dict:
    return parse_fdist(Path(path).read_bytes(), path)


def doc_to_distribution(doc: dict) -> FrameDistribution:
    return FrameDistribution(np.asarray(doc["weights"], dtype=float),
                             np.asarray(doc["probs"], dtype=float),
                             doc["init"], int(doc["step_count"]))


def doc_to_prior(doc: dict) -> GlobalPrior:
    return GlobalPrior(np.asarray(doc["probs"], dtype=float), int(doc.get("source_count", 1)))


def load_distribution(path) -> FrameDistribution:
    return doc_to_distribution(read_fdist(path))


def load_prior(path) -> GlobalPrior:
    return doc_to_prior(read_fdist(path))
