"""Choreographic annotations: data model, validation, tokenization and QC sampling.

An annotation is a JSON document::

    {
      "phrases": [
        {
          "body": {"left_arm": "raise", "right_leg": "kick"},
          "space": {"plane": "coronal", "direction": "up", "level": "high"},
          "orientation": 8,
          "effort": {"weight": "strong", "space": "direct", "time": "sudden", "flow": "bound"}
        }
      ],
      "free_text": "optional prose",
      "word_count": 2
    }

Vocabularies live in ``data/vocab.json`` and can be swapped for a custom file.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, RangeError, VocabOverflow

PHRASE_KEYS = ("body", "space", "orientation", "effort")
SPACE_KEYS = ("plane", "direction", "level")
EFFORT_KEYS = ("weight", "space", "time", "flow")
EFFORT_ALIASES = {"space_q": "space"}
TEXT_BUCKETS = 4096
DEFAULT_L_MAX = 256


@dataclass(frozen=True)
class Vocabulary:
    segments: tuple[str, ...]
    movements: tuple[str, ...]
    planes: tuple[str, ...]
    directions: tuple[str, ...]
    levels: tuple[str, ...]
    orientations: tuple[int, ...]
    effort: dict[str, tuple[str, ...]]
    plane_aliases: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(
            segments=tuple(d["segments"]),
            movements=tuple(d["movements"]),
            planes=tuple(d["planes"]),
            directions=tuple(d["directions"]),
            levels=tuple(d["levels"]),
            orientations=tuple(int(o) for o in d["orientations"]),
            effort={k: tuple(v) for k, v in d["effort"].items()},
            plane_aliases=dict(d.get("plane_aliases", {})),
        )

    def canonical_plane(self, plane):
        return self.plane_aliases.get(plane, plane)


def load_vocabulary(path: str | Path | None = None) -> Vocabulary:
    if path is None:
        text = (resources.files("choreoflow") / "data" / "vocab.json").read_text()
    else:
        text = Path(path).read_text()
    return Vocabulary.from_dict(json.loads(text))


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = load_vocabulary()
    return _DEFAULT_VOCAB


@dataclass
class ChoreoPhrase:
    body: dict = field(default_factory=dict)
    space: dict = field(default_factory=dict)
    orientation: object = None
    effort: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d: dict = {"body": dict(self.body)}
        if self.space:
            d["space"] = dict(self.space)
        if self.orientation is not None:
            d["orientation"] = self.orientation
        if self.effort:
            d["effort"] = dict(self.effort)
        d.update(self.extra)
        return d


@dataclass
class ChoreoAnnotation:
    phrases: list[ChoreoPhrase]
    free_text: object = None
    word_count: object = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ChoreoAnnotation":
        """Lenient parse: anything odd is kept and reported by :func:`validate_annotation`."""
        if not isinstance(d, dict):
            return cls(phrases=[], extra={"<document>": d})
        raw = d.get("phrases", [])
        phrases = []
        for p in raw if isinstance(raw, list) else []:
            if not isinstance(p, dict):
                phrases.append(ChoreoPhrase(extra={"<phrase>": p}))
                continue
            effort = p.get("effort", {})
            if isinstance(effort, dict):
                effort = {EFFORT_ALIASES.get(k, k): v for k, v in effort.items()}
            phrases.append(
                ChoreoPhrase(
                    body=p.get("body", {}),
                    space=p.get("space", {}),
                    orientation=p.get("orientation"),
                    effort=effort,
                    extra={k: v for k, v in p.items() if k not in PHRASE_KEYS},
                )
            )
        extra = {k: v for k, v in d.items() if k not in ("phrases", "free_text", "word_count")}
        if "phrases" in d and not isinstance(raw, list):
            extra["phrases"] = raw
        return cls(phrases, d.get("free_text"), d.get("word_count"), extra)

    def to_dict(self) -> dict:
        d: dict = {"phrases": [p.to_dict() for p in self.phrases]}
        if self.free_text is not None:
            d["free_text"] = self.free_text
        if self.word_count is not None:
            d["word_count"] = self.word_count
        return d


def load_annotation(path: str | Path) -> ChoreoAnnotation:
    return ChoreoAnnotation.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Diagnostic:
    phrase: int | None
    path: str
    token: str
    message: str
    severity: str = "error"

    def to_dict(self) -> dict:
        return {
            "phrase": self.phrase, "path": self.path, "token": self.token,
            "message": self.message, "severity": self.severity,
        }


# ---------------------------------------------------------------- validation


def _check_enum(diags, idx, path, value, allowed, what):
    if value is None:
        return
    if not isinstance(value, str) or value not in allowed:
        diags.append(Diagnostic(idx, path, repr(value), f"unknown {what}"))


def _validate_phrase(p: ChoreoPhrase, i: int, vocab: Vocabulary) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    base = f"phrases[{i}]"
    for k, v in p.extra.items():
        if k == "<phrase>":
            diags.append(Diagnostic(i, base, repr(v), "phrase must be an object"))
            return diags
        diags.append(Diagnostic(i, f"{base}.{k}", repr(k), "unknown phrase field"))

    if not isinstance(p.body, dict):
        diags.append(Diagnostic(i, f"{base}.body", repr(p.body), "body must be a map of segment to movement"))
    elif not p.body:
        diags.append(Diagnostic(i, f"{base}.body", "{}", "no body segment specified"))
    else:
        for seg, move in p.body.items():
            if seg not in vocab.segments:
                diags.append(Diagnostic(i, f"{base}.body.{seg}", repr(seg), "unknown body segment"))
            elif not isinstance(move, str) or move not in vocab.movements:
                diags.append(Diagnostic(i, f"{base}.body.{seg}", repr(move), "unknown movement term"))

    if not isinstance(p.space, dict):
        diags.append(Diagnostic(i, f"{base}.space", repr(p.space), "space must be an object"))
    else:
        for k, v in p.space.items():
            path = f"{base}.space.{k}"
            if k == "plane":
                plane = vocab.canonical_plane(v) if isinstance(v, str) else v
                _check_enum(diags, i, path, plane, vocab.planes, "plane")
            elif k == "direction":
                _check_enum(diags, i, path, v, vocab.directions, "direction")
            elif k == "level":
                _check_enum(diags, i, path, v, vocab.levels, "level")
            else:
                diags.append(Diagnostic(i, path, repr(k), "unknown space field"))

    o = p.orientation
    if o is not None:
        if isinstance(o, bool) or not isinstance(o, int):
            diags.append(Diagnostic(i, f"{base}.orientation", repr(o), "orientation must be an integer clock direction"))
        elif o not in vocab.orientations:
            diags.append(Diagnostic(i, f"{base}.orientation", repr(o), "clock direction out of range 1..8"))

    if not isinstance(p.effort, dict):
        diags.append(Diagnostic(i, f"{base}.effort", repr(p.effort), "effort must be an object"))
    else:
        for k, v in p.effort.items():
            path = f"{base}.effort.{k}"
            if k not in vocab.effort:
                diags.append(Diagnostic(i, path, repr(k), "unknown effort factor"))
            else:
                _check_enum(diags, i, path, v, vocab.effort[k], f"{k} polarity")
    return diags


def validate_annotation(a: ChoreoAnnotation | dict, vocab: Vocabulary | None = None) -> list[Diagnostic]:
    vocab = vocab or default_vocabulary()
    if not isinstance(a, ChoreoAnnotation):
        a = ChoreoAnnotation.from_dict(a)
    diags: list[Diagnostic] = []
    for k, v in a.extra.items():
        if k == "<document>":
            return [Diagnostic(None, "", repr(v)[:40], "annotation must be an object")]
        if k == "phrases":
            diags.append(Diagnostic(None, "phrases", repr(v)[:40], "phrases must be a list"))
        else:
            diags.append(Diagnostic(None, k, repr(k), "unknown annotation field"))
    if not a.phrases and "phrases" not in a.extra:
        diags.append(Diagnostic(None, "phrases", "[]", "annotation has no phrases"))
    for i, p in enumerate(a.phrases):
        diags.extend(_validate_phrase(p, i, vocab))

    if a.free_text is not None and not isinstance(a.free_text, str):
        diags.append(Diagnostic(None, "free_text", repr(a.free_text)[:40], "free_text must be a string"))
    elif a.word_count is not None:
        if isinstance(a.word_count, bool) or not isinstance(a.word_count, int):
            diags.append(Diagnostic(None, "word_count", repr(a.word_count), "word_count must be an integer"))
        else:
            expected = len(a.free_text.split()) if isinstance(a.free_text, str) else 0
            if a.word_count != expected:
                diags.append(
                    Diagnostic(None, "word_count", repr(a.word_count),
                               f"word_count does not match free_text ({expected} words)", "warning")
                )
    return diags


# ---------------------------------------------------------------- tokens


class TokenLayout:
    """Fixed id assignment over the structured vocabularies plus text buckets."""

    PAD, NONE, PHRASE, TEXT = 0, 1, 2, 3
    SLOTS = ("phrase",) + tuple(f"body.{i}" for i in range(8)) + (
        "plane", "direction", "level", "orientation", "weight", "space", "time", "flow",
    )

    def __init__(self, vocab: Vocabulary | None = None, text_buckets: int = TEXT_BUCKETS):
        self.vocab = vocab = vocab or default_vocabulary()
        self.text_buckets = text_buckets
        base = 4
        self.body_base = base
        base += len(vocab.segments) * len(vocab.movements)
        self.plane_base = base
        base += len(vocab.planes)
        self.direction_base = base
        base += len(vocab.directions)
        self.level_base = base
        base += len(vocab.levels)
        self.orientation_base = base
        base += len(vocab.orientations)
        self.effort_base = {}
        for k in EFFORT_KEYS:
            self.effort_base[k] = base
            base += len(vocab.effort[k])
        self.text_base = base
        self.size = base + text_buckets
        self.slots_per_phrase = 1 + len(vocab.segments) + 3 + 1 + len(EFFORT_KEYS)

    def text_bucket(self, word: str) -> int:
        h = hashlib.blake2b(word.lower().encode(), digest_size=8).digest()
        return self.text_base + int.from_bytes(h, "little") % self.text_buckets

    def phrase_tokens(self, p: ChoreoPhrase) -> list[int]:
        v = self.vocab
        out = [self.PHRASE]
        nm = len(v.movements)
        for si, seg in enumerate(v.segments):
            move = p.body.get(seg)
            out.append(self.NONE if move is None else self.body_base + si * nm + v.movements.index(move))
        space = p.space or {}
        plane = space.get("plane")
        out.append(self.NONE if plane is None else self.plane_base + v.planes.index(v.canonical_plane(plane)))
        d = space.get("direction")
        out.append(self.NONE if d is None else self.direction_base + v.directions.index(d))
        lv = space.get("level")
        out.append(self.NONE if lv is None else self.level_base + v.levels.index(lv))
        o = p.orientation
        out.append(self.NONE if o is None else self.orientation_base + v.orientations.index(o))
        effort = p.effort or {}
        for k in EFFORT_KEYS:
            val = effort.get(k)
            out.append(self.NONE if val is None else self.effort_base[k] + v.effort[k].index(val))
        return out


def extract_tokens(
    a: ChoreoAnnotation | dict, layout: TokenLayout | None = None, l_max: int = DEFAULT_L_MAX
) -> list[int]:
    """Flatten a validated annotation into token ids (no padding).

    Each phrase occupies ``layout.slots_per_phrase`` slots in a fixed order;
    free-text word buckets follow a TEXT marker and are truncated to fit.
    """
    layout = layout or TokenLayout()
    if not isinstance(a, ChoreoAnnotation):
        a = ChoreoAnnotation.from_dict(a)
    errors = [d for d in validate_annotation(a, layout.vocab) if d.severity == "error"]
    if errors:
        raise ValueError(f"annotation is invalid: {errors[0].path}: {errors[0].message}")
    need = len(a.phrases) * layout.slots_per_phrase
    if need > l_max:
        raise VocabOverflow(f"{len(a.phrases)} phrases need {need} slots, budget is {l_max}")
    tokens: list[int] = []
    for p in a.phrases:
        tokens.extend(layout.phrase_tokens(p))
    if isinstance(a.free_text, str) and a.free_text.split() and len(tokens) < l_max:
        words = a.free_text.split()[: l_max - len(tokens) - 1]
        tokens.append(layout.TEXT)
        tokens.extend(layout.text_bucket(w) for w in words)
    return tokens


# ---------------------------------------------------------------- quality control


@dataclass
class QcBatch:
    batch_id: int
    members: list[int]
    sampled: list[int]


@dataclass
class QcPlan:
    seed: int
    batches: list[QcBatch]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batches": [{"batch_id": b.batch_id, "size": len(b.members), "sampled": b.sampled} for b in self.batches],
        }


@dataclass
class QcBatchReport:
    batch_id: object
    sampled: list
    scores: list[int]
    acceptance_rate: float
    verdict: str

    def to_dict(self) -> dict:
        return {
            "batch_id": self.batch_id, "sampled": list(self.sampled), "scores": list(self.scores),
            "acceptance_rate": self.acceptance_rate, "verdict": self.verdict,
        }


def qc_plan(total: int, batch_count: int, n: int = 30, seed: int = 0) -> QcPlan:
    """Shuffle ids, split into near-equal batches, draw ``n`` per batch without replacement."""
    if batch_count < 1 or total < batch_count:
        raise ConfigError(f"cannot split {total} items into {batch_count} batches")
    if n < 1:
        raise ConfigError("n must be positive")
    smallest = total // batch_count
    if n > smallest:
        raise ConfigError(f"n={n} exceeds the batch size {smallest}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    batches = []
    for b, chunk in enumerate(np.array_split(order, batch_count)):
        members = sorted(int(x) for x in chunk)
        sampled = sorted(int(x) for x in rng.choice(chunk, size=n, replace=False))
        batches.append(QcBatch(b, members, sampled))
    return QcPlan(seed, batches)


def qc_evaluate(
    scores, threshold_score: int = 3, required_rate: float = 0.95, batch_id=None, sampled=None
) -> QcBatchReport:
    scores = list(scores)
    if not scores:
        raise RangeError("no scores given")
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, (int, np.integer)) or not 1 <= s <= 5:
            raise RangeError(f"score {s!r} outside 1..5")
    ok = sum(1 for s in scores if s >= threshold_score)
    rate = ok / len(scores)
    return QcBatchReport(
        batch_id=batch_id,
        sampled=list(sampled) if sampled is not None else list(range(len(scores))),
        scores=[int(s) for s in scores],
        acceptance_rate=rate,
        verdict="pass" if rate >= required_rate else "fail",
    )


def min_acceptable(n: int, required_rate: float = 0.95) -> int:
    """Smallest number of acceptable scores out of ``n`` that passes."""
    k = math.ceil(required_rate * n - 1e-12)
    return k
