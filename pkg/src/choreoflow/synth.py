"""Procedural two-class dance corpus used as a desk-scale training set.

Class ``arms``: both arms rise sideways and return, periodically.
Class ``legs``: the left leg lifts forward with a bent knee, periodically.
Each motion is paired with an annotation naming the moving segments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .choreo import ChoreoAnnotation
from .errors import ConfigError
from .io import write_motion
from .kinematics import forward_kinematics
from .metrics import kinetic_features
from .representation import IDENTITY_DIM, MotionSequence
from .schema import SkeletonSchema

CLASS_ANNOTATIONS = {
    "arms": {
        "phrases": [{
            "body": {"left_arm": "raise", "right_arm": "raise"},
            "space": {"plane": "coronal", "direction": "up", "level": "high"},
            "orientation": 1,
            "effort": {"weight": "light", "space": "direct", "time": "sustained", "flow": "free"},
        }],
        "free_text": "both arms rise sideways overhead and return",
        "word_count": 7,
    },
    "legs": {
        "phrases": [{
            "body": {"left_leg": "lift"},
            "space": {"plane": "sagittal", "direction": "forward", "level": "middle"},
            "orientation": 1,
            "effort": {"weight": "strong", "space": "direct", "time": "sudden", "flow": "bound"},
        }],
        "free_text": "the left knee lifts forward and steps back down",
        "word_count": 9,
    },
}

REQUIRED_JOINTS = ("l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_hip", "l_knee", "spine1")


@dataclass
class SynthConfig:
    per_class: int = 100
    classes: tuple[str, ...] = ("arms", "legs")
    frames: int = 48
    fps: float = 24.0
    amplitude_jitter: float = 0.08
    frequency_jitter: float = 0.08
    min_separation: float = 5.0
    max_attempts: int = 20


@dataclass
class SynthCorpus:
    motions: list[MotionSequence]
    annotations: list[ChoreoAnnotation]
    labels: list[str]
    seed: int
    separation: float = field(default=0.0)


def _set(frames, schema, joint, k, values):
    s = schema.native_slices[joint]
    frames[:, s.start + k] = values


def _standing_height(schema: SkeletonSchema) -> float:
    zero = MotionSequence(schema.name, 1.0, np.zeros((1, schema.native_pose_dim)))
    pos = forward_kinematics(zero, schema).positions[0]
    up = {"x": 0, "y": 1, "z": 2}[schema.up_axis]
    return float(-pos[:, up].min())


def make_motion(schema: SkeletonSchema, label: str, rng: np.random.Generator, cfg: SynthConfig,
                standing: float) -> MotionSequence:
    T = cfg.frames
    t = np.arange(T) / cfg.fps
    amp = 1.0 + rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter)
    freq = 1.0 + rng.uniform(-cfg.frequency_jitter, cfg.frequency_jitter)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 * (1.0 - np.cos(2 * np.pi * freq * t + phase))
    f = np.zeros((T, schema.native_pose_dim))
    f[:, 1] = standing
    sway = 0.02 * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi))
    f[:, 0] = sway
    _set(f, schema, "spine1", 2, 0.05 * np.sin(2 * np.pi * 0.5 * t + phase))
    if label == "arms":
        lift = 1.3 * amp * wave
        # shoulders use YZX order: index 1 is the Z angle
        _set(f, schema, "l_shoulder", 1, lift)
        _set(f, schema, "r_shoulder", 1, -lift)
        _set(f, schema, "l_elbow", 0, 0.3 * amp * wave)
        _set(f, schema, "r_elbow", 0, -0.3 * amp * wave)
    elif label == "legs":
        lift = 1.2 * amp * wave
        _set(f, schema, "l_hip", 0, -lift)
        _set(f, schema, "l_knee", 0, 1.4 * amp * wave)
    else:
        raise ConfigError(f"unknown motion class {label!r}")
    identity = rng.normal(0.0, 1.0, IDENTITY_DIM)
    return MotionSequence(schema.name, cfg.fps, f, identity)


def class_separation(motions, labels, schema: SkeletonSchema) -> float:
    """Min centroid distance over pooled within-class RMS spread, in kinetic-feature space."""
    feats = np.array([kinetic_features(forward_kinematics(m, schema), m.fps).values for m in motions])
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    cents = {c: feats[labels == c].mean(axis=0) for c in classes}
    spread = np.sqrt(np.mean([np.sum((feats[i] - cents[labels[i]]) ** 2) for i in range(len(feats))]))
    dmin = min(np.linalg.norm(cents[a] - cents[b]) for i, a in enumerate(classes) for b in classes[i + 1:])
    return float(dmin / max(spread, 1e-12))


def synth_dataset(schema: SkeletonSchema, seed: int = 0, cfg: SynthConfig | None = None) -> SynthCorpus:
    cfg = cfg or SynthConfig()
    missing = [j for j in REQUIRED_JOINTS if j not in schema.index]
    if missing:
        raise ConfigError(f"schema {schema.name!r} lacks joints {missing}")
    if cfg.per_class < 2:
        raise ConfigError("per_class must be at least 2")
    standing = _standing_height(schema)
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([seed, attempt])
        motions, labels = [], []
        for label in cfg.classes:
            for _ in range(cfg.per_class):
                motions.append(make_motion(schema, label, rng, cfg, standing))
                labels.append(label)
        sep = class_separation(motions, labels, schema)
        if sep >= cfg.min_separation:
            anns = [ChoreoAnnotation.from_dict(CLASS_ANNOTATIONS[l]) for l in labels]
            return SynthCorpus(motions, anns, labels, seed, sep)
    raise ConfigError(f"could not reach class separation {cfg.min_separation} in {cfg.max_attempts} attempts")


def write_corpus(corpus: SynthCorpus, out_dir, schema: SkeletonSchema) -> Path:
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    items = []
    for m, a, label in zip(corpus.motions, corpus.annotations, corpus.labels):
        k = counters.get(label, 0)
        counters[label] = k + 1
        stem = f"{label}_{k:03d}"
        write_motion(m, out / "motions" / f"{stem}.dfm", schema)
        (out / "annotations" / f"{stem}.json").write_text(json.dumps(a.to_dict(), indent=2, sort_keys=True) + "\n")
        items.append({"motion": f"motions/{stem}.dfm", "annotation": f"annotations/{stem}.json", "label": label})
    manifest = {"schema": schema.name, "seed": corpus.seed, "separation": corpus.separation, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_corpus(root, schema: SkeletonSchema):
    """Returns ``(motions, annotations, labels)`` from a written corpus directory."""
    from .choreo import load_annotation
    from .io import read_motion

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    motions, anns, labels = [], [], []
    for it in manifest["items"]:
        motions.append(read_motion(root / it["motion"], schema))
        anns.append(load_annotation(root / it["annotation"]))
        labels.append(it["label"])
    return motions, anns, labels
