"""Rule-based motion features and distribution metrics (AIST++-style protocol).

Kinetic features: per joint, mean over frames of half the squared speed.
Geometric features: fraction of frames on which each configured boolean
relation between joints holds. Both feature sets are scored with the
Frechet distance between fitted Gaussians and with mean pairwise distance.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, EigenFailure, InsufficientSamples, ShapeError
from .kinematics import UP_INDEX, JointPositions
from .schema import SkeletonSchema

FEATURE_VERSION = 1


@dataclass
class FeatureVector:
    values: np.ndarray
    kind: str


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def _positions(p) -> np.ndarray:
    arr = np.asarray(p.positions if isinstance(p, JointPositions) else p, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"expected T x J x 3 positions, got {arr.shape}")
    return arr


def kinetic_features(p, fps: float) -> FeatureVector:
    pos = _positions(p)
    if pos.shape[0] < 2:
        raise ShapeError("kinetic features need at least 2 frames")
    vel = np.diff(pos, axis=0) * fps
    energy = 0.5 * np.sum(vel * vel, axis=-1)
    return FeatureVector(energy.mean(axis=0), "kinetic")


# ---------------------------------------------------------------- geometric


def load_predicates(path: str | Path | None = None) -> list[dict]:
    if path is None:
        text = (resources.files("choreoflow") / "data" / "predicates.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    return doc["predicates"] if isinstance(doc, dict) else doc


def predicates_hash(predicates: list[dict]) -> str:
    blob = json.dumps({"feature_version": FEATURE_VERSION, "predicates": predicates}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _joint(schema: SkeletonSchema, name: str) -> int:
    if name not in schema.index:
        raise ConfigError(f"predicate references unknown joint {name!r}")
    return schema.index[name]


def _evaluate(pred: dict, pos: np.ndarray, schema: SkeletonSchema) -> np.ndarray:
    up = UP_INDEX[schema.up_axis]
    kind = pred.get("type")
    if kind == "above":
        a, b = _joint(schema, pred["a"]), _joint(schema, pred["b"])
        return pos[:, a, up] > pos[:, b, up] + pred.get("margin", 0.0)
    if kind == "height_above":
        return pos[:, _joint(schema, pred["joint"]), up] > pred["value"]
    if kind == "height_below":
        return pos[:, _joint(schema, pred["joint"]), up] < pred["value"]
    if kind in ("near", "far"):
        a, b = _joint(schema, pred["a"]), _joint(schema, pred["b"])
        d = np.linalg.norm(pos[:, a] - pos[:, b], axis=-1)
        return d < pred["threshold"] if kind == "near" else d > pred["threshold"]
    if kind == "always":
        return np.ones(len(pos), dtype=bool)
    raise ConfigError(f"unknown predicate type {kind!r}")


def geometric_features(p, schema: SkeletonSchema, predicates: list[dict] | None = None) -> FeatureVector:
    pos = _positions(p)
    predicates = load_predicates() if predicates is None else predicates
    vals = np.array([_evaluate(pr, pos, schema).mean() for pr in predicates], dtype=np.float64)
    return FeatureVector(vals, "geometric")


# ---------------------------------------------------------------- distributions


def _matrix(features) -> np.ndarray:
    feats = list(features)
    if feats and isinstance(feats[0], FeatureVector):
        kinds = {f.kind for f in feats}
        if len(kinds) > 1:
            raise ValueError(f"mixed feature kinds {sorted(kinds)}")
        feats = [f.values for f in feats]
    return np.asarray(feats, dtype=np.float64).reshape(len(feats), -1)


def fit_gaussian(features) -> GaussianStats:
    X = _matrix(features)
    if X.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {X.shape[0]}")
    mu = X.mean(axis=0)
    C = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    return GaussianStats(mu, 0.5 * (C + C.T), X.shape[0])


def sqrtm_psd(A: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition; negative eigenvalues clamp to 0."""
    A = 0.5 * (A + A.T)
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as e:
        raise EigenFailure(str(e)) from e
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sa = sqrtm_psd(a.cov)
    M = sa @ b.cov @ sa
    try:
        w = np.linalg.eigvalsh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as e:
        raise EigenFailure(str(e)) from e
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(d, 0.0)


def diversity(features, pairs: int | None = None, seed: int = 0) -> float:
    """Mean Euclidean distance over random distinct pairs, or all pairs when that is fewer."""
    X = _matrix(features)
    n = X.shape[0]
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    if pairs is None or pairs >= n * (n - 1) // 2:
        idx = np.array(list(combinations(range(n), 2)))
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=pairs)
        j = (i + rng.integers(1, n, size=pairs)) % n
        idx = np.stack([i, j], axis=1)
    return float(np.linalg.norm(X[idx[:, 0]] - X[idx[:, 1]], axis=-1).mean())


def aistpp_report(real_pos, gen_pos, fps_real, fps_gen, schema: SkeletonSchema,
                  predicates: list[dict] | None = None, pairs: int | None = None, seed: int = 0) -> dict:
    """Metrics report comparing two collections of ``T x J x 3`` position arrays."""
    predicates = load_predicates() if predicates is None else predicates
    fps_real = np.broadcast_to(fps_real, (len(real_pos),))
    fps_gen = np.broadcast_to(fps_gen, (len(gen_pos),))
    rk = [kinetic_features(p, f) for p, f in zip(real_pos, fps_real)]
    gk = [kinetic_features(p, f) for p, f in zip(gen_pos, fps_gen)]
    rg = [geometric_features(p, schema, predicates) for p in real_pos]
    gg = [geometric_features(p, schema, predicates) for p in gen_pos]
    chash = predicates_hash(predicates)

    def entry(value, kind):
        return {"value": float(value), "kind": kind}

    return {
        "protocol": "aistpp",
        "feature_version": FEATURE_VERSION,
        "config_hash": chash,
        "counts": {"real": len(real_pos), "generated": len(gen_pos)},
        "metrics": {
            "fid_k": entry(frechet_distance(fit_gaussian(rk), fit_gaussian(gk)), "kinetic"),
            "fid_g": entry(frechet_distance(fit_gaussian(rg), fit_gaussian(gg)), "geometric"),
            "dist_k": entry(diversity(gk, pairs, seed), "kinetic"),
            "dist_g": entry(diversity(gg, pairs, seed), "geometric"),
            "dist_k_real": entry(diversity(rk, pairs, seed), "kinetic"),
            "dist_g_real": entry(diversity(rg, pairs, seed), "geometric"),
        },
    }
