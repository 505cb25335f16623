"""Skeleton schemas: joint hierarchy, degrees of freedom and dimension accounting.

Schema files are plain text. A header of ``key: value`` lines is followed by a
``[joints]`` section holding one whitespace-separated row per joint::

    version: 1
    name: minimal2
    up_axis: y
    feet: child

    [joints]
    # name   parent  ox   oy   oz   dof  order  axis  group
    root     -       0    0    0    3    XYZ    -     global
    child    root    0    1    0    1    XYZ    x     hand

``parent`` is ``-`` for the root. ``axis`` is ``-`` for 3-DoF joints and either
``x``/``y``/``z`` (optionally signed) or ``ax,ay,az`` for 1-DoF joints. Optional
header keys ``native_pose_dim`` and ``continuous_dim`` are cross-checked
against the joint table. Lines starting with ``#`` are comments.

Dimension ordering is ``[root channels (6) | global rotation | local joints in
file order]`` in both native and continuous space. Jaw joints keep their slots
in native space and are dropped from continuous space.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, TopologyError

ROOT_CHANNELS = 6
GROUPS = ("global", "body", "hand", "jaw")
SUPPORTED_VERSIONS = (1,)
SCHEMA_DIR_ENV = "CHOREOFLOW_SCHEMA_DIR"

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}
_ORDERS = {"XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX"}


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: str | None
    offset: tuple[float, float, float]
    dof: int
    rotation_order: str = "XYZ"
    group: str = "body"
    axis: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class DimLayout:
    """Index sets of one space (native or continuous)."""

    space: str
    size: int
    root_translation: np.ndarray
    global_rotation: np.ndarray
    body_rotation: np.ndarray
    hand_rotation: np.ndarray
    jaw: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def groups(self) -> dict[str, np.ndarray]:
        return {
            "root_translation": self.root_translation,
            "global_rotation": self.global_rotation,
            "body_rotation": self.body_rotation,
            "hand_rotation": self.hand_rotation,
            "jaw": self.jaw,
        }

    @property
    def rotation(self) -> np.ndarray:
        return np.sort(np.concatenate([self.global_rotation, self.body_rotation, self.hand_rotation]))


@dataclass(frozen=True)
class SkeletonSchema:
    name: str
    joints: tuple[JointSpec, ...]
    version: int = 1
    up_axis: str = "y"
    feet: tuple[str, ...] = ()

    root_channels = ROOT_CHANNELS

    @cached_property
    def root(self) -> JointSpec:
        return next(j for j in self.joints if j.parent is None)

    @cached_property
    def canonical_joints(self) -> tuple[JointSpec, ...]:
        """Root first, then locals in file order (the dimension order)."""
        return (self.root,) + tuple(j for j in self.joints if j.parent is not None)

    @cached_property
    def index(self) -> dict[str, int]:
        return {j.name: i for i, j in enumerate(self.canonical_joints)}

    @cached_property
    def parent_index(self) -> np.ndarray:
        return np.array(
            [-1 if j.parent is None else self.index[j.parent] for j in self.canonical_joints],
            dtype=np.int64,
        )

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.array([j.offset for j in self.canonical_joints], dtype=np.float64)

    @cached_property
    def depth_levels(self) -> list[np.ndarray]:
        """Canonical joint indices grouped by tree depth (root is level 0)."""
        depth = np.zeros(len(self.canonical_joints), dtype=np.int64)
        for i in range(len(depth)):
            k, d = i, 0
            while self.parent_index[k] >= 0:
                k = self.parent_index[k]
                d += 1
            depth[i] = d
        return [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]

    @property
    def jaw_dofs(self) -> int:
        return sum(j.dof for j in self.joints if j.group == "jaw")

    @property
    def native_pose_dim(self) -> int:
        return ROOT_CHANNELS + sum(j.dof for j in self.joints)

    @property
    def active_rotation_dim(self) -> int:
        return sum(j.dof for j in self.joints if j.group != "jaw")

    @property
    def continuous_dim(self) -> int:
        return ROOT_CHANNELS + sum(6 if j.dof == 3 else 2 for j in self.joints if j.group != "jaw")

    @cached_property
    def native_slices(self) -> dict[str, slice]:
        out, k = {}, ROOT_CHANNELS
        for j in self.canonical_joints:
            out[j.name] = slice(k, k + j.dof)
            k += j.dof
        return out

    @cached_property
    def continuous_slices(self) -> dict[str, slice]:
        out, k = {}, ROOT_CHANNELS
        for j in self.canonical_joints:
            if j.group == "jaw":
                continue
            width = 6 if j.dof == 3 else 2
            out[j.name] = slice(k, k + width)
            k += width
        return out

    @cached_property
    def foot_indices(self) -> np.ndarray:
        return np.array([self.index[f] for f in self.feet], dtype=np.int64)

    def joint(self, name: str) -> JointSpec:
        return self.canonical_joints[self.index[name]]

    def to_text(self) -> str:
        """Canonical serialization; also the input of :attr:`hash`."""
        lines = [
            f"version: {self.version}",
            f"name: {self.name}",
            f"up_axis: {self.up_axis}",
            f"feet: {' '.join(self.feet)}",
            f"native_pose_dim: {self.native_pose_dim}",
            f"continuous_dim: {self.continuous_dim}",
            "",
            "[joints]",
        ]
        for j in self.joints:
            axis = "-" if j.axis is None else ",".join(repr(float(a)) for a in j.axis)
            off = " ".join(repr(float(o)) for o in j.offset)
            lines.append(
                f"{j.name} {j.parent or '-'} {off} {j.dof} {j.rotation_order} {axis} {j.group}"
            )
        return "\n".join(lines) + "\n"

    @cached_property
    def hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


def _parse_axis(token: str, line: int) -> tuple[float, float, float]:
    sign = 1.0
    t = token.lower()
    if t[:1] in "+-" and t[1:] in _AXES:
        sign = -1.0 if t[0] == "-" else 1.0
        t = t[1:]
    if t in _AXES:
        return tuple(sign * a for a in _AXES[t])
    try:
        vals = tuple(float(v) for v in token.split(","))
    except ValueError:
        raise ParseError(f"bad axis {token!r}", line=line, field="axis") from None
    if len(vals) != 3:
        raise ParseError(f"axis needs 3 components, got {len(vals)}", line=line, field="axis")
    if abs(np.linalg.norm(vals) - 1.0) > 1e-9:
        raise ParseError(f"axis {token!r} is not a unit vector", line=line, field="axis")
    return vals


def _parse_joint(cols: list[str], line: int) -> JointSpec:
    if len(cols) != 9:
        raise ParseError(f"joint row needs 9 columns, got {len(cols)}", line=line)
    name, parent, ox, oy, oz, dof, order, axis, group = cols
    try:
        offset = (float(ox), float(oy), float(oz))
    except ValueError:
        raise ParseError("offset must be numeric", line=line, field="offset") from None
    try:
        dof_i = int(dof)
    except ValueError:
        raise ParseError(f"dof must be an integer, got {dof!r}", line=line, field="dof") from None
    if dof_i not in (1, 3):
        raise ParseError(f"dof must be 1 or 3, got {dof_i}", line=line, field="dof")
    order = order.upper()
    if order not in _ORDERS:
        raise ParseError(f"rotation order {order!r} is not a permutation of XYZ", line=line, field="order")
    if group not in GROUPS:
        raise ParseError(f"unknown group {group!r}", line=line, field="group")
    if dof_i == 1:
        if axis == "-":
            raise ParseError("1-DoF joint needs an axis", line=line, field="axis")
        ax = _parse_axis(axis, line)
    else:
        if axis != "-":
            raise ParseError("3-DoF joint must not declare an axis", line=line, field="axis")
        ax = None
    return JointSpec(
        name=name,
        parent=None if parent == "-" else parent,
        offset=offset,
        dof=dof_i,
        rotation_order=order,
        group=group,
        axis=ax,
    )


def _check_topology(joints: list[JointSpec]) -> None:
    names = {j.name for j in joints}
    roots = [j for j in joints if j.parent is None]
    if len(roots) != 1:
        raise TopologyError(f"expected exactly one root, found {len(roots)}")
    by_name = {j.name: j for j in joints}
    for j in joints:
        if j.parent is not None and j.parent not in names:
            raise TopologyError(f"joint {j.name!r} has unknown parent {j.parent!r}")
    for j in joints:
        seen = {j.name}
        k = j
        while k.parent is not None:
            if k.parent in seen:
                raise TopologyError(f"cycle through joint {j.name!r}")
            seen.add(k.parent)
            k = by_name[k.parent]
    root = roots[0]
    if root.group != "global" or root.dof != 3:
        raise TopologyError("root joint must be a 3-DoF joint in group 'global'")
    if any(o != 0.0 for o in root.offset):
        raise TopologyError("root offset must be zero; the root is placed by the translation channels")
    extra = [j.name for j in joints if j.group == "global" and j.parent is not None]
    if extra:
        raise TopologyError(f"only the root may be tagged global: {extra}")


def load_schema(document: bytes | str) -> SkeletonSchema:
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    header: dict[str, tuple[str, int]] = {}
    joints: list[JointSpec] = []
    in_joints = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[joints]":
            in_joints = True
            continue
        if in_joints:
            joints.append(_parse_joint(line.split(), lineno))
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value', got {line!r}", line=lineno)
        key, value = (s.strip() for s in line.split(":", 1))
        if key in header:
            raise ParseError("duplicate key", line=lineno, field=key)
        header[key] = (value, lineno)

    if "version" not in header:
        raise ParseError("missing mandatory version field", field="version")
    try:
        version = int(header["version"][0])
    except ValueError:
        raise ParseError("version must be an integer", line=header["version"][1], field="version") from None
    if version not in SUPPORTED_VERSIONS:
        raise ParseError(f"unsupported schema version {version}", line=header["version"][1], field="version")
    if "name" not in header:
        raise ParseError("missing name field", field="name")
    if not joints:
        raise ParseError("no joints declared (missing [joints] section?)")
    seen: set[str] = set()
    for j in joints:
        if j.name in seen:
            raise ParseError(f"duplicate joint name {j.name!r}", field="name")
        seen.add(j.name)
    _check_topology(joints)

    up = header.get("up_axis", ("y", 0))[0].lower()
    if up not in _AXES:
        raise ParseError(f"bad up_axis {up!r}", field="up_axis")
    feet = tuple(header.get("feet", ("", 0))[0].split())
    for f in feet:
        if f not in seen:
            raise ParseError(f"unknown foot joint {f!r}", line=header["feet"][1], field="feet")

    schema = SkeletonSchema(
        name=header["name"][0], joints=tuple(joints), version=version, up_axis=up, feet=feet
    )
    for key in ("native_pose_dim", "continuous_dim"):
        if key in header:
            value, lineno = header[key]
            try:
                declared = int(value)
            except ValueError:
                raise ParseError(f"{key} must be an integer", line=lineno, field=key) from None
            actual = getattr(schema, key)
            if declared != actual:
                raise DimensionError(f"{key} declared {declared} but joint table gives {actual}")
    return schema


def dim_layout(schema: SkeletonSchema, space: str = "continuous") -> DimLayout:
    if space not in ("continuous", "native"):
        raise ValueError(f"space must be 'continuous' or 'native', got {space!r}")
    slices = schema.continuous_slices if space == "continuous" else schema.native_slices
    size = schema.continuous_dim if space == "continuous" else schema.native_pose_dim
    groups: dict[str, list[int]] = {"global": [], "body": [], "hand": [], "jaw": []}
    for j in schema.canonical_joints:
        if j.name in slices:
            s = slices[j.name]
            groups[j.group].extend(range(s.start, s.stop))
    arr = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return DimLayout(
        space=space,
        size=size,
        root_translation=np.arange(ROOT_CHANNELS, dtype=np.int64),
        global_rotation=arr(groups["global"]),
        body_rotation=arr(groups["body"]),
        hand_rotation=arr(groups["hand"]),
        jaw=arr(groups["jaw"]),
    )


def schema_search_path() -> list[Path]:
    paths = [Path(p) for p in os.environ.get(SCHEMA_DIR_ENV, "").split(os.pathsep) if p]
    return paths


def find_schema(name_or_path: str) -> SkeletonSchema:
    """Load a schema by file path, by name on the search path, or from the bundled set."""
    p = Path(name_or_path)
    if p.suffix == ".schema" and p.exists():
        return load_schema(p.read_bytes())
    for d in schema_search_path():
        cand = d / f"{name_or_path}.schema"
        if cand.exists():
            return load_schema(cand.read_bytes())
    bundled = resources.files("choreoflow") / "data" / "schemas" / f"{name_or_path}.schema"
    if bundled.is_file():
        return load_schema(bundled.read_bytes())
    raise FileNotFoundError(f"schema {name_or_path!r} not found")


def bundled_schema_names() -> list[str]:
    d = resources.files("choreoflow") / "data" / "schemas"
    return sorted(p.name[: -len(".schema")] for p in d.iterdir() if p.name.endswith(".schema"))
