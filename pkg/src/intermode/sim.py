"""Deterministic articulated-object world driven by four gripper keyposes.

Parts are oriented boxes attached to the world by one prismatic or revolute
joint. The gripper is a point with an open/close bit; grasping is a radius
rule around each part's handle, and an open-handed push through a part's
front face drives the joint in the push direction only.

Quaternions use scipy's (x, y, z, w) order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

GRASP_RADIUS = 0.05
SEGMENT_SAMPLES = 32
POINTS_PER_PART = 256
HANDLE_POINTS = 32
GRIPPER_POINTS = 64
GRIPPER_HALF = np.array([0.02, 0.04, 0.05])
APPROACH_OFFSET = 0.2

FIXTURE_NAMES = ("drawer_1", "drawer_2", "door", "cabinet_2door", "faucet_lever", "switch")


class SpecError(ValueError):
    pass


def _vec(x, n=3) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise SpecError(f"expected {n}-vector, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PartSpec:
    name: str
    joint_kind: str  # "prismatic" | "revolute"
    axis: np.ndarray
    joint_range: tuple[float, float]
    origin: np.ndarray  # box center at joint value 0
    body: np.ndarray  # box half-extents
    handle_offset: np.ndarray  # handle center in the part frame, relative to box center
    color: np.ndarray
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    handle_half: np.ndarray = field(default_factory=lambda: np.array([0.015, 0.05, 0.015]))
    front_normal: np.ndarray | None = None

    @property
    def d_min(self) -> float:
        return self.joint_range[0]

    @property
    def d_max(self) -> float:
        return self.joint_range[1]

    @property
    def span(self) -> float:
        return self.joint_range[1] - self.joint_range[0]

    def local_front_normal(self) -> np.ndarray:
        if self.front_normal is not None:
            return self.front_normal
        k = int(np.argmax(np.abs(self.handle_offset)))
        n = np.zeros(3)
        n[k] = math.copysign(1.0, self.handle_offset[k])
        return n

    def pose(self, d: float) -> tuple[np.ndarray, np.ndarray]:
        """(rotation matrix, box center) of the part at joint value ``d``."""
        if self.joint_kind == "prismatic":
            return np.eye(3), self.origin + d * self.axis
        rot = Rotation.from_rotvec(self.axis * d).as_matrix()
        return rot, self.pivot + rot @ (self.origin - self.pivot)

    def handle_world(self, d: float) -> np.ndarray:
        rot, center = self.pose(d)
        return center + rot @ self.handle_offset

    def point_velocity(self, point: np.ndarray, d: float) -> np.ndarray:
        """d(point)/d(joint value) for a point rigidly attached to the part."""
        if self.joint_kind == "prismatic":
            return self.axis.copy()
        return np.cross(self.axis, point - self.pivot)

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "joint_kind": self.joint_kind,
            "axis": self.axis.tolist(),
            "pivot": self.pivot.tolist(),
            "joint_range": list(self.joint_range),
            "origin": self.origin.tolist(),
            "body": self.body.tolist(),
            "handle_offset": self.handle_offset.tolist(),
            "handle_half": self.handle_half.tolist(),
            "color": self.color.tolist(),
        }
        if self.front_normal is not None:
            out["front_normal"] = self.front_normal.tolist()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PartSpec":
        try:
            kind = d["joint_kind"]
            if kind not in ("prismatic", "revolute"):
                raise SpecError(f"unknown joint kind {kind!r}")
            lo, hi = (float(v) for v in d["joint_range"])
            return cls(
                name=str(d.get("name", "part")),
                joint_kind=kind,
                axis=_vec(d["axis"]),
                joint_range=(lo, hi),
                origin=_vec(d["origin"]),
                body=_vec(d["body"]),
                handle_offset=_vec(d["handle_offset"]),
                color=_vec(d["color"]),
                pivot=_vec(d.get("pivot", [0, 0, 0])),
                handle_half=_vec(d.get("handle_half", [0.015, 0.05, 0.015])),
                front_normal=_vec(d["front_normal"]) if "front_normal" in d else None,
            )
        except KeyError as exc:
            raise SpecError(f"missing part field {exc}") from None


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    parts: tuple[PartSpec, ...]
    workspace: tuple[np.ndarray, np.ndarray] = (np.full(3, -1.0), np.full(3, 1.0))

    def __post_init__(self):
        validate_spec(self)

    @property
    def scene_center(self) -> np.ndarray:
        return 0.5 * (self.workspace[0] + self.workspace[1])

    @property
    def scene_scale(self) -> float:
        return float(0.5 * np.max(self.workspace[1] - self.workspace[0]))

    @property
    def home(self) -> "KeyPose":
        lo, hi = self.workspace
        c = self.scene_center
        half = 0.5 * (hi - lo)
        return KeyPose(c + np.array([0.85, 0.0, 0.85]) * half, np.array([0.0, 0.0, 0.0, 1.0]), 0)

    def in_workspace(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(p >= self.workspace[0] - tol) and np.all(p <= self.workspace[1] + tol))

    def to_json(self) -> dict:
        return {"name": self.name,
                "workspace": [self.workspace[0].tolist(), self.workspace[1].tolist()],
                "parts": [p.to_json() for p in self.parts]}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectSpec":
        ws = d.get("workspace", [[-1, -1, -1], [1, 1, 1]])
        parts = tuple(PartSpec.from_json(p) for p in d.get("parts", []))
        return cls(name=str(d.get("name", "object")), parts=parts,
                   workspace=(_vec(ws[0]), _vec(ws[1])))


def _box_corners(rot: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return center + (signs * half) @ rot.T


def validate_spec(spec: ObjectSpec) -> None:
    if not spec.parts:
        raise SpecError("object needs at least one part")
    lo, hi = spec.workspace
    if np.any(hi <= lo):
        raise SpecError("empty workspace")
    for part in spec.parts:
        if not part.d_min < part.d_max:
            raise SpecError(f"part {part.name}: joint range must satisfy d_min < d_max")
        if abs(np.linalg.norm(part.axis) - 1.0) > 1e-6:
            raise SpecError(f"part {part.name}: axis must be a unit vector")
        if np.any(part.body <= 0) or np.any(part.handle_half <= 0):
            raise SpecError(f"part {part.name}: half-extents must be positive")
        for d in np.linspace(part.d_min, part.d_max, 9):
            rot, center = part.pose(d)
            pts = np.vstack([_box_corners(rot, center, part.body),
                             _box_corners(rot, center + rot @ part.handle_offset, part.handle_half)])
            if np.any(pts < lo - 1e-9) or np.any(pts > hi + 1e-9):
                raise SpecError(f"part {part.name} leaves the workspace at joint value {d:.3f}")


# -- state ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPose:
    p: np.ndarray
    R: np.ndarray
    q: int

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        r = np.asarray(self.R, dtype=np.float64)
        object.__setattr__(self, "R", r / np.linalg.norm(r))
        if self.q not in (0, 1):
            raise ValueError("gripper bit must be 0 or 1")

    @property
    def approach(self) -> np.ndarray:
        """Unit direction the gripper moves along when closing in (local +z)."""
        return Rotation.from_quat(self.R).apply([0.0, 0.0, 1.0])

    def to_json(self) -> dict:
        return {"p": self.p.tolist(), "R": self.R.tolist(), "q": int(self.q)}

    @classmethod
    def from_json(cls, d: dict) -> "KeyPose":
        return cls(np.array(d["p"]), np.array(d["R"]), int(d["q"]))


@dataclass(frozen=True)
class WorldState:
    spec: ObjectSpec
    dof: np.ndarray
    gripper: KeyPose
    attached_part: int | None = None
    phase: int = -1  # last executed phase
    valid: bool = True


def init_state(spec: ObjectSpec, mode: str = "half_open", seed: int = 0) -> WorldState:
    if mode == "half_open":
        dof = np.array([0.5 * (p.d_min + p.d_max) for p in spec.parts])
    elif mode == "random":
        rng = np.random.default_rng(seed)
        dof = np.array([rng.uniform(p.d_min, p.d_max) for p in spec.parts])
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return WorldState(spec, dof, spec.home)


def _to_local(part: PartSpec, d: float, pts: np.ndarray) -> np.ndarray:
    rot, center = part.pose(d)
    return (pts - center) @ rot


def segment_hits_body(state: WorldState, a: np.ndarray, b: np.ndarray) -> bool:
    ts = np.linspace(0.0, 1.0, SEGMENT_SAMPLES)[:, None]
    pts = a + ts * (b - a)
    for part, d in zip(state.spec.parts, state.dof):
        local = _to_local(part, d, pts)
        if np.any(np.all(np.abs(local) < part.body - 1e-9, axis=1)):
            return True
    return False


def _push(state: WorldState, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Joint values after an open-hand move p1 -> p2 (front-face pushes only)."""
    dof = state.dof.copy()
    best = None
    for i, (part, d) in enumerate(zip(state.spec.parts, state.dof)):
        n = part.local_front_normal()
        k = int(np.argmax(np.abs(n)))
        h = part.body[k]
        a, b = _to_local(part, d, np.vstack([p1, p2]))
        m = b - a
        an, bn, mn = a @ n, b @ n, m @ n
        if an < h - 1e-6 or mn >= 0 or bn >= h:
            continue
        t = (h - an) / mn
        c = a + t * m
        lateral = [j for j in range(3) if j != k]
        if np.any(np.abs(c[lateral]) > part.body[lateral] + 1e-9):
            continue
        if best is None or t < best[0]:
            best = (t, i, c, h - bn)
    if best is None:
        return dof
    _, i, c_local, depth = best
    part = state.spec.parts[i]
    rot, center = part.pose(state.dof[i])
    c_world = center + rot @ c_local
    n_world = rot @ part.local_front_normal()
    rate = float(part.point_velocity(c_world, state.dof[i]) @ n_world)
    if abs(rate) < 1e-6:
        return dof
    dof[i] = np.clip(state.dof[i] - depth / rate, part.d_min, part.d_max)
    return dof


def step_keypose(state: WorldState, a: KeyPose, phase: int) -> WorldState:
    """Execute keypose ``a`` as phase 0 (initiation) .. 3 (manipulation)."""
    if phase != state.phase + 1 or not 0 <= phase <= 3:
        raise ValueError(f"phase {phase} out of order (last executed {state.phase})")
    spec = state.spec
    if not state.valid:
        return replace(state, phase=phase)
    if not spec.in_workspace(a.p):
        return replace(state, phase=phase, valid=False)
    start = state.gripper.p
    if phase <= 1:
        if segment_hits_body(state, start, a.p):
            return replace(state, gripper=a, phase=phase, valid=False)
        return replace(state, gripper=a, phase=phase)
    if phase == 2:
        if segment_hits_body(state, start, a.p):
            return replace(state, gripper=a, phase=phase, valid=False)
        attached = None
        if a.q == 1:
            dists = [np.linalg.norm(a.p - part.handle_world(d)) for part, d in zip(spec.parts, state.dof)]
            i = int(np.argmin(dists))
            if dists[i] <= GRASP_RADIUS:
                attached = i
        return replace(state, gripper=a, attached_part=attached, phase=phase)
    # phase 3: manipulation
    dof = state.dof.copy()
    gripper = a
    if state.attached_part is not None and state.gripper.q == 1:
        i = state.attached_part
        part = spec.parts[i]
        motion = a.p - start
        if part.joint_kind == "prismatic":
            delta = float(motion @ part.axis)
        else:
            hw = part.handle_world(state.dof[i])
            vel = part.point_velocity(hw, state.dof[i])
            lever = float(np.linalg.norm(vel))
            delta = float(motion @ (vel / lever)) / lever if lever > 1e-9 else 0.0
        dof[i] = np.clip(state.dof[i] + delta, part.d_min, part.d_max)
        gripper = replace(a, p=np.clip(part.handle_world(dof[i]), *spec.workspace))
    else:
        dof = _push(state, start, a.p)
    attached = state.attached_part if a.q == 1 else None
    return replace(state, dof=dof, gripper=gripper, attached_part=attached, phase=phase)


def run_keyposes(state: WorldState, keyposes: Sequence[KeyPose]) -> WorldState:
    for phase, a in enumerate(keyposes):
        state = step_keypose(state, a, phase)
    return state


def dof_success(init: WorldState, final: WorldState, frac: float = 0.3) -> tuple[list[bool], bool]:
    per_part = [abs(f - i) / p.span > frac
                for p, i, f in zip(init.spec.parts, init.dof, final.dof)]
    return per_part, any(per_part)


def executed_mode(init: WorldState, final: WorldState, frac: float = 0.3) -> str:
    """Label ``"<part>+"``/``"<part>-"`` for the largest relative move, or ``"none"``."""
    rel = np.array([(f - i) / p.span for p, i, f in zip(init.spec.parts, init.dof, final.dof)])
    k = int(np.argmax(np.abs(rel)))
    if abs(rel[k]) <= frac:
        return "none"
    return f"{k}{'+' if rel[k] > 0 else '-'}"


# -- point clouds --------------------------------------------------------------------

@dataclass(frozen=True)
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError("points must be N x 3 with N >= 1")
        if self.colors.shape != self.points.shape:
            raise ValueError("colors must match points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def merge(clouds: Sequence["ColoredPointCloud"]) -> "ColoredPointCloud":
        return ColoredPointCloud(np.vstack([c.points for c in clouds]),
                                 np.vstack([c.colors for c in clouds]))


def sample_box_surface(rng: np.random.Generator, half: np.ndarray, n: int) -> np.ndarray:
    """Uniform samples on the surface of an axis-aligned box centered at 0."""
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    probs = np.repeat(areas, 2) / (2 * areas.sum())
    faces = rng.choice(6, size=n, p=probs)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = faces // 2
    pts[np.arange(n), axis] = np.where(faces % 2 == 0, -1.0, 1.0)
    return pts * half


def _part_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0x51A])


def render_cloud(state: WorldState, occlude_robot: bool = True, seed: int = 0,
                 noise: float = 0.004, n_pts: int = POINTS_PER_PART,
                 n_gripper: int = GRIPPER_POINTS, shift: float = 0.0,
                 light: float = 0.0) -> ColoredPointCloud:
    """Colored surface samples of every part (and the gripper unless occluded).

    Samples are drawn in each part's own frame from a generator keyed on
    (seed, part index), so moving one part leaves the other parts' points
    bit-identical. ``noise`` is per-point jitter; ``shift`` is the std of one
    whole-scene offset per render (sensor registration error) and ``light``
    the std of one global brightness gain per render.
    """
    pts, cols = [], []
    n_handle = min(HANDLE_POINTS, n_pts // 2)
    for i, (part, d) in enumerate(zip(state.spec.parts, state.dof)):
        rng = _part_seed(seed, i)
        body = sample_box_surface(rng, part.body, n_pts - n_handle)
        handle = sample_box_surface(rng, part.handle_half, n_handle) + part.handle_offset
        local = np.vstack([body, handle])
        jitter = rng.normal(0.0, noise, size=local.shape) if noise > 0 else 0.0
        rot, center = part.pose(d)
        pts.append(center + local @ rot.T + jitter)
        cols.append(np.vstack([np.tile(part.color, (len(body), 1)),
                               np.tile(0.35 * part.color, (n_handle, 1))]))
    if not occlude_robot:
        rng = _part_seed(seed, 1_000)
        g = state.gripper
        local = sample_box_surface(rng, GRIPPER_HALF, n_gripper) - np.array([0.0, 0.0, GRIPPER_HALF[2]])
        pts.append(g.p + Rotation.from_quat(g.R).apply(local))
        shade = 0.15 if g.q == 1 else 0.85
        cols.append(np.full((n_gripper, 3), shade))
    points = np.vstack(pts)
    colors = np.vstack(cols)
    scene_rng = np.random.default_rng([seed, 0x5C1F7])
    offset, gain = scene_rng.normal(0.0, 1.0, 3), scene_rng.normal(0.0, 1.0)
    if shift > 0:
        points = points + shift * offset
    if light > 0:
        colors = colors * (1.0 + light * gain)
    lo, hi = state.spec.workspace
    return ColoredPointCloud(np.clip(points, lo, hi), np.clip(colors, 0.0, 1.0))


# -- scripted witnesses ------------------------------------------------------------------

def approach_rotation(direction: np.ndarray) -> np.ndarray:
    """Quaternion whose local +z points along ``direction``."""
    d = direction / np.linalg.norm(direction)
    rot, _ = Rotation.align_vectors([d], [[0.0, 0.0, 1.0]])
    return rot.as_quat()


def scripted_witness(state: WorldState, part_index: int, direction: int,
                     method: str = "grasp", amount: float = 0.45) -> list[KeyPose]:
    """Keyposes moving part ``part_index`` by ``amount`` of its range in ``direction`` (+1/-1).

    ``method="grasp"`` pulls or pushes the grasped handle; ``method="push"``
    presses the front face with an open hand (only moves the joint whichever
    way the face recedes).
    """
    part = state.spec.parts[part_index]
    d = state.dof[part_index]
    rot, center = part.pose(d)
    n_w = rot @ part.local_front_normal()
    R0 = approach_rotation(-n_w)
    if method == "grasp":
        p1 = part.handle_world(d)
        vel = part.point_velocity(p1, d)
        speed = float(np.linalg.norm(vel))
        p2 = p1 + direction * amount * part.span * speed * (vel / speed)
    elif method == "push":
        k = int(np.argmax(np.abs(part.local_front_normal())))
        face_local = np.zeros(3)
        face_local[k] = part.body[k] * np.sign(part.local_front_normal()[k])
        # press off-center so revolute parts get a usable lever
        lateral = [j for j in range(3) if j != k]
        best = None
        for j in lateral:
            for s in (-1, 1):
                cand = face_local.copy()
                cand[j] = 0.6 * s * part.body[j]
                c_w = center + rot @ cand
                rate = float(part.point_velocity(c_w, d) @ n_w)
                if -direction * rate > 1e-6 and (best is None or abs(rate) > abs(best[1])):
                    best = (c_w, rate)
        if best is None:
            raise ValueError("no front-face push moves this part in that direction")
        c_w, rate = best
        p1 = c_w + 0.02 * n_w
        p2 = p1 - (0.02 + amount * part.span * abs(rate)) * n_w
    else:
        raise ValueError(f"unknown witness method {method!r}")
    p0 = p1 + APPROACH_OFFSET * n_w
    return [KeyPose(p0, R0, 0), KeyPose(p1, R0, 0), KeyPose(p1, R0, 1), KeyPose(p2, R0, 1)]


# -- fixtures ----------------------------------------------------------------------------

def load_object(path: str | Path) -> ObjectSpec:
    return ObjectSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def load_fixture(name: str) -> ObjectSpec:
    text = resources.files("intermode.fixtures").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return ObjectSpec.from_json(json.loads(text))


def fixture_set() -> list[ObjectSpec]:
    return [load_fixture(n) for n in FIXTURE_NAMES]
