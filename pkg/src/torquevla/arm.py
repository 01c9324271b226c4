"""Kinematic and quasi-static model of a serial arm whose last joint is a gripper.

Joint axes and origins are given in the base frame at the zero configuration
and propagated by composing rotations about the preceding axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .validation import ConfigurationError, check_vector

REVOLUTE = "revolute"
GRIPPER = "gripper"

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)
DEFAULT_KT = 0.105
DEFAULT_THRESHOLD = 0.15


@dataclass(frozen=True)
class JointSpec:
    kind: str
    axis: tuple
    origin: tuple
    link_mass: float = 0.0
    link_com: tuple = (0.0, 0.0, 0.0)
    k_t: float = DEFAULT_KT
    residual_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.kind not in (REVOLUTE, GRIPPER):
            raise ConfigurationError(f"unknown joint kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ConfigurationError(f"joint axis must be a unit 3-vector, got {self.axis}")
        if self.k_t <= 0:
            raise ConfigurationError("k_t must be positive")
        if self.link_mass < 0:
            raise ConfigurationError("link_mass must be non-negative")
        if self.residual_threshold <= 0:
            raise ConfigurationError("residual_threshold must be positive")
        for name in ("axis", "origin", "link_com"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float).reshape(3)
        m = np.asarray(self.moment, dtype=float).reshape(3)
        if not (np.isfinite(f).all() and np.isfinite(m).all()):
            raise ValueError("wrench entries must be finite")
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "moment", m)

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, w) -> "Wrench":
        w = np.asarray(w, dtype=float)
        return cls(w[:3], w[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.moment])


@dataclass(frozen=True)
class Jacobian:
    """6 x n geometric Jacobian; rows 0-2 linear velocity, rows 3-5 angular."""

    matrix: np.ndarray

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3]

    @property
    def angular(self) -> np.ndarray:
        return self.matrix[3:]

    @property
    def arm(self) -> np.ndarray:
        return self.matrix[:, :-1]


@dataclass(frozen=True)
class Kinematics:
    origins: np.ndarray  # (n, 3) joint origins p_j
    axes: np.ndarray  # (n, 3) joint axes z_j
    rotations: np.ndarray  # (n + 1, 3, 3) accumulated rotation after each joint
    tcp: Pose


@dataclass(frozen=True)
class ArmModel:
    joints: tuple
    tcp_offset: tuple = (0.0, 0.0, 0.0)
    gravity: tuple = DEFAULT_GRAVITY
    name: str = "custom"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        joints = tuple(self.joints)
        if len(joints) < 2:
            raise ConfigurationError("an arm needs at least two joints")
        kinds = [j.kind for j in joints]
        if kinds.count(GRIPPER) != 1 or kinds[-1] != GRIPPER:
            raise ConfigurationError("exactly one gripper joint is required, and it must be last")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "tcp_offset", tuple(float(v) for v in self.tcp_offset))
        object.__setattr__(self, "gravity", tuple(float(v) for v in self.gravity))
        # Precomputed arrays used by the vectorised kinematics.
        self._cache["axes0"] = np.array([j.axis for j in joints])
        self._cache["origins0"] = np.array([j.origin for j in joints])
        self._cache["coms0"] = np.array([j.link_com for j in joints])
        self._cache["masses"] = np.array([j.link_mass for j in joints])
        self._cache["revolute"] = np.array([j.kind == REVOLUTE for j in joints])
        self._cache["tcp0"] = self._cache["origins0"][-1] + np.asarray(self.tcp_offset)

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def k_t(self) -> np.ndarray:
        return np.array([j.k_t for j in self.joints])

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([j.residual_threshold for j in self.joints])

    def with_thresholds(self, thresholds) -> "ArmModel":
        thresholds = check_vector(thresholds, self.n, "thresholds")
        joints = tuple(
            JointSpec(j.kind, j.axis, j.origin, j.link_mass, j.link_com, j.k_t, float(t))
            for j, t in zip(self.joints, thresholds)
        )
        return ArmModel(joints, self.tcp_offset, self.gravity, self.name)


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def _check_q(model: ArmModel, q) -> np.ndarray:
    return check_vector(q, model.n, "q")


def kinematics(model: ArmModel, q) -> Kinematics:
    """Base-frame joint origins, axes and the TCP pose at configuration ``q``."""
    q = _check_q(model, q)
    c = model._cache
    axes0, origins0 = c["axes0"], c["origins0"]
    n = model.n
    origins = np.empty((n, 3))
    axes = np.empty((n, 3))
    rotations = np.empty((n + 1, 3, 3))
    R = np.eye(3)
    # Rigid motion accumulated so far maps a zero-configuration point x to R x + t.
    t = np.zeros(3)
    for j in range(n):
        origins[j] = R @ origins0[j] + t
        axes[j] = R @ axes0[j]
        if c["revolute"][j]:
            Rj = _rotation(axes[j], q[j])
            t = Rj @ (t - origins[j]) + origins[j]
            R = Rj @ R
        rotations[j] = R
    rotations[n] = R
    tcp = Pose(R @ c["tcp0"] + t, R.copy())
    return Kinematics(origins, axes, rotations, tcp)


def forward_kinematics(model: ArmModel, q):
    """Return (joint origins, joint axes, tcp pose) in the base frame."""
    k = kinematics(model, q)
    return list(k.origins), list(k.axes), k.tcp


def geometric_jacobian(model: ArmModel, q) -> Jacobian:
    k = kinematics(model, q)
    return Jacobian(_jacobian_from(model, k))


def _jacobian_from(model: ArmModel, k: Kinematics) -> np.ndarray:
    J = np.zeros((6, model.n))
    rev = model._cache["revolute"]
    pe = k.tcp.position
    J[:3, rev] = np.cross(k.axes[rev], pe - k.origins[rev]).T
    J[3:, rev] = k.axes[rev].T
    return J


def wrench_to_torque(model: ArmModel, q, w) -> np.ndarray:
    """Project an end-effector wrench into joint space, tau = J^T [f; m]."""
    vec = w.as_vector() if isinstance(w, Wrench) else np.asarray(w, dtype=float).reshape(6)
    J = geometric_jacobian(model, q).matrix
    tau = J.T @ vec
    tau[~model._cache["revolute"]] = 0.0
    return tau


def link_coms(model: ArmModel, q) -> np.ndarray:
    """Base-frame centre of mass of the link that follows each joint."""
    k = kinematics(model, q)
    return _coms_from(model, q, k)


def _coms_from(model: ArmModel, q, k: Kinematics) -> np.ndarray:
    c = model._cache
    # Link j moves with the accumulated transform after joint j.
    coms = np.empty((model.n, 3))
    for j in range(model.n):
        R = k.rotations[j]
        # translation of that transform: origin_j = R origin0_j + t  =>  t = origin_j - R origin0_j
        t = k.origins[j] - R @ c["origins0"][j]
        coms[j] = R @ c["coms0"][j] + t
    return coms


def potential_energy(model: ArmModel, q) -> float:
    coms = link_coms(model, q)
    g = np.asarray(model.gravity)
    return float(-(model._cache["masses"] * (coms @ g)).sum())


def gravity_torque(model: ArmModel, q) -> np.ndarray:
    """Joint torque that balances gravity, G(q) = dU/dq."""
    q = _check_q(model, q)
    k = kinematics(model, q)
    return _gravity_from(model, q, k)


def _gravity_from(model: ArmModel, q, k: Kinematics) -> np.ndarray:
    c = model._cache
    coms = _coms_from(model, q, k)
    g = np.asarray(model.gravity)
    weights = c["masses"][:, None] * g[None, :]  # gravity force on each link
    G = np.zeros(model.n)
    for j in np.flatnonzero(c["revolute"]):
        # d com_l / d q_j = z_j x (com_l - p_j) for every link l >= j
        lever = coms[j:] - k.origins[j]
        dcom = np.cross(k.axes[j], lever)
        G[j] = -(weights[j:] * dcom).sum()
    return G


def torque_from_current(model: ArmModel, currents) -> np.ndarray:
    currents = check_vector(currents, model.n, "currents")
    return model.k_t * currents


def compensate_kt(model: ArmModel, temperature=None) -> np.ndarray:
    """Thermal compensation of the current constants.

    No drift model is available, so the nominal constants are returned.
    """
    return model.k_t


def quasi_static_terms(model: ArmModel, q):
    """Kinematics, Jacobian and gravity torque from a single FK pass."""
    q = _check_q(model, q)
    k = kinematics(model, q)
    return k, _jacobian_from(model, k), _gravity_from(model, q, k)


# --- default arm -----------------------------------------------------------

DEFAULT_JOINT_NAMES = (
    "shoulder_yaw",
    "shoulder_pitch",
    "shoulder_roll",
    "elbow",
    "wrist_yaw",
    "wrist_pitch",
    "gripper",
)


def default_arm(threshold: float = DEFAULT_THRESHOLD, k_t: float = DEFAULT_KT) -> ArmModel:
    """Tabletop 6R arm with a gripper as the seventh joint.

    A vertical shoulder column of 0.30 m, then links of 0.30, 0.25, 0.25, 0.10
    and 0.10 m along +x at the zero configuration, and a 0.05 m tool offset.
    """
    x, y, z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    axes = [z, y, x, y, z, y, x]
    origins = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.30],
            [0.30, 0.0, 0.30],
            [0.55, 0.0, 0.30],
            [0.80, 0.0, 0.30],
            [0.90, 0.0, 0.30],
            [1.00, 0.0, 0.30],
        ]
    )
    tcp_offset = np.array([0.05, 0.0, 0.0])
    ends = np.vstack([origins[1:], origins[-1] + tcp_offset])
    coms = 0.5 * (origins + ends)
    masses = [2.0, 2.0, 1.5, 1.5, 0.5, 0.5, 0.2]
    joints = tuple(
        JointSpec(
            kind=GRIPPER if j == 6 else REVOLUTE,
            axis=axes[j],
            origin=tuple(origins[j]),
            link_mass=masses[j],
            link_com=tuple(coms[j]),
            k_t=k_t,
            residual_threshold=threshold,
        )
        for j in range(7)
    )
    return ArmModel(joints, tuple(tcp_offset), DEFAULT_GRAVITY, "default7")


BUILTIN_ARMS = {"default7": default_arm}


def get_arm(name_or_path: str) -> ArmModel:
    if name_or_path in BUILTIN_ARMS:
        return BUILTIN_ARMS[name_or_path]()
    return load_arm(name_or_path)


# --- model files ------------------------------------------------------------
#
# One joint per line:
#   joint kind=revolute axis=0,0,1 origin=0,0,0 mass=2.0 com=0,0,0.15 k_t=0.105 threshold=0.15
# plus optional header lines ``name=...``, ``gravity=gx,gy,gz``, ``tcp_offset=x,y,z``.
# Blank lines and ``#`` comments are ignored.

def _vec3(text: str, lineno: int) -> tuple:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigurationError(f"line {lineno}: bad vector {text!r}") from None
    if len(parts) != 3:
        raise ConfigurationError(f"line {lineno}: expected 3 components, got {text!r}")
    return parts


def parse_arm(text: str) -> ArmModel:
    header = {"name": "custom", "gravity": DEFAULT_GRAVITY, "tcp_offset": (0.0, 0.0, 0.0)}
    joints = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("joint"):
            fields = {}
            for tok in line.split()[1:]:
                if "=" not in tok:
                    raise ConfigurationError(f"line {lineno}: expected key=value, got {tok!r}")
                k, v = tok.split("=", 1)
                fields[k] = v
            unknown = set(fields) - {"kind", "axis", "origin", "mass", "com", "k_t", "threshold"}
            if unknown:
                raise ConfigurationError(f"line {lineno}: unknown keys {sorted(unknown)}")
            try:
                joints.append(
                    JointSpec(
                        kind=fields.get("kind", REVOLUTE),
                        axis=_vec3(fields["axis"], lineno),
                        origin=_vec3(fields["origin"], lineno),
                        link_mass=float(fields.get("mass", 0.0)),
                        link_com=_vec3(fields.get("com", "0,0,0"), lineno),
                        k_t=float(fields.get("k_t", DEFAULT_KT)),
                        residual_threshold=float(fields.get("threshold", DEFAULT_THRESHOLD)),
                    )
                )
            except KeyError as exc:
                raise ConfigurationError(f"line {lineno}: missing field {exc.args[0]}") from None
            except ConfigurationError as exc:
                raise ConfigurationError(f"line {lineno}: {exc}") from None
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k == "name":
            header["name"] = v
        elif k in ("gravity", "tcp_offset"):
            header[k] = _vec3(v, lineno)
        else:
            raise ConfigurationError(f"line {lineno}: unknown key {k!r}")
    return ArmModel(tuple(joints), header["tcp_offset"], header["gravity"], header["name"])


def format_arm(model: ArmModel) -> str:
    def v(x: Sequence[float]) -> str:
        return ",".join(repr(float(c)) for c in x)

    lines = [
        f"name={model.name}",
        f"gravity={v(model.gravity)}",
        f"tcp_offset={v(model.tcp_offset)}",
    ]
    for j in model.joints:
        lines.append(
            f"joint kind={j.kind} axis={v(j.axis)} origin={v(j.origin)} mass={j.link_mass!r} "
            f"com={v(j.link_com)} k_t={j.k_t!r} threshold={j.residual_threshold!r}"
        )
    return "\n".join(lines) + "\n"


def load_arm(path) -> ArmModel:
    return parse_arm(Path(path).read_text())


def save_arm(model: ArmModel, path) -> None:
    Path(path).write_text(format_arm(model))
