"""Sensorless contact estimation from joint torque residuals."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .arm import ArmModel, Wrench, geometric_jacobian, gravity_torque
from .validation import ConfigurationError, SingularityError, check_is_fitted, check_vector

QUASI_STATIC_QDOT = 0.2  # rad/s
CONDITION_CAP = 1e6


class QuasiStaticWarning(UserWarning):
    pass


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    tau_measured: np.ndarray
    qdot: Optional[np.ndarray] = None
    currents: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        n = q.shape[0]
        object.__setattr__(self, "q", check_vector(q, n, "q"))
        object.__setattr__(self, "tau_measured", check_vector(self.tau_measured, n, "tau_measured"))
        if self.qdot is not None:
            object.__setattr__(self, "qdot", check_vector(self.qdot, n, "qdot"))
        if self.currents is not None:
            object.__setattr__(self, "currents", check_vector(self.currents, n, "currents"))

    def is_quasi_static(self, bound: float = QUASI_STATIC_QDOT) -> bool:
        return self.qdot is None or float(np.max(np.abs(self.qdot))) <= bound


class Residual(np.ndarray):
    """Torque residual vector carrying a ``quasi_static`` flag."""

    def __new__(cls, values, quasi_static=True):
        obj = np.asarray(values, dtype=float).view(cls)
        obj.quasi_static = quasi_static
        return obj

    def __array_finalize__(self, obj):
        self.quasi_static = getattr(obj, "quasi_static", True)


@dataclass
class ContactEstimate:
    residual: np.ndarray
    contacted: bool
    triggered_joints: frozenset = field(default_factory=frozenset)
    wrench_estimate: Optional[Wrench] = None

    def to_record(self) -> dict:
        rec = {
            "residual": [float(v) for v in self.residual],
            "contacted": bool(self.contacted),
            "triggered_joints": sorted(int(j) for j in self.triggered_joints),
        }
        if self.wrench_estimate is not None:
            rec["wrench"] = [float(v) for v in self.wrench_estimate.as_vector()]
        return rec


def torque_residual(model: ArmModel, state: JointState, qdot_bound: float = QUASI_STATIC_QDOT) -> Residual:
    """delta_tau = tau_measured - G(q).

    When joint velocities exceed the quasi-static bound the residual is still
    returned, with ``quasi_static=False`` and a :class:`QuasiStaticWarning`.
    """
    if state.q.shape[0] != model.n:
        raise ConfigurationError(f"state has {state.q.shape[0]} joints, model has {model.n}")
    ok = state.is_quasi_static(qdot_bound)
    if not ok:
        warnings.warn("joint velocities exceed the quasi-static bound", QuasiStaticWarning, stacklevel=2)
    return Residual(state.tau_measured - gravity_torque(model, state.q), quasi_static=ok)


def detect_contact(model: ArmModel, residual, thresholds=None) -> ContactEstimate:
    """Per-joint threshold test; the gripper joint never triggers.

    Triggered joints are reported with 0-based indices.
    """
    residual = check_vector(residual, model.n, "residual")
    thr = model.thresholds if thresholds is None else check_vector(thresholds, model.n, "thresholds")
    over = np.abs(residual) > thr
    over[-1] = False
    triggered = frozenset(int(j) for j in np.flatnonzero(over))
    return ContactEstimate(residual=residual, contacted=bool(triggered), triggered_joints=triggered)


def estimate_wrench(model: ArmModel, q, residual, cond_cap: float = CONDITION_CAP) -> Wrench:
    """Minimum-norm least-squares wrench F with J_arm^T F = delta_tau[arm]."""
    residual = check_vector(residual, model.n, "residual")
    J_arm = geometric_jacobian(model, q).arm
    A = J_arm.T
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_cap:
        raise SingularityError(f"arm Jacobian is near-singular (cond={cond:.3g})", cond)
    F, *_ = np.linalg.lstsq(A, residual[:-1], rcond=None)
    return Wrench.from_vector(F)


class ContactDetector(BaseEstimator):
    """Residual-threshold contact detector with thresholds fitted from free-motion data.

    Parameters
    ----------
    model : ArmModel
    noise_multiplier : float
        Thresholds are ``noise_multiplier`` times the per-joint residual
        standard deviation seen during ``fit``.
    window : int
        Length of a trailing moving average applied to residual sequences
        before thresholding. ``1`` thresholds single frames.
    min_threshold : float
        Floor for fitted thresholds.
    """

    def __init__(self, model=None, noise_multiplier=3.0, window=1, min_threshold=1e-6):
        self.model = model
        self.noise_multiplier = noise_multiplier
        self.window = window
        self.min_threshold = min_threshold

    def _arm(self):
        if self.model is None:
            from .arm import default_arm

            return default_arm()
        return self.model

    def fit(self, residuals, y=None):
        """Fit thresholds from residuals of contact-free frames (rows)."""
        R = np.atleast_2d(np.asarray(residuals, dtype=float))
        arm = self._arm()
        if R.shape[1] != arm.n:
            raise ConfigurationError(f"expected {arm.n} columns, got {R.shape[1]}")
        std = R.std(axis=0)
        self.thresholds_ = np.maximum(self.noise_multiplier * std, self.min_threshold)
        return self

    def _smooth(self, R):
        if self.window <= 1:
            return R
        kernel = np.ones(self.window) / self.window
        out = np.empty_like(R)
        for j in range(R.shape[1]):
            full = np.convolve(R[:, j], kernel)[: R.shape[0]]
            counts = np.minimum(np.arange(1, R.shape[0] + 1), self.window)
            out[:, j] = full * self.window / counts
        return out

    def transform(self, residuals):
        """Boolean (frames, n) mask of joints over threshold."""
        check_is_fitted(self, "thresholds_")
        R = self._smooth(np.atleast_2d(np.asarray(residuals, dtype=float)))
        mask = np.abs(R) > self.thresholds_
        mask[:, -1] = False
        return mask

    def predict(self, residuals):
        return self.transform(residuals).any(axis=1)

    def estimate(self, q, residual) -> ContactEstimate:
        check_is_fitted(self, "thresholds_")
        arm = self._arm()
        est = detect_contact(arm, residual, self.thresholds_)
        if est.contacted:
            try:
                est.wrench_estimate = estimate_wrench(arm, q, residual)
            except SingularityError:
                est.wrench_estimate = None
        return est
