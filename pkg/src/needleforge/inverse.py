"""Inverse-simulation controller.

Objectives ``g = [e, entry displacement]`` are linearized against the three
effector translation DOFs with one-step trial simulations, then a damped
least-squares step gives the absolute effector command ``C``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ControlGains
from .simulator import EffectorCommand

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveVector:
    tip_error: np.ndarray
    entry_displacement: np.ndarray

    def stacked(self):
        return np.concatenate([self.tip_error, self.entry_displacement])


class TrialDiverged(RuntimeError):
    pass


def measure_objectives(scene, P_target) -> ObjectiveVector:
    e = np.asarray(P_target, dtype=float) - scene.needle_tip()
    return ObjectiveVector(e, np.asarray(scene.entry_displacement(), dtype=float))


def _trial(scene, target):
    """(tip, entry displacement) one step after commanding ``target``."""
    cmd = EffectorCommand(target, scene.entry_point)
    preview = getattr(scene, "preview", None)
    if preview is not None:
        out = preview(cmd)
        if out is None:
            raise TrialDiverged("trial step could not be linearized")
        tip, _, entry = out
    else:
        trial = scene.clone()
        trial.step(cmd)
        if getattr(trial, "status", "") in ("diverged", "out-of-domain"):
            raise TrialDiverged(f"trial step ended with status {trial.status}")
        tip, entry = trial.needle_tip(), trial.entry_displacement()
    if not (np.all(np.isfinite(tip)) and np.all(np.isfinite(entry))):
        raise TrialDiverged("non-finite trial state")
    return np.concatenate([-np.asarray(tip, dtype=float), np.asarray(entry, dtype=float)])


def trial_objectives(scene, gains: ControlGains):
    """Objective offsets for the hold command and the Jacobian around it.

    Returns ``(h0, J)`` where ``h0 = [-tip, entry]`` after a hold step, so that
    ``g(0) = h0 + [P_target, 0]``.  Raises :class:`TrialDiverged`.
    """
    eff = scene.effector_position()
    h0 = _trial(scene, eff)
    J = np.empty((6, 3))
    for j in range(3):
        step = np.zeros(3)
        step[j] = gains.fd_step
        J[:, j] = (_trial(scene, eff + step) - h0) / gains.fd_step
    return h0, J


def estimate_jacobian(scene, gains: ControlGains):
    """6x3 forward-difference Jacobian of ``g`` w.r.t. commanded translation."""
    return trial_objectives(scene, gains)[1]


def damped_step(J, g, gains: ControlGains):
    """``-(J^T W J + a I)^-1 J^T W g`` with ``W = diag(w_tip I3, w_entry I3)``."""
    w = np.repeat([gains.weight_tip, gains.weight_entry], 3)
    JW = J.T * w
    return -np.linalg.solve(JW @ J + gains.alpha * np.eye(J.shape[1]), JW @ g)


def compute_command(scene, P_target, gains: ControlGains, jacobian=None):
    """Absolute effector command ``C`` for the current scene and target."""
    h0, J = trial_objectives(scene, gains)
    if jacobian is not None:
        J = jacobian
    g = h0 + np.concatenate([np.asarray(P_target, dtype=float), np.zeros(3)])
    return scene.effector_position() + damped_step(J, g, gains)


class InverseController:
    """Stateful wrapper: Jacobian reuse interval and fallback on failed trials."""

    name = "inverse"

    def __init__(self, gains: ControlGains):
        self.gains = gains
        self.jacobian = None
        self._age = 0
        self.flags = 0

    def reset(self):
        self.jacobian, self._age, self.flags = None, 0, 0

    def __call__(self, scene, P_target):
        gains = self.gains
        eff = scene.effector_position()
        P_target = np.asarray(P_target, dtype=float)
        fresh = self.jacobian is None or self._age >= gains.jacobian_reuse
        try:
            if fresh:
                h0, J = trial_objectives(scene, gains)
                self.jacobian, self._age = J, 0
            else:
                h0 = _trial(scene, eff)
            g = h0 + np.concatenate([P_target, np.zeros(3)])
        except TrialDiverged as exc:
            self.flags += 1
            log.warning("trial step failed at t=%.3f s (%s); reusing Jacobian", scene.time, exc)
            g = measure_objectives(scene, P_target).stacked()
            if self.jacobian is None:
                # rigid transport guess: moving the base moves the tip alike
                self.jacobian = np.vstack([-np.eye(3), np.zeros((3, 3))])
        self._age += 1
        return eff + damped_step(self.jacobian, g, gains)
