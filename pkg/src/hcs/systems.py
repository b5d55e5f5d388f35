"""Builtin hybrid systems and a JSON loader for user-defined ones."""

from __future__ import annotations

from typing import Any

import numpy as np

from .errors import HcsError
from .hybrid_model import (
    BallFlow,
    HybridSystemSpec,
    LiftoffReset,
    LinearFlow,
    LinearGuard,
    LinearReset,
    ModeSpec,
    SlipFlightFlow,
    SlipStanceFlow,
    TouchdownGuard,
    TouchdownReset,
    TransitionSpec,
)

FALLING, RISING = 1, 2
STANCE, FLIGHT = 1, 2


def bouncing_ball(
    *,
    restitution: float = 0.6,
    mass: float = 1.0,
    gravity: float = 9.81,
    dt: float = 0.0015,
    horizon: float = 1.8,
    initial_mode: int = RISING,
) -> HybridSystemSpec:
    """Ball with a falling mode (1) and a rising mode (2) sharing one flow.

    Impact (``z`` reaches 0 while falling) scales the velocity by ``-restitution``;
    the apex (``zdot`` reaches 0 while rising) switches modes with an identity reset.
    """
    flow = BallFlow(mass, gravity)
    modes = {FALLING: ModeSpec(FALLING, flow), RISING: ModeSpec(RISING, flow)}
    impact = TransitionSpec(FALLING, RISING, LinearGuard([1.0, 0.0]), LinearReset(np.diag([1.0, -restitution])))
    apex = TransitionSpec(RISING, FALLING, LinearGuard([0.0, 1.0]), LinearReset(np.eye(2)))
    return HybridSystemSpec(modes, (impact, apex), initial_mode, dt, horizon, name="bouncing-ball")


def slip(
    *,
    r0: float = 1.0,
    mass: float = 0.5,
    stiffness: float = 25.0,
    gravity: float = 9.81,
    toe_x: float = 0.0,
    dt: float = 5e-5,
    horizon: float = 0.5,
    initial_mode: int = STANCE,
) -> HybridSystemSpec:
    """Spring-loaded inverted pendulum: stance (4 states) and flight (5 states)."""
    modes = {
        STANCE: ModeSpec(STANCE, SlipStanceFlow(r0, mass, stiffness, gravity)),
        FLIGHT: ModeSpec(FLIGHT, SlipFlightFlow(gravity)),
    }
    liftoff = TransitionSpec(
        STANCE, FLIGHT, LinearGuard([0.0, 0.0, -1.0, 0.0], offset=r0), LiftoffReset(r0, toe_x)
    )
    touchdown = TransitionSpec(FLIGHT, STANCE, TouchdownGuard(r0), TouchdownReset(r0))
    return HybridSystemSpec(modes, (liftoff, touchdown), initial_mode, dt, horizon, name="slip")


BUILTIN = {"bouncing_ball": bouncing_ball, "bouncing-ball": bouncing_ball, "slip": slip}


def _matrix(value: Any) -> np.ndarray:
    return np.atleast_2d(np.asarray(value, dtype=float))


def system_from_dict(cfg: dict) -> HybridSystemSpec:
    """Build a system from a JSON-style description.

    Either ``{"builtin": "bouncing_ball" | "slip", "params": {...}}`` or explicit
    linear modes::

        {"dt": 0.01, "horizon": 1.0, "initial_mode": 1,
         "modes": [{"id": 1, "A": [[...]], "B": [[...]], "Q": [[...]]}, ...],
         "transitions": [{"from": 1, "to": 2, "guard": {"coeffs": [...], "offset": 0.0,
                          "time_coeff": 0.0, "direction": -1},
                          "reset": {"matrix": [[...]]}}]}

    ``A``/``B``/``Q`` may also be time grids given with a ``"times"`` list.
    """
    try:
        if "builtin" in cfg:
            name = cfg["builtin"]
            if name not in BUILTIN:
                raise HcsError("config-error", f"unknown builtin system {name!r}")
            return BUILTIN[name](**cfg.get("params", {}))
        dt, horizon = float(cfg["dt"]), float(cfg["horizon"])
        modes = {}
        for m in cfg["modes"]:
            a = np.asarray(m["A"], dtype=float)
            b = np.asarray(m["B"], dtype=float)
            times = np.asarray(m.get("times", [0.0]), dtype=float)
            if a.ndim == 2:
                b = b.reshape(a.shape[0], -1)
            q = m.get("Q")
            q_arr = None if q is None else np.asarray(q, dtype=float)
            if q_arr is not None and q_arr.ndim == 3:
                from .hybrid_model import GridFunction

                q_arr = GridFunction(times, q_arr)
            modes[int(m["id"])] = ModeSpec(int(m["id"]), LinearFlow(times, a, b), q_arr)
        transitions = []
        for t in cfg.get("transitions", []):
            g = t["guard"]
            transitions.append(
                TransitionSpec(
                    int(t["from"]),
                    int(t["to"]),
                    LinearGuard(g["coeffs"], g.get("time_coeff", 0.0), g.get("offset", 0.0)),
                    LinearReset(_matrix(t["reset"]["matrix"])),
                    int(g.get("direction", -1)),
                )
            )
        initial = int(cfg.get("initial_mode", next(iter(modes))))
        return HybridSystemSpec(modes, tuple(transitions), initial, dt, horizon, name=cfg.get("name", "custom"))
    except (KeyError, TypeError, ValueError) as exc:
        raise HcsError("config-error", f"invalid system description: {exc}") from exc
