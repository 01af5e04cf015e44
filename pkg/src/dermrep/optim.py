"""Adam, RMSprop and the three-group adversarial update.

Parameters are kept in ``dict[str, Tensor]`` maps; gradients are plain
``dict[str, np.ndarray]`` maps keyed by the same names.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


class ParameterError(ValueError):
    pass


class WiringError(ValueError):
    pass


@dataclass
class AdamState:
    eta: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class RMSpropState:
    eta: float = 2e-4
    rho: float = 0.9
    epsilon: float = 1e-8
    s: dict[str, np.ndarray] = field(default_factory=dict)


def _check_shapes(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise ParameterError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ParameterError(f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}")


def adam_direction(state: AdamState, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Advance the moments by one step and return ``m_hat / (sqrt(v_hat) + eps)``."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return out


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam, updating ``params`` in place."""
    _check_shapes(params, grads)
    for name, d in adam_direction(state, grads).items():
        p = params[name]
        p.data = p.data - state.eta * d.astype(p.data.dtype, copy=False)


def rmsprop_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: RMSpropState) -> None:
    _check_shapes(params, grads)
    for name, g in grads.items():
        s = state.s.get(name)
        if s is None:
            s = np.zeros_like(g)
        s = state.rho * s + (1.0 - state.rho) * (g * g)
        state.s[name] = s
        p = params[name]
        p.data = p.data - (state.eta * g / (np.sqrt(s) + state.epsilon)).astype(p.data.dtype, copy=False)


@dataclass
class ParamGroups:
    """Extractor, melanoma-head and hair-head parameters with their optimizer state.

    ``melanoma_state`` holds the moments of the melanoma gradients (extractor
    and melanoma head); ``hair_state`` those of the hair gradients (extractor
    and hair head).  The extractor therefore carries two independent moment
    pairs, one per loss.
    """

    theta_f: dict[str, Tensor]
    theta_m: dict[str, Tensor]
    theta_h: dict[str, Tensor]
    melanoma_state: AdamState = field(default_factory=AdamState)
    hair_state: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        names = [set(self.theta_f), set(self.theta_m), set(self.theta_h)]
        if (names[0] & names[1]) or (names[0] & names[2]) or (names[1] & names[2]):
            raise WiringError("parameter groups must be disjoint")

    def all_params(self) -> dict[str, Tensor]:
        return {**self.theta_f, **self.theta_m, **self.theta_h}

    def set_eta(self, eta: float) -> None:
        self.melanoma_state.eta = eta
        self.hair_state.eta = eta


def joint_step(
    groups: ParamGroups,
    grads_m: Mapping[str, np.ndarray],
    grads_h: Mapping[str, np.ndarray] | None,
    lam: float,
) -> None:
    """One adversarial update of all three groups.

    ``grads_m`` are the melanoma-loss gradients.  ``grads_h`` are the
    hair-loss gradients as produced by a backward pass through the gradient
    reversal node, so their extractor entries already carry ``-lam``.

    With ``A_k`` the bias-corrected Adam direction of loss ``k``::

        theta_m <- theta_m - eta * A_m
        theta_h <- theta_h - eta * lam * A_h
        theta_f <- theta_f - eta * (A_m - lam * A_h)

    where ``A_h`` on the extractor is computed from the un-reversed hair
    gradient.  ``lam == 0`` skips the hair branch entirely.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    if set(grads_m) & set(groups.theta_h):
        raise WiringError("melanoma gradients reach hair-head parameters")
    if grads_h is not None and set(grads_h) & set(groups.theta_m):
        raise WiringError("hair gradients reach melanoma-head parameters")
    params = groups.all_params()
    _check_shapes(params, grads_m)
    eta = groups.melanoma_state.eta

    dir_m = adam_direction(groups.melanoma_state, grads_m)
    hair_on = lam > 0 and grads_h is not None
    if hair_on:
        _check_shapes(params, grads_h)
        unreversed = {
            name: (g / (-lam) if name in groups.theta_f else g) for name, g in grads_h.items()
        }
        dir_h = adam_direction(groups.hair_state, unreversed)
        eta_h = groups.hair_state.eta

    for name, p in groups.theta_m.items():
        if name in dir_m:
            p.data = p.data - eta * dir_m[name].astype(p.data.dtype, copy=False)
    for name, p in groups.theta_f.items():
        step = dir_m.get(name)
        if hair_on and name in dir_h:
            hair = lam * dir_h[name]
            step = -hair if step is None else step - hair
        if step is not None:
            p.data = p.data - eta * step.astype(p.data.dtype, copy=False)
    if hair_on:
        for name, p in groups.theta_h.items():
            if name in dir_h:
                p.data = p.data - (eta_h * lam * dir_h[name]).astype(p.data.dtype, copy=False)
