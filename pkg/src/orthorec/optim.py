"""Optimizer steppers and the hybrid parameter-group dispatcher.

Four steppers share one convention: they mutate the parameter array and its
state in place, and raise rather than silently accept bad input.

* ``adam_step``: Adam with bias correction; a positive ``weight_decay``
  turns it into AdamW (decoupled decay, applied to the pre-step value).
* ``sgd_momentum_accumulate``: momentum <- mu * momentum + grad, no
  dampening.
* ``muon_step``: accumulates momentum, orthogonalizes it with the quintic
  Newton-Schulz iteration, then applies the update with decoupled decay.
  Defined for 2D parameters only.
* ``hybrid_step``: routes each parameter by its role tag. Hidden matrices
  go to Muon; biases, LayerNorm parameters, embeddings, positional
  embeddings, and output heads go to Adam. Parameters are stepped in
  name-sorted order so runs are bit-reproducible.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import NS_DEFAULT_ITERS, NonFiniteError, ShapeError, newton_schulz
from .model import ParamTensor, Role, param_dict

# RMS-matching factor some deployments use to align Muon step sizes with
# AdamW; off by default.
RMS_SCALE_COEFF = 0.2


class Group(Enum):
    MUON = "muon"
    ADAM = "adam"


@dataclass(frozen=True)
class AdamSpec:
    """Adam hyperparameters; weight_decay is the decoupled decay coefficient."""

    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(
                f"weight_decay must be non-negative, got {self.weight_decay}"
            )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class MuonSpec:
    """Muon hyperparameters.

    nesterov orthogonalizes mu * M_t + G_t instead of M_t; rms_scale
    multiplies the orthogonalized direction by 0.2 * sqrt(max(n, m)). Both
    default off.
    """

    eta: float = 0.02
    mu: float = 0.95
    weight_decay: float = 0.0
    ns_iters: int = NS_DEFAULT_ITERS
    rms_scale: bool = False
    nesterov: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must be in [0, 1), got {self.mu}")
        if self.weight_decay < 0:
            raise ValueError(
                f"weight_decay must be non-negative, got {self.weight_decay}"
            )
        if self.ns_iters < 1:
            raise ValueError(f"ns_iters must be >= 1, got {self.ns_iters}")


@dataclass
class MuonState:
    momentum: np.ndarray


@dataclass(frozen=True)
class ParamGroupAssignment:
    param_name: str
    group: Group


def _check_grad(param: np.ndarray, grad: np.ndarray, name: str) -> None:
    if grad.shape != param.shape:
        raise ShapeError(
            f"parameter '{name}': grad shape {grad.shape} != param shape "
            f"{param.shape}"
        )
    if not np.isfinite(grad).all():
        raise NonFiniteError(f"parameter '{name}': gradient is non-finite")


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    spec: AdamSpec,
    name: str = "param",
) -> None:
    """Apply one (Adam or AdamW) step to `param` and `state`, in place."""
    _check_grad(param, grad, name)
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"parameter '{name}': state shape mismatch")
    state.t += 1
    state.m *= spec.beta1
    state.m += (1.0 - spec.beta1) * grad
    state.v *= spec.beta2
    state.v += (1.0 - spec.beta2) * grad * grad
    m_hat = state.m / (1.0 - spec.beta1 ** state.t)
    v_hat = state.v / (1.0 - spec.beta2 ** state.t)
    update = m_hat / (np.sqrt(v_hat) + spec.epsilon)
    if spec.weight_decay > 0.0:
        update = update + spec.weight_decay * param
    param -= spec.eta * update


def sgd_momentum_accumulate(grad: np.ndarray, state: MuonState, mu: float) -> None:
    """momentum <- mu * momentum + grad, in place (raw gradient, no dampening)."""
    if grad.shape != state.momentum.shape:
        raise ShapeError(
            f"grad shape {grad.shape} != momentum shape {state.momentum.shape}"
        )
    state.momentum *= mu
    state.momentum += grad


def muon_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: MuonState,
    spec: MuonSpec,
    name: str = "param",
) -> None:
    """Apply one Muon step to `param` and `state`, in place.

    The all-zero momentum case (zero grad on a fresh state) skips the
    Newton-Schulz call and applies only the decay term.
    """
    if param.ndim != 2:
        raise ShapeError(
            f"parameter '{name}' has ndim {param.ndim}; muon_step is defined "
            "only for 2D parameters"
        )
    _check_grad(param, grad, name)
    sgd_momentum_accumulate(grad, state, spec.mu)
    target = state.momentum
    if spec.nesterov:
        target = spec.mu * state.momentum + grad
    if np.any(target):
        direction = newton_schulz(target, spec.ns_iters)
        if spec.rms_scale:
            direction = direction * (RMS_SCALE_COEFF * np.sqrt(max(param.shape)))
    else:
        direction = np.zeros_like(param)
    if spec.weight_decay > 0.0:
        direction = direction + spec.weight_decay * param
    param -= spec.eta * direction


def classify_params(model_params: list) -> list:
    """Assign each parameter to MuonGroup or AdamGroup by its role tag."""
    param_dict(model_params)  # rejects duplicate names
    assignments = []
    for p in model_params:
        if not isinstance(p.role, Role):
            raise ValueError(
                f"parameter '{p.name}' carries unknown role tag {p.role!r}"
            )
        group = Group.MUON if p.role is Role.HIDDEN_MATRIX else Group.ADAM
        assignments.append(ParamGroupAssignment(p.name, group))
    return assignments


def init_states(model_params: list) -> dict:
    """Zero-initialized per-parameter state, keyed by name, for hybrid_step."""
    states = {}
    for p, assignment in zip(model_params, classify_params(model_params)):
        if assignment.group is Group.MUON:
            states[p.name] = MuonState(momentum=np.zeros_like(p.value))
        else:
            states[p.name] = AdamState(
                m=np.zeros_like(p.value), v=np.zeros_like(p.value)
            )
    return states


def hybrid_step(
    params: list,
    grads: dict | None,
    states: dict,
    muon_spec: MuonSpec,
    adam_spec: AdamSpec,
) -> None:
    """Step every parameter with its group's optimizer, in name-sorted order.

    `grads` maps name to gradient; pass None to use each ParamTensor's own
    grad buffer. The per-parameter updates are independent, so this equals
    applying muon_step and adam_step separately.
    """
    groups = {a.param_name: a.group for a in classify_params(params)}
    for p in sorted(params, key=lambda t: t.name):
        grad = p.grad if grads is None else grads[p.name]
        if p.name not in states:
            raise KeyError(f"no optimizer state for parameter '{p.name}'")
        state = states[p.name]
        if groups[p.name] is Group.MUON:
            if not isinstance(state, MuonState):
                raise TypeError(
                    f"parameter '{p.name}' is in the Muon group but has "
                    f"state {type(state).__name__}"
                )
            muon_step(p.value, grad, state, muon_spec, name=p.name)
        else:
            if not isinstance(state, AdamState):
                raise TypeError(
                    f"parameter '{p.name}' is in the Adam group but has "
                    f"state {type(state).__name__}"
                )
            adam_step(p.value, grad, state, adam_spec, name=p.name)
