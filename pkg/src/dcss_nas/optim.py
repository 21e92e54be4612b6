"""Optimizers and the polynomial learning-rate policy.

Network weights use momentum SGD with weight decay restricted to convolution
kernels; architecture parameters use bias-corrected Adam. Both follow the
poly schedule ``base_lr * (1 - iter / max_iter) ** power``.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING

import numpy as np

from dcss_nas.config import LrSchedule, OptimizerConfig
from dcss_nas.errors import NumericalError, ShapeError

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from dcss_nas.tensor.core import Tensor

    Array = NDArray[np.float64]


def poly_lr(iteration: int, schedule: LrSchedule) -> float:
    """Scheduled rate at ``iteration``; iterations past ``max_iter`` give 0."""
    iteration = max(iteration, 0)
    if iteration >= schedule.max_iter:
        return 0.0
    frac = 1.0 - iteration / schedule.max_iter
    return float(schedule.base_lr * frac**schedule.power)


def _check(name: str, param: Array, grad: Array) -> None:
    if grad.shape != param.shape:
        raise ShapeError("optimizer step", f"gradient of {name}", param.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient in parameter {name!r}")


def sgd_step(
    param: Array,
    grad: Array,
    velocity: Array,
    lr: float,
    *,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    name: str = "param",
) -> None:
    """In place: ``v <- m*v + g + wd*p; p <- p - lr*v``."""
    _check(name, param, grad)
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


def adam_step(
    param: Array,
    grad: Array,
    first: Array,
    second: Array,
    step: int,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    name: str = "param",
) -> None:
    """In place bias-corrected Adam update; ``step`` counts from 1."""
    _check(name, param, grad)
    first *= beta1
    first += (1.0 - beta1) * grad
    second *= beta2
    second += (1.0 - beta2) * grad * grad
    m_hat = first / (1.0 - beta1**step)
    v_hat = second / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


class Optimizer:
    """Named parameters plus per-parameter state, serializable as flat arrays.

    Parameters can be registered after construction (the supernet grows
    alignment branches lazily); their state starts at zero. A parameter whose
    ``grad`` is ``None`` (not on the last tape) is left untouched by ``step``.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        config: OptimizerConfig,
        decay: set[str] | None = None,
    ) -> None:
        names = [n for n, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameter names must be unique")
        self.config = config
        self.steps = 0
        self.params: list[tuple[str, Tensor]] = []
        self.decay: set[str] = set()
        self.register(params, decay)

    def register(
        self, params: Sequence[tuple[str, Tensor]], decay: set[str] | None = None
    ) -> int:
        """Add parameters not yet known; ``decay=None`` decays every new parameter."""
        known = {n for n, _ in self.params}
        added = 0
        for name, p in params:
            if name in known:
                continue
            self.params.append((name, p))
            if decay is None or name in decay:
                self.decay.add(name)
            self._init_state(name, p)
            known.add(name)
            added += 1
        return added

    def _init_state(self, name: str, param: Tensor) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, Array]:
        raise NotImplementedError

    def load_state_dict(self, state: dict[str, Array]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Momentum SGD; weight decay applies only to names in ``decay``."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        config: OptimizerConfig,
        decay: set[str] | None = None,
    ) -> None:
        self.velocity: dict[str, Array] = {}
        super().__init__(params, config, decay)

    def _init_state(self, name: str, param: Tensor) -> None:
        self.velocity[name] = np.zeros_like(param.data)

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            sgd_step(
                p.data,
                p.grad,
                self.velocity[name],
                lr,
                momentum=self.config.momentum,
                weight_decay=self.config.weight_decay if name in self.decay else 0.0,
                name=name,
            )
        self.steps += 1

    def state_dict(self) -> dict[str, Array]:
        state = {f"velocity/{n}": v.copy() for n, v in self.velocity.items()}
        state["steps"] = np.array(float(self.steps))
        return state

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for name, buf in self.velocity.items():
            key = f"velocity/{name}"
            if key in state:
                buf[...] = state[key]
        self.steps = int(state["steps"])


class Adam(Optimizer):
    def __init__(self, params: Sequence[tuple[str, Tensor]], config: OptimizerConfig) -> None:
        self.first: dict[str, Array] = {}
        self.second: dict[str, Array] = {}
        super().__init__(params, config)

    def _init_state(self, name: str, param: Tensor) -> None:
        self.first[name] = np.zeros_like(param.data)
        self.second[name] = np.zeros_like(param.data)

    def step(self, lr: float) -> None:
        self.steps += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            adam_step(
                p.data,
                p.grad,
                self.first[name],
                self.second[name],
                self.steps,
                lr,
                beta1=self.config.beta1,
                beta2=self.config.beta2,
                epsilon=self.config.epsilon,
                name=name,
            )

    def state_dict(self) -> dict[str, Array]:
        state = {f"first/{n}": v.copy() for n, v in self.first.items()}
        state.update({f"second/{n}": v.copy() for n, v in self.second.items()})
        state["steps"] = np.array(float(self.steps))
        return state

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for name in self.first:
            if f"first/{name}" in state:
                self.first[name][...] = state[f"first/{name}"]
                self.second[name][...] = state[f"second/{name}"]
        self.steps = int(state["steps"])
