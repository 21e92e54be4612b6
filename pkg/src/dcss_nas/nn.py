"""Module/parameter plumbing and the small layer set the networks are built from."""

from __future__ import annotations

from collections.abc import Iterator
from typing import TYPE_CHECKING, Any

import numpy as np

from dcss_nas.errors import ArtifactError
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray


class Module:
    """Base class tracking parameters, buffers and child modules by attribute name.

    Assigning a ``Tensor`` with ``requires_grad=True`` registers a parameter,
    assigning a ``Module`` registers a child. Buffers (non-trainable arrays such
    as batch-norm running statistics) go through :meth:`register_buffer`.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: NDArray[np.float64]) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    # -- traversal ----------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator[Module]:
        for _, module in self.named_modules():
            yield module

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, module in self.named_modules():
            for name, param in module._parameters.items():
                yield (f"{prefix}.{name}" if prefix else name), param

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, NDArray[np.float64]]]:
        for prefix, module in self.named_modules():
            for name, buf in module._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), buf

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- mode ---------------------------------------------------------------

    def train(self, mode: bool = True) -> Module:
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, NDArray[np.float64]]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(
        self, state: dict[str, NDArray[np.float64]], *, strict: bool = True
    ) -> list[str]:
        """Copy arrays into parameters and buffers in place; return the names not found."""
        targets: dict[str, NDArray[np.float64]] = {n: p.data for n, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = [name for name in targets if name not in state]
        if strict and missing:
            raise ArtifactError(f"state is missing {len(missing)} entries, e.g. {missing[0]!r}")
        for name, target in targets.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ArtifactError(f"{name}: shape {value.shape} does not match {target.shape}")
            target[...] = value
        return missing


class ModuleDict(Module):
    """String-keyed container whose entries can be added after construction."""

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __setitem__(self, key: str, module: Module) -> None:
        self._modules[key] = module

    def __contains__(self, key: object) -> bool:
        return key in self._modules

    def __len__(self) -> int:
        return len(self._modules)

    def keys(self) -> list[str]:
        return list(self._modules)


def he_normal(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> NDArray[np.float64]:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: int | None = None,
        groups: int = 1,
        bias: bool = False,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_in = in_channels // groups * kernel * kernel
        shape = (out_channels, in_channels // groups, kernel, kernel)
        self.weight = Tensor(he_normal(rng, shape, fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups
        )


class BatchNorm2d(Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma,
            self.shift,
            self.running_mean,
            self.running_var,
            training=self.training,
        )


class ConvBN(Module):
    """Conv2d followed by BatchNorm2d and, unless ``relu=False``, a ReLU."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        groups: int = 1,
        relu: bool = True,
    ) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng, stride=stride, groups=groups)
        self.bn = BatchNorm2d(out_channels)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y


def conv_weight_names(module: Module) -> set[str]:
    """Parameter names of the convolution kernels in ``module`` (what weight decay touches)."""
    return {
        f"{prefix}.weight" if prefix else "weight"
        for prefix, m in module.named_modules()
        if isinstance(m, Conv2d)
    }
