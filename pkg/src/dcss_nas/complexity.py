"""Model size and compute: parameter counts and multiply-accumulates per forward pass."""

from __future__ import annotations

import contextlib
from collections.abc import Iterator
from typing import Any

import numpy as np

from dcss_nas.nn import Module
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor, no_grad


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Collect the multiply-accumulates of every convolution run inside the block."""
    counter = [0]
    token = ops._mac_counter.set(counter)
    try:
        yield counter
    finally:
        ops._mac_counter.reset(token)


def count_parameters(module: Module) -> int:
    return module.parameter_count()


def count_flops(module: Module, input_shape: tuple[int, ...], *args: Any) -> int:
    """Convolution MACs of one eval-mode forward pass on a zero input of ``input_shape``."""
    was_training = module.training
    module.eval()
    try:
        with no_grad(), count_macs() as counter:
            module(Tensor(np.zeros(input_shape)), *args)
    finally:
        module.train(was_training)
    return counter[0]
