"""Tensor substrate: f64 arrays, reverse-mode autodiff and the checkpoint codec."""

from dcss_nas.tensor.core import Tape, Tensor, as_tensor, backward, no_grad

__all__ = ["Tape", "Tensor", "as_tensor", "backward", "no_grad"]
