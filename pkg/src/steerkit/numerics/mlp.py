from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import Rng
from .tensor import ShapeError, Tape, Tensor


@dataclass(frozen=True)
class MlpParams:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    layers: tuple[tuple[Tensor, Tensor], ...]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: Rng) -> "MlpParams":
        """Xavier-uniform weights, zero biases."""
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, (n_in, n_out))
            layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True)))
        return cls(tuple(layers))

    @classmethod
    def from_arrays(cls, arrays: Sequence[tuple[np.ndarray, np.ndarray]]) -> "MlpParams":
        layers = []
        prev = None
        for w, b in arrays:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer weight {w.shape} and bias {b.shape} do not compose")
            if prev is not None and prev != w.shape[0]:
                raise ShapeError(f"layer input width {w.shape[0]} != previous output width {prev}")
            prev = w.shape[1]
            layers.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
        return cls(tuple(layers))

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def arrays(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(w.data, b.data) for w, b in self.layers]

    def with_arrays(self, flat: Sequence[np.ndarray]) -> "MlpParams":
        it = iter(flat)
        return MlpParams(tuple(
            (Tensor(next(it), requires_grad=True), Tensor(next(it), requires_grad=True))
            for _ in self.layers))


def mlp_forward(params: MlpParams, x: Tensor, tape: Tape, activate_last: bool = False) -> Tensor:
    """Evaluate the net on ``x`` of shape (in,) or (batch, in)."""
    n_in = params.layers[0][0].shape[0]
    if x.shape[-1] != n_in:
        raise ShapeError(f"mlp input width {x.shape[-1]} != first layer input width {n_in}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = tape.add(tape.matmul(h, w), b)
        if i < last or activate_last:
            h = tape.tanh(h)
    return h


def mlp_eval(params: MlpParams, x: np.ndarray, activate_last: bool = False) -> np.ndarray:
    """Tape-free forward pass (same arithmetic as :func:`mlp_forward`)."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w.data + b.data
        if i < last or activate_last:
            h = np.tanh(h)
    return h
