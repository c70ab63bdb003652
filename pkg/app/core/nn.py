"""
nn.py — dense layers and layer-sequence networks on top of the Tape.

NetworkSpec describes widths (input first, output last) and one activation per
layer. Mlp owns the parameter tensors; forward() records onto a caller-supplied
tape so distinct models can run on distinct tapes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from app.core.tensor import ShapeError, Tape, Tensor

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softplus", "identity")


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("NetworkSpec needs at least input and output widths")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError(
                f"NetworkSpec has {len(self.widths) - 1} layers but "
                f"{len(self.activations)} activations"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"Unknown activation {act!r}")

    @classmethod
    def stack(cls, n_in: int, hidden: tuple[int, ...], n_out: int,
              hidden_act: str = "relu", out_act: str = "identity") -> "NetworkSpec":
        widths = (n_in, *hidden, n_out)
        return cls(widths, (hidden_act,) * len(hidden) + (out_act,))


class Dense:
    """y = x @ W + b, Xavier-uniform weights, zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True, name=f"{name}.bias")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        return tape.add(tape.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _activate(tape: Tape, x: Tensor, act: str) -> Tensor:
    if act == "identity":
        return x
    return getattr(tape, act)(x)


class Mlp:
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, name: str):
        self.spec = spec
        self.name = name
        self.layers = [
            Dense(spec.widths[i], spec.widths[i + 1], rng, f"{name}.{i}")
            for i in range(len(spec.widths) - 1)
        ]

    @property
    def n_in(self) -> int:
        return self.spec.widths[0]

    @property
    def n_out(self) -> int:
        return self.spec.widths[-1]

    def forward(self, tape: Tape, x: Tensor, return_hidden: bool = False):
        """Run the stack; with return_hidden, also return the last hidden activation."""
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected input (batch, {self.n_in}), got {x.shape}")
        hidden = x
        out = x
        for layer, act in zip(self.layers, self.spec.activations):
            hidden = out
            out = _activate(tape, layer(tape, out), act)
        return (out, hidden) if return_hidden else out

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def state_dict(params: list[Tensor]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def load_state_dict(params: list[Tensor], state: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in state:
            raise KeyError(f"Missing tensor {p.name!r} in state")
        value = np.asarray(state[p.name], dtype=np.float64)
        if value.shape != p.shape:
            raise ShapeError(f"{p.name}: stored shape {value.shape} != model shape {p.shape}")
        p.data = value.copy()


def checksum(params: list[Tensor]) -> str:
    """sha256 over names and raw float64 bytes, in parameter order."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
