"""Scalar-output MLP on (t, x) inputs with tape-expressible input gradients.

The spatial gradient of the network is built analytically from tape
primitives (the layer-by-layer chain rule written out as matmuls and
activation-derivative nodes), so any loss containing it remains
differentiable with respect to the parameters in a single reverse pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatchError, Tape, Variable

_ACTIVATIONS = ("tanh", "relu", "leaky_relu")


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer plan: input width 1+d, hidden widths, scalar output."""

    input_dim: int
    hidden: tuple[int, ...]
    activation: str = "tanh"
    alpha: float = 0.01  # leaky-relu negative slope

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.hidden) < 1 or any(w < 1 for w in self.hidden):
            raise ValueError(f"need at least one hidden layer of width >= 1, got {self.hidden}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, 1]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    """Weight matrices (fan_in, fan_out) and bias vectors per layer."""

    arch: MlpArchitecture
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = self.arch.layer_dims
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ValueError("layer count does not match architecture")
        for w, b, (fi, fo) in zip(self.weights, self.biases, expected):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"layer shapes {w.shape}/{b.shape} do not chain as ({fi},{fo})")

    @property
    def count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.arch.layer_dims)

    def flat_list(self) -> list[np.ndarray]:
        """Interleaved [w0, b0, w1, b1, ...]; the order used for gradients."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def replace_flat(self, arrays: list[np.ndarray]) -> "MlpParams":
        ws = [np.asarray(arrays[2 * i], dtype=np.float64) for i in range(len(self.weights))]
        bs = [np.asarray(arrays[2 * i + 1], dtype=np.float64) for i in range(len(self.weights))]
        return MlpParams(self.arch, ws, bs)


def init(arch: MlpArchitecture, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(arch, weights, biases)


def _assemble_input(arch: MlpArchitecture, t, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != arch.input_dim - 1:
        raise ShapeMismatchError(
            f"mlp input: x has width {x.shape[1]}, architecture expects {arch.input_dim - 1}"
        )
    t_col = np.full((x.shape[0], 1), float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if t_col.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"mlp input: t rows {t_col.shape[0]} vs x rows {x.shape[0]}")
    return np.concatenate([t_col, x], axis=1)


class TapeMlp:
    """Network bound to one tape; parameters registered once as leaves."""

    def __init__(self, tape: Tape, params: MlpParams):
        self.tape = tape
        self.params = params
        self.arch = params.arch
        self._w_vars = [tape.param(w) for w in params.weights]
        self._b_vars = [tape.param(b) for b in params.biases]

    @property
    def param_vars(self) -> list[Variable]:
        out = []
        for w, b in zip(self._w_vars, self._b_vars):
            out.extend((w, b))
        return out

    def _apply_activation(self, z: Variable) -> Variable:
        t = self.tape
        if self.arch.activation == "tanh":
            return t.tanh(z)
        if self.arch.activation == "relu":
            return t.relu(z)
        return t.leaky_relu(z, self.arch.alpha)

    def _activation_prime(self, z: Variable) -> Variable:
        t = self.tape
        if self.arch.activation == "tanh":
            return t.tanh_prime(z)
        if self.arch.activation == "relu":
            return t.relu_prime(z)
        return t.leaky_relu_prime(z, self.arch.alpha)

    def _forward_nodes(self, t_in, x: np.ndarray):
        tape = self.tape
        inp = tape.constant(_assemble_input(self.arch, t_in, x))
        pre_acts = []
        h = inp
        n_hidden = len(self.arch.hidden)
        for i in range(n_hidden):
            z = tape.affine(h, self._w_vars[i], self._b_vars[i])
            pre_acts.append(z)
            h = self._apply_activation(z)
        out = tape.affine(h, self._w_vars[-1], self._b_vars[-1])
        return out, pre_acts

    def value(self, t_in, x: np.ndarray) -> Variable:
        """Network value as a (B, 1) tape variable."""
        out, _ = self._forward_nodes(t_in, x)
        return out

    def value_and_grad(self, t_in, x: np.ndarray) -> tuple[Variable, Variable]:
        """Value plus the gradient in the spatial coordinates, both on tape.

        The gradient covers only the x part of the (t, x) input; nothing in
        the scheme differentiates with respect to time.
        """
        tape = self.tape
        out, pre_acts = self._forward_nodes(t_in, x)
        rows = out.shape[0]
        u = tape.matmul(tape.constant(np.ones((rows, 1))), tape.transpose(self._w_vars[-1]))
        for i in range(len(self.arch.hidden) - 1, -1, -1):
            s = tape.mul(u, self._activation_prime(pre_acts[i]))
            u = tape.matmul(s, tape.transpose(self._w_vars[i]))
        grad_x = tape.slice_cols(u, 1, self.arch.input_dim)
        return out, grad_x


def bind(tape: Tape, params: MlpParams) -> TapeMlp:
    return TapeMlp(tape, params)


def evaluate(params: MlpParams, t, x: np.ndarray) -> np.ndarray:
    """Plain forward pass, bit-identical to the tape value channel."""
    h = _assemble_input(params.arch, t, x)
    act = params.arch.activation
    alpha = params.arch.alpha
    n_hidden = len(params.arch.hidden)
    for i in range(n_hidden):
        z = h @ params.weights[i] + params.biases[i]
        if act == "tanh":
            h = np.tanh(z)
        elif act == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = np.where(z > 0.0, z, alpha * z)
    return h @ params.weights[-1] + params.biases[-1]


# ----------------------------------------------------------------------
# checkpoint file format: JSON with an architecture header and nested
# float lists; Python's repr-based float serialization round-trips the
# exact bit pattern.

def params_to_dict(params: MlpParams) -> dict:
    return {
        "architecture": {
            "input_dim": params.arch.input_dim,
            "hidden": list(params.arch.hidden),
            "activation": params.arch.activation,
            "alpha": params.arch.alpha,
        },
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(data: dict) -> MlpParams:
    arch = MlpArchitecture(
        input_dim=int(data["architecture"]["input_dim"]),
        hidden=tuple(data["architecture"]["hidden"]),
        activation=data["architecture"]["activation"],
        alpha=float(data["architecture"].get("alpha", 0.01)),
    )
    weights = [np.asarray(w, dtype=np.float64) for w in data["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
    return MlpParams(arch, weights, biases)


def save_params(params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh)


def load_params(path) -> MlpParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
