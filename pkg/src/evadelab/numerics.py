"""Feed-forward networks with hand-written reverse-mode gradients, plus Adam.

Parameters of a :class:`DenseNet` live in one flat float64 vector; each layer's
weight matrix (row-major, shape ``(n_in, n_out)``) and bias are views into it.
That keeps optimizer state, checkpoints and finite-difference checks simple.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, TrainingError, UsageError

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    activation: str

    @property
    def size(self) -> int:
        return self.n_in * self.n_out + self.n_out


@dataclass
class GradientTape:
    """Values recorded during a forward pass, consumed by :meth:`DenseNet.backward`."""

    net_id: int
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool


class DenseNet:
    """A chain of affine layers, each followed by relu, tanh or identity."""

    def __init__(self, layers: Sequence[LayerSpec], params: np.ndarray | None = None):
        layers = list(layers)
        if not layers:
            raise UsageError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise UsageError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        for spec in layers:
            if spec.activation not in ACTIVATIONS:
                raise UsageError(f"unknown activation {spec.activation!r}")
        self.layers = layers
        self.param_count = sum(s.size for s in layers)
        self._offsets = np.cumsum([0] + [s.size for s in layers]).tolist()
        if params is None:
            params = np.zeros(self.param_count)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise UsageError(f"expected {self.param_count} parameters, got {params.shape}")
        self.params = params.copy()
        self.version = 0

    @classmethod
    def mlp(
        cls,
        widths: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        rng: np.random.Generator | None = None,
        output_scale: float = 1.0,
    ) -> "DenseNet":
        """Build an MLP with uniform fan-in initialisation."""
        widths = list(widths)
        if len(widths) < 2:
            raise UsageError("need at least input and output widths")
        specs = []
        for k, (a, b) in enumerate(zip(widths, widths[1:])):
            act = output_activation if k == len(widths) - 2 else hidden_activation
            specs.append(LayerSpec(a, b, act))
        net = cls(specs)
        rng = rng if rng is not None else np.random.default_rng(0)
        for k, spec in enumerate(specs):
            w, b = net.layer_views(k)
            bound = 1.0 / np.sqrt(spec.n_in)
            if k == len(specs) - 1:
                bound *= output_scale
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return net

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def layer_views(self, k: int, flat: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        flat = self.params if flat is None else flat
        offset = self._offsets[k]
        spec = self.layers[k]
        nw = spec.n_in * spec.n_out
        w = flat[offset : offset + nw].reshape(spec.n_in, spec.n_out)
        b = flat[offset + nw : offset + nw + spec.n_out]
        return w, b

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise UsageError("parameter vector has the wrong length")
        self.params[...] = params
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet(self.layers, self.params)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise UsageError(f"input width {x.shape[-1]} does not match network input {self.n_in}")
        inputs, outputs = [], []
        h = x
        for k, spec in enumerate(self.layers):
            w, b = self.layer_views(k)
            inputs.append(h)
            z = h @ w + b
            if spec.activation == "relu":
                h = np.maximum(z, 0.0)
            elif spec.activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
            outputs.append(h)
        tape = GradientTape(id(self), self.version, inputs, outputs, squeeze)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: GradientTape, output_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(parameter gradient, input gradient)`` for the taped forward pass."""
        if tape.net_id != id(self) or tape.version != self.version:
            raise UsageError("gradient tape does not belong to the current parameters")
        g = np.asarray(output_grad, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        if g.shape != tape.outputs[-1].shape:
            raise UsageError(f"output gradient shape {g.shape} != output shape {tape.outputs[-1].shape}")
        grads = np.zeros(self.param_count)
        for k in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[k]
            out = tape.outputs[k]
            if spec.activation == "relu":
                g = g * (out > 0.0)
            elif spec.activation == "tanh":
                g = g * (1.0 - out * out)
            gw, gb = self.layer_views(k, grads)
            gw[...] = tape.inputs[k].T @ g
            gb[...] = g.sum(axis=0)
            w, _ = self.layer_views(k)
            g = g @ w.T
        return grads, (g[0] if tape.squeeze else g)

    def describe(self) -> list[dict]:
        return [{"n_in": s.n_in, "n_out": s.n_out, "activation": s.activation} for s in self.layers]


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net(x)


def net_backward(net: DenseNet, tape: GradientTape, output_grad: np.ndarray) -> np.ndarray:
    return net.backward(tape, output_grad)[0]


@dataclass
class AdamState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def to_dict(self) -> dict:
        return {
            "size": self.size, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step": self.step, "m": self.m.tolist(), "v": self.v.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(
            size=d["size"], lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
            step=d["step"], m=np.asarray(d["m"], dtype=float), v=np.asarray(d["v"], dtype=float),
        )


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Advance ``state`` in place and return the descended parameter vector."""
    if params.shape != (state.size,) or grads.shape != (state.size,):
        raise UsageError("parameter/gradient length does not match optimizer state")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient passed to Adam")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    if not grads.any():
        # an all-zero gradient only decays the moments; parameters stay put
        return params.copy()
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Optimizer:
    """Binds a network to its Adam state."""

    def __init__(self, net: DenseNet, lr: float):
        self.net = net
        self.state = AdamState(net.param_count, lr=lr)

    def apply(self, grads: np.ndarray) -> None:
        self.net.set_params(adam_step(self.state, self.net.params, grads))


# -- checkpoints -------------------------------------------------------------


def net_to_dict(net: DenseNet, optimizer: AdamState | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": net.describe(),
        "params": net.params.tolist(),
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
    }


def net_from_dict(d: dict) -> tuple[DenseNet, AdamState | None]:
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {d.get('format_version')!r}")
    try:
        specs = [LayerSpec(int(l["n_in"]), int(l["n_out"]), str(l["activation"])) for l in d["layers"]]
        net = DenseNet(specs)
    except (KeyError, TypeError, UsageError) as exc:
        raise ConfigError(f"bad layer metadata: {exc}") from exc
    params = np.asarray(d["params"], dtype=np.float64)
    if params.shape != (net.param_count,):
        raise ConfigError(f"checkpoint holds {params.size} parameters, layers need {net.param_count}")
    net.set_params(params)
    net.version = 0
    opt = AdamState.from_dict(d["optimizer"]) if d.get("optimizer") else None
    if opt is not None and opt.size != net.param_count:
        raise ConfigError("optimizer state does not match network size")
    return net, opt


def save_checkpoint(path: str | Path, net: DenseNet, optimizer: AdamState | None = None) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net, optimizer)))


def load_checkpoint(path: str | Path) -> tuple[DenseNet, AdamState | None]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    return net_from_dict(json.loads(p.read_text()))
