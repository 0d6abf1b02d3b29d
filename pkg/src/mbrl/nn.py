"""Minimal dense-network engine: forward pass, exact reverse-mode gradients,
Adam updates and finite-difference verification.

Everything is float64 numpy. Weight matrices follow the (out, in) convention,
so a batch X of shape (B, in) maps to X @ W.T + b.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

SIGMOID_CLAMP = 1e-7

HIDDEN_ACTIVATIONS = ("elu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


# =========================================================================
# Specs and parameter containers
# =========================================================================

@dataclass(frozen=True)
class NetSpec:
    """Shape and activation description of a fully connected net."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least input and output entries")
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass
class ParamSet:
    """Per-layer weight matrices and bias vectors plus named free scalars.

    Free scalars are stored as 0-d float64 arrays so that optimizer updates
    can mutate them in place like every other tensor.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    scalars: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> list[np.ndarray]:
        """All trainable arrays in a fixed order (weights, biases, scalars)."""
        return [*self.weights, *self.biases,
                *(self.scalars[k] for k in sorted(self.scalars))]

    def copy(self) -> "ParamSet":
        return ParamSet(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            scalars={k: v.copy() for k, v in self.scalars.items()},
        )

    def check_finite(self) -> None:
        for t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise ValueError("non-finite parameter entries")


def init_params(spec: NetSpec, seed: int, scalar_names: tuple[str, ...] = ()) -> ParamSet:
    """Deterministic fan-based uniform init: W ~ U(-a, a), a = sqrt(6/(fan_in+fan_out)).

    Biases and free scalars start at zero.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    scalars = {name: np.zeros(()) for name in scalar_names}
    return ParamSet(weights=weights, biases=biases, scalars=scalars)


# =========================================================================
# Activations
# =========================================================================

def elu(x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=float)
    neg = x <= 0
    out[neg] = np.expm1(x[neg])
    return out


def elu_grad(x: np.ndarray) -> np.ndarray:
    # Subderivative at exactly 0 taken as 1 (exp(0)).
    g = np.ones_like(x, dtype=float)
    neg = x <= 0
    g[neg] = np.exp(x[neg])
    return g


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function (unclamped)."""
    z = np.asarray(z, dtype=float)
    a = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + a), a / (1.0 + a))


# =========================================================================
# Forward / backward
# =========================================================================

@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by backward()."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def forward(params: ParamSet, spec: NetSpec, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass.

    Sigmoid outputs are clamped to [1e-7, 1 - 1e-7] so downstream logarithms
    are always finite.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_width:
        raise ValueError(
            f"input shape {X.shape} incompatible with spec input width {spec.input_width}")
    if len(params.weights) != spec.n_layers:
        raise ValueError("parameter count does not match spec")

    h = X
    inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    last = spec.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W.T + b
        preacts.append(z)
        if k < last:
            h = elu(z)
        elif spec.output_activation == "sigmoid":
            h = np.clip(sigmoid(z), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
        else:
            h = z
    return h, ForwardCache(inputs=inputs, preacts=preacts, output=h)


def backward(
    params: ParamSet,
    spec: NetSpec,
    cache: ForwardCache,
    output_grad: np.ndarray,
) -> tuple[ParamSet, np.ndarray]:
    """Exact reverse-mode gradients for the scalar whose output-gradient is given.

    Returns (gradients shaped like params, gradient w.r.t. the input batch).
    Free scalars do not enter the forward pass, so their gradients are zero.
    """
    output_grad = np.asarray(output_grad, dtype=float)
    if len(cache.preacts) != spec.n_layers:
        raise ValueError("cache does not match spec")
    if output_grad.shape != cache.output.shape:
        raise ValueError(
            f"output_grad shape {output_grad.shape} does not match cached output "
            f"{cache.output.shape}")

    g_w = [np.empty(0)] * spec.n_layers
    g_b = [np.empty(0)] * spec.n_layers
    g = output_grad
    last = spec.n_layers - 1
    for k in range(last, -1, -1):
        z = cache.preacts[k]
        if k == last:
            if spec.output_activation == "sigmoid":
                p = sigmoid(z)
                inside = (p > SIGMOID_CLAMP) & (p < 1.0 - SIGMOID_CLAMP)
                dz = g * p * (1.0 - p) * inside
            else:
                dz = g
        else:
            dz = g * elu_grad(z)
        g_w[k] = dz.T @ cache.inputs[k]
        g_b[k] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    grads = ParamSet(weights=g_w, biases=g_b,
                     scalars={k: np.zeros(()) for k in params.scalars})
    return grads, g


# =========================================================================
# Adam
# =========================================================================

@dataclass
class AdamState:
    """First/second moment accumulators mirroring a tensor list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


def adam_init(tensors: list[np.ndarray], learning_rate: float = 1e-3) -> AdamState:
    return AdamState(
        m=[np.zeros_like(t) for t in tensors],
        v=[np.zeros_like(t) for t in tensors],
        learning_rate=learning_rate,
    )


def adam_update(
    tensors: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    maximize: bool = False,
) -> None:
    """One bias-corrected Adam step, applied to the tensors in place."""
    if len(tensors) != len(state.m) or len(grads) != len(tensors):
        raise ValueError("tensor/gradient/state lengths do not match")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient entries")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        g = np.asarray(g, dtype=float)
        if maximize:
            g = -g
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    maximize: bool = False,
) -> tuple[ParamSet, AdamState]:
    """Functional Adam step over a whole ParamSet.

    The state's accumulators mirror ``params.tensors()`` ordering. A
    ``maximize`` flag negates the gradients for ascent tasks.
    """
    new_params = params.copy()
    new_state = copy.deepcopy(state)
    adam_update(new_params.tensors(), grads.tensors(), new_state, maximize=maximize)
    return new_params, new_state


def adam_init_for(params: ParamSet, learning_rate: float = 1e-3) -> AdamState:
    return adam_init(params.tensors(), learning_rate)


# =========================================================================
# Finite-difference verification
# =========================================================================

def grad_check(
    spec: NetSpec,
    params: ParamSet,
    loss: Callable[[ParamSet], tuple[float, ParamSet]],
    h: float,
    max_coords: int = 10_000,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss(params)`` must return (value, gradient ParamSet). Every coordinate
    is checked (a random subsample of ``max_coords`` above that many); the
    result is max |analytic - numeric| / max(1, |analytic| + |numeric|).
    """
    if not (1e-7 < h < 1e-3):
        raise ValueError("invalid step")
    if len(params.weights) != spec.n_layers:
        raise ValueError("parameter count does not match spec")
    _, grads = loss(params)
    tensors = params.tensors()
    gtensors = grads.tensors()

    coords = [(ti, idx) for ti, t in enumerate(tensors) for idx in range(t.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picked]

    max_err = 0.0
    for ti, idx in coords:
        t = tensors[ti]
        flat = t.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = loss(params)[0]
        flat[idx] = orig - h
        f_minus = loss(params)[0]
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(gtensors[ti].reshape(-1)[idx])
        err = abs(analytic - numeric) / max(1.0, abs(analytic) + abs(numeric))
        max_err = max(max_err, err)
    return max_err


# =========================================================================
# Checkpoint serialization (versioned JSON, row-major arrays)
# =========================================================================

CHECKPOINT_FORMAT = "dense-net"
CHECKPOINT_VERSION = 1


def spec_to_dict(spec: NetSpec) -> dict:
    return {
        "layer_widths": list(spec.layer_widths),
        "hidden_activation": spec.hidden_activation,
        "output_activation": spec.output_activation,
    }


def spec_from_dict(d: dict) -> NetSpec:
    return NetSpec(
        layer_widths=tuple(d["layer_widths"]),
        hidden_activation=d["hidden_activation"],
        output_activation=d["output_activation"],
    )


def params_to_dict(params: ParamSet) -> dict:
    out: dict = {}
    for k, w in enumerate(params.weights):
        out[f"W{k}"] = w.tolist()
    for k, b in enumerate(params.biases):
        out[f"b{k}"] = b.tolist()
    out["scalars"] = {name: float(v) for name, v in params.scalars.items()}
    return out


def params_from_dict(d: dict) -> ParamSet:
    n_layers = sum(1 for k in d if k.startswith("W"))
    weights = [np.asarray(d[f"W{k}"], dtype=float) for k in range(n_layers)]
    biases = [np.asarray(d[f"b{k}"], dtype=float) for k in range(n_layers)]
    scalars = {name: np.asarray(v, dtype=float).reshape(())
               for name, v in d.get("scalars", {}).items()}
    return ParamSet(weights=weights, biases=biases, scalars=scalars)


def save_net(path: str | Path, spec: NetSpec, params: ParamSet) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(spec),
        "params": params_to_dict(params),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_net(path: str | Path) -> tuple[NetSpec, ParamSet]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return spec_from_dict(doc["spec"]), params_from_dict(doc["params"])
