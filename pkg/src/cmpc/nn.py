"""Dense numerical core: MLP encoders with hand-written reverse-mode
gradients, Adam with bias correction, and a linear-warmup cosine-decay
learning-rate schedule.

Everything is float64. Encoder outputs are L2-normalized rows, so batches of
embeddings live on the unit hypersphere. With a fixed seed all operations are
bitwise deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import LoadError, NumericError

# Guard for normalizing near-zero rows: if |x| < NORM_GUARD the norm gets
# NORM_GUARD added instead of raising, so a degenerate row maps to ~0.
NORM_GUARD = 1e-12


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    guarded = np.where(norms < NORM_GUARD, norms + NORM_GUARD, norms)
    return x / guarded


def _check_matrix(x, what: str):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")
    return x


@dataclass(frozen=True)
class LrSchedule:
    """Linear ramp from initial_lr to peak_lr, then cosine decay to final_lr."""

    initial_lr: float
    peak_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}"
            )
        if min(self.initial_lr, self.peak_lr, self.final_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.peak_lr < self.final_lr:
            raise ValueError("peak_lr must be >= final_lr for a decaying schedule")

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(
                f"step {step} outside schedule range [0, {self.total_steps}]"
            )
        if step <= self.warmup_steps:
            if self.warmup_steps == 0:
                return self.peak_lr
            frac = step / self.warmup_steps
            return self.initial_lr + (self.peak_lr - self.initial_lr) * frac
        t = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.final_lr + (self.peak_lr - self.final_lr) * 0.5 * (
            1.0 + math.cos(math.pi * t)
        )


class MlpEncoder:
    """Fully connected net, ReLU hidden layers, identity output layer,
    followed by row-wise L2 normalization onto the unit hypersphere.
    """

    def __init__(self, layer_dims, rng: np.random.Generator | None = None):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {dims}")
        self.layer_dims = dims
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Mutable parameter arrays, interleaved [w0, b0, w1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def parameter_names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out.extend((f"w{i}", f"b{i}"))
        return out

    def set_parameters(self, params) -> None:
        expected = self.parameters()
        if len(params) != len(expected):
            raise ValueError("wrong number of parameter arrays")
        for i, (new, old) in enumerate(zip(params, expected)):
            new = np.asarray(new, dtype=np.float64)
            if new.shape != old.shape:
                raise ValueError(f"parameter {i} has shape {new.shape}, "
                                 f"expected {old.shape}")
            old[...] = new

    def _trace(self, batch):
        # Returns per-layer inputs, the pre-normalization output, and the
        # guarded row norms needed to backprop the normalization.
        inputs = [batch]
        x = batch
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = x @ w + b
            if i < self.n_layers - 1:
                x = np.maximum(z, 0.0)
            else:
                x = z
            inputs.append(x)
        pre_norm = inputs[-1]
        norms = np.linalg.norm(pre_norm, axis=1, keepdims=True)
        guarded = np.where(norms < NORM_GUARD, norms + NORM_GUARD, norms)
        return inputs, pre_norm / guarded, guarded

    def forward(self, batch) -> np.ndarray:
        batch = _check_matrix(batch, "batch")
        if batch.shape[1] != self.input_dim:
            raise ValueError(
                f"batch has {batch.shape[1]} columns, encoder expects "
                f"{self.input_dim}"
            )
        _, out, _ = self._trace(batch)
        return out

    def backward(self, batch, output_grad) -> list[np.ndarray]:
        """Gradients of sum(output * output_grad) for every parameter.

        Recomputes the forward trace, backprops through the L2 normalization
        (tangent projector scaled by 1/|z|) and the layers. Returns grads in
        ``parameters()`` order.
        """
        batch = _check_matrix(batch, "batch")
        output_grad = _check_matrix(output_grad, "output_grad")
        if batch.shape[1] != self.input_dim:
            raise ValueError(
                f"batch has {batch.shape[1]} columns, encoder expects "
                f"{self.input_dim}"
            )
        if output_grad.shape != (batch.shape[0], self.output_dim):
            raise ValueError(
                f"output_grad shape {output_grad.shape} does not match "
                f"({batch.shape[0]}, {self.output_dim})"
            )
        inputs, out, guarded = self._trace(batch)
        # d/dz of z/|z| applied to g: (g - y (y.g)) / |z|
        inner = np.sum(out * output_grad, axis=1, keepdims=True)
        grad = (output_grad - out * inner) / guarded
        w_grads: list[np.ndarray] = [None] * self.n_layers
        b_grads: list[np.ndarray] = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            layer_in = inputs[i]
            if i < self.n_layers - 1:
                # inputs[i+1] is the ReLU output; its positive entries mark
                # the active pre-activations.
                grad = grad * (inputs[i + 1] > 0.0)
            w_grads[i] = layer_in.T @ grad
            b_grads[i] = grad.sum(axis=0)
            if i > 0:
                grad = grad @ self.weights[i].T
        out_grads = []
        for wg, bg in zip(w_grads, b_grads):
            out_grads.extend((wg, bg))
        return out_grads

    def copy(self) -> "MlpEncoder":
        clone = MlpEncoder(self.layer_dims)
        clone.set_parameters(self.parameters())
        return clone


class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.002):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float, names=None) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("params/grads do not match optimizer state")
        for i, (p, g) in enumerate(zip(params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"gradient {i} shape {g.shape} != {p.shape}")
            if not np.isfinite(g).all():
                name = names[i] if names else f"param{i}"
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def save_encoder(encoder: MlpEncoder, path) -> None:
    arrays = dict(zip(encoder.parameter_names(), encoder.parameters()))
    meta = {"kind": "encoder", "layer_dims": list(encoder.layer_dims)}
    write_container(path, meta, arrays)


def load_encoder(path) -> MlpEncoder:
    meta, arrays = read_container(path)
    if meta.get("kind") != "encoder":
        raise LoadError(f"{path} is not an encoder checkpoint")
    encoder = MlpEncoder(meta["layer_dims"])
    encoder.set_parameters([arrays[n] for n in encoder.parameter_names()])
    return encoder
