"""Minimal neural-network core: MLP, reverse-mode gradients, AdamW.

Everything here is plain numpy. Networks are small (two hidden layers of a
few dozen units) and batches are modest, so dense float64 math is both exact
enough for gradient checking and fast enough for the training loops in this
package.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),          # derivative from output
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


class Mlp:
    """Fully connected network with linear output head.

    Parameters are ``weights[i]`` of shape (n_in, n_out) and ``biases[i]``;
    hidden layers share one activation, the output layer is linear.
    """

    def __init__(
        self,
        layer_sizes: list[int],
        activation: str = "tanh",
        seed: int | None = None,
        dtype=np.float64,
        zero_output_layer: bool = False,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            scale = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-scale, scale, size=(n_in, n_out)).astype(dtype)
            b = np.zeros(n_out, dtype=dtype)
            self.weights.append(w)
            self.biases.append(b)
        if zero_output_layer:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0

    # -- evaluation -------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping layer activations for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input width {x.shape[1]} != expected {self.layer_sizes[0]}"
            )
        act, _ = _ACTIVATIONS[self.activation]
        activations = [x]
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = act(h)
            activations.append(h)
        out = h[0] if squeeze else h
        return out, (activations, squeeze)

    def backward(self, cache, grad_out: np.ndarray):
        """Exact reverse-mode gradients.

        ``grad_out`` is dLoss/dOutput with the same shape as the forward
        output. Returns (param_grads, grad_input) where param_grads matches
        :meth:`parameters` order.
        """
        activations, squeeze = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if squeeze:
            g = g[None, :]
        if g.shape != activations[-1].shape:
            raise ValueError("upstream gradient shape mismatch")
        _, dact = _ACTIVATIONS[self.activation]
        grads: list[np.ndarray] = []
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            x_in = activations[i]
            if i != last:
                g = g * dact(activations[i + 1])
            dw = x_in.T @ g
            db = g.sum(axis=0)
            grads.append(db)
            grads.append(dw)
            g = g @ self.weights[i].T
        grads.reverse()
        grad_in = g[0] if squeeze else g
        return grads, grad_in

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None):
        save_mlp(self, path, extra)

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        net, _ = load_mlp(path)
        return net


def _param_hash(arrays: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def save_mlp(net: Mlp, path: str | Path, extra: dict | None = None):
    """Self-describing checkpoint: layer sizes, dtype, params, content hash."""
    meta = {
        "layer_sizes": net.layer_sizes,
        "activation": net.activation,
        "dtype": np.dtype(net.dtype).name,
        "hash": _param_hash(net.parameters()),
        "extra": extra or {},
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_mlp(path: str | Path):
    """Load a checkpoint; raises ValueError on shape or hash mismatches."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        sizes = meta["layer_sizes"]
        net = Mlp(sizes, activation=meta["activation"], dtype=np.dtype(meta["dtype"]))
        for i in range(net.n_layers):
            w = data[f"w{i}"]
            b = data[f"b{i}"]
            if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                raise ValueError(
                    f"checkpoint layer {i} shape {w.shape} does not match "
                    f"declared sizes {sizes}"
                )
            net.weights[i] = w.astype(net.dtype)
            net.biases[i] = b.astype(net.dtype)
    if _param_hash(net.parameters()) != meta["hash"]:
        raise ValueError("checkpoint content hash mismatch")
    return net, meta["extra"]


class AdamW:
    """Adam with decoupled weight decay.

    ``step`` mutates the given parameter arrays in place; moment buffers are
    keyed by position, so always pass the same parameter list.
    """

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient count mismatch")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


class EarlyStopping:
    """Stop once the best loss seen has not improved for ``patience`` steps."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        if patience <= 0:
            raise ValueError("patience must be positive")
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_step = 0
        self._step = 0

    def update(self, loss: float) -> bool:
        """Record one step's loss; returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_step = self._step
            self._step += 1
            return False
        self._step += 1
        return (self._step - 1) - self.best_step >= self.patience
