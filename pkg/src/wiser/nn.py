"""Dense layers and the small sigmoid classifier shared by stages 2 and 4."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import gradcore as gc
from .errors import DataError, NumericError, ShapeError


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str) -> OrderedDict:
    bound = 1.0 / np.sqrt(fan_in)
    params = OrderedDict()
    params[f"{prefix}.weight"] = gc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                              name=f"{prefix}.weight")
    params[f"{prefix}.bias"] = gc.parameter(rng.uniform(-bound, bound, size=(1, fan_out)),
                                            name=f"{prefix}.bias")
    return params


def init_mlp(rng, sizes, prefix) -> OrderedDict:
    params = OrderedDict()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.update(init_dense(rng, a, b, f"{prefix}.{i}"))
    return params


def mlp_forward(params, prefix: str, x, n_layers: int):
    """ReLU between layers, linear last layer."""
    h = x
    for i in range(n_layers):
        h = gc.matmul(h, params[f"{prefix}.{i}.weight"]) + params[f"{prefix}.{i}.bias"]
        if i < n_layers - 1:
            h = gc.relu(h)
    return h


def bce_with_logits(logits, targets: np.ndarray):
    """Mean binary cross-entropy; ``targets`` is a 0/1 column."""
    y = gc.Tensor(targets.reshape(-1, 1).astype(np.float64))
    # -[y log s(x) + (1-y) log s(-x)] = softplus(x) - y*x
    return gc.mean(gc.softplus(logits) - y * logits)


class BinaryClassifier:
    """Dense ``in -> hidden... -> 1`` network with a sigmoid output."""

    def __init__(self, in_dim: int, hidden=(64, 32), seed=0, name="clf"):
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.name = name
        rng = np.random.default_rng(seed)
        self.sizes = (self.in_dim, *self.hidden, 1)
        self.params = init_mlp(rng, self.sizes, "net")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def logits(self, x):
        x = gc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected input width {self.in_dim}, got shape {x.shape}")
        return mlp_forward(self.params, "net", x, self.n_layers)

    def predict_proba(self, x) -> np.ndarray:
        with gc.no_grad():
            return gc.sigmoid(self.logits(x)).data.reshape(-1)

    def fit(self, x: np.ndarray, y: np.ndarray, epochs=200, lr=1e-3):
        """Full-batch Adam on binary cross-entropy. Returns the loss trace."""
        y = np.asarray(y)
        if len(np.unique(y)) < 2:
            raise DataError(f"{self.name}: training labels contain a single class")
        params = list(self.params.values())
        opt = gc.Adam(params, lr=lr)
        xt = gc.Tensor(x)
        trace = []
        for epoch in range(epochs):
            loss = bce_with_logits(self.logits(xt), y)
            if not np.isfinite(loss.data):
                raise NumericError(f"{self.name}: non-finite loss at epoch {epoch}")
            opt.step(gc.grad(loss, params))
            trace.append(loss.item())
        return trace

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    @classmethod
    def from_state_dict(cls, state, name="clf"):
        n = len([k for k in state if k.endswith(".weight")])
        sizes = [state[f"net.{i}.weight"].shape[0] for i in range(n)] + [1]
        clf = cls.__new__(cls)
        clf.in_dim = sizes[0]
        clf.hidden = tuple(sizes[1:-1])
        clf.sizes = tuple(sizes)
        clf.name = name
        clf.params = OrderedDict((k, gc.parameter(np.array(state[k]), name=k)) for k in state
                                 if k.startswith("net."))
        return clf
