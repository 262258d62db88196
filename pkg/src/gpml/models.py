"""Feature extractor, linear classifier and length-scale network.

All three are plain functions of a :class:`ParamSet`; the architecture is
recovered from parameter names and shapes, so a persisted ParamSet is enough
to rebuild the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, ShapeError, Tensor

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "mlp"  # "conv4" or "mlp"
    input_shape: tuple[int, ...] = (20,)
    width: int = 64
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.kind not in ("conv4", "mlp"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "conv4" and len(self.input_shape) != 3:
            raise ValueError("conv4 expects a (channels, height, width) input shape")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp expects a flat input shape")
        if self.embedding_dim <= 0:
            raise ValueError("embedding dimension must be positive")

    @property
    def feature_map(self) -> tuple[int, int, int]:
        """(channels, height, width) of the conv4 output before flattening."""
        _, h, w = self.input_shape
        for _ in range(4):
            h, w = h // 2, w // 2
        return self.width, h, w

    @property
    def embedding_dim(self) -> int:
        if self.kind == "mlp":
            return self.hidden[-1]
        c, h, w = self.feature_map
        return c * h * w


@dataclass(frozen=True)
class HeadSpec:
    embedding_dim: int
    n_way: int = 5


@dataclass(frozen=True)
class GraphModuleSpec:
    channels: int = 64
    hidden: int = 64


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _graph_pool_dims(c: int, h: int, w: int, blocks: int = 2) -> tuple[int, int]:
    # a block pools only while both spatial dims are at least 2
    for _ in range(blocks):
        if h >= 2 and w >= 2:
            h, w = h // 2, w // 2
    return h, w


def init_params(backbone: BackboneSpec, head: HeadSpec, graph: GraphModuleSpec | None = None,
                seed: int = 0) -> ParamSet:
    """Random weights (uniform, fan-in scaled) and zero biases for all three networks."""
    graph = graph or GraphModuleSpec()
    if head.embedding_dim != backbone.embedding_dim:
        raise ValueError(f"head expects embedding dim {head.embedding_dim}, "
                         f"backbone produces {backbone.embedding_dim}")
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}

    def add(name, group, w_shape, fan_in):
        values[f"{name}.w"] = _uniform(rng, w_shape, fan_in)
        values[f"{name}.b"] = np.zeros(w_shape[0])
        groups[f"{name}.w"] = groups[f"{name}.b"] = group

    if backbone.kind == "conv4":
        c_in = backbone.input_shape[0]
        for i in range(4):
            add(f"body.conv{i}", "body", (backbone.width, c_in, 3, 3), c_in * 9)
            c_in = backbone.width
    else:
        d_in = backbone.input_shape[0]
        for i, h in enumerate(backbone.hidden):
            add(f"body.fc{i}", "body", (h, d_in), d_in)
            d_in = h

    emb = backbone.embedding_dim
    add("head", "head", (head.n_way, emb), emb)

    if backbone.kind == "conv4":
        c, h, w = backbone.feature_map
        add("graph.conv0", "graph", (graph.channels, c, 3, 3), c * 9)
        add("graph.conv1", "graph", (graph.channels, graph.channels, 3, 3), graph.channels * 9)
        ph, pw = _graph_pool_dims(c, h, w)
        flat = graph.channels * ph * pw
    else:
        flat = emb
    add("graph.fc0", "graph", (graph.hidden, flat), flat)
    add("graph.fc1", "graph", (1, graph.hidden), graph.hidden)
    return ParamSet(values, groups)


def _get(params: Mapping, name: str) -> Tensor:
    return dc.as_tensor(params[name])


def _conv_block(x: Tensor, params: Mapping, name: str) -> Tensor:
    x = dc.conv2d(x, _get(params, f"{name}.w"), _get(params, f"{name}.b"))
    x = dc.relu(dc.batchnorm(x))
    if x.shape[2] >= 2 and x.shape[3] >= 2:
        x = dc.maxpool2(x)
    return x


def _is_conv(params: Mapping) -> bool:
    return "body.conv0.w" in params


def embed(params: Mapping, batch) -> Tensor:
    """Body features, shape (batch, embedding_dim).

    ``params`` may hold arrays or tracked tensors (see ``ParamSet.track``).
    """
    x = dc.as_tensor(batch)
    if _is_conv(params):
        c_in = params["body.conv0.w"].shape[1]
        if x.ndim != 4 or x.shape[1] != c_in:
            raise ShapeError("embed", x.shape, (None, c_in, None, None))
        for i in range(4):
            x = _conv_block(x, params, f"body.conv{i}")
        return dc.flatten(x)
    d_in = params["body.fc0.w"].shape[1]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError("embed", x.shape, (None, d_in))
    i = 0
    while f"body.fc{i}.w" in params:
        x = dc.relu(dc.linear(x, _get(params, f"body.fc{i}.w"), _get(params, f"body.fc{i}.b")))
        i += 1
    return x


def classify(params: Mapping, features) -> Tensor:
    """Logits of the linear head, shape (batch, n_way)."""
    return dc.linear(features, _get(params, "head.w"), _get(params, "head.b"))


def forward(params: Mapping, batch) -> Tensor:
    return classify(params, embed(params, batch))


def scale_lengths(params: Mapping, features) -> Tensor:
    """Per-example length scales, shape (batch,), each in [1e-3, 1e3].

    ``features`` is the flat body embedding. For the conv backbone it is
    reshaped back to a square feature map before the two conv blocks.
    """
    x = dc.as_tensor(features)
    if "graph.conv0.w" in params:
        c = params["graph.conv0.w"].shape[1]
        if x.ndim != 2 or x.shape[1] % c:
            raise ShapeError("scale_lengths", x.shape, (None, c))
        side = math.isqrt(x.shape[1] // c)
        if side * side * c != x.shape[1]:
            raise ShapeError("scale_lengths", x.shape, (None, c, "square"))
        x = dc.reshape(x, (x.shape[0], c, side, side))
        x = _conv_block(x, params, "graph.conv0")
        x = _conv_block(x, params, "graph.conv1")
        x = dc.flatten(x)
    elif x.ndim != 2 or x.shape[1] != params["graph.fc0.w"].shape[1]:
        raise ShapeError("scale_lengths", x.shape, params["graph.fc0.w"].shape)
    x = dc.relu(dc.linear(x, _get(params, "graph.fc0.w"), _get(params, "graph.fc0.b")))
    z = dc.linear(x, _get(params, "graph.fc1.w"), _get(params, "graph.fc1.b"))
    sigma = dc.exp(dc.clip(dc.reshape(z, (z.shape[0],)), math.log(SIGMA_MIN), math.log(SIGMA_MAX)))
    if not np.all(np.isfinite(sigma.value)) or np.any(sigma.value <= 0):
        raise FloatingPointError("scale_lengths produced a non-positive or non-finite value")
    return sigma


def predict(params: Mapping, batch) -> np.ndarray:
    return forward(params, batch).value.argmax(axis=1)

