"""Small feed-forward models over flat parameter vectors.

Everything here works on a single flat ``float64`` vector holding all the
weights of a model. Layers are described by lightweight dataclasses; a
:class:`Model` knows how to slice the flat vector into per-layer views, run
the forward pass, and backpropagate the mean softmax cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    """Shape mismatch between a model, its parameters, or a batch."""


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True

    kind = "dense"


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: str = "valid"
    bias: bool = True

    kind = "conv2d"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


Layer = Dense | Conv2D | ReLU


def _layer_name(index: int, layer: Layer) -> str:
    if isinstance(layer, Dense):
        return f"layer {index} (dense {layer.in_dim}->{layer.out_dim})"
    if isinstance(layer, Conv2D):
        return f"layer {index} (conv2d {layer.in_ch}->{layer.out_ch}, k={layer.kernel})"
    return f"layer {index} (relu)"


def _conv_geometry(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_size, pad_lo, pad_hi) along one spatial axis."""
    if padding == "valid":
        if size < kernel:
            return 0, 0, 0
        return (size - kernel) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus the input shape it consumes.

    ``input_shape`` is ``(dims,)`` for vector inputs or ``(channels, h, w)``
    for images. Dense layers flatten whatever they receive.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    num_classes: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 1:
            raise DimensionError("num_classes must be positive")
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            name = _layer_name(i, layer)
            if isinstance(layer, Dense):
                width = int(np.prod(shape))
                if width != layer.in_dim:
                    raise DimensionError(f"{name}: expects input width {layer.in_dim}, previous output has {width}")
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv2D):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise DimensionError(f"{name}: expects ({layer.in_ch}, h, w) input, got {shape}")
                if layer.stride < 1 or layer.kernel < 1:
                    raise DimensionError(f"{name}: kernel and stride must be >= 1")
                oh = _conv_geometry(shape[1], layer.kernel, layer.stride, layer.padding)[0]
                ow = _conv_geometry(shape[2], layer.kernel, layer.stride, layer.padding)[0]
                if oh < 1 or ow < 1:
                    raise DimensionError(f"{name}: kernel larger than {shape[1:]} input")
                shape = (layer.out_ch, oh, ow)
            elif not isinstance(layer, ReLU):
                raise TypeError(f"unsupported layer {layer!r}")
            shapes.append(shape)
        if int(np.prod(shape)) != self.num_classes:
            raise DimensionError(
                f"{_layer_name(len(self.layers) - 1, self.layers[-1])}: "
                f"output width {int(np.prod(shape))} != num_classes {self.num_classes}"
            )
        object.__setattr__(self, "shapes", tuple(shapes))

    def param_shapes(self) -> list[tuple[int, ...]]:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append((layer.in_dim, layer.out_dim))
                if layer.bias:
                    out.append((layer.out_dim,))
            elif isinstance(layer, Conv2D):
                out.append((layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
                if layer.bias:
                    out.append((layer.out_ch,))
        return out

    @property
    def total_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())


def mlp_spec(input_dim: int, hidden: Sequence[int], num_classes: int) -> ModelSpec:
    layers: list[Layer] = []
    prev = input_dim
    for h in hidden:
        layers += [Dense(prev, h), ReLU()]
        prev = h
    layers.append(Dense(prev, num_classes))
    return ModelSpec((input_dim,), tuple(layers), num_classes)


def lenet_spec(input_shape: tuple[int, int, int], num_classes: int, channels: int = 6, hidden: int = 32) -> ModelSpec:
    """A LeNet-flavoured conv net sized for 8x8 images."""
    c, h, w = input_shape
    conv1 = Conv2D(c, channels, 3, stride=1, padding="same")
    conv2 = Conv2D(channels, channels * 2, 3, stride=2, padding="valid")
    oh = _conv_geometry(h, 3, 2, "valid")[0]
    ow = _conv_geometry(w, 3, 2, "valid")[0]
    flat = channels * 2 * oh * ow
    layers = (conv1, ReLU(), conv2, ReLU(), Dense(flat, hidden), ReLU(), Dense(hidden, num_classes))
    return ModelSpec(input_shape, layers, num_classes)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("batch must contain at least one sample")
        if len(self.inputs) != len(self.labels):
            raise DimensionError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    local_epochs: int = 2

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")


class Differentiable(Protocol):
    """Anything that can report loss, accuracy, and gradient at a point."""

    total_params: int

    def loss_and_grad(self, params: np.ndarray, batch: Batch | None) -> tuple[float, float, np.ndarray]: ...

    def loss(self, params: np.ndarray, batch: Batch | None) -> tuple[float, float]: ...


def _im2col(x: np.ndarray, layer: Conv2D) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    n, c, h, w = x.shape
    k, s = layer.kernel, layer.stride
    oh, ph0, ph1 = _conv_geometry(h, k, s, layer.padding)
    ow, pw0, pw1 = _conv_geometry(w, k, s, layer.padding)
    if ph0 or ph1 or pw0 or pw1:
        x = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    # (n, oh, ow, c, k, k) -> rows are output positions
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, (oh, ow, ph0, pw0)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], layer: Conv2D, geom: tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = x_shape
    k, s = layer.kernel, layer.stride
    oh, ow, ph0, pw0 = geom
    _, ph_lo, ph_hi = _conv_geometry(h, k, s, layer.padding)
    _, pw_lo, pw_hi = _conv_geometry(w, k, s, layer.padding)
    dx = np.zeros((n, c, h + ph_lo + ph_hi, w + pw_lo + pw_hi))
    d = dcols.reshape(n, oh, ow, c, k, k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx[:, :, ph0 : ph0 + h, pw0 : pw0 + w]


class Model:
    """Forward and reverse passes for a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.total_params = spec.total_params
        self._slices: list[tuple[slice, tuple[int, ...]]] = []
        offset = 0
        for shape in spec.param_shapes():
            size = int(np.prod(shape))
            self._slices.append((slice(offset, offset + size), shape))
            offset += size

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def unflatten(self, params: np.ndarray) -> list[np.ndarray]:
        """Per-tensor views into ``params`` (no copy)."""
        self._check_params(params)
        return [params[sl].reshape(shape) for sl, shape in self._slices]

    def flatten(self, tensors: Sequence[np.ndarray]) -> np.ndarray:
        if len(tensors) != len(self._slices):
            raise DimensionError(f"expected {len(self._slices)} tensors, got {len(tensors)}")
        out = np.empty(self.total_params)
        for (sl, shape), t in zip(self._slices, tensors):
            if tuple(t.shape) != shape:
                raise DimensionError(f"tensor shape {t.shape} != expected {shape}")
            out[sl] = t.ravel()
        return out

    def init_params(self, seed: int | np.random.Generator) -> np.ndarray:
        """Uniform in +-1/sqrt(fan_in) for every weight and bias."""
        rng = np.random.default_rng(seed)
        tensors = []
        for layer in self.spec.layers:
            if isinstance(layer, Dense):
                fan_in = layer.in_dim
                n_tensors = 2 if layer.bias else 1
            elif isinstance(layer, Conv2D):
                fan_in = layer.in_ch * layer.kernel * layer.kernel
                n_tensors = 2 if layer.bias else 1
            else:
                continue
            bound = 1.0 / np.sqrt(fan_in)
            for _ in range(n_tensors):
                shape = self._slices[len(tensors)][1]
                tensors.append(rng.uniform(-bound, bound, size=shape))
        return self.flatten(tensors)

    def _check_params(self, params: np.ndarray) -> None:
        if params.ndim != 1 or params.shape[0] != self.total_params:
            raise DimensionError(f"params has shape {params.shape}, model expects ({self.total_params},)")

    def _check_batch(self, batch: Batch) -> np.ndarray:
        x = np.asarray(batch.inputs, dtype=np.float64)
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            if int(np.prod(x.shape[1:])) == int(np.prod(expected)):
                x = x.reshape((len(x),) + expected)
            else:
                raise DimensionError(
                    f"{_layer_name(0, self.spec.layers[0])}: batch inputs have shape {x.shape[1:]}, expected {expected}"
                )
        labels = np.asarray(batch.labels)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DimensionError(f"labels outside [0, {self.num_classes})")
        return x

    def _forward(self, params: np.ndarray, x: np.ndarray, keep: bool):
        tensors = self.unflatten(params)
        cache = []
        ti = 0
        h = x
        for layer in self.spec.layers:
            if isinstance(layer, Dense):
                W = tensors[ti]
                b = tensors[ti + 1] if layer.bias else None
                ti += 2 if layer.bias else 1
                inp = h.reshape(len(h), -1)
                if keep:
                    cache.append((h.shape, inp))
                h = inp @ W
                if b is not None:
                    h = h + b
            elif isinstance(layer, Conv2D):
                W = tensors[ti]
                b = tensors[ti + 1] if layer.bias else None
                ti += 2 if layer.bias else 1
                cols, geom = _im2col(h, layer)
                if keep:
                    cache.append((h.shape, cols, geom))
                out = cols @ W.reshape(layer.out_ch, -1).T
                if b is not None:
                    out = out + b
                oh, ow = geom[0], geom[1]
                h = out.reshape(len(h), oh, ow, layer.out_ch).transpose(0, 3, 1, 2)
            else:
                mask = h > 0
                if keep:
                    cache.append(mask)
                h = h * mask
        return h.reshape(len(h), -1), tensors, cache

    def logits(self, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        self._check_params(params)
        x = self._check_batch(Batch(inputs, np.zeros(len(inputs), dtype=np.int64)))
        return self._forward(params, x, keep=False)[0]

    def predict(self, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, inputs), axis=1)

    def loss(self, params: np.ndarray, batch: Batch) -> tuple[float, float]:
        self._check_params(params)
        x = self._check_batch(batch)
        z, _, _ = self._forward(params, x, keep=False)
        loss, acc, _ = _softmax_xent(z, np.asarray(batch.labels), need_grad=False)
        return loss, acc

    def loss_and_grad(self, params: np.ndarray, batch: Batch) -> tuple[float, float, np.ndarray]:
        self._check_params(params)
        x = self._check_batch(batch)
        z, tensors, cache = self._forward(params, x, keep=True)
        loss, acc, dz = _softmax_xent(z, np.asarray(batch.labels), need_grad=True)
        grads: list[np.ndarray | None] = [None] * len(tensors)
        ti = len(tensors)
        dh = dz
        for layer, saved in zip(reversed(self.spec.layers), reversed(cache)):
            if isinstance(layer, Dense):
                in_shape, inp = saved
                ti -= 2 if layer.bias else 1
                W = tensors[ti]
                dh = dh.reshape(len(dh), -1)
                grads[ti] = inp.T @ dh
                if layer.bias:
                    grads[ti + 1] = dh.sum(axis=0)
                dh = (dh @ W.T).reshape(in_shape)
            elif isinstance(layer, Conv2D):
                in_shape, cols, geom = saved
                ti -= 2 if layer.bias else 1
                W = tensors[ti]
                dout = dh.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
                grads[ti] = (dout.T @ cols).reshape(W.shape)
                if layer.bias:
                    grads[ti + 1] = dout.sum(axis=0)
                dcols = dout @ W.reshape(layer.out_ch, -1)
                dh = _col2im(dcols, in_shape, layer, geom)
            else:
                dh = dh.reshape(saved.shape) * saved
        return loss, acc, self.flatten(grads)


def _softmax_xent(z: np.ndarray, y: np.ndarray, need_grad: bool):
    n = len(y)
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    p = expz / expz.sum(axis=1, keepdims=True)
    py = p[np.arange(n), y]
    clamped = py < PROB_FLOOR
    loss = float(-np.log(np.where(clamped, PROB_FLOOR, py)).mean())
    acc = float((np.argmax(z, axis=1) == y).mean())
    if not need_grad:
        return loss, acc, None
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    # a clamped log is constant in the logits
    dz[clamped] = 0.0
    return loss, acc, dz / n


class DiagonalQuadratic:
    """Test hook with loss ``0.5 * sum(a * theta**2)``; its Hessian is ``diag(a)``.

    The batch argument is ignored, so it plugs into :func:`grad`, :func:`hvp`
    and the spectral estimators wherever a model is expected.
    """

    def __init__(self, diag: Sequence[float]):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.total_params = len(self.diag)

    def loss(self, params, batch=None):
        return float(0.5 * np.sum(self.diag * params * params)), 0.0

    def loss_and_grad(self, params, batch=None):
        _check_len(params, self.total_params)
        return self.loss(params)[0], 0.0, self.diag * params


def _check_len(vec: np.ndarray, d: int, what: str = "params") -> None:
    if np.ndim(vec) != 1 or len(vec) != d:
        raise DimensionError(f"{what} has shape {np.shape(vec)}, expected ({d},)")


def forward_loss(model: Differentiable, params: np.ndarray, batch: Batch) -> tuple[float, float]:
    """Mean softmax cross-entropy and argmax accuracy."""
    return model.loss(params, batch)


def grad(model: Differentiable, params: np.ndarray, batch: Batch) -> np.ndarray:
    return model.loss_and_grad(params, batch)[2]


def sgd_step(params: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    _check_len(g, len(params), "grad")
    return params - lr * g


def hvp(model: Differentiable, params: np.ndarray, batch: Batch | None, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    _check_len(params, model.total_params)
    _check_len(v, model.total_params, "v")
    eps = 1e-4 * max(1.0, float(np.max(np.abs(params))) if len(params) else 1.0)
    g_plus = grad(model, params + eps * v, batch)
    g_minus = grad(model, params - eps * v, batch)
    return (g_plus - g_minus) / (2.0 * eps)
