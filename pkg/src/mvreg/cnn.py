"""Displacement regressor: a small CNN with hand-written forward and backward passes.

Architecture, for an input of 16 stacked ROI tiles::

    [Conv 5x5 (same) -> BatchNorm -> ReLU -> MaxPool 2x2/2] x 2
    -> position-wise dense (1x1 conv) -> ReLU -> flatten
    -> dense(250) -> ReLU -> dense(2)

Arrays are batched ``(N, C, H, W)``.  The model trains with mini-batch SGD
with momentum on the loss ``mean_n ||pred_n - target_n||^2 / 2``.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._container import read_container, write_container
from .errors import FormatError, MalformedHeaderError, ShapeError, TrainingError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "MVREGCNN 1"
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def glorot_init(fan_in, fan_out, seed, shape=None):
    """Uniform weights on +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValidationError(f"fans must be >= 1, got ({fan_in}, {fan_out})")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_out, fan_in))


class Layer:
    params = ()

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def param_arrays(self):
        return [getattr(self, name) for name in self.params]

    def grad_arrays(self):
        return [getattr(self, "d" + name) for name in self.params]


class Conv2D(Layer):
    params = ("weight", "bias")

    def __init__(self, in_ch, out_ch, kernel, seed, dtype):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        kk = kernel * kernel
        w = glorot_init(in_ch * kk, out_ch * kk, seed, shape=(out_ch, in_ch * kk))
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, k - 1 - p), (p, k - 1 - p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)
        self._cols = cols
        self._shape = x.shape
        out = np.matmul(self.weight, cols) + self.bias[None, :, None]
        return out.reshape(n, self.out_ch, h, w)

    def backward(self, grad):
        n, c, h, w = self._shape
        k = self.kernel
        p = k // 2
        g = grad.reshape(n, self.out_ch, h * w)
        self.dbias = g.sum(axis=(0, 2))
        self.dweight = np.einsum("noq,nkq->ok", g, self._cols)
        dcols = np.matmul(self.weight.T, g).reshape(n, c, k, k, h, w)
        dxp = np.zeros((n, c, h + k - 1, w + k - 1), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, i, j]
        self._cols = None
        return dxp[:, :, p : p + h, p : p + w]


class BatchNorm2D(Layer):
    params = ("gamma", "beta")

    def __init__(self, channels, dtype):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean).astype(x.dtype)
            self.running_var = (BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._xhat, self._inv = xhat, inv
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, grad):
        xhat, inv = self._xhat, self._inv
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        self.dbeta = grad.sum(axis=(0, 2, 3))
        self.dgamma = (grad * xhat).sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma[None, :, None, None]
        dx = (
            inv[None, :, None, None]
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        )
        self._xhat = None
        return dx


class ReLU(Layer):
    frozen = False

    def forward(self, x, train):
        if not self.frozen:
            self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2D(Layer):
    """2x2 pooling with stride 2; odd trailing rows/columns are dropped."""

    frozen = False

    def forward(self, x, train):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        if ho < 1 or wo < 1:
            raise ShapeError(f"cannot pool a {h}x{w} map")
        blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, 4)
        if not self.frozen:
            self._arg = blocks.argmax(axis=-1)  # first max wins on ties
        self._shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self._shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, self._arg[..., None], grad[..., None], axis=-1)
        dx = np.zeros(self._shape, dtype=grad.dtype)
        dx[:, :, : 2 * ho, : 2 * wo] = (
            blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return dx


class PositionwiseDense(Layer):
    """Fully connected across channels at every pixel (a 1x1 convolution)."""

    params = ("weight", "bias")

    def __init__(self, in_ch, out_ch, seed, dtype):
        self.weight = glorot_init(in_ch, out_ch, seed).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train):
        self._x = x
        return np.einsum("oc,nchw->nohw", self.weight, x) + self.bias[None, :, None, None]

    def backward(self, grad):
        self.dweight = np.einsum("nohw,nchw->oc", grad, self._x)
        self.dbias = grad.sum(axis=(0, 2, 3))
        self._x = None
        return np.einsum("oc,nohw->nchw", self.weight, grad)


class Flatten(Layer):
    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    params = ("weight", "bias")

    def __init__(self, n_in, n_out, seed, dtype):
        self.weight = glorot_init(n_in, n_out, seed).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        self.dweight = grad.T @ self._x
        self.dbias = grad.sum(axis=0)
        self._x = None
        return grad @ self.weight


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 16
    height: int = 50
    width: int = 50
    conv_channels: int = 20
    kernel: int = 5
    positionwise: int = 20
    hidden: int = 250
    outputs: int = 2

    @property
    def pooled_shape(self):
        return (self.height // 2 // 2, self.width // 2 // 2)

    def parameter_count(self):
        c, k = self.conv_channels, self.kernel
        ph, pw = self.pooled_shape
        conv1 = self.in_channels * c * k * k + c
        conv2 = c * c * k * k + c
        bn = 2 * c * 2
        pos = c * self.positionwise + self.positionwise
        dense = self.positionwise * ph * pw * self.hidden + self.hidden
        out = self.hidden * self.outputs + self.outputs
        return conv1 + conv2 + bn + pos + dense + out


class CnnModel:
    def __init__(self, arch=Architecture(), seed=0, dtype=np.float32):
        ph, pw = arch.pooled_shape
        if ph < 1 or pw < 1:
            raise ShapeError(f"input {arch.height}x{arch.width} too small for two 2x2 poolings")
        self.arch = arch
        self.dtype = np.dtype(dtype)
        seeds = np.random.SeedSequence(seed).spawn(5)
        s = [int(q.generate_state(1)[0]) for q in seeds]
        c = arch.conv_channels
        self.layers = [
            Conv2D(arch.in_channels, c, arch.kernel, s[0], dtype),
            BatchNorm2D(c, dtype),
            ReLU(),
            MaxPool2D(),
            Conv2D(c, c, arch.kernel, s[1], dtype),
            BatchNorm2D(c, dtype),
            ReLU(),
            MaxPool2D(),
            PositionwiseDense(c, arch.positionwise, s[2], dtype),
            ReLU(),
            Flatten(),
            Dense(arch.positionwise * ph * pw, arch.hidden, s[3], dtype),
            ReLU(),
            Dense(arch.hidden, arch.outputs, s[4], dtype),
        ]

    def parameters(self):
        return [p for layer in self.layers for p in layer.param_arrays()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.grad_arrays()]

    def buffers(self):
        return [b for layer in self.layers if isinstance(layer, BatchNorm2D) for b in (layer.running_mean, layer.running_var)]

    def set_buffers(self, values):
        values = iter(values)
        for layer in self.layers:
            if isinstance(layer, BatchNorm2D):
                layer.running_mean = np.array(next(values), dtype=self.dtype)
                layer.running_var = np.array(next(values), dtype=self.dtype)

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def freeze_activations(self, frozen=True):
        """Reuse the last ReLU masks and pooling selections in later forwards.

        Makes the loss smooth in the parameters around the last forward pass,
        for finite-difference checks.
        """
        for layer in self.layers:
            if isinstance(layer, (ReLU, MaxPool2D)):
                layer.frozen = frozen

    def activation_pattern(self):
        return [
            (layer._mask.copy() if isinstance(layer, ReLU) else layer._arg.copy())
            for layer in self.layers
            if isinstance(layer, (ReLU, MaxPool2D))
        ]

    def _check_input(self, x):
        a = self.arch
        if x.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if x.shape[1] != a.in_channels:
            raise ShapeError(f"expected {a.in_channels} channels, got {x.shape[1]}")
        if x.shape[2:] != (a.height, a.width):
            raise ShapeError(f"expected {a.height}x{a.width} tiles, got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x, train_mode=False):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x, train_mode)
        return x[0] if single else x

    def backward(self, batch, targets):
        """Train-mode forward then backward; returns ``(loss, gradients)``."""
        batch = np.asarray(batch, dtype=self.dtype)
        targets = np.asarray(targets, dtype=self.dtype)
        if batch.shape[0] != targets.shape[0]:
            raise ShapeError(f"{batch.shape[0]} samples but {targets.shape[0]} targets")
        pred = self.forward(batch, train_mode=True)
        resid = pred - targets
        loss = float(0.5 * np.sum(resid.astype(np.float64) ** 2) / batch.shape[0])
        grad = resid / batch.shape[0]
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return loss, self.gradients()

    def loss(self, batch, targets, train_mode=True):
        pred = self.forward(batch, train_mode=train_mode).astype(np.float64)
        return float(0.5 * np.sum((pred - np.asarray(targets, dtype=np.float64)) ** 2) / len(pred))

    def predict(self, x, batch_size=64):
        x = np.asarray(x)
        if x.ndim == 3:
            return self.forward(x, train_mode=False)
        return np.concatenate([self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def forward(model, x, train_mode=False):
    return model.forward(x, train_mode)


def backward(model, batch, targets):
    return model.backward(batch, targets)


# --- optimization ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay: float = 1e-4
    decay_per: str = "update"
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay < 0:
            raise ValidationError(f"lr_decay must be >= 0, got {self.lr_decay}")
        if self.decay_per not in ("update", "epoch"):
            raise ValidationError(f"decay_per must be 'update' or 'epoch', got {self.decay_per!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")


def decayed_lr(learning_rate, decay, t):
    return learning_rate / (1.0 + decay * t)


def sgd_update(params, grads, velocity, cfg, t):
    """In-place momentum step: ``v <- momentum*v - lr_t*g``; ``p <- p + v``."""
    lr = decayed_lr(cfg.learning_rate, cfg.lr_decay, t)
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape} disagree")
        v *= cfg.momentum
        v -= np.asarray(lr * g, dtype=v.dtype)
        p += v
    return params


def _snapshot(model):
    return [p.copy() for p in model.parameters()], [b.copy() for b in model.buffers()]


def _restore(model, snap):
    params, buffers = snap
    for p, saved in zip(model.parameters(), params):
        p[...] = saved
    model.set_buffers(buffers)


def train(model, inputs, targets, cfg=TrainConfig(), checkpoint_path=None, on_epoch=None):
    """Mini-batch SGD; returns the per-epoch mean training loss.

    A checkpoint is written after each epoch when ``checkpoint_path`` is set.
    A non-finite loss restores the last completed epoch's state and raises
    :class:`TrainingError`.
    """
    cfg.validate()
    inputs = np.asarray(inputs)
    targets = np.asarray(targets, dtype=model.dtype)
    n = len(inputs)
    if n == 0 or len(targets) != n:
        raise ValidationError(f"need a nonempty dataset with matching targets, got {n} / {len(targets)}")
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in model.parameters()]
    history = []
    t = 0
    good = _snapshot(model)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = model.backward(inputs[idx], targets[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                _restore(model, good)
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}", batch_index=b)
            step = t if cfg.decay_per == "update" else epoch
            sgd_update(model.parameters(), grads, velocity, cfg, step)
            total += loss * len(idx)
            t += 1
        history.append(total / n)
        good = _snapshot(model)
        if checkpoint_path is not None:
            save_model(model, checkpoint_path)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        log.info("epoch %d loss %.5g", epoch + 1, history[-1])
    return history


# --- checkpoint file ------------------------------------------------------


def save_model(model, path):
    header = {
        "architecture": asdict(model.arch),
        "shapes": [list(p.shape) for p in model.parameters()],
        "buffer_shapes": [list(b.shape) for b in model.buffers()],
    }
    flat = np.concatenate([a.ravel() for a in model.parameters() + model.buffers()]).astype(np.float32)
    tmp = f"{path}.tmp"
    write_container(tmp, CHECKPOINT_MAGIC, header, flat)
    os.replace(tmp, path)


def load_model(path):
    def count(h):
        return sum(int(np.prod(s)) for s in h["shapes"] + h["buffer_shapes"])

    header, flat = read_container(path, CHECKPOINT_MAGIC, count)
    try:
        arch = Architecture(**header["architecture"])
    except TypeError as exc:
        raise MalformedHeaderError(f"{path}: bad architecture descriptor: {exc}") from exc
    model = CnnModel(arch)
    expected = [list(p.shape) for p in model.parameters()]
    if [list(s) for s in header["shapes"]] != expected:
        raise FormatError(f"{path}: parameter shapes do not match the architecture descriptor")
    offset = 0
    for p in model.parameters():
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    buffers = []
    for shape in header["buffer_shapes"]:
        size = int(np.prod(shape))
        buffers.append(flat[offset : offset + size].reshape(shape))
        offset += size
    model.set_buffers(buffers)
    return model


def describe(model):
    return json.dumps(asdict(model.arch))
