"""Small numpy classifier: optional 3x3 conv + max-pool, dense layers, softmax.

Parameters live in one flat float64 vector. The flat order is fixed and is
part of the wire format (see FORMATS.md): conv kernel ``(F, C, k, k)``, conv
bias ``(F,)``, then for every dense layer its weight ``(in, out)`` followed
by its bias ``(out,)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PreconditionError, ShapeError, TrainingDivergence

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple = (16, 16, 1)
    conv_filters: int = 8  # 0 disables the conv + pool block
    kernel_size: int = 3
    pool_size: int = 2
    hidden: tuple = (64,)
    num_classes: int = 10
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.conv_filters:
            h, w, _ = self.input_shape
            if h < self.kernel_size or w < self.kernel_size:
                raise ShapeError("image smaller than the conv kernel")
            if (h - self.kernel_size + 1) < self.pool_size:
                raise ShapeError("conv output smaller than the pooling window")

    @property
    def conv_out(self):
        h, w, _ = self.input_shape
        k = self.kernel_size
        return h - k + 1, w - k + 1

    @property
    def pooled(self):
        ho, wo = self.conv_out
        return ho // self.pool_size, wo // self.pool_size

    @property
    def flat_features(self):
        if not self.conv_filters:
            return int(np.prod(self.input_shape))
        hp, wp = self.pooled
        return hp * wp * self.conv_filters

    def layer_shapes(self):
        """(name, shape) of every parameter tensor, in canonical flat order."""
        shapes = []
        if self.conv_filters:
            c = self.input_shape[2]
            k = self.kernel_size
            shapes.append(("conv.w", (self.conv_filters, c, k, k)))
            shapes.append(("conv.b", (self.conv_filters,)))
        sizes = [self.flat_features, *self.hidden, self.num_classes]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes.append((f"dense{i}.w", (fan_in, fan_out)))
            shapes.append((f"dense{i}.b", (fan_out,)))
        return shapes

    @property
    def dim(self):
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int
    _patches: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ShapeError(f"inputs must be (N, H, W, C), got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ShapeError("inputs and labels differ in length")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        out = LabeledDataset(self.inputs[idx], self.labels[idx])
        for key, patches in self._patches.items():
            out._patches[key] = patches[idx]
        return out

    def patches(self, arch):
        """Conv receptive fields for ``arch``, computed once per dataset."""
        key = (arch.kernel_size, arch.pool_size, arch.input_shape)
        if key not in self._patches:
            self._patches[key] = conv_patches(arch, _as_batch(arch, self.inputs))
        return self._patches[key]

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return LabeledDataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass
class Model:
    arch: Architecture
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.size != self.arch.dim:
            raise ShapeError(f"expected {self.arch.dim} parameters, got shape {self.params.shape}")

    def tensors(self):
        return unflatten(self.arch, self.params)

    def copy(self):
        return Model(self.arch, self.params.copy())


def unflatten(arch, flat):
    out = {}
    offset = 0
    for name, shape in arch.layer_shapes():
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return out


def init_params(arch, rng, scale=None):
    """Fan-in scaled uniform init (``scale`` forces a fixed half-width)."""
    chunks = []
    for name, shape in arch.layer_shapes():
        if name.endswith(".b"):
            chunks.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if name == "conv.w" else shape[0]
        limit = scale if scale is not None else np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-limit, limit, size=shape))
    return np.concatenate([c.ravel() for c in chunks])


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0.0).astype(z.dtype) if name == "relu" else 1.0 - a * a


def _as_batch(arch, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match architecture {arch.input_shape}")
    return x


def _forward(arch, t, x, dropout_rng=None, patches=None):
    cache = {}
    n = x.shape[0]
    if arch.conv_filters:
        if patches is None:
            patches = conv_patches(arch, x)
        wc = t["conv.w"].reshape(arch.conv_filters, -1)
        z = patches @ wc.T + t["conv.b"]  # (N, p*p, Hp*Wp, F)
        # both activations are monotone, so act(maxpool(z)) == maxpool(act(z))
        pz, route = _maxpool(z)
        pa = _act(arch.activation, pz)
        cache.update(patches=patches, pool_route=route, pool_z=pz, pool_a=pa)
        h = pa.reshape(n, -1)
    else:
        h = x.reshape(n, -1)

    n_dense = len(arch.hidden) + 1
    layers = []
    for i in range(n_dense):
        w, b = t[f"dense{i}.w"], t[f"dense{i}.b"]
        z = h @ w + b
        entry = {"inp": h, "z": z}
        if i < n_dense - 1:
            a = _act(arch.activation, z)
            entry["a"] = a
            if dropout_rng is not None and arch.dropout > 0.0:
                keep = 1.0 - arch.dropout
                mask = (dropout_rng.random(a.shape) < keep) / keep
                entry["mask"] = mask
                a = a * mask
            h = a
        else:
            h = z
        layers.append(entry)
    cache["dense"] = layers
    return h, cache


def conv_patches(arch, x):
    """im2col rows grouped by pooling offset: (N, p*p, Hp*Wp, C*k*k).

    Entry ``[n, o, i*Wp + j]`` is the receptive field of conv output
    ``(p*i + di, p*j + dj)`` where ``o = di*p + dj``. Conv outputs dropped by
    the pooling floor never appear.
    """
    k, p = arch.kernel_size, arch.pool_size
    hp, wp = arch.pooled
    n, c = x.shape[0], x.shape[3]
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, :hp * p, :wp * p]
    win = win.reshape(n, hp, p, wp, p, c * k * k).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(win).reshape(n, p * p, hp * wp, c * k * k)


def _maxpool(z):
    """Max over the offset axis (1), plus a one-hot mask of its first occurrence."""
    best = z.max(axis=1)
    route = z == best[:, None]
    seen = route[:, 0].copy()
    for o in range(1, z.shape[1]):
        route[:, o] &= ~seen
        seen |= route[:, o]
    return best, route


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _backward(arch, t, cache, delta, squared=False):
    """Backprop ``delta`` = dL/dlogits.

    With ``squared=False`` rows of ``delta`` are summed into one gradient.
    With ``squared=True`` each row is treated as its own sample and the
    mean over samples of the element-wise squared gradient is returned.
    """
    n = delta.shape[0]
    grads = {}
    layers = cache["dense"]
    for i in reversed(range(len(layers))):
        entry = layers[i]
        inp = entry["inp"]
        if squared:
            grads[f"dense{i}.w"] = (inp * inp).T @ (delta * delta) / n
            grads[f"dense{i}.b"] = (delta * delta).mean(axis=0)
        else:
            grads[f"dense{i}.w"] = inp.T @ delta
            grads[f"dense{i}.b"] = delta.sum(axis=0)
        dh = delta @ t[f"dense{i}.w"].T
        if i > 0:
            prev = layers[i - 1]
            if "mask" in prev:
                dh = dh * prev["mask"]
            delta = dh * _act_grad(arch.activation, prev["z"], prev["a"])
        else:
            delta = dh

    if arch.conv_filters:
        pz = cache["pool_z"]
        dpz = delta.reshape(pz.shape) * _act_grad(arch.activation, pz, cache["pool_a"])
        dz = cache["pool_route"] * dpz[:, None]  # (N, p*p, Hp*Wp, F)
        patches = cache["patches"]
        shape = t["conv.w"].shape
        f, ckk = shape[0], patches.shape[3]
        if squared:
            per = np.matmul(dz.reshape(n, -1, f).transpose(0, 2, 1), patches.reshape(n, -1, ckk))
            grads["conv.w"] = (per * per).mean(axis=0).reshape(shape)
            pb = dz.sum(axis=(1, 2))
            grads["conv.b"] = (pb * pb).mean(axis=0)
        else:
            grads["conv.w"] = (dz.reshape(-1, f).T @ patches.reshape(-1, ckk)).reshape(shape)
            grads["conv.b"] = dz.reshape(-1, f).sum(axis=0)

    return np.concatenate([grads[name].ravel() for name, _ in arch.layer_shapes()])


def logits(model, x):
    """Raw scores for an image batch, or for a LabeledDataset (reusing its conv patches)."""
    arch = model.arch
    if isinstance(x, LabeledDataset):
        patches = x.patches(arch) if arch.conv_filters else None
        out, _ = _forward(arch, model.tensors(), _as_batch(arch, x.inputs), None, patches)
        return out
    out, _ = _forward(arch, model.tensors(), _as_batch(arch, x))
    return out


def forward(model, x):
    """Class probabilities for one image ``(H, W, C)`` or a batch ``(N, H, W, C)``."""
    single = np.ndim(x) == 3
    probs = _softmax(logits(model, x))
    return probs[0] if single else probs


def predict(model, x):
    return logits(model, x).argmax(axis=1)


def accuracy(model, data):
    if len(data) == 0:
        return float("nan")
    return float((predict(model, data) == data.labels).mean())


def evaluate(model, data):
    """(accuracy, mean cross-entropy) from a single forward pass."""
    _check_labels(model, data)
    out = logits(model, data)
    logp = _log_softmax(out)
    acc = float((out.argmax(axis=1) == data.labels).mean())
    return acc, float(-logp[np.arange(len(data)), data.labels].mean())


def _check_labels(model, data):
    if len(data) == 0:
        raise PreconditionError("empty batch")
    if data.labels.min() < 0 or data.labels.max() >= model.arch.num_classes:
        raise ShapeError("label out of range for this architecture")


def loss_and_grad(model, batch, dropout_rng=None):
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. the flat params."""
    _check_labels(model, batch)
    t = model.tensors()
    arch = model.arch
    patches = batch.patches(arch) if arch.conv_filters else None
    out, cache = _forward(arch, t, _as_batch(arch, batch.inputs), dropout_rng, patches)
    n = len(batch)
    logp = _log_softmax(out)
    loss = -logp[np.arange(n), batch.labels].mean()
    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    grad = _backward(model.arch, t, cache, delta / n)
    return float(loss), grad


def loss(model, batch):
    _check_labels(model, batch)
    logp = _log_softmax(logits(model, batch))
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def per_sample_sq_grad(model, dataset, chunk=256):
    """Diagonal empirical Fisher: mean over samples of (d log p(y|x) / dw)^2."""
    _check_labels(model, dataset)
    t = model.tensors()
    arch = model.arch
    total = np.zeros(arch.dim)
    n = len(dataset)
    if arch.conv_filters:
        dataset.patches(arch)
    for start in range(0, n, chunk):
        part = dataset.subset(np.arange(start, min(start + chunk, n)))
        patches = part.patches(arch) if arch.conv_filters else None
        out, cache = _forward(arch, t, _as_batch(arch, part.inputs), None, patches)
        delta = _softmax(out)
        delta[np.arange(len(part)), part.labels] -= 1.0
        total += _backward(model.arch, t, cache, delta, squared=True) * len(part)
    return total / n


LossFn = Callable[[Model, LabeledDataset, np.random.Generator], "tuple[float, np.ndarray]"]


def _default_loss(model, batch, rng):
    return loss_and_grad(model, batch, dropout_rng=rng if model.arch.dropout > 0 else None)


def sgd_train(model, data, epochs, batch_size, lr, seed, loss_fn: LossFn | None = None):
    """Plain minibatch SGD; shuffling and dropout masks come from ``seed``."""
    if epochs < 1 or batch_size < 1:
        raise PreconditionError("epochs and batch_size must be >= 1")
    if lr < 0:
        raise PreconditionError("lr must be non-negative")
    if len(data) == 0:
        raise PreconditionError("empty training set")
    loss_fn = loss_fn or _default_loss
    if model.arch.conv_filters:
        data.patches(model.arch)  # batches slice this cache instead of redoing im2col
    rng = np.random.default_rng(seed)
    work = model.copy()
    it = 0
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            batch = data.subset(order[start:start + batch_size])
            value, grad = loss_fn(work, batch, rng)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDivergence(it, value)
            work.params -= lr * grad
            it += 1
    return work
