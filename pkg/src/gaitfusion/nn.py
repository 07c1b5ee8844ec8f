"""Neural network building blocks on top of :mod:`gaitfusion.tensor`.

Parameters live in a small :class:`Module` tree with stable dotted names, the
same key space the checkpoint format uses.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    """Container that tracks parameters, buffers and sub-modules in
    assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: Tensor) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        """Parameters and buffers in one deterministic walk; the flag marks buffers."""
        for name, p in self._params.items():
            yield prefix + name, p, False
        for name, b in self._buffers.items():
            yield prefix + name, b, True
        for name, m in self._modules.items():
            yield from m.named_tensors(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for _, t, _ in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t, _ in self.named_tensors())

    def load_state_dict(self, state: dict) -> None:
        own = OrderedDict((name, t) for name, t, _ in self.named_tensors())
        unknown = [k for k in state if k not in own]
        if unknown:
            raise KeyError(f"unknown tensor name(s): {', '.join(unknown)}")
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"missing tensor name(s): {', '.join(missing)}")
        for name, t in own.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ShapeError(f"tensor {name!r}: expected shape {t.shape}, got {value.shape}")
        for name, t in own.items():
            t.data = np.array(state[name], dtype=t.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self, modules: dict | None = None):
        super().__init__()
        for k, m in (modules or {}).items():
            self[k] = m

    def __setitem__(self, key: str, module: Module) -> None:
        self._modules[key] = module

    def __getitem__(self, key: str) -> Module:
        return self._modules[key]

    def __contains__(self, key) -> bool:
        return key in self._modules

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, bias=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding, bias=self.bias)


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise ``x`` over the batch axis and every axis after the feature
    axes, where the feature axes are ``1 .. gamma.ndim``.

    In ``train`` mode the running statistics are updated in place as
    ``momentum * old + (1 - momentum) * batch``.
    """
    nfeat = gamma.ndim
    if tuple(x.shape[1 : 1 + nfeat]) != tuple(gamma.shape):
        raise ShapeError(f"batch norm expects feature shape {gamma.shape}, got input {x.shape}")
    axes = (0,) + tuple(range(1 + nfeat, x.ndim))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        y, mu, var = T.batch_norm(x, gamma, beta, axes, eps, training=True)
        running_mean.data = (momentum * running_mean.data + (1 - momentum) * mu.reshape(gamma.shape)).astype(
            running_mean.dtype
        )
        running_var.data = (momentum * running_var.data + (1 - momentum) * var.reshape(gamma.shape)).astype(
            running_var.dtype
        )
        return y
    if mode != "eval":
        raise ValueError(f"unknown batch norm mode {mode!r}")
    y, _, _ = T.batch_norm(
        x, gamma, beta, axes, eps, running_mean=running_mean.data, running_var=running_var.data, training=False
    )
    return y


class BatchNorm(Module):
    def __init__(self, shape, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(shape))
        self.bias = Parameter(np.zeros(shape))
        self.register_buffer("running_mean", Tensor(np.zeros(shape, dtype=np.float32)))
        self.register_buffer("running_var", Tensor(np.ones(shape, dtype=np.float32)))

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return batchnorm_forward(
            x, self.weight, self.bias, self.running_mean, self.running_var, mode, self.momentum, self.eps
        )


class ConvBNReLU(Module):
    """3x3 conv, batch norm and ReLU; the stem (Conv0) of every stream."""

    def __init__(self, c_in, c_out, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, stride, rng=rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class SqueezeExcitation(Module):
    """Channel gate ``g = W_expand relu(W_reduce GAP(f))`` applied as ``f * g``.

    The output keeps the input shape, so it can serve as a per-position
    attention logit map.
    """

    def __init__(self, channels: int, reduction: int = 16, rng=None):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.reduction = reduction
        hidden = max(1, channels // reduction)
        self.reduce = Parameter(kaiming_normal(rng, (hidden, channels), channels))
        self.expand = Parameter(kaiming_normal(rng, (channels, hidden), hidden))

    @property
    def hidden(self) -> int:
        return self.reduce.shape[0]

    def gate(self, f: Tensor) -> Tensor:
        pooled = T.mean(f, (2, 3))
        hidden = T.relu(T.matmul(pooled, T.transpose(self.reduce)))
        return T.matmul(hidden, T.transpose(self.expand))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.expand.shape[0]:
            raise ShapeError(f"SE expects [B, {self.expand.shape[0]}, H, W], got {f.shape}")
        g = self.gate(f)
        return f * T.reshape(g, g.shape + (1, 1))


def se_excitation(f: Tensor, params: SqueezeExcitation) -> Tensor:
    return params(f)


class ResidualBlock(Module):
    """Basic residual block: ``relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))``.

    ``shortcut=None`` adds a 1x1 projection exactly when stride or width
    changes; ``shortcut=False`` forbids it and raises if one is required.
    """

    def __init__(self, c_in, c_out, stride=1, shortcut: bool | None = None, rng=None):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        needs_projection = stride != 1 or c_in != c_out
        if shortcut is False and needs_projection:
            raise ValueError(
                f"block {c_in}->{c_out} with stride {stride} needs a projection shortcut"
            )
        self.stride = stride
        self.conv1 = Conv2d(c_in, c_out, 3, stride, rng=rng)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, 1, rng=rng)
        self.bn2 = BatchNorm(c_out)
        if needs_projection or shortcut:
            self.proj = Conv2d(c_in, c_out, 1, stride, padding=0, rng=rng)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(y + skip)


def residual_block(x: Tensor, params: ResidualBlock, stride: int | None = None) -> Tensor:
    if stride is not None and stride != params.stride:
        raise ValueError(f"block was built with stride {params.stride}, not {stride}")
    return params(x)


class Stage(Module):
    def __init__(self, c_in, c_out, stride, blocks=1, rng=None):
        super().__init__()
        self.blocks = ModuleList(
            ResidualBlock(c_in if i == 0 else c_out, c_out, stride if i == 0 else 1, rng=rng)
            for i in range(blocks)
        )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class SeparateFC(Module):
    """Part-wise linear maps: part ``p`` of [B, P, C] goes through its own D x C matrix."""

    def __init__(self, parts: int, c_in: int, c_out: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_normal(rng, (parts, c_out, c_in), c_in))

    def forward(self, x: Tensor) -> Tensor:
        P = self.weight.shape[0]
        if x.ndim != 3 or x.shape[1] != P:
            raise ShapeError(f"expected [B, {P}, C], got {x.shape}")
        per_part = T.transpose(x, (1, 0, 2))
        out = T.matmul(per_part, T.transpose(self.weight, (0, 2, 1)))
        return T.transpose(out, (1, 0, 2))


def separate_fc(parts: Tensor, params: SeparateFC) -> Tensor:
    return params(parts)


class BNNeck(Module):
    """Per-part batch norm followed by a bias-free per-part classifier.

    Returns the features *before* the batch norm (for the triplet loss) and
    the classifier logits computed *after* it (for cross-entropy).
    """

    def __init__(self, parts: int, dim: int, num_classes: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bn = BatchNorm((parts, dim))
        self.classifier = Parameter(kaiming_normal(rng, (parts, num_classes, dim), dim))

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        normed = self.bn(feats)
        per_part = T.transpose(normed, (1, 0, 2))
        logits = T.matmul(per_part, T.transpose(self.classifier, (0, 2, 1)))
        return feats, T.transpose(logits, (1, 0, 2))


def bnneck(parts: Tensor, params: BNNeck) -> tuple[Tensor, Tensor]:
    return params(parts)
