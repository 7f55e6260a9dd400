"""Module tree: parameter registry, naming, freezing, and the basic layers."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within 2 std."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x.astype(np.float32)


class Module:
    """Minimal module container: child modules and parameters by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def assign_names(self, prefix: str = "") -> None:
        """Write the registry path into every parameter's name field."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True):
        for mod in self.modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, groups=1, bias=True):
        super().__init__()
        self.stride = stride
        self.groups = groups
        self.weight = Parameter(trunc_normal(rng, (cout, cin // groups, k, k)))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


class Linear(Module):
    def __init__(self, fin, fout, rng, zero_init=False):
        super().__init__()
        w = np.zeros((fout, fin), np.float32) if zero_init else trunc_normal(rng, (fout, fin))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout, np.float32))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class ChannelLinear(Module):
    """Linear map over the channel axis, applied at every spatial position."""

    def __init__(self, cin, cout, rng, zero_init=False):
        super().__init__()
        w = np.zeros((cout, cin), np.float32) if zero_init else trunc_normal(rng, (cout, cin))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, np.float32))

    def forward(self, x):
        return ops.channel_linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, channels_first=False):
        super().__init__()
        self.axis = 1 if channels_first else -1
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.axis)


class BatchNorm(Module):
    """Batch normalization with persisted running statistics.

    The running buffers are registered as non-trainable ``stat`` parameters:
    they ride along in checkpoints and parameter counts but are updated by the
    forward pass (training mode), never by the optimizer.
    """

    def __init__(self, dim, momentum=0.1):
        super().__init__()
        self.momentum = momentum
        self.gamma = Parameter(np.ones(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))
        self.running_mean = Parameter(np.zeros(dim, np.float32), stat=True)
        self.running_var = Parameter(np.ones(dim, np.float32), stat=True)

    def forward(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum,
        )


class GRN(Module):
    def __init__(self, dim):
        super().__init__()
        self.gamma = Parameter(np.zeros(dim, np.float32))
        self.beta = Parameter(np.zeros(dim, np.float32))

    def forward(self, x):
        return ops.grn(x, self.gamma, self.beta)


def to_dtype(module: Module, dtype) -> Module:
    """Convert every parameter in place (verification helper: float64 oracles)."""
    for p in module.parameters():
        p.data = p.data.astype(dtype)
    return module
