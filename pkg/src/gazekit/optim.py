"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import MissingGradError
from .tensor import Parameter


class AdamW:
    """AdamW over a fixed parameter list.

    Only trainable parameters are updated; frozen ones are skipped even when
    they carry a gradient. A trainable parameter without a gradient at step
    time is an error (it means the graph never reached it).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise MissingGradError(f"no gradient for trainable parameter {p.name!r}")
            g = p.grad
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[key], self._v[key] = m, v
            else:
                v = self._v[key]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    # -- checkpoint support -------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers and step counter keyed by parameter name."""
        out = {"_opt/t": np.asarray([self.t], dtype=np.float32)}
        for p in self.params:
            key = id(p)
            if key in self._m:
                out[f"_opt/m/{p.name}"] = self._m[key]
                out[f"_opt/v/{p.name}"] = self._v[key]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["_opt/t"][0])
        by_name = {p.name: p for p in self.params}
        for key, arr in tensors.items():
            if key.startswith("_opt/m/"):
                p = by_name[key[len("_opt/m/") :]]
                self._m[id(p)] = arr.astype(p.data.dtype).reshape(p.data.shape)
            elif key.startswith("_opt/v/"):
                p = by_name[key[len("_opt/v/") :]]
                self._v[id(p)] = arr.astype(p.data.dtype).reshape(p.data.shape)
