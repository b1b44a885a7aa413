"""Small parameterized layers shared by the affordance and world models."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Dense:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = Tensor(glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3):
        fan_in, fan_out = k * k * c_in, k * k * c_out
        self.k = Tensor(glorot(rng, (k, k, c_in, c_out), fan_in, fan_out), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.add(ad.conv2d(x, self.k), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.k": self.k, f"{prefix}.b": self.b}


class GRUCell:
    """Gated recurrent cell updating the deterministic latent."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int):
        self.update = Dense(rng, n_in + n_hidden, n_hidden)
        self.reset = Dense(rng, n_in + n_hidden, n_hidden)
        self.cand = Dense(rng, n_in + n_hidden, n_hidden)

    def __call__(self, x, h) -> Tensor:
        xh = ad.concat([x, h], axis=-1)
        z = ad.sigmoid(self.update(xh))
        r = ad.sigmoid(self.reset(xh))
        cand = ad.tanh(self.cand(ad.concat([x, ad.mul(r, h)], axis=-1)))
        keep = ad.mul(ad.sub(1.0, z), h)
        return ad.add(keep, ad.mul(z, cand))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.update.params(f"{prefix}.update"),
                **self.reset.params(f"{prefix}.reset"),
                **self.cand.params(f"{prefix}.cand")}


def avg_pool2(x) -> Tensor:
    """2x2 average pooling via reshape + mean; H and W must be even."""
    b, h, w, c = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    x = ad.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    return ad.mean(x, axis=(2, 4))


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling via reshape + concat."""
    b, h, w, c = x.data.shape if isinstance(x, Tensor) else np.shape(x)
    x = ad.reshape(x, (b, h, 1, w, 1, c))
    x = ad.concat([x, x], axis=2)
    x = ad.concat([x, x], axis=4)
    return ad.reshape(x, (b, 2 * h, 2 * w, c))


def merge_params(*dicts: dict[str, Tensor]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out
