"""Per-image low-rank decoder adapters.

An adapter is a residual channel-mixing map h -> h + A B^T h acting
independently at every spatial location (a 1x1 convolution of rank at most
M). Zero parameters make it an exact identity, so a decoder with dormant
adapters reproduces the pretrained model bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class AdapterConfig:
    rank: int
    channels: int
    insertion_index: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if self.channels < 1:
            raise ValueError(f"adapter channels must be >= 1, got {self.channels}")


@dataclass
class AdapterParams:
    """The two C x M factor matrices; 2*M*C scalars in total."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.a.shape != self.b.shape or self.a.ndim != 2:
            raise ValueError(f"adapter factors must share a CxM shape, got {self.a.shape} and {self.b.shape}")

    @property
    def channels(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @classmethod
    def zeros(cls, cfg: AdapterConfig) -> "AdapterParams":
        z = np.zeros((cfg.channels, cfg.rank), dtype=np.float32)
        return cls(z, z.copy())


def param_count(cfg: AdapterConfig) -> int:
    """Number of transmitted adapter scalars: 2*M*C."""
    return 2 * cfg.rank * cfg.channels


def init_adapter(cfg: AdapterConfig, seed: int, std: float = 0.02) -> AdapterParams:
    """Draw both factors i.i.d. from a zero-mean Gaussian with the given std."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, std, size=(cfg.channels, cfg.rank))
    b = rng.normal(0.0, std, size=(cfg.channels, cfg.rank))
    return AdapterParams(a, b)


def apply_adapter(h: ad.Tensor, a, b) -> ad.Tensor:
    """h + A B^T h over the channel axis of h, shape (C,H,W) or (1,C,H,W).

    ``a`` and ``b`` may be tape tensors (during adapter training) or plain
    arrays; both factor through the same graph so gradients flow when asked.
    """
    at = a if isinstance(a, ad.Tensor) else ad.Tensor(np.asarray(a))
    bt = b if isinstance(b, ad.Tensor) else ad.Tensor(np.asarray(b))
    if at.shape != bt.shape or len(at.shape) != 2:
        raise ad.ShapeMismatch("apply_adapter", at.shape, bt.shape)
    c = at.shape[0]
    shape = h.shape
    if len(shape) == 3:
        ch = shape[0]
    elif len(shape) == 4 and shape[0] == 1:
        ch = shape[1]
    else:
        raise ad.ShapeMismatch("apply_adapter", h.shape, at.shape)
    if ch != c:
        raise ad.ShapeMismatch("apply_adapter", h.shape, at.shape)

    flat = ad.reshape(h, (c, int(np.prod(shape)) // c))
    mixed = ad.matmul(at, ad.matmul(ad.transpose2d(bt), flat))
    return ad.add(h, ad.reshape(mixed, shape))


def apply_params(h: ad.Tensor, theta: AdapterParams) -> ad.Tensor:
    return apply_adapter(h, theta.a, theta.b)


def flatten_params(theta: AdapterParams) -> np.ndarray:
    """Canonical coding order: all of A row-major, then all of B row-major."""
    return np.concatenate([theta.a.ravel(), theta.b.ravel()])


def unflatten_params(vec: np.ndarray, cfg: AdapterConfig) -> AdapterParams:
    vec = np.asarray(vec)
    n = param_count(cfg)
    if vec.shape != (n,):
        raise ValueError(f"adapter vector must have length {n}, got shape {vec.shape}")
    half = n // 2
    shape = (cfg.channels, cfg.rank)
    return AdapterParams(vec[:half].reshape(shape), vec[half:].reshape(shape))
