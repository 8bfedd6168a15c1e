"""Single-level periodized 2-D discrete wavelet transform.

The value plane ``v`` (H x W, both even) is split into four half-resolution
sub-bands stacked as ``[LL, LH, HL, HH]``. The first letter names the filter
applied along the width axis, the second the filter along the height axis,
so ``LH`` responds to horizontal edges and ``HL`` to vertical ones.

Filters are orthonormal Daubechies filters derived by spectral factorization,
which makes the transform an orthogonal operator: the inverse is the adjoint,
and energy is conserved.

The ``identity`` basis is the lazy (polyphase) split: the four 2x2 pixel
phases of the plane, with no filtering at all. It stands in for the
no-tokenizer setting while keeping the 4-channel layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

BANDS = ("LL", "LH", "HL", "HH")
SUPPORTED_BASES = tuple(f"db{n}" for n in range(1, 9)) + ("identity",)
DEFAULT_BASIS = "db6"


@dataclass(frozen=True)
class SubbandStack:
    channels: np.ndarray  # (4, H/2, W/2)
    basis: str

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != 4:
            raise ShapeError(f"sub-band stack must have shape (4, h, w), got {self.channels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]


@lru_cache(maxsize=None)
def daubechies_lowpass(order: int) -> np.ndarray:
    """Decomposition lowpass filter of dbN, length 2N, summing to sqrt(2).

    Built from the halfband polynomial P(y) = sum_k C(N-1+k, k) y^k with
    y = sin^2(w/2): each root of P yields a reciprocal pair of z-roots and
    the one inside the unit circle is kept (extremal phase).
    """
    if not 1 <= order <= 8:
        raise ConfigError(f"unsupported Daubechies order {order}")
    poly = np.array([1.0 + 0j])
    for _ in range(order):
        poly = np.convolve(poly, [1.0, 1.0])
    if order > 1:
        p = [math.comb(order - 1 + k, k) for k in range(order)]
        for y in np.roots(p[::-1]):
            zr = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
            poly = np.convolve(poly, [1.0, -zr[np.argmin(np.abs(zr))]])
    h = np.real(poly)
    return h * (math.sqrt(2.0) / h.sum())


def filter_bank(basis: str) -> tuple[np.ndarray, np.ndarray]:
    """(lowpass, highpass) analysis pair; highpass is the alternating flip."""
    if basis not in SUPPORTED_BASES or basis == "identity":
        raise ConfigError(f"unsupported wavelet basis {basis!r}; expected one of {SUPPORTED_BASES}")
    h = daubechies_lowpass(int(basis[2:]))
    g = h[::-1] * (-1.0) ** np.arange(len(h))
    return h, g


def _analyze(x: np.ndarray, h: np.ndarray, g: np.ndarray, axis: int):
    # lo[k] = sum_n h[n] x[(2k + n) mod N]
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    idx = (np.arange(0, n, 2)[:, None] + np.arange(len(h))[None, :]) % n
    seg = x[..., idx]
    return np.moveaxis(seg @ h, -1, axis), np.moveaxis(seg @ g, -1, axis)


def _synthesize(lo: np.ndarray, hi: np.ndarray, h: np.ndarray, g: np.ndarray, axis: int):
    lo = np.moveaxis(lo, axis, -1)
    hi = np.moveaxis(hi, axis, -1)
    half = lo.shape[-1]
    n = 2 * half
    out = np.zeros(lo.shape[:-1] + (n,), dtype=np.result_type(lo, hi, h))
    k2 = 2 * np.arange(half)
    for tap in range(len(h)):
        # the map k -> (2k + tap) mod N is injective, so fancy-index += is safe
        out[..., (k2 + tap) % n] += h[tap] * lo + g[tap] * hi
    return np.moveaxis(out, -1, axis)


def _check_plane(v: np.ndarray):
    if v.ndim < 2:
        raise ShapeError(f"value plane must be at least 2-D, got shape {v.shape}")
    hgt, wid = v.shape[-2:]
    if hgt % 2 or wid % 2:
        raise ShapeError(f"value plane dims must be even, got {hgt}x{wid}")


def dwt2(v: np.ndarray, basis: str = DEFAULT_BASIS) -> np.ndarray:
    """Array-level forward transform: (..., H, W) -> (..., 4, H/2, W/2)."""
    v = np.asarray(v, dtype=np.float64)
    _check_plane(v)
    if basis == "identity":
        return np.stack([v[..., 0::2, 0::2], v[..., 0::2, 1::2],
                         v[..., 1::2, 0::2], v[..., 1::2, 1::2]], axis=-3)
    h, g = filter_bank(basis)
    lo_w, hi_w = _analyze(v, h, g, axis=-1)
    ll, lh = _analyze(lo_w, h, g, axis=-2)
    hl, hh = _analyze(hi_w, h, g, axis=-2)
    return np.stack([ll, lh, hl, hh], axis=-3)


def idwt2(z: np.ndarray, basis: str = DEFAULT_BASIS) -> np.ndarray:
    """Array-level inverse transform: (..., 4, h, w) -> (..., 2h, 2w)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 3 or z.shape[-3] != 4:
        raise ShapeError(f"expected 4 sub-band channels, got shape {z.shape}")
    ll, lh, hl, hh = (z[..., i, :, :] for i in range(4))
    if basis == "identity":
        out = np.empty(z.shape[:-3] + (2 * z.shape[-2], 2 * z.shape[-1]))
        out[..., 0::2, 0::2], out[..., 0::2, 1::2] = ll, lh
        out[..., 1::2, 0::2], out[..., 1::2, 1::2] = hl, hh
        return out
    h, g = filter_bank(basis)
    lo_w = _synthesize(ll, lh, h, g, axis=-2)
    hi_w = _synthesize(hl, hh, h, g, axis=-2)
    return _synthesize(lo_w, hi_w, h, g, axis=-1)


def dwt_forward(v: np.ndarray, basis: str = DEFAULT_BASIS) -> SubbandStack:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"value plane must be 2-D, got shape {v.shape}")
    return SubbandStack(dwt2(v, basis), basis)


def idwt_inverse(s: SubbandStack, basis: str | None = None) -> np.ndarray:
    if basis is not None and basis != s.basis:
        raise ConfigError(f"basis mismatch: stack was built with {s.basis!r}, asked to invert with {basis!r}")
    return idwt2(s.channels, s.basis)


def split_stack(s: SubbandStack) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Views of the four sub-bands in [LL, LH, HL, HH] order."""
    return s.channels[0], s.channels[1], s.channels[2], s.channels[3]


def concat_stack(ll, lh, hl, hh, basis: str = DEFAULT_BASIS) -> SubbandStack:
    bands = [np.asarray(b) for b in (ll, lh, hl, hh)]
    if len({b.shape for b in bands}) != 1 or bands[0].ndim != 2:
        raise ShapeError(f"sub-bands must be equal-shape 2-D arrays, got {[b.shape for b in bands]}")
    return SubbandStack(np.stack(bands), basis)


@dataclass(frozen=True)
class SubbandNorm:
    """Fixed per-band affine map (z - mean) / std applied to (..., 4, h, w) stacks."""

    mean: tuple = (0.0, 0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0, 1.0)

    @classmethod
    def fit(cls, stacks: np.ndarray, eps: float = 1e-8) -> "SubbandNorm":
        z = np.asarray(stacks, dtype=np.float64)
        axes = tuple(i for i in range(z.ndim) if i != z.ndim - 3)
        mean = z.mean(axis=axes)
        std = np.maximum(z.std(axis=axes), eps)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def _shape(self, arr):
        return np.asarray(arr).reshape(4, 1, 1)

    def apply(self, z: np.ndarray) -> np.ndarray:
        return (z - self._shape(self.mean)) / self._shape(self.std)

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self._shape(self.std) + self._shape(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SubbandNorm":
        return cls() if not d else cls(tuple(d["mean"]), tuple(d["std"]))
