"""Fourier-Galerkin representation of divergence-free fields on the torus.

The domain is ``[0, 2*pi)^2``.  A velocity field is stored as complex Fourier
coefficients ``c[j, i1, i2]`` (component ``j``, wavenumber index in numpy FFT
order) normalised so that

    u(xi) = sum_k c(k) exp(i k.xi) / (2 pi)

which makes the coefficient sum of squares equal to the physical L2 norm.
Only the retained modes survive in a field: the two-thirds mask
``max(|k1|, |k2|) <= N/3`` minus the mean mode.

All array-level kernels accept arbitrary leading batch dimensions, i.e.
arrays of shape ``(..., 2, N, N)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

__all__ = [
    "NormKind",
    "SpaceMismatchError",
    "SpectralField",
    "SpectralSpace",
    "apply_semigroup",
    "leray_project",
    "nonlinear_B",
    "norm",
    "random_fields",
    "solve_poisson",
    "trilinear_b",
]

TWO_PI = 2.0 * np.pi


class SpaceMismatchError(ValueError):
    """Raised when fields from different spaces (or of the wrong shape) meet."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NSE_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class SpectralSpace:
    """Grid geometry, eigenvalues of ``-Delta`` and the dealiasing mask.

    Parameters
    ----------
    n : int
        Modes per axis (even, positive).

    Notes
    -----
    Instances are immutable and may be shared between threads.  Products of
    retained fields are evaluated on a physical grid of size ``product_n``,
    which equals ``n`` unless ``n`` is a multiple of three (then the grid is
    padded just enough to keep triple products alias-free).
    """

    def __init__(self, n: int):
        n = int(n)
        if n <= 0 or n % 2:
            raise ValueError(f"modes per axis must be a positive even integer, got {n}")
        self.n = n
        k = np.fft.fftfreq(n, 1.0 / n).astype(np.int64)
        k[n // 2] = n // 2  # -N/2 < k <= N/2
        k1, k2 = np.meshgrid(k, k, indexing="ij")
        self.k1 = _readonly(k1)
        self.k2 = _readonly(k2)
        self.eigenvalues = _readonly((k1 * k1 + k2 * k2).astype(float))
        self.cutoff = n // 3
        self.dealias_mask = _readonly((np.abs(k1) <= n / 3) & (np.abs(k2) <= n / 3))
        self.retained = _readonly(self.dealias_mask & (self.eigenvalues > 0))
        inv = np.zeros_like(self.eigenvalues)
        inv[self.retained] = 1.0 / self.eigenvalues[self.retained]
        self.inv_eigenvalues = _readonly(inv)
        # Leray projector entries, zero outside the retained set
        r = self.retained
        self._p11 = _readonly(np.where(r, 1.0 - k1 * k1 * inv, 0.0))
        self._p12 = _readonly(np.where(r, -k1 * k2 * inv, 0.0))
        self._p22 = _readonly(np.where(r, 1.0 - k2 * k2 * inv, 0.0))

        m = n
        if 3 * self.cutoff >= m:
            m = 3 * self.cutoff + 1
            m += m % 2
        self.product_n = m

        # index maps between the n-layout and the product grid's rfft layout
        ii, jj = np.nonzero(self.retained)
        kk1, kk2 = k1[ii, jj], k2[ii, jj]
        pos = kk2 >= 0
        self._ret_i, self._ret_j = ii, jj
        self._half_i, self._half_j = ii[pos], jj[pos]
        self._half_src = ((kk1[pos] % m), kk2[pos])

        # representative half of the retained modes (one of each +-k pair)
        rep = (kk2 > 0) | ((kk2 == 0) & (kk1 > 0))
        self.pair_index = (ii[rep], jj[rep])
        self.pair_neg_index = ((-kk1[rep]) % n, (-kk2[rep]) % n)
        self.n_pairs = int(rep.sum())

    def __repr__(self) -> str:
        return f"SpectralSpace(n={self.n})"

    def __eq__(self, other) -> bool:
        return isinstance(other, SpectralSpace) and other.n == self.n

    def __hash__(self) -> int:
        return hash(("SpectralSpace", self.n))

    def __reduce__(self):
        return (SpectralSpace, (self.n,))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.n, self.n)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[self.retained].min())

    @property
    def dimension(self) -> int:
        """Real dimension of the Galerkin space of divergence-free fields."""
        return 2 * self.n_pairs

    def check(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        if c.shape[-3:] != self.shape:
            raise SpaceMismatchError(f"expected trailing shape {self.shape}, got {c.shape}")
        return c

    # -- structural maps -------------------------------------------------

    def reflect(self, c: np.ndarray) -> np.ndarray:
        """Return the array evaluated at ``-k``."""
        return np.roll(np.flip(c, axis=(-2, -1)), 1, axis=(-2, -1))

    def symmetrize(self, c: np.ndarray) -> np.ndarray:
        """Enforce ``c(-k) = conj(c(k))`` exactly and zero the discarded modes."""
        out = 0.5 * (c + np.conj(self.reflect(c)))
        return np.where(self.retained, out, 0.0)

    def project(self, c: np.ndarray) -> np.ndarray:
        """Leray projection ``c - k (k.c)/|k|^2`` restricted to retained modes."""
        c0, c1 = c[..., 0, :, :], c[..., 1, :, :]
        out = np.empty(np.broadcast_shapes(c.shape, self.shape), dtype=complex)
        np.multiply(self._p11, c0, out=out[..., 0, :, :])
        out[..., 0, :, :] += self._p12 * c1
        np.multiply(self._p12, c0, out=out[..., 1, :, :])
        out[..., 1, :, :] += self._p22 * c1
        return out

    def divergence(self, c: np.ndarray) -> np.ndarray:
        return self.k1 * c[..., 0, :, :] + self.k2 * c[..., 1, :, :]

    def gradient(self, c: np.ndarray) -> np.ndarray:
        """Spectral gradient, shape ``(..., 2[d/dxi_i], C, N, N)``."""
        ik1 = (1j * self.k1)[..., None, :, :]
        ik2 = (1j * self.k2)[..., None, :, :]
        return np.stack([ik1 * c, ik2 * c], axis=-4)

    # -- transforms ------------------------------------------------------

    def to_physical(self, c: np.ndarray, m: int | None = None) -> np.ndarray:
        """Real physical values on an ``m x m`` grid (retained modes only)."""
        m = self.n if m is None else int(m)
        lead = c.shape[:-2]
        if m == self.n:
            # fields vanish off the retained set, so the half plane is a view
            half = c[..., : m // 2 + 1]
        else:
            half = np.zeros(lead + (m, m // 2 + 1), dtype=complex)
            if m != self.product_n:
                raise ValueError(f"unsupported physical grid size {m}")
            si, sj = self._half_src
            half[..., si, sj] = c[..., self._half_i, self._half_j]
        return sfft.irfft2(half, s=(m, m), workers=_workers()) * (m * m / TWO_PI)

    def from_physical(self, u: np.ndarray) -> np.ndarray:
        """Coefficients of a real physical field, truncated to retained modes.

        The grid size is read from ``u``; it may be ``n`` or larger.
        """
        m = u.shape[-1]
        r = sfft.rfft2(u, workers=_workers()) * (TWO_PI / (m * m))
        out = np.zeros(u.shape[:-2] + (self.n, self.n), dtype=complex)
        (pi, pj, si, sj), (ni, nj, ti, tj) = self._gather(m)
        vals = r[..., si, sj]
        out[..., pi, pj] = vals
        out[..., ni, nj] = np.conj(vals)
        return out

    def _sobolev_weights(self, s: float) -> np.ndarray:
        cache = self._gather_cache
        key = ("sobolev", s)
        if key not in cache:
            w = np.zeros_like(self.eigenvalues)
            w[self.retained] = self.eigenvalues[self.retained] ** s
            cache[key] = _readonly(w)
        return cache[key]

    @cached_property
    def _gather_cache(self) -> dict:
        return {}

    def _gather(self, m: int):
        # each +-k pair is read once from the rfft half plane, so the
        # result is Hermitian by construction
        if m not in self._gather_cache:
            pi, pj = self.pair_index
            ni, nj = self.pair_neg_index
            kk1, kk2 = self.k1[pi, pj], self.k2[pi, pj]
            self._gather_cache[m] = ((pi, pj, kk1 % m, kk2), (ni, nj, None, None))
        return self._gather_cache[m]

    # -- operators ---------------------------------------------------------

    def advection(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unprojected ``(u.grad) v`` truncated to retained modes."""
        m = self.product_n
        up = self.to_physical(u, m)
        gv = self.to_physical(self.gradient(v), m)
        prod = np.einsum("...iyz,...ijyz->...jyz", up, gv)
        return self.from_physical(prod)

    def nonlinear(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``B(u, v) = P_H (u.grad) v`` with two-thirds dealiasing."""
        return self.project(self.advection(u, v))

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Real L2 inner product over both components (batched)."""
        return np.real(np.sum(a * np.conj(b), axis=(-3, -2, -1)))

    def sobolev_sq(self, c: np.ndarray, s: float) -> np.ndarray:
        w = self._sobolev_weights(float(s))
        return np.sum(w * (np.abs(c[..., 0, :, :]) ** 2 + np.abs(c[..., 1, :, :]) ** 2), axis=(-2, -1))

    def lebesgue(self, c: np.ndarray, p: float) -> np.ndarray:
        if p < 1:
            raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
        u = self.to_physical(c)
        mag = np.sqrt(u[..., 0, :, :] ** 2 + u[..., 1, :, :] ** 2)
        da = (TWO_PI / self.n) ** 2
        return (da * np.sum(mag**p, axis=(-2, -1))) ** (1.0 / p)

    def semigroup(self, c: np.ndarray, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.eigenvalues * t) * c

    def trilinear(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Physical-space quadrature of ``sum_ij u_i d_i v_j w_j``."""
        m = self.product_n
        up = self.to_physical(u, m)
        gv = self.to_physical(self.gradient(v), m)
        wp = self.to_physical(w, m)
        integrand = np.einsum("...iyz,...ijyz,...jyz->...yz", up, gv, wp)
        return (TWO_PI / m) ** 2 * integrand.sum(axis=(-2, -1))

    # -- field constructors ------------------------------------------------

    def zeros(self) -> "SpectralField":
        return SpectralField._wrap(self, np.zeros(self.shape, dtype=complex))

    def mode(self, k: tuple[int, int], vector=None, amplitude: complex = 1.0) -> "SpectralField":
        """Single real Fourier mode pair ``+-k`` with unit L2 norm (times amplitude).

        ``vector`` defaults to the divergence-free direction ``k_perp/|k|``.
        The result is Leray-projected.
        """
        k1, k2 = int(k[0]), int(k[1])
        if vector is None:
            vector = np.array([-k2, k1], dtype=float) / np.hypot(k1, k2)
        vector = np.asarray(vector, dtype=complex)
        c = np.zeros(self.shape, dtype=complex)
        i, j = k1 % self.n, k2 % self.n
        c[:, i, j] += amplitude * vector / np.sqrt(2.0)
        ni, nj = (-k1) % self.n, (-k2) % self.n
        c[:, ni, nj] += np.conj(amplitude * vector) / np.sqrt(2.0)
        return leray_project(c, self)

    def from_function(self, fn) -> "SpectralField":
        """Project a physical vector field ``fn(xi1, xi2) -> (u1, u2)``."""
        xi = np.arange(self.n) * (TWO_PI / self.n)
        x1, x2 = np.meshgrid(xi, xi, indexing="ij")
        u = np.stack([np.broadcast_to(np.asarray(a, float), x1.shape) for a in fn(x1, x2)])
        return SpectralField._wrap(self, self.project(self.from_physical(u)))

    def taylor_green(self) -> "SpectralField":
        return self.from_function(lambda a, b: (np.sin(a) * np.cos(b), -np.cos(a) * np.sin(b)))

    def shear(self) -> "SpectralField":
        return self.from_function(lambda a, b: (np.sin(b), 0.0 * a))


def random_fields(
    space: SpectralSpace,
    rng: np.random.Generator,
    n: int | None = None,
    decay: float = 2.0,
    norm: float | None = 1.0,
) -> np.ndarray:
    """Random divergence-free coefficient arrays with ``|k|^-decay`` amplitudes.

    Returns shape ``(n, 2, N, N)`` (or ``(2, N, N)`` when ``n`` is None), each
    field rescaled to L2 norm ``norm`` unless ``norm`` is None.
    """
    count = 1 if n is None else int(n)
    z = rng.standard_normal((count, 2, space.n, space.n)) + 1j * rng.standard_normal(
        (count, 2, space.n, space.n)
    )
    amp = np.zeros_like(space.eigenvalues)
    amp[space.retained] = space.eigenvalues[space.retained] ** (-decay / 2.0)
    c = space.project(space.symmetrize(z * amp))
    if norm is not None:
        c *= (norm / np.sqrt(space.sobolev_sq(c, 0.0)))[:, None, None, None]
    return c[0] if n is None else c


class SpectralField:
    """Divergence-free, zero-mean, real velocity field (value semantics).

    Construction validates the invariants; use :func:`leray_project` to turn
    an arbitrary spectral vector field into a ``SpectralField``.
    """

    __slots__ = ("space", "coeffs")

    def __init__(self, space: SpectralSpace, coeffs, *, atol: float = 1e-12):
        c = np.array(space.check(coeffs), dtype=complex)
        if c.ndim != 3:
            raise SpaceMismatchError("a SpectralField holds exactly one field")
        c = space.symmetrize(c)
        h1 = np.sqrt(space.sobolev_sq(c, 1.0))
        div = np.abs(space.divergence(c)).max()
        if div > atol * max(h1, 1.0):
            raise ValueError(f"field is not divergence-free (max |k.c| = {div:.3e})")
        self.space = space
        self.coeffs = _readonly(c)

    @classmethod
    def _wrap(cls, space: SpectralSpace, c: np.ndarray) -> "SpectralField":
        obj = object.__new__(cls)
        obj.space = space
        c = np.array(c, dtype=complex)
        obj.coeffs = _readonly(c)
        return obj

    def _same(self, other: "SpectralField") -> None:
        if not isinstance(other, SpectralField) or other.space != self.space:
            raise SpaceMismatchError("fields live in different spaces")

    def __add__(self, other):
        self._same(other)
        return SpectralField._wrap(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._same(other)
        return SpectralField._wrap(self.space, self.coeffs - other.coeffs)

    def __neg__(self):
        return SpectralField._wrap(self.space, -self.coeffs)

    def __mul__(self, a):
        if not np.isscalar(a) or np.iscomplexobj(a):
            return NotImplemented
        return SpectralField._wrap(self.space, a * self.coeffs)

    __rmul__ = __mul__

    def __truediv__(self, a):
        return self * (1.0 / a)

    def __repr__(self) -> str:
        return f"SpectralField(n={self.space.n}, |u|={self.norm():.6g})"

    def inner(self, other: "SpectralField") -> float:
        self._same(other)
        return float(self.space.inner(self.coeffs, other.coeffs))

    def norm(self, kind: "NormKind | None" = None) -> float:
        return norm(self, kind or NormKind.sobolev(0.0))

    def to_physical(self) -> np.ndarray:
        return self.space.to_physical(self.coeffs)

    def coefficient(self, k: tuple[int, int]) -> np.ndarray:
        return self.coeffs[:, k[0] % self.space.n, k[1] % self.space.n].copy()

    def allclose(self, other: "SpectralField", atol: float = 1e-12) -> bool:
        self._same(other)
        return bool(np.sqrt(self.space.sobolev_sq(self.coeffs - other.coeffs, 0.0)) <= atol)


@dataclass(frozen=True)
class NormKind:
    """``sobolev(s)`` gives ``||u||_s``; ``lebesgue(p)`` gives ``|u|_{L^p}``."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("sobolev", "lebesgue"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "lebesgue" and self.value < 1:
            raise ValueError(f"Lebesgue exponent must be >= 1, got {self.value}")

    @classmethod
    def sobolev(cls, s: float) -> "NormKind":
        return cls("sobolev", float(s))

    @classmethod
    def lebesgue(cls, p: float) -> "NormKind":
        return cls("lebesgue", float(p))


def _fields(*fields: SpectralField) -> SpectralSpace:
    space = fields[0].space
    for f in fields:
        if not isinstance(f, SpectralField):
            raise TypeError(f"expected SpectralField, got {type(f).__name__}")
        if f.space != space:
            raise SpaceMismatchError("fields live in different spaces")
    return space


def leray_project(raw, space: SpectralSpace | None = None) -> SpectralField:
    """Project a spectral vector field onto divergence-free fields.

    ``raw`` is either a ``SpectralField`` or a complex ``(2, N, N)`` array in
    numpy FFT order (then ``space`` is required).  Non-retained modes are
    dropped and Hermitian symmetry is enforced before projecting.
    """
    if isinstance(raw, SpectralField):
        if space is not None and space != raw.space:
            raise SpaceMismatchError("field and target space disagree")
        space, c = raw.space, raw.coeffs
    else:
        if space is None:
            raise SpaceMismatchError("a raw coefficient array needs an explicit space")
        c = np.asarray(raw, dtype=complex)
        space.check(c)
        if c.ndim != 3:
            raise SpaceMismatchError("expected a single (2, N, N) field")
    return SpectralField._wrap(space, space.project(space.symmetrize(c)))


def apply_semigroup(u: SpectralField, t: float) -> SpectralField:
    """``exp(tA) u``: every mode decays by ``exp(-|k|^2 t)``."""
    return SpectralField._wrap(u.space, u.space.semigroup(u.coeffs, t))


def nonlinear_B(u: SpectralField, v: SpectralField | None = None) -> SpectralField:
    """``B(u, v) = P_H((u.grad) v)``; ``B(u)`` when ``v`` is omitted."""
    v = u if v is None else v
    space = _fields(u, v)
    return SpectralField._wrap(space, space.nonlinear(u.coeffs, v.coeffs))


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    space = _fields(u, v, w)
    return float(space.trilinear(u.coeffs, v.coeffs, w.coeffs))


def norm(u: SpectralField, kind: NormKind) -> float:
    if kind.kind == "sobolev":
        return float(np.sqrt(u.space.sobolev_sq(u.coeffs, kind.value)))
    return float(u.space.lebesgue(u.coeffs, kind.value))


def solve_poisson(forcing: SpectralField) -> SpectralField:
    """Solve ``(-A) u = forcing`` modewise."""
    return SpectralField._wrap(forcing.space, forcing.space.inv_eigenvalues * forcing.coeffs)
