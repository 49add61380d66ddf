"""Divergence-free Fourier fields on the periodic square [0, L]^2.

Fields are stored on the half spectrum produced by ``numpy.fft.rfft2``:
an array of shape ``(2, n, n//2 + 1)`` holding the Fourier coefficients
``u_k`` of both velocity components, normalised so that

    u(x) = sum_k u_k exp(2 pi i k.x / L),     |u|_H^2 = L^2 sum_k |u_k|^2.

Wavenumbers with ``k2 = 0`` appear twice in the half spectrum (``k1`` and
``-k1``); those columns carry the conjugate symmetry explicitly.  The mean
mode and the Nyquist rows/columns are never retained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class LatticeMismatch(ValueError):
    """Raised when two fields live on different lattices."""


@dataclass(frozen=True, eq=False)
class WaveLattice:
    """Truncated wavenumber set of the torus with Stokes eigenvalues.

    ``modes`` optionally restricts the retained set to an explicit list of
    wavenumbers (a Galerkin subsystem); conjugates are added automatically.
    """

    n: int
    l: float
    modes: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise ValueError(f"n must be an even integer >= 4, got {self.n!r}")
        if not self.l > 0:
            raise ValueError(f"side length must be positive, got {self.l!r}")
        if self.modes is not None:
            canon = tuple(sorted({_canonical(k) for k in self.modes}))
            for k1, k2 in canon:
                if (k1, k2) == (0, 0):
                    raise ValueError("the mean mode cannot be retained")
                if max(abs(k1), abs(k2)) >= self.n // 2:
                    raise ValueError(f"mode {(k1, k2)} does not fit on an n={self.n} grid")
            object.__setattr__(self, "modes", canon)

    def __eq__(self, other):
        if not isinstance(other, WaveLattice):
            return NotImplemented
        return (self.n, self.l, self.modes) == (other.n, other.l, other.modes)

    def __hash__(self):
        return hash((self.n, self.l, self.modes))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.n, self.n // 2 + 1)

    @cached_property
    def k1(self) -> np.ndarray:
        return np.rint(np.fft.fftfreq(self.n, 1.0 / self.n)).astype(int)[:, None] * np.ones(
            (1, self.n // 2 + 1), dtype=int)

    @cached_property
    def k2(self) -> np.ndarray:
        return np.arange(self.n // 2 + 1)[None, :] * np.ones((self.n, 1), dtype=int)

    @cached_property
    def kappa(self) -> np.ndarray:
        """Physical wavevectors 2 pi k / L, shape (2, n, n//2+1)."""
        return (2 * np.pi / self.l) * np.stack([self.k1, self.k2]).astype(float)

    @cached_property
    def mask(self) -> np.ndarray:
        half = self.n // 2
        base = (np.abs(self.k1) < half) & (self.k2 < half) & ((self.k1 != 0) | (self.k2 != 0))
        if self.modes is None:
            return base
        sel = np.zeros_like(base)
        for k1, k2 in self.modes:
            sel[k1 % self.n, k2] = True
            if k2 == 0:
                sel[(-k1) % self.n, 0] = True
        return sel & base

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """lambda_k = (2 pi / L)^2 |k|^2 on retained modes, 0 elsewhere."""
        return np.where(self.mask, np.sum(self.kappa ** 2, axis=0), 0.0)

    @cached_property
    def safe_eigenvalues(self) -> np.ndarray:
        """Eigenvalues with 1 in place of discarded modes, for division and powers."""
        return np.where(self.mask, self.eigenvalues, 1.0)

    @cached_property
    def weights(self) -> np.ndarray:
        """Half-spectrum multiplicities scaled so sum(w |u_k|^2) = |u|_H^2."""
        w = np.where(self.k2 == 0, 1.0, 2.0)
        return np.where(self.mask, w * self.l ** 2, 0.0)

    @cached_property
    def lambda1(self) -> float:
        return float(self.eigenvalues[self.mask].min())

    @cached_property
    def perp(self) -> np.ndarray:
        """Unit vectors k_perp / |k| spanning the divergence-free direction of each mode."""
        kap = self.kappa
        norm = np.sqrt(np.where(self.mask, np.sum(kap ** 2, axis=0), 1.0))
        return np.where(self.mask, np.stack([-kap[1], kap[0]]) / norm, 0.0)

    @cached_property
    def mirror(self) -> np.ndarray:
        """Row index of -k1 for the k2 = 0 column."""
        return (-np.arange(self.n)) % self.n

    @cached_property
    def independent(self) -> np.ndarray:
        """Retained half-spectrum entries that are not conjugates of another entry."""
        ind = self.mask.copy()
        ind[:, 0] &= self.k1[:, 0] > 0
        return ind

    @property
    def dim(self) -> int:
        """Real dimension of the divergence-free subspace spanned by the lattice."""
        return 2 * int(self.independent.sum())

    def wavenumbers(self) -> list[tuple[int, int]]:
        """Retained wavenumbers of the full spectrum, conjugates included."""
        out = []
        for i, j in zip(*np.nonzero(self.mask)):
            k = (int(self.k1[i, j]), int(self.k2[i, j]))
            out.append(k)
            if j > 0:
                out.append((-k[0], -k[1]))
        return sorted(out)

    def eigenvalue(self, k: Sequence[int]) -> float:
        return (2 * np.pi / self.l) ** 2 * float(k[0] ** 2 + k[1] ** 2)

    def index(self, k: Sequence[int]) -> tuple[int, int, bool]:
        """Half-spectrum location of wavenumber k and whether it is stored conjugated."""
        k1, k2 = int(k[0]), int(k[1])
        conj = k2 < 0 or (k2 == 0 and k1 < 0)
        if conj:
            k1, k2 = -k1, -k2
        return k1 % self.n, k2, conj

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.n) * self.l / self.n
        return np.meshgrid(x, x, indexing="ij")


def _canonical(k) -> tuple[int, int]:
    k1, k2 = int(k[0]), int(k[1])
    if k2 < 0 or (k2 == 0 and k1 < 0):
        k1, k2 = -k1, -k2
    return k1, k2


def make_lattice(n: int = 32, l: float = 2 * np.pi,
                 modes: Iterable[Sequence[int]] | None = None) -> WaveLattice:
    """Build the truncated lattice with n points per axis on a torus of side l."""
    return WaveLattice(n, float(l), None if modes is None else tuple(tuple(m) for m in modes))


# -- raw coefficient helpers (arrays with arbitrary leading batch axes) -------

def hermitize(coeffs: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    """Copy conj(u_k) into u_{-k} on the k2 = 0 column and zero discarded modes."""
    out = np.where(lattice.mask, coeffs, 0.0)
    col = out[..., 0]
    pos = lattice.k1[:, 0] > 0
    neg = lattice.mirror[pos]
    col[..., neg] = np.conj(col[..., pos])
    return out


def project(coeffs: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    """Per-mode Leray projection (I - k k^T / |k|^2) on a raw coefficient array."""
    kap = lattice.kappa
    ksq = np.where(lattice.mask, np.sum(kap ** 2, axis=0), 1.0)
    div = (kap[0] * coeffs[..., 0, :, :] + kap[1] * coeffs[..., 1, :, :]) / ksq
    out = coeffs - kap * div[..., None, :, :]
    return np.where(lattice.mask, out, 0.0)


def to_physical(coeffs: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    n = lattice.n
    return np.fft.irfft2(coeffs * (n * n), s=(n, n), axes=(-2, -1))


def from_physical(values: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    n = lattice.n
    return np.fft.rfft2(values, axes=(-2, -1)) / (n * n)


def h_inner(a: np.ndarray, b: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    """H inner product over the last three axes."""
    return np.sum(lattice.weights * np.real(a * np.conj(b)), axis=(-3, -2, -1))


def h_norm_sq(a: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    return np.sum(lattice.weights * (a.real ** 2 + a.imag ** 2), axis=(-3, -2, -1))


# -- fields -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralField:
    """Zero-mean divergence-free real velocity field on a WaveLattice."""

    lattice: WaveLattice
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != self.lattice.shape:
            raise ValueError(f"coefficient shape {c.shape} != lattice shape {self.lattice.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, lattice: WaveLattice) -> "SpectralField":
        return cls(lattice, np.zeros(lattice.shape, dtype=complex))

    @classmethod
    def from_physical(cls, lattice: WaveLattice, values: np.ndarray) -> "SpectralField":
        """Project a real (2, n, n) grid field onto the lattice and onto H."""
        c = from_physical(np.asarray(values, dtype=float), lattice)
        return cls(lattice, hermitize(project(c, lattice), lattice))

    @classmethod
    def mode(cls, lattice: WaveLattice, k: Sequence[int], amplitude: complex = 1.0) -> "SpectralField":
        """Single divergence-free Fourier mode with unit H norm times ``amplitude``.

        The real field is ``amplitude`` applied to the cosine/sine pair of k:
        amplitude 1 gives sqrt(2)/L * k_perp/|k| * cos(2 pi k.x / L).
        """
        i, j, conj = lattice.index(k)
        if not lattice.mask[i, j]:
            raise ValueError(f"mode {tuple(k)} is not retained by the lattice")
        a = complex(amplitude)
        if conj:
            a = a.conjugate()
        c = np.zeros(lattice.shape, dtype=complex)
        c[:, i, j] = lattice.perp[:, i, j] * a / (np.sqrt(2.0) * lattice.l)
        return cls(lattice, hermitize(c, lattice))

    def physical(self) -> np.ndarray:
        return to_physical(self.coeffs, self.lattice)

    def norm(self) -> float:
        return float(np.sqrt(h_norm_sq(self.coeffs, self.lattice)))

    def _check(self, other: "SpectralField"):
        if other.lattice != self.lattice:
            raise LatticeMismatch("fields live on different lattices")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.lattice, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.lattice, -self.coeffs)

    def allclose(self, other: "SpectralField", atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.sqrt(h_norm_sq(self.coeffs - other.coeffs, self.lattice)) <= atol)


def leray_project(raw: np.ndarray | SpectralField, lattice: WaveLattice | None = None) -> SpectralField:
    """Leray-Helmholtz projection of a raw Fourier vector field onto H.

    ``raw`` is a coefficient array of shape ``lattice.shape``.  Energy in the
    mean mode is rejected since H contains only zero-mean fields.
    """
    if isinstance(raw, SpectralField):
        lattice, raw = raw.lattice, raw.coeffs
    if lattice is None:
        raise TypeError("a lattice is required for raw coefficient arrays")
    raw = np.asarray(raw, dtype=complex)
    if raw.shape != lattice.shape:
        raise ValueError(f"coefficient shape {raw.shape} != lattice shape {lattice.shape}")
    if np.any(np.abs(raw[:, 0, 0]) > 0):
        raise ValueError("input carries energy in the zero (mean) mode")
    return SpectralField(lattice, project(raw, lattice))


def stokes_apply(u: SpectralField, power: float = 1.0) -> SpectralField:
    """Apply A^power, i.e. u_k -> lambda_k^power u_k."""
    lat = u.lattice
    scale = np.where(lat.mask, lat.safe_eigenvalues ** float(power), 0.0)
    return SpectralField(lat, u.coeffs * scale)


def norm_fractional(u: SpectralField, theta: float) -> float:
    """|A^theta u|_H, the norm of D(A^theta)."""
    lat = u.lattice
    scale = np.where(lat.mask, lat.safe_eigenvalues ** (2.0 * theta), 0.0)
    return float(np.sqrt(np.sum(lat.weights * scale * np.abs(u.coeffs) ** 2)))


def inner_product(u: SpectralField, v: SpectralField) -> float:
    if u.lattice != v.lattice:
        raise LatticeMismatch("fields live on different lattices")
    return float(h_inner(u.coeffs, v.coeffs, u.lattice))


def random_coeffs(lattice: WaveLattice, rng: np.random.Generator, size: tuple[int, ...] = (),
                  slope: float = 1.0, kmax: int | None = None) -> np.ndarray:
    """Random divergence-free coefficients with amplitude ~ lambda_k^(-slope/2).

    Returned with unit H norm per sample.
    """
    shape = size + lattice.shape[1:]
    a = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    a = a * np.where(lattice.mask, lattice.safe_eigenvalues ** (-slope / 2), 0.0)
    if kmax is not None:
        a = a * ((np.abs(lattice.k1) <= kmax) & (lattice.k2 <= kmax))
    c = hermitize(lattice.perp * a[..., None, :, :], lattice)
    nrm = np.sqrt(h_norm_sq(c, lattice))
    return c / np.reshape(nrm, nrm.shape + (1, 1, 1))


def random_field(lattice: WaveLattice, rng: np.random.Generator, slope: float = 1.0,
                 kmax: int | None = None) -> SpectralField:
    """Random unit-H-norm field; ``slope`` sets the spectral decay."""
    return SpectralField(lattice, random_coeffs(lattice, rng, slope=slope, kmax=kmax))


def onb_basis(lattice: WaveLattice) -> np.ndarray:
    """Real orthonormal basis of the lattice's divergence-free subspace.

    Shape ``(dim, 2, n, n//2+1)``: for each independent wavenumber the cosine
    and sine modes of unit H norm, in row-major half-spectrum order.
    """
    rows, cols = np.nonzero(lattice.independent)
    out = np.zeros((2 * rows.size,) + lattice.shape, dtype=complex)
    scale = 1.0 / (np.sqrt(2.0) * lattice.l)
    for n_, (i, j) in enumerate(zip(rows, cols)):
        out[2 * n_, :, i, j] = lattice.perp[:, i, j] * scale
        out[2 * n_ + 1, :, i, j] = lattice.perp[:, i, j] * 1j * scale
    return hermitize(out, lattice)


def to_coords(coeffs: np.ndarray, basis: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    """Coordinates <u, e_i>_H in an orthonormal basis; leading batch axes allowed."""
    w = lattice.weights
    return np.real(np.tensordot(coeffs * w, np.conj(basis), axes=([-3, -2, -1], [1, 2, 3])))


def from_coords(c: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.tensordot(c, basis, axes=([-1], [0]))
