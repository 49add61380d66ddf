"""Pseudospectral convection term B(u, v) = P(u . grad v) and its adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .spectral import (
    LatticeMismatch,
    SpectralField,
    WaveLattice,
    from_physical,
    hermitize,
    inner_product,
    norm_fractional,
    onb_basis,
    project,
    to_coords,
    to_physical,
)


@dataclass(frozen=True)
class DealiasRule:
    """Which modes enter (and leave) the quadratic product.

    ``cutoff`` is the largest retained ``|k_i|``.  For the two-thirds rule it is
    chosen so that ``3 * cutoff < n``, which makes every product of two band
    limited fields alias-free inside the band.
    """

    kind: str
    cutoff: int

    @classmethod
    def two_thirds(cls, n: int) -> "DealiasRule":
        return cls("two-thirds", (n - 1) // 3)

    @classmethod
    def none(cls, n: int) -> "DealiasRule":
        return cls("none", n // 2 - 1)

    def keep(self, lattice: WaveLattice) -> np.ndarray:
        return _keep(lattice, self.cutoff)


@lru_cache(maxsize=64)
def _keep(lattice: WaveLattice, cutoff: int) -> np.ndarray:
    band = (np.abs(lattice.k1) <= cutoff) & (lattice.k2 <= cutoff)
    keep = band & lattice.mask
    keep.flags.writeable = False
    return keep


def default_rule(lattice: WaveLattice, rule: DealiasRule | None = None) -> DealiasRule:
    return DealiasRule.two_thirds(lattice.n) if rule is None else rule


def _grad(coeffs: np.ndarray, lattice: WaveLattice) -> np.ndarray:
    """Physical-space gradient, result[..., i, j] = d v_j / d x_i."""
    spec = 1j * lattice.kappa[:, None] * coeffs[..., None, :, :, :]
    return to_physical(spec, lattice)


def convection(u: np.ndarray, v: np.ndarray, lattice: WaveLattice,
               rule: DealiasRule) -> np.ndarray:
    """Raw-array B(u, v) with leading batch axes allowed."""
    keep = rule.keep(lattice)
    up = to_physical(u * keep, lattice)
    dv = _grad(v * keep, lattice)
    prod = np.einsum("...ixy,...ijxy->...jxy", up, dv)
    return hermitize(project(from_physical(prod, lattice), lattice) * keep, lattice)


def convection_self(u: np.ndarray, lattice: WaveLattice, rule: DealiasRule) -> np.ndarray:
    """Raw-array B(u, u)."""
    return convection(u, u, lattice, rule)


def convection_adjoint(z: np.ndarray, w: np.ndarray, lattice: WaveLattice,
                       rule: DealiasRule) -> np.ndarray:
    """Transpose of v -> B(z, v) + B(v, z) in H, evaluated at w.

    Built from the same grid operations as :func:`convection`, so it is the
    exact transpose of the discrete map for either dealiasing rule.
    """
    keep = rule.keep(lattice)
    zt, wt = z * keep, w * keep
    zp = to_physical(zt, lattice)
    wp = to_physical(wt, lattice)
    # v -> B(z, v): transpose is -P div(z (x) w), divergence taken spectrally
    flux = from_physical(zp[..., :, None, :, :] * wp[..., None, :, :, :], lattice)
    first = -np.sum(1j * lattice.kappa[:, None] * flux, axis=-4)
    # v -> B(v, z): transpose is P((grad z) w)
    dz = _grad(zt, lattice)
    second = from_physical(np.einsum("...ijxy,...jxy->...ixy", dz, wp), lattice)
    return hermitize(project(first + second, lattice) * keep, lattice)


def bilinear_B(u: SpectralField, v: SpectralField, rule: DealiasRule | None = None) -> SpectralField:
    """B(u, v) = P(u . grad v), dealiased per ``rule`` (two-thirds by default)."""
    if u.lattice != v.lattice:
        raise LatticeMismatch("fields live on different lattices")
    lat = u.lattice
    return SpectralField(lat, convection(u.coeffs, v.coeffs, lat, default_rule(lat, rule)))


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField,
                rule: DealiasRule | None = None) -> float:
    """b(u, v, w) = <B(u, v), w>_H."""
    if not (u.lattice == v.lattice == w.lattice):
        raise LatticeMismatch("fields live on different lattices")
    return inner_product(bilinear_B(u, v, rule), w)


class GalerkinTensor:
    """B written in a real orthonormal basis: B(u, v)_k = sum_ij T[k, i, j] u_i v_j.

    The entries are obtained by evaluating :func:`convection` on basis pairs,
    so the tensor reproduces the pseudospectral operator exactly (up to
    rounding).  Only sensible for small lattices since it stores dim^3 reals.
    """

    def __init__(self, lattice: WaveLattice, rule: DealiasRule | None = None):
        self.lattice = lattice
        self.rule = default_rule(lattice, rule)
        self.basis = onb_basis(lattice)
        d = self.basis.shape[0]
        self.dim = d
        t = np.empty((d, d, d))
        for i in range(d):
            out = convection(self.basis[i], self.basis, lattice, self.rule)
            t[:, i, :] = to_coords(out, self.basis, lattice).T
        self.tensor = t
        self._sym = t + t.transpose(0, 2, 1)

    def apply(self, u: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
        v = u if v is None else v
        return (self.tensor @ v) @ u

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """Matrix of v -> B(z, v) + B(v, z)."""
        return self._sym @ z

    def adjoint(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        return w @ self.jacobian(z)


@dataclass(frozen=True)
class BoundRatio:
    ratio: float | None
    numerator: float
    denominator: float
    degenerate: bool


def check_fractional_bound(u: SpectralField, v: SpectralField, alpha: float,
                           s: float = 2.0, rule: DealiasRule | None = None) -> BoundRatio:
    """Empirical constant in |B(u,v)|_{D(A^{a/2})} <= c |u|_X |v|_{D(A^{(a+1)/2})}.

    X is D(A^{s/2}) with s in (1, 2] when alpha <= 1, and D(A^{alpha/2})
    when alpha > 1.  A zero denominator is flagged instead of divided.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha <= 1 and not 1 < s <= 2:
        raise ValueError("s must lie in (1, 2] when alpha <= 1")
    upow = s / 2 if alpha <= 1 else alpha / 2
    num = norm_fractional(bilinear_B(u, v, rule), alpha / 2)
    den = norm_fractional(u, upow) * norm_fractional(v, (alpha + 1) / 2)
    if den == 0.0:
        return BoundRatio(None, num, den, True)
    return BoundRatio(num / den, num, den, False)
