"""The truncated system written in a real orthonormal basis of its phase space.

In these coordinates A and Q are diagonal, H inner products are dot
products, and the quadratic term is either a dense Galerkin tensor (small
lattices) or the pseudospectral product evaluated through the basis.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .nonlinear import DealiasRule, GalerkinTensor, convection, convection_adjoint, default_rule
from .spectral import WaveLattice, from_coords, onb_basis, to_coords

TENSOR_MAX_DIM = 128


@lru_cache(maxsize=16)
def _tensor(lattice: WaveLattice, rule: DealiasRule) -> GalerkinTensor:
    return GalerkinTensor(lattice, rule)


@lru_cache(maxsize=16)
def _basis(lattice: WaveLattice) -> np.ndarray:
    b = onb_basis(lattice)
    b.flags.writeable = False
    return b


class ModalSystem:
    """Coordinates z in R^dim with u = sum_i z_i e_i.

    ``backend`` is "tensor", "fft" or "auto" (tensor when dim <= TENSOR_MAX_DIM).
    All methods accept leading batch axes.
    """

    def __init__(self, lattice: WaveLattice, rule: DealiasRule | None = None, backend: str = "auto"):
        if backend not in ("auto", "tensor", "fft"):
            raise ValueError(f"unknown backend {backend!r}")
        self.lattice = lattice
        self.rule = default_rule(lattice, rule)
        if backend == "auto":
            backend = "tensor" if lattice.dim <= TENSOR_MAX_DIM else "fft"
        self.backend = backend
        self.tensor = _tensor(lattice, self.rule) if backend == "tensor" else None
        self.basis = _basis(lattice)
        self.dim = self.basis.shape[0]
        if self.tensor is not None:
            d = self.dim
            # flat[j, k * d + i] = T[k, i, j]
            self._flat = self.tensor.tensor.transpose(2, 0, 1).reshape(d, d * d)
        self.eigenvalues = self.diagonal(lattice.eigenvalues)

    def diagonal(self, multipliers: np.ndarray) -> np.ndarray:
        """Coordinates of a per-mode multiplier (which is diagonal in this basis)."""
        return to_coords(multipliers * self.basis, self.basis, self.lattice).diagonal().copy()

    def coords(self, coeffs: np.ndarray) -> np.ndarray:
        return to_coords(coeffs, self.basis, self.lattice)

    def array(self, z: np.ndarray) -> np.ndarray:
        return from_coords(z, self.basis)

    def b(self, z: np.ndarray) -> np.ndarray:
        """Coordinates of B(u, u)."""
        if self.tensor is None:
            u = self.array(z)
            return self.coords(convection(u, u, self.lattice, self.rule))
        if z.ndim == 1:
            return self.tensor.apply(z)
        d = self.dim
        m = (z @ self._flat).reshape(z.shape[:-1] + (d, d))
        return np.einsum("...ki,...i->...k", m, z)

    def b_adjoint(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Transpose of v -> B(z, v) + B(v, z), applied to w."""
        if self.tensor is None:
            return self.coords(convection_adjoint(self.array(z), self.array(w), self.lattice, self.rule))
        return self.tensor.adjoint(z, w)
