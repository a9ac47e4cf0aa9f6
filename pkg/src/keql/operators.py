"""Differential-operator bundles, kernel-expansion solution models and the
feature map ``y -> (y, L_1 v(y), ..., L_Q v(y))``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gram import Block, gram_blocks
from .kernels import Kernel, kernel_from_dict

__all__ = [
    "MultiIndex",
    "DiffOperatorSet",
    "KnownPart",
    "DiffFunctional",
    "SolutionModel",
    "apply_functional",
    "feature_map",
    "feature_jacobian",
    "known_part_values",
    "known_part_matrix",
]

MultiIndex = tuple[int, ...]


def _mi(a, dim: int) -> MultiIndex:
    a = tuple(int(v) for v in a)
    if len(a) != dim:
        raise ValueError(f"multi-index {a} has wrong dimension (expected {dim})")
    if any(v < 0 for v in a):
        raise ValueError(f"negative order in multi-index {a}")
    return a


@dataclass(frozen=True)
class DiffOperatorSet:
    """Ordered multi-indices ``(L_1, ..., L_Q)`` with ``L_1`` the identity."""

    ops: tuple[MultiIndex, ...]

    def __post_init__(self):
        if not self.ops:
            raise ValueError("operator set is empty")
        dim = len(self.ops[0])
        ops = tuple(_mi(op, dim) for op in self.ops)
        if any(ops[0]):
            raise ValueError("the first operator must be the identity")
        if len(set(ops)) != len(ops):
            raise ValueError("duplicate operators in operator set")
        object.__setattr__(self, "ops", ops)

    @property
    def dim(self) -> int:
        return len(self.ops[0])

    @property
    def Q(self) -> int:
        return len(self.ops)

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def to_list(self) -> list[list[int]]:
        return [list(op) for op in self.ops]


@dataclass(frozen=True)
class KnownPart:
    """Linear constant-coefficient part ``sum_h c_h D^{a_h}`` of the operator."""

    terms: tuple[tuple[float, MultiIndex], ...] = ()

    def __post_init__(self):
        terms = tuple((float(c), tuple(int(v) for v in a)) for c, a in self.terms)
        if any(not np.isfinite(c) for c, _ in terms):
            raise ValueError("known-part coefficients must be finite")
        object.__setattr__(self, "terms", terms)

    def __bool__(self):
        return bool(self.terms)

    def to_list(self) -> list:
        return [[c, list(a)] for c, a in self.terms]

    @classmethod
    def from_list(cls, data) -> "KnownPart":
        return cls(tuple((c, tuple(a)) for c, a in (data or [])))


@dataclass(frozen=True)
class DiffFunctional:
    """``delta_{y_index} o D^op`` over some collocation grid."""

    index: int
    op: MultiIndex


@dataclass
class SolutionModel:
    """Kernel expansion ``v = sum_j alpha_j k(phi_j, .)``.

    ``basis="full"`` uses the functionals ``delta_{y_k} o L_q`` for every op in
    ``ops`` and every grid point (q-major ordering); ``basis="reduced"`` uses
    plain point evaluations at the grid.
    """

    kernel: Kernel
    grid: np.ndarray
    alpha: np.ndarray
    basis: str = "reduced"
    ops: DiffOperatorSet | None = None
    _blocks: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).reshape(-1, self.kernel.dim)
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        if self.basis not in ("full", "reduced"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.basis == "full" and self.ops is None:
            raise ValueError("full basis requires an operator set")
        if self.alpha.size != self.size:
            raise ValueError(f"coefficient length {self.alpha.size} does not match basis size {self.size}")

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def size(self) -> int:
        n = len(self.grid)
        return n * self.ops.Q if self.basis == "full" else n

    @property
    def blocks(self) -> list[Block]:
        if self._blocks is None:
            if self.basis == "full":
                self._blocks = [(op, self.grid) for op in self.ops]
            else:
                self._blocks = [((0,) * self.dim, self.grid)]
        return self._blocks

    def with_alpha(self, alpha) -> "SolutionModel":
        return SolutionModel(self.kernel, self.grid, alpha, self.basis, self.ops)

    def basis_matrix(self, points, op=None) -> np.ndarray:
        """Rows ``D^op`` of each basis function at ``points``: shape (n_points, size)."""
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        op = (0,) * self.dim if op is None else tuple(op)
        return gram_blocks(self.kernel, self.blocks, [(op, points)]).T

    def evaluate(self, points, op=None) -> np.ndarray:
        """``D^op v`` at ``points``."""
        return self.basis_matrix(points, op) @ self.alpha

    def __call__(self, points) -> np.ndarray:
        return self.evaluate(points)

    def norm_matrix(self) -> np.ndarray:
        """Gram matrix of the basis; ``alpha^T G alpha`` is the RKHS norm squared."""
        return gram_blocks(self.kernel, self.blocks, self.blocks)

    def rkhs_norm2(self) -> float:
        return float(self.alpha @ self.norm_matrix() @ self.alpha)

    def to_dict(self) -> dict:
        out = {
            "basis": self.basis,
            "grid": self.grid.tolist(),
            "kernel": self.kernel.to_dict(),
            "alpha": self.alpha.tolist(),
        }
        if self.ops is not None:
            out["ops"] = self.ops.to_list()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SolutionModel":
        ops = data.get("ops")
        return cls(
            kernel=kernel_from_dict(data["kernel"]),
            grid=np.asarray(data["grid"], dtype=float),
            alpha=np.asarray(data["alpha"], dtype=float),
            basis=data["basis"],
            ops=None if ops is None else DiffOperatorSet(tuple(tuple(o) for o in ops)),
        )


def apply_functional(model: SolutionModel, phi: DiffFunctional, grid) -> float:
    """``(D^op v)(y_index)``."""
    grid = np.asarray(grid, dtype=float).reshape(-1, model.dim)
    return float(model.evaluate(grid[phi.index : phi.index + 1], phi.op)[0])


def feature_map(model: SolutionModel, Y, ops: DiffOperatorSet) -> np.ndarray:
    """Feature points ``(y_k, L_1 v(y_k), ..., L_Q v(y_k))`` as rows."""
    Y = np.asarray(Y, dtype=float).reshape(-1, model.dim)
    cols = [model.evaluate(Y, op) for op in ops]
    return np.column_stack([Y, *cols])


def feature_jacobian(model: SolutionModel, Y, ops: DiffOperatorSet) -> np.ndarray:
    """Constant matrix mapping ``alpha`` to the stacked derivative features.

    Rows are q-major: row ``q * K + k`` holds ``L_q`` of each basis function
    at ``y_k``.
    """
    Y = np.asarray(Y, dtype=float).reshape(-1, model.dim)
    return gram_blocks(model.kernel, model.blocks, [(op, Y) for op in ops]).T


def known_part_matrix(kp: KnownPart, model: SolutionModel, Y) -> np.ndarray:
    """Matrix ``A`` with ``A @ alpha = (Pbar v)(Y)``."""
    Y = np.asarray(Y, dtype=float).reshape(-1, model.dim)
    A = np.zeros((len(Y), model.size))
    for c, op in kp.terms:
        A += c * model.basis_matrix(Y, op)
    return A


def known_part_values(kp: KnownPart, model: SolutionModel, Y) -> np.ndarray:
    """``(Pbar v)(y_k)`` for every grid point."""
    Y = np.asarray(Y, dtype=float).reshape(-1, model.dim)
    out = np.zeros(len(Y))
    for c, op in kp.terms:
        out += c * model.evaluate(Y, op)
    return out
