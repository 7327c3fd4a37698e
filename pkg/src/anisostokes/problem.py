"""Shared context for the truncated two-phase Stokes solves.

Bundles mesh, spaces, tensor, and outer boundary handling, and caches the
assembled forms, norm Grams, and the KKT factorization that the potential
and transmission pipelines reuse (one back-substitution per extra solve).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (
    LoadFunctional,
    VolumeForms,
    outer_boundary_moments,
    pressure_mass,
    velocity_h1_gram,
)
from .mesh import Mesh, MeshSpec, build_interface_mesh
from .spaces import FunctionSpaces, build_spaces
from .tensor import CoeffTensor, make_isotropic

TRACTION_FREE = "traction-free"
DIRICHLET = "dirichlet"


@dataclass
class StokesProblem:
    """Mesh + spaces + tensor + outer BC, with cached discrete operators."""

    mesh: Mesh
    spaces: FunctionSpaces
    tensor: CoeffTensor
    outer_bc: str = TRACTION_FREE
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.outer_bc not in (TRACTION_FREE, DIRICHLET):
            raise ValueError(f"unknown outer BC {self.outer_bc!r}")

    @classmethod
    def default(cls, level=1, tensor=None, outer_bc=TRACTION_FREE, spec=None, bubbles=True):
        spec = spec or MeshSpec(level=level)
        mesh = build_interface_mesh(spec)
        spaces = build_spaces(mesh, velocity_bubbles=bubbles)
        tensor = tensor or make_isotropic(1.0, 1.0, 1.0, dim=spec.dim)
        return cls(mesh=mesh, spaces=spaces, tensor=tensor, outer_bc=outer_bc)

    # --- cached operators ---------------------------------------------------
    def forms(self) -> VolumeForms:
        if "forms" not in self._cache:
            self._cache["forms"] = VolumeForms(self.spaces, self.tensor)
        return self._cache["forms"]

    def adjoint_problem(self) -> "StokesProblem":
        """Same discretization for the adjoint tensor (transposed a-blocks)."""
        if "adjoint" not in self._cache:
            adj = StokesProblem(
                mesh=self.mesh,
                spaces=self.spaces,
                tensor=self.forms().adjoint().tensor,
                outer_bc=self.outer_bc,
            )
            adj._cache["forms"] = self.forms().adjoint()
            # norm Grams are tensor independent
            for key in ("X", "Xp", "Xm", "Q", "C", "dirichlet_dofs"):
                if key in self._cache:
                    adj._cache[key] = self._cache[key]
            self._cache["adjoint"] = adj
        return self._cache["adjoint"]

    def velocity_gram(self, side: int | None = None) -> sp.csr_matrix:
        key = {None: "X", 1: "Xp", -1: "Xm"}[side]
        if key not in self._cache:
            self._cache[key] = velocity_h1_gram(self.spaces, side)
        return self._cache[key]

    def pressure_gram(self) -> sp.csr_matrix:
        if "Q" not in self._cache:
            self._cache["Q"] = pressure_mass(self.spaces)
        return self._cache["Q"]

    def outer_constraints(self) -> sp.csr_matrix:
        if "C" not in self._cache:
            self._cache["C"] = outer_boundary_moments(self.spaces)
        return self._cache["C"]

    def dirichlet_dofs(self) -> np.ndarray:
        if "dirichlet_dofs" not in self._cache:
            verts = self.spaces.outer_vertices
            dofs = (verts[:, None] * self.spaces.dim + np.arange(self.spaces.dim)).ravel()
            self._cache["dirichlet_dofs"] = np.sort(dofs)
        return self._cache["dirichlet_dofs"]

    def saddle_system(self, F=None, G=None):
        from .saddle import SaddleSystem

        spaces = self.spaces
        F = np.zeros(spaces.n_velocity) if F is None else np.asarray(F, float)
        G = np.zeros(spaces.n_pressure) if G is None else np.asarray(G, float)
        if self.outer_bc == TRACTION_FREE:
            return SaddleSystem(
                spaces=spaces,
                A=self.forms().a(),
                B=self.forms().b(),
                F=F,
                G=G,
                bc_mode=TRACTION_FREE,
                constraints=self.outer_constraints(),
                pressure_gram=self.pressure_gram(),
                velocity_gram=self.velocity_gram(),
            )
        dofs = self.dirichlet_dofs()
        return SaddleSystem(
            spaces=spaces,
            A=self.forms().a(),
            B=self.forms().b(),
            F=F,
            G=G,
            bc_mode=DIRICHLET,
            dirichlet_dofs=dofs,
            pressure_gram=self.pressure_gram(),
            velocity_gram=self.velocity_gram(),
        )

    def solver(self):
        """Cached factorization of the constrained KKT matrix."""
        if "kkt" not in self._cache:
            from .saddle import KKTSolver

            self._cache["kkt"] = KKTSolver(self.saddle_system())
        return self._cache["kkt"]

    def outer_traction_load(self, multipliers) -> LoadFunctional:
        """The constant outer traction induced by the constraint multipliers.

        Enters f~ on the minus side so the conormal derivative of truncated
        solutions stays extension independent.
        """
        C = self.outer_constraints()
        m = np.zeros(self.spaces.n_velocity)
        if multipliers is not None and len(multipliers):
            m = C.T @ np.asarray(multipliers, float)
        return LoadFunctional(self.spaces, m, tag="outer-traction", side=-1)
