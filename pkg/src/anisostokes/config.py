"""Flat key-value run configuration with dotted sections.

The format is line oriented: `section.key = value`, `#` comments, blank
lines ignored.  Unknown keys are rejected with their line number; flag
overrides beat file values.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .mesh import MeshSpec
from .problem import StokesProblem
from .tensor import (
    CoeffTensor,
    make_diagonal_anisotropic,
    make_isotropic,
    make_two_phase_isotropic,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; every field has a documented default."""

    mesh_shape: str = "cube"  # mesh.shape
    mesh_radius: float = 4.0  # mesh.radius
    mesh_level: int = 1  # mesh.level
    mesh_dim: int = 3  # mesh.dim
    tensor_kind: str = "isotropic-constant"  # tensor.kind
    tensor_mu: float = 1.0  # tensor.mu
    tensor_mu_plus: float = 2.0  # tensor.mu_plus
    tensor_mu_minus: float = 1.0  # tensor.mu_minus
    tensor_weights: tuple = (1.0, 1.0, 1.0)  # tensor.weights (comma separated)
    outer_bc: str = "traction-free"  # outer_bc
    solver_backend: str = "direct"  # solver.backend: direct | uzawa
    solver_tol: float = 1e-10  # solver.tol
    solver_max_iter: int = 500  # solver.max_iter
    convection_lambda: float = 1.0  # convection.lambda
    picard_tol: float = 1e-8  # picard.tol
    picard_max_iter: int = 25  # picard.max_iter
    seed: int = 0  # seed
    threads: int = 1  # threads
    out_dir: str = "out"  # out

    def mesh_spec(self) -> MeshSpec:
        return MeshSpec(
            shape=self.mesh_shape,
            radius=self.mesh_radius,
            level=self.mesh_level,
            dim=self.mesh_dim,
        )

    def build_tensor(self) -> CoeffTensor:
        dim = self.mesh_dim
        if self.tensor_kind == "isotropic-constant":
            mu = self.tensor_mu
            return make_isotropic(mu, mu, mu, dim=dim)
        if self.tensor_kind == "isotropic-two-phase":
            if self.mesh_shape == "cube":
                inside = lambda x: bool((x > 0.0).all() and (x < 1.0).all())
            else:
                inside = lambda x: bool((x @ x) <= 1.0)
            return make_two_phase_isotropic(
                self.tensor_mu_plus, self.tensor_mu_minus, inside, dim=dim
            )
        if self.tensor_kind == "diagonal-anisotropic":
            w = self.tensor_weights[:dim]
            if len(w) != dim:
                raise ConfigError("tensor.weights needs one entry per dimension")
            return make_diagonal_anisotropic(w, dim=dim)
        raise ConfigError(f"unknown tensor.kind {self.tensor_kind!r}")

    def build_problem(self) -> StokesProblem:
        from .spaces import build_spaces
        from .mesh import build_interface_mesh

        mesh = build_interface_mesh(self.mesh_spec())
        return StokesProblem(
            mesh=mesh,
            spaces=build_spaces(mesh),
            tensor=self.build_tensor(),
            outer_bc=self.outer_bc,
        )


_KEYMAP = {
    "mesh.shape": ("mesh_shape", str),
    "mesh.radius": ("mesh_radius", float),
    "mesh.level": ("mesh_level", int),
    "mesh.dim": ("mesh_dim", int),
    "tensor.kind": ("tensor_kind", str),
    "tensor.mu": ("tensor_mu", float),
    "tensor.mu_plus": ("tensor_mu_plus", float),
    "tensor.mu_minus": ("tensor_mu_minus", float),
    "tensor.weights": ("tensor_weights", lambda s: tuple(float(v) for v in s.split(","))),
    "outer_bc": ("outer_bc", str),
    "solver.backend": ("solver_backend", str),
    "solver.tol": ("solver_tol", float),
    "solver.max_iter": ("solver_max_iter", int),
    "convection.lambda": ("convection_lambda", float),
    "picard.tol": ("picard_tol", float),
    "picard.max_iter": ("picard_max_iter", int),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "out": ("out_dir", str),
}

_CHOICES = {
    "mesh_shape": ("cube", "ball"),
    "tensor_kind": ("isotropic-constant", "isotropic-two-phase", "diagonal-anisotropic"),
    "outer_bc": ("traction-free", "dirichlet"),
    "solver_backend": ("direct", "uzawa"),
}


def parse_config(path=None, text=None, overrides=None) -> RunConfig:
    """Read a config file (or text), validate, and apply flag overrides.

    Raises ConfigError naming the offending key and line for unknown keys,
    bad values, and out-of-range choices.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text()
    if text is not None:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _KEYMAP:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            attr, conv = _KEYMAP[key]
            try:
                values[attr] = conv(val)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    cfg = RunConfig(**values)
    if overrides:
        clean = {k: v for k, v in overrides.items() if v is not None}
        bad = set(clean) - {f.name for f in fields(RunConfig)}
        if bad:
            raise ConfigError(f"unknown override(s): {sorted(bad)}")
        cfg = replace(cfg, **clean)
    for attr, choices in _CHOICES.items():
        if getattr(cfg, attr) not in choices:
            raise ConfigError(f"{attr.replace('_', '.')}: must be one of {choices}")
    if cfg.solver_tol <= 0 or cfg.picard_tol <= 0:
        raise ConfigError("tolerances must be positive")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg
