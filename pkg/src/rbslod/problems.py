"""Parametric benchmark problems with affine form decompositions.

Each problem supplies Q parameter-independent form descriptors together
with the scalar weights theta_q(mu), so that the full bilinear form is
sum_q theta_q(mu) * B_q.  The parameter box covers only the PDE
parameters; right-hand-side parameters live in :class:`RhsSpec` and never
enter the reduced-basis training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import OutOfBox
from .mesh import BCSpec


@dataclass(frozen=True)
class ParametricProblem:
    name: str
    forms: tuple
    theta_fn: object
    parameter_box: tuple
    periodic: tuple
    bc: BCSpec
    translation_invariant: bool
    coercivity_floor: float

    @property
    def q_terms(self):
        return len(self.forms)

    @property
    def n_params(self):
        return len(self.parameter_box)

    def reduce_mu(self, mu):
        """Wrap periodic components into their principal interval."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float)).copy()
        if mu.shape != (self.n_params,):
            raise OutOfBox(
                f"{self.name} expects {self.n_params} parameters, got shape {mu.shape}")
        for i, ((lo, hi), per) in enumerate(zip(self.parameter_box, self.periodic)):
            if per:
                mu[i] = lo + (mu[i] - lo) % (hi - lo)
        return mu

    def check_box(self, mu):
        mu = self.reduce_mu(mu)
        for i, ((lo, hi), per) in enumerate(zip(self.parameter_box, self.periodic)):
            inside = lo <= mu[i] < hi if per else lo <= mu[i] <= hi
            if not (np.isfinite(mu[i]) and inside):
                raise OutOfBox(
                    f"parameter {i} = {mu[i]} outside "
                    f"{'[{}, {})'.format(lo, hi) if per else '[{}, {}]'.format(lo, hi)}")
        return mu

    def theta(self, mu):
        mu = self.check_box(mu)
        th = np.asarray(self.theta_fn(mu), dtype=float)
        if th.shape != (self.q_terms,) or not np.all(np.isfinite(th)):
            raise OutOfBox(f"theta evaluation failed at mu={mu}")
        return th


def evaluate_theta(problem, mu):
    """Affine weights theta_q(mu) after box validation."""
    return problem.theta(mu)


def _oscillation(k):
    """s_k(x) = (2 + sin(2^k pi x1) sin(2^k pi x2)) / 4, values in [1/4, 3/4]."""
    freq = (2.0 ** k) * np.pi

    def s(pts):
        return (2.0 + np.sin(freq * pts[:, 0]) * np.sin(freq * pts[:, 1])) / 4.0

    return s


def diffusion_surrogate_terms():
    """The four parameter-independent tensors of the model diffusion problem.

    a_mu(x) = diag(1 + 0.5 s2, 1) + theta2 diag(s4, 0) + theta3 diag(0, s6)
              + theta4 * 0.25 s2 s6 I,
    anisotropic with oscillation scales 2^-2, 2^-4, 2^-6.  The pointwise
    smallest eigenvalue stays >= 0.375 for all parameters, so the field is
    uniformly elliptic without any clipping.
    """
    s2, s4, s6 = _oscillation(2), _oscillation(4), _oscillation(6)

    def a1(pts):
        out = np.zeros((pts.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 + 0.5 * s2(pts)
        out[:, 1, 1] = 1.0
        return out

    def a2(pts):
        out = np.zeros((pts.shape[0], 2, 2))
        out[:, 0, 0] = s4(pts)
        return out

    def a3(pts):
        out = np.zeros((pts.shape[0], 2, 2))
        out[:, 1, 1] = s6(pts)
        return out

    def a4(pts):
        out = np.zeros((pts.shape[0], 2, 2))
        v = 0.25 * s2(pts) * s6(pts)
        out[:, 0, 0] = v
        out[:, 1, 1] = v
        return out

    return a1, a2, a3, a4


def model_diffusion_theta(mu):
    m = float(mu[0])
    return np.array([1.0, math.sin(m), math.sin(2.0 * m) ** 2, m / 5.0])


def model_diffusion_problem():
    """Pure diffusion with a multiscale anisotropic tensor, Dirichlet boundary.

    Four affine terms on the one-dimensional parameter interval [0, 5]; at
    mu = 0 only the baseline tensor is active.
    """
    a1, a2, a3, a4 = diffusion_surrogate_terms()
    return ParametricProblem(
        name="model_diffusion",
        forms=(fem.diffusion(a1, "baseline"),
               fem.diffusion(a2, "xx_scale_2^-4"),
               fem.diffusion(a3, "yy_scale_2^-6"),
               fem.diffusion(a4, "iso_mixed")),
        theta_fn=model_diffusion_theta,
        parameter_box=((0.0, 5.0),),
        periodic=(False,),
        bc=BCSpec.all_dirichlet(),
        translation_invariant=False,
        coercivity_floor=0.3,
    )


def diffusion_surrogate_tensor(mu):
    """Full tensor field a_mu for a fixed parameter (affine-reconstruction oracle)."""
    terms = diffusion_surrogate_terms()
    th = model_diffusion_theta(np.atleast_1d(mu))

    def a(pts):
        return sum(t * term(pts) for t, term in zip(th, terms))

    return a


def mass_transfer_theta(mu):
    return np.array([float(mu[0]), -math.cos(float(mu[1])), -math.sin(float(mu[1])), 1.0])


def mass_transfer_problem():
    """Reaction-convection-diffusion with parametric diffusion magnitude and wind direction.

    Strong form -mu1 lap(u) - b . grad(u) + u = f with unit reaction,
    b = (cos mu2, sin mu2), homogeneous Neumann boundary.  Constant-in-space
    coefficients, so patch data may be shared by translation.  The three
    source parameters (mu3, mu4, mu5) only enter the right-hand side.
    """
    return ParametricProblem(
        name="mass_transfer",
        forms=(fem.diffusion(np.eye(2), "laplace"),
               fem.convection(np.array([1.0, 0.0]), "wind_x"),
               fem.convection(np.array([0.0, 1.0]), "wind_y"),
               fem.reaction(1.0, "reaction")),
        theta_fn=mass_transfer_theta,
        parameter_box=((0.01, 0.1), (0.0, 2.0 * math.pi)),
        periodic=(False, True),
        bc=BCSpec.all_neumann(),
        translation_invariant=True,
        coercivity_floor=0.01,
    )


PROBLEMS = {
    "model_diffusion": model_diffusion_problem,
    "mass_transfer": mass_transfer_problem,
}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


@dataclass(frozen=True)
class RhsSpec:
    """Right-hand side selector: constant, sinusoidal, or Gaussian bump."""

    kind: str
    params: tuple = ()

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "constant":
            return np.full(pts.shape[0], self.params[0])
        if self.kind == "sinusoidal":
            return np.sin(pts[:, 0]) * np.sin(pts[:, 1])
        if self.kind == "gaussian":
            m3, m4, m5 = self.params
            d2 = (pts[:, 0] - m3) ** 2 + (pts[:, 1] - m4) ** 2
            return np.exp(-d2 / m5 ** 2)
        raise ValueError(f"unknown rhs kind {self.kind!r}")

    def describe(self):
        if self.params:
            return self.kind + ":" + ",".join(f"{p:g}" for p in self.params)
        return self.kind


def constant_rhs(value=1.0):
    return RhsSpec("constant", (float(value),))


def sinusoidal_rhs():
    return RhsSpec("sinusoidal")


def gaussian_rhs(m3, m4, m5):
    if not (0.25 <= m3 <= 0.75 and 0.25 <= m4 <= 0.75):
        raise OutOfBox(f"gaussian center ({m3}, {m4}) outside [0.25, 0.75]^2")
    if not (0.1 <= m5 <= 0.25):
        raise OutOfBox(f"gaussian width {m5} outside [0.1, 0.25]")
    return RhsSpec("gaussian", (float(m3), float(m4), float(m5)))


def sample_training_set(problem, layout):
    """Deterministic training parameters: ('equidistant', L) or ('grid', L_per_axis).

    Closed intervals include both endpoints; periodic components exclude
    the upper endpoint.  Points are returned row-major over the axes.
    """
    kind, L = layout
    L = int(L)
    if L < 2:
        raise ValueError(f"training layout needs at least 2 points per axis, got {L}")
    axes = []
    for (lo, hi), per in zip(problem.parameter_box, problem.periodic):
        axes.append(np.linspace(lo, hi, L, endpoint=not per))
    if kind == "equidistant":
        if problem.n_params != 1:
            raise ValueError("equidistant layout applies to one-dimensional parameter sets")
        return axes[0][:, None]
    if kind == "grid":
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])
    raise ValueError(f"unknown training layout {kind!r}")
