"""Q1 finite elements on rectangular grids.

Assembly of the parameter-independent bilinear forms (diffusion,
convection, reaction, Robin boundary), the H1 inner-product matrix, L2
projection onto coarse piecewise constants, constrained sparse solves, and
one-sided normal-derivative traces on patch interior boundaries.

Quadrature is tensorized 2-point Gauss per element (exact for Q1 products
with constant coefficients); oscillating coefficients must be resolved by
the fine mesh, h at most a quarter of the finest coefficient scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EmptySigma, NonFiniteCoefficient, SingularSystem, ZeroReference
from .mesh import DIRICHLET, ROBIN, SIDES

# 2-point Gauss rule on [0, 1]
GAUSS_1D = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
GAUSS_1D_W = np.array([0.5, 0.5])

_fine_solve_calls = 0


def fine_solve_count():
    """Number of constrained fine-scale solves performed in this process."""
    return _fine_solve_calls


def reset_fine_solve_count():
    global _fine_solve_calls
    _fine_solve_calls = 0


def _count_solves(k=1):
    global _fine_solve_calls
    _fine_solve_calls += k


def _shape_values(xi, eta):
    return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])


def _shape_grads(xi, eta):
    """Reference gradients dN/d(xi, eta) as a (4, 2) array."""
    return np.array([
        [-(1 - eta), -(1 - xi)],
        [(1 - eta), -xi],
        [-eta, (1 - xi)],
        [eta, xi],
    ])


def quad_points_2d():
    """Tensor 2x2 Gauss points and weights on the reference square."""
    pts = [(x, y) for y in GAUSS_1D for x in GAUSS_1D]
    wts = [wx * wy for wy in GAUSS_1D_W for wx in GAUSS_1D_W]
    return np.array(pts), np.array(wts)


@dataclass(frozen=True)
class FormDescriptor:
    """One parameter-independent bilinear form.

    ``kind`` is one of diffusion / convection / reaction / robin; the
    coefficient is a vectorized callable of points with shape (m, 2)
    returning (m, 2, 2), (m, 2), (m,), (m,) respectively.
    """

    kind: str
    coefficient: object
    label: str = ""

    def evaluate(self, points):
        vals = np.asarray(self.coefficient(points), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteCoefficient(
                f"{self.kind} coefficient {self.label!r} evaluated to a non-finite value")
        return vals


def _wrap_matrix(a):
    a = np.asarray(a, dtype=float)
    return lambda pts: np.broadcast_to(a, (pts.shape[0], 2, 2))


def _wrap_vector(b):
    b = np.asarray(b, dtype=float)
    return lambda pts: np.broadcast_to(b, (pts.shape[0], 2))


def _wrap_scalar(c):
    c = float(c)
    return lambda pts: np.full(pts.shape[0], c)


def diffusion(coefficient, label=""):
    if not callable(coefficient):
        coefficient = _wrap_matrix(coefficient)
    return FormDescriptor("diffusion", coefficient, label)


def convection(coefficient, label=""):
    if not callable(coefficient):
        coefficient = _wrap_vector(coefficient)
    return FormDescriptor("convection", coefficient, label)


def reaction(coefficient, label=""):
    if not callable(coefficient):
        coefficient = _wrap_scalar(coefficient)
    return FormDescriptor("reaction", coefficient, label)


def robin(coefficient, label=""):
    if not callable(coefficient):
        coefficient = _wrap_scalar(coefficient)
    return FormDescriptor("robin", coefficient, label)


def _quad_coords(grid, xi, eta):
    origins = grid.element_origins()
    return origins + grid.h * np.array([xi, eta])


def assemble_form(grid, descriptor, robin_edges=None):
    """Assemble one bilinear form on a grid into CSR format.

    Entry (i, j) couples test function i with trial function j.  Robin
    forms integrate over the boundary edges passed in ``robin_edges``
    (node-pair array) with 2-point Gauss along each edge.
    """
    if descriptor.kind == "robin":
        if robin_edges is None:
            raise ValueError("robin form needs the boundary edges to integrate over")
        return _assemble_robin(grid, descriptor, robin_edges)

    conn = grid.connectivity()
    n_e = grid.n_elems
    h = grid.h
    local = np.zeros((n_e, 4, 4))
    qpts, qwts = quad_points_2d()
    for (xi, eta), w in zip(qpts, qwts):
        pts = _quad_coords(grid, xi, eta)
        N = _shape_values(xi, eta)
        dN = _shape_grads(xi, eta)
        if descriptor.kind == "diffusion":
            a = descriptor.evaluate(pts)
            # jacobian h^2 cancels the two 1/h gradient factors
            local += w * np.einsum("ik,ekl,jl->eij", dN, a, dN)
        elif descriptor.kind == "convection":
            b = descriptor.evaluate(pts)
            bgrad = np.einsum("ek,jk->ej", b, dN) / h  # b . grad(trial)
            local += (w * h * h) * N[None, :, None] * bgrad[:, None, :]
        elif descriptor.kind == "reaction":
            c = descriptor.evaluate(pts)
            local += (w * h * h) * c[:, None, None] * np.outer(N, N)[None, :, :]
        else:
            raise ValueError(f"unknown form kind {descriptor.kind!r}")

    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(grid.n_nodes, grid.n_nodes))
    return mat.tocsr()


def _assemble_robin(grid, descriptor, edges):
    n = grid.n_nodes
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    edges = np.asarray(edges)
    coords = grid.node_coords()
    p0, p1 = coords[edges[:, 0]], coords[edges[:, 1]]
    rows, cols, vals = [], [], []
    for g, w in zip(GAUSS_1D, GAUSS_1D_W):
        pts = (1 - g) * p0 + g * p1
        d = descriptor.evaluate(pts)
        shape = np.array([1 - g, g])
        for i in range(2):
            for j in range(2):
                rows.append(edges[:, i])
                cols.append(edges[:, j])
                vals.append(w * grid.h * d * shape[i] * shape[j])
    mat = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return mat.tocsr()


def assemble_h1_gram(grid):
    """Matrix of (grad u, grad v) + (u, v) over the grid."""
    return assemble_form(grid, diffusion(np.eye(2))) + assemble_form(grid, reaction(1.0))


def mass_matrix(grid):
    return assemble_form(grid, reaction(1.0))


def load_vector(grid, f):
    """Right-hand side vector (f, phi_i) by per-element 2x2 Gauss quadrature."""
    conn = grid.connectivity()
    out = np.zeros(grid.n_nodes)
    h2 = grid.h * grid.h
    qpts, qwts = quad_points_2d()
    for (xi, eta), w in zip(qpts, qwts):
        pts = _quad_coords(grid, xi, eta)
        fv = np.asarray(f(pts), dtype=float)
        if not np.all(np.isfinite(fv)):
            raise NonFiniteCoefficient("right-hand side evaluated to a non-finite value")
        N = _shape_values(xi, eta)
        contrib = (w * h2) * fv[:, None] * N[None, :]
        np.add.at(out, conn.ravel(), contrib.ravel())
    return out


def indicator_load(patch, t):
    """Load vector of the indicator of the t-th local coarse element.

    Exact for Q1: every fine element inside the coarse element contributes
    h^2/4 to each of its four nodes.
    """
    conn = patch.grid.connectivity()[patch.local_fine_elements(t)]
    out = np.zeros(patch.grid.n_nodes)
    np.add.at(out, conn.ravel(), patch.grid.h ** 2 / 4.0)
    return out


def element_means(grid, u):
    """Integral mean of the Q1 interpolant over every grid element."""
    u2 = np.asarray(u).reshape(grid.ny + 1, grid.nx + 1)
    return 0.25 * (u2[:-1, :-1] + u2[:-1, 1:] + u2[1:, :-1] + u2[1:, 1:]).ravel()


def patch_element_averages(patch, u):
    """Averages of a local nodal vector over the patch's coarse elements."""
    r = patch.fine.refinement
    means = element_means(patch.grid, u).reshape(patch.grid.ny, patch.grid.nx)
    blocks = means.reshape(patch.ncy, r, patch.ncx, r)
    return blocks.mean(axis=(1, 3)).ravel()


def project_piecewise_constant(f, mesh, fine=None, subdivisions=4):
    """L2-orthogonal projection onto coarse piecewise constants (element averages).

    ``f`` is either a vectorized scalar field, integrated with a
    ``subdivisions`` x ``subdivisions`` tensor Gauss rule per coarse
    element, or a fine nodal vector (then ``fine`` is required and the Q1
    interpolant is averaged exactly).
    """
    if callable(f):
        n = mesh.n_per_axis
        sub = np.arange(subdivisions)
        offsets = np.array([(x + g) / subdivisions
                            for x in sub for g in GAUSS_1D])  # in [0, 1]
        centers_x = np.arange(n) / n
        out = np.zeros(mesh.n_elems)
        # average of f over each element = mean of sub-cell Gauss values
        X = (centers_x[:, None] + offsets[None, :] / n).ravel()
        nx = offsets.size
        XX, YY = np.meshgrid(X, X)
        vals = np.asarray(f(np.column_stack([XX.ravel(), YY.ravel()])), dtype=float)
        vals = vals.reshape(n * nx, n * nx)
        w = np.tile(GAUSS_1D_W / subdivisions, subdivisions)
        W = np.tile(w, n)
        cell = (W[None, :] * W[:, None]) * vals
        out = cell.reshape(n, nx, n, nx).sum(axis=(1, 3)).ravel()
        return out
    if fine is None:
        raise ValueError("projecting a nodal vector requires the fine mesh")
    grid = fine.grid
    r = fine.refinement
    n = mesh.n_per_axis
    means = element_means(grid, f).reshape(grid.ny, grid.nx)
    return means.reshape(n, r, n, r).mean(axis=(1, 3)).ravel()


def inject_piecewise_constant(values, mesh):
    """Scalar field evaluating a coarse piecewise-constant function."""
    values = np.asarray(values, dtype=float)
    n = mesh.n_per_axis

    def field(pts):
        ix = np.clip((pts[:, 0] * n).astype(int), 0, n - 1)
        iy = np.clip((pts[:, 1] * n).astype(int), 0, n - 1)
        return values[iy * n + ix]

    return field


class FactorizedSystem:
    """LU-factorized constrained operator, reusable across right-hand sides.

    Dirichlet dofs are eliminated symmetrically with zero substitution
    (homogeneous conditions only).  Every triangular solve counts as one
    fine-scale solve for the instrumentation counter.
    """

    def __init__(self, A, constrained):
        A = A.tocsr()
        self.n = A.shape[0]
        mask = np.ones(self.n, dtype=bool)
        constrained = np.asarray(constrained, dtype=np.int64)
        mask[constrained] = False
        self.free = np.flatnonzero(mask)
        self.constrained = constrained
        if self.free.size == 0:
            self._lu = None
            return
        A_ff = A[self.free][:, self.free].tocsc()
        self._A_ff = A_ff
        try:
            self._lu = spla.splu(A_ff)
        except RuntimeError as exc:
            raise SingularSystem(f"factorization failed: {exc}") from exc
        diag = np.abs(self._lu.U.diagonal())
        dmax = diag.max() if diag.size else 0.0
        dmin = diag.min() if diag.size else 0.0
        if dmin == 0.0 or not np.isfinite(dmax):
            raise SingularSystem(
                f"singular constrained system (pivot ratio {dmin:.3e}/{dmax:.3e})")
        self.pivot_ratio = dmin / dmax

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        x = np.zeros(self.n)
        if self.free.size == 0:
            return x
        _count_solves()
        xf = self._lu.solve(rhs[self.free])
        res = self._A_ff @ xf - rhs[self.free]
        scale = np.linalg.norm(rhs[self.free])
        if scale > 0 and np.linalg.norm(res) > 1e-10 * scale:
            raise SingularSystem(
                f"direct solve residual {np.linalg.norm(res) / scale:.3e} "
                f"exceeds 1e-10 (pivot ratio {self.pivot_ratio:.3e})")
        x[self.free] = xf
        return x

    def solve_many(self, rhs_columns):
        """Solve for several full-size right-hand sides, stacked as rows."""
        rhs = np.atleast_2d(np.asarray(rhs_columns, dtype=float))
        out = np.zeros((rhs.shape[0], self.n))
        if self.free.size == 0:
            return out
        _count_solves(rhs.shape[0])
        xf = self._lu.solve(rhs[:, self.free].T)
        out[:, self.free] = xf.T
        return out


def solve_constrained(A, rhs, constrained):
    """Solve A x = rhs with the given dofs constrained to zero.

    Direct sparse factorization; the free-dof residual is checked against
    1e-10 relative and :class:`SingularSystem` is raised otherwise.
    """
    return FactorizedSystem(A, constrained).solve(rhs)


class TraceOperator:
    """One-sided normal-derivative sampler on a patch's interior boundary.

    For each Sigma fine edge the Q1 gradient of the interior element is
    dotted with the outward normal and sampled at the edge's two 1D Gauss
    points; ``weights`` carry the edge quadrature weights h/2 so that
    weighted dot products of sample vectors approximate L2(Sigma) inner
    products.
    """

    def __init__(self, patch):
        if patch.sigma_edge_nodes.shape[0] == 0:
            raise EmptySigma("patch has no interior boundary")
        grid = patch.grid
        conn = grid.connectivity()[patch.sigma_edge_elems]
        n_edges = conn.shape[0]
        h = grid.h
        rows, cols, vals = [], [], []
        # d/dx coefficients on [u1,u2,u3,u4] at transverse coordinate s:
        #   [-(1-s), (1-s), -s, s] / h ;  d/dy swaps the middle entries.
        for k, g in enumerate(GAUSS_1D):
            cx = np.array([-(1 - g), (1 - g), -g, g]) / h
            cy = np.array([-(1 - g), -g, (1 - g), g]) / h
            coeff = np.where(patch.sigma_edge_axis[:, None] == 0, cx[None, :], cy[None, :])
            coeff = coeff * patch.sigma_edge_sign[:, None]
            rows.append(np.repeat(2 * np.arange(n_edges) + k, 4))
            cols.append(conn.ravel())
            vals.append(coeff.ravel())
        self.matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * n_edges, grid.n_nodes)).tocsr()
        self.weights = np.full(2 * n_edges, h / 2.0)
        self.n_samples = 2 * n_edges

    def apply(self, u):
        return self.matrix @ np.asarray(u, dtype=float)

    def apply_many(self, U):
        """Traces of several nodal vectors stacked as rows."""
        return (self.matrix @ np.asarray(U, dtype=float).T).T

    def norm(self, u):
        t = self.apply(u)
        return float(np.sqrt(np.sum(self.weights * t * t)))


def normal_derivative_trace(patch, u):
    """Normal-derivative samples and quadrature weights of u on Sigma."""
    op = TraceOperator(patch)
    return op.apply(u), op.weights


def global_dirichlet_dofs(grid, bc):
    """Constrained nodes of the global mesh: nodes of boundary edges on the Dirichlet part."""
    coords = grid.node_coords()
    constrained = set()
    for side in SIDES:
        pairs = grid.side_edge_nodes(side)
        mids = 0.5 * (coords[pairs[:, 0]] + coords[pairs[:, 1]])
        tags = bc.classify(mids)
        constrained.update(np.unique(pairs[tags == DIRICHLET]).tolist())
    return np.array(sorted(constrained), dtype=np.int64)


def global_robin_edges(grid, bc):
    edges = []
    coords = grid.node_coords()
    for side in SIDES:
        pairs = grid.side_edge_nodes(side)
        mids = 0.5 * (coords[pairs[:, 0]] + coords[pairs[:, 1]])
        tags = bc.classify(mids)
        edges.append(pairs[tags == ROBIN])
    return np.concatenate(edges) if edges else np.empty((0, 2), dtype=np.int64)


def inner(M, u, v):
    """Quadratic-form inner product u' M v."""
    return float(np.asarray(u) @ (M @ np.asarray(v)))


def norm(M, u):
    return float(np.sqrt(max(inner(M, u, u), 0.0)))


def relative_errors(u, u_ref, h1_gram, mass):
    """Relative H1- and L2-norm errors of u against a reference vector."""
    ref_v = norm(h1_gram, u_ref)
    ref_l2 = norm(mass, u_ref)
    if ref_v == 0.0:
        raise ZeroReference("reference solution has zero norm")
    diff = np.asarray(u) - np.asarray(u_ref)
    return norm(h1_gram, diff) / ref_v, norm(mass, diff) / ref_l2
