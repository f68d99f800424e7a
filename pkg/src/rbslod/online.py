"""Online phase: assemble localized basis data for a parameter and solve coarsely.

Given a trained archive and a parameter value, every coarse element gets a
piecewise-constant source and the matching localized response, computed
purely from reduced tables (no fine-scale solves).  One sparse coarse
solve per right-hand side then yields the solution; its factorization and
the assembled responses are cached on the basis set, so additional
right-hand sides cost a pair of triangular solves plus a scatter-add.

``build_basis_exact`` runs the same construction from exact patch solves
and acts as the reference pipeline for convergence and oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem, localization, rboffline
from .errors import ArchiveMismatch, SingularCoarseSystem, ZeroReference
from .mesh import build_fine_mesh, build_patch, patch_compute_classes
from .problems import RhsSpec


@dataclass
class PatchBasisData:
    """Per-compute-class payload shared by all translated member elements."""

    members: np.ndarray
    patch: object                   # representative patch (local layout only)
    output: localization.LocalizationOutput
    chi_stack: np.ndarray           # (J, n_local) unit-source responses
    avg_stack: np.ndarray           # (J, J) their coarse-element averages


@dataclass
class BasisEntry:
    """Chosen source and response data of one coarse element."""

    element: int
    class_index: int
    patch_elements: np.ndarray
    source_values: np.ndarray
    psi_averages: np.ndarray
    choice: int


@dataclass
class CoarseSystem:
    """Sparse collocation matrix with its factorization and conditioning."""

    matrix: object
    lu: object
    cond: float

    def solve(self, rhs):
        c = self.lu.solve(rhs)
        res = np.linalg.norm(self.matrix @ c - rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0 and res > 1e-10 * scale:
            raise SingularCoarseSystem(
                f"coarse solve residual {res / scale:.3e} exceeds 1e-10")
        return c


@dataclass
class BasisSet:
    """All per-element sources/responses for one parameter, ready for coarse solves."""

    problem: object
    mesh: object
    fine: object
    ell: int
    mu: np.ndarray
    class_data: list
    entries: list
    stabilization: object
    _coarse: CoarseSystem | None = field(default=None, repr=False)
    _psi_cache: dict = field(default_factory=dict, repr=False)
    _patch_cache: dict = field(default_factory=dict, repr=False)

    def coarse_system(self):
        """Factorized collocation matrix; built once, reused for every right-hand side."""
        if self._coarse is None:
            G = self.stabilization.matrix.tocsc()
            try:
                lu = spla.splu(G)
            except RuntimeError as exc:
                raise SingularCoarseSystem(f"factorization failed: {exc}") from exc
            self._coarse = CoarseSystem(G, lu, self.stabilization.cond)
        return self._coarse

    def patch_for(self, k):
        if k not in self._patch_cache:
            self._patch_cache[k] = build_patch(
                self.mesh, self.fine, k, self.ell, self.problem.bc)
        return self._patch_cache[k]

    def psi_fine(self, k):
        """Local fine response of element k, assembled lazily and cached."""
        if k not in self._psi_cache:
            entry = self.entries[k]
            data = self.class_data[entry.class_index]
            self._psi_cache[k] = entry.source_values @ data.chi_stack
        return self._psi_cache[k]


def _entries_from_classes(mesh, class_data):
    """Run the stabilizing source selection over all elements and build entries."""
    element_ids = [None] * mesh.n_elems
    outputs = [None] * mesh.n_elems
    class_of = np.empty(mesh.n_elems, dtype=np.int64)
    for ci, data in enumerate(class_data):
        elems = data.patch.coarse_elements
        rep = int(data.members[0])
        # translated members share the class patch layout; flattened element
        # ids shift by exactly (k - rep) on the row-major coarse grid
        for k in data.members:
            element_ids[k] = elems + (int(k) - rep)
            outputs[k] = data.output
            class_of[k] = ci
    stab = localization.stabilize_selection(mesh.n_elems, element_ids, outputs)
    entries = []
    for k in range(mesh.n_elems):
        data = class_data[class_of[k]]
        g = stab.chosen[k]
        entries.append(BasisEntry(
            element=k,
            class_index=int(class_of[k]),
            patch_elements=element_ids[k],
            source_values=g,
            psi_averages=g @ data.avg_stack,
            choice=int(stab.chosen_index[k]),
        ))
    return entries, stab


def build_basis(archive, problem, mu, ell=None):
    """Assemble the localized basis for one parameter from offline data only.

    For every patch class the reduced systems of all elements are solved,
    the flux Gram matrix is contracted from the precomputed trace blocks,
    and the minimizing source is selected; the global stabilization pass
    then fixes the final source per element.  No fine-scale solves happen.
    """
    if ell is not None and ell != archive.ell:
        raise ArchiveMismatch(f"archive trained at ell={archive.ell}, requested {ell}")
    archive.verify(problem, exc=ArchiveMismatch)
    mesh = archive.coarse_mesh()
    fine = build_fine_mesh(mesh, archive.r)
    mu = problem.check_box(mu)
    theta = problem.theta(mu)

    class_data = []
    for rec in archive.classes:
        rep = int(rec.members[0])
        patch = build_patch(mesh, fine, rep, archive.ell, problem.bc)
        J = patch.n_coarse
        coeff_blocks = []
        for space in rec.spaces:
            A = np.einsum("q,qij->ij", theta, space.form_grams)
            coeff_blocks.append(np.linalg.solve(A, space.rhs_coeffs))
        Z = np.zeros((int(rec.trace_offsets[-1]), J))
        for j, c in enumerate(coeff_blocks):
            Z[rec.trace_offsets[j]:rec.trace_offsets[j + 1], j] = c
        C = Z.T @ rec.trace_gram @ Z
        output = localization.solve_flux_evp(C, mesh.H)
        chi_stack = np.stack([
            c @ space.basis for c, space in zip(coeff_blocks, rec.spaces)])
        avg_stack = np.stack([
            c @ space.averages for c, space in zip(coeff_blocks, rec.spaces)])
        class_data.append(PatchBasisData(rec.members, patch, output, chi_stack, avg_stack))

    entries, stab = _entries_from_classes(mesh, class_data)
    return BasisSet(problem, mesh, fine, archive.ell, mu, class_data, entries, stab)


def build_basis_exact(problem, mesh, fine, mu, ell):
    """Same basis construction from exact patch solves (the uncompressed pipeline)."""
    mu = problem.check_box(mu)
    class_data = []
    for key, members in patch_compute_classes(mesh, ell).items():
        rep = int(members[0])
        patch = build_patch(mesh, fine, rep, ell, problem.bc)
        ops = localization.PatchOperators(patch, problem, factor_cache=1)
        snaps = localization.compute_snapshot_set(ops, mu)
        C = localization.flux_gram(snaps.traces, snaps.weights)
        output = localization.solve_flux_evp(C, mesh.H)
        avg_stack = np.stack([
            fem.patch_element_averages(patch, chi) for chi in snaps.snapshots])
        class_data.append(PatchBasisData(members, patch, output,
                                         snaps.snapshots, avg_stack))
    entries, stab = _entries_from_classes(mesh, class_data)
    return BasisSet(problem, mesh, fine, int(ell), mu, class_data, entries, stab)


def project_rhs(basis, f, subdivisions=4):
    """Element values of the coarse L2 projection of a right-hand side."""
    mesh = basis.mesh
    if isinstance(f, RhsSpec) or callable(f):
        return fem.project_piecewise_constant(f, mesh, subdivisions=subdivisions)
    f = np.asarray(f, dtype=float)
    if f.shape == (mesh.n_elems,):
        return f
    if f.shape == (basis.fine.n_nodes,):
        return fem.project_piecewise_constant(f, mesh, fine=basis.fine)
    raise ValueError(f"cannot interpret right-hand side with shape {f.shape}")


def coarse_solve(basis, f, mesh=None):
    """Coefficients expanding the projected right-hand side in the chosen sources."""
    if mesh is not None and mesh.n_per_axis != basis.mesh.n_per_axis:
        raise ValueError("mesh does not match the basis set")
    fhat = project_rhs(basis, f)
    return basis.coarse_system().solve(fhat)


def reconstruct(basis, coeffs, mode="fine"):
    """Combine the localized responses with the coarse coefficients.

    ``fine`` scatter-adds the patch-local responses into a global fine
    vector (fixed element order, bit-deterministic single-threaded);
    ``coarse_averages`` combines only the archived element averages and
    never touches fine arrays.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if mode == "coarse_averages":
        out = np.zeros(basis.mesh.n_elems)
        for entry in basis.entries:
            out[entry.patch_elements] += coeffs[entry.element] * entry.psi_averages
        return out
    if mode == "fine":
        out = np.zeros(basis.fine.n_nodes)
        for entry in basis.entries:
            k = entry.element
            if coeffs[k] == 0.0:
                continue
            patch = basis.patch_for(k)
            out[patch.global_dofs] += coeffs[k] * basis.psi_fine(k)
        return out
    raise ValueError(f"unknown reconstruction mode {mode!r}")


_GRAM_CACHE = {}


def _global_grams(fine):
    key = (fine.coarse.n_per_axis, fine.refinement)
    if key not in _GRAM_CACHE:
        grid = fine.grid
        _GRAM_CACHE.clear()  # keep at most one global pair; they are large
        _GRAM_CACHE[key] = (fem.assemble_h1_gram(grid), fem.mass_matrix(grid))
    return _GRAM_CACHE[key]


def error_report(u_approx, u_ref, fine):
    """Relative H1(V)- and L2-norm errors against a reference fine vector."""
    h1_gram, mass = _global_grams(fine)
    rel_v, rel_l2 = fem.relative_errors(u_approx, u_ref, h1_gram, mass)
    return {"rel_v": rel_v, "rel_l2": rel_l2}


def solve_reference(problem, fine, mu, f):
    """Global fine-scale Galerkin solution (the comparison baseline)."""
    mu = problem.check_box(mu)
    theta = problem.theta(mu)
    grid = fine.grid
    robin_edges = None
    if any(d.kind == "robin" for d in problem.forms):
        robin_edges = fem.global_robin_edges(grid, problem.bc)
    A = None
    for t, desc in zip(theta, problem.forms):
        B = fem.assemble_form(grid, desc, robin_edges=robin_edges)
        A = t * B if A is None else A + t * B
    rhs = fem.load_vector(grid, f)
    constrained = fem.global_dirichlet_dofs(grid, problem.bc)
    return fem.solve_constrained(A.tocsr(), rhs, constrained)


@dataclass
class RieszBounds:
    c_lower: float
    c_upper: float
    cond: float


def riesz_stability_check(system):
    """Extremal singular values of the collocation matrix (diagnostic only)."""
    G = system.matrix if isinstance(system, CoarseSystem) else system
    G = G.tocsc() if hasattr(G, "tocsc") else np.asarray(G)
    n = G.shape[0]
    if n <= 4096:
        s = np.linalg.svd(G.toarray() if hasattr(G, "toarray") else G,
                          compute_uv=False)
        smax, smin = float(s[0]), float(s[-1])
    else:
        smax = float(spla.svds(G, k=1, which="LM",
                               return_singular_vectors=False)[0])
        smin = float(spla.svds(G, k=1, which="SM",
                               return_singular_vectors=False)[0])
    cond = smax / smin if smin > 0 else np.inf
    return RieszBounds(smin, smax, cond)
