"""Patch-local source optimization: the super-localization core.

For one patch, solve the local PDE with indicator sources, measure the
boundary flux (one-sided normal derivative on the interior boundary
Sigma), and pick the piecewise-constant source whose response has minimal
L2(Sigma) flux.  Since the coarse elements are disjoint squares of area
H^2, the generalized eigenvalue problem of the minimization reduces
exactly to a standard symmetric eigenvalue problem on the flux Gram
matrix.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import fem
from .errors import UnstableBasis

DEGENERACY_RTOL = 1e-12
COND_LIMIT = 1e8


class PatchOperators:
    """Assembled parameter-independent operators for one patch and problem.

    Caches the H1-Gram factorization (shared by all functional solves on
    the patch) and an LRU of parameter-dependent operator factorizations,
    keyed by the affine weights so that repeated training parameters reuse
    the factorization.
    """

    def __init__(self, patch, problem, factor_cache=24):
        self.patch = patch
        self.problem = problem
        robin_edges = None
        if any(d.kind == "robin" for d in problem.forms):
            robin_edges = _patch_robin_edges(patch, problem.bc)
        self.forms = [
            fem.assemble_form(patch.grid, d, robin_edges=robin_edges)
            for d in problem.forms
        ]
        self.h1_gram = fem.assemble_h1_gram(patch.grid)
        self.mass = fem.mass_matrix(patch.grid)
        self.trace = fem.TraceOperator(patch)
        self._v_factor = None
        self._factors = OrderedDict()
        self._factor_cache = factor_cache

    @property
    def n_dofs(self):
        return self.patch.grid.n_nodes

    @property
    def v_factor(self):
        if self._v_factor is None:
            self._v_factor = fem.FactorizedSystem(self.h1_gram, self.patch.dirichlet_dofs)
        return self._v_factor

    def operator(self, mu):
        theta = self.problem.theta(mu)
        A = theta[0] * self.forms[0]
        for t, B in zip(theta[1:], self.forms[1:]):
            A = A + t * B
        return A.tocsr()

    def factorize(self, mu):
        key = tuple(np.round(self.problem.theta(mu), 14))
        hit = self._factors.get(key)
        if hit is not None:
            self._factors.move_to_end(key)
            return hit
        factor = fem.FactorizedSystem(self.operator(mu), self.patch.dirichlet_dofs)
        self._factors[key] = factor
        if len(self._factors) > self._factor_cache:
            self._factors.popitem(last=False)
        return factor

    def indicator_load(self, t):
        return fem.indicator_load(self.patch, t)

    def v_norm(self, u):
        return fem.norm(self.h1_gram, u)


def _patch_robin_edges(patch, bc):
    grid = patch.grid
    coords = grid.node_coords()
    on_domain = patch.sides_on_domain_boundary()
    edges = []
    for side, on in on_domain.items():
        if not on:
            continue
        pairs = grid.side_edge_nodes(side)
        mids = 0.5 * (coords[pairs[:, 0]] + coords[pairs[:, 1]])
        tags = bc.classify(mids)
        edges.append(pairs[tags == 2])
    return np.concatenate(edges) if edges else np.empty((0, 2), dtype=np.int64)


def compute_snapshot(ops, element, mu):
    """Patch response to the indicator source of one local coarse element."""
    return ops.factorize(mu).solve(ops.indicator_load(element))


@dataclass
class SnapshotSet:
    """All indicator responses of a patch for one parameter, with their fluxes."""

    patch: object
    snapshots: np.ndarray  # (J, n_dofs)
    traces: np.ndarray     # (J, n_samples)
    weights: np.ndarray    # (n_samples,)


def compute_snapshot_set(ops, mu):
    """One factorization, one multi-right-hand-side solve for all patch elements."""
    patch = ops.patch
    loads = np.stack([ops.indicator_load(t) for t in range(patch.n_coarse)])
    snapshots = ops.factorize(mu).solve_many(loads)
    traces = ops.trace.apply_many(snapshots)
    return SnapshotSet(patch, snapshots, traces, ops.trace.weights)


def flux_gram(traces, weights):
    """Symmetric PSD matrix of pairwise L2(Sigma) flux inner products."""
    traces = np.atleast_2d(np.asarray(traces, dtype=float))
    return (traces * weights[None, :]) @ traces.T


@dataclass
class LocalizationOutput:
    """Optimal source for one patch plus the eigen data backing the choice.

    ``source_values`` are the per-element values of the unit-L2 source g;
    ``candidates`` holds the sources built from the smallest eigenvectors
    (first row equals ``source_values``); ``sigma`` is the L2(Sigma) flux
    norm of the response driven by g.
    """

    source_values: np.ndarray
    candidates: np.ndarray
    eigenvalues: np.ndarray
    sigma: float
    degenerate: bool

    @property
    def eigenvalue_gap(self):
        lam = self.eigenvalues
        if lam.size < 2 or lam[0] <= 0:
            return np.inf
        return lam[1] / lam[0]


def _sign_fix(v):
    nz = np.flatnonzero(np.abs(v) > 1e-14 * np.abs(v).max())
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def solve_flux_evp(C, H, n_candidates=5):
    """Minimize the flux quadratic form over unit-L2 piecewise-constant sources.

    The element mass matrix of disjoint squares is exactly H^2 times the
    identity, so the generalized problem collapses to the symmetric
    eigenvalue problem on C.  Returns the minimizing source (first nonzero
    entry positive, L2(omega) norm one), up to ``n_candidates`` fallback
    sources from the next-smallest eigenvectors, and the flux norm
    sigma = sqrt(lambda_1) / H.
    """
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + C.T)
    lam, vecs = sla.eigh(C)
    J = C.shape[0]
    k = min(n_candidates, J)
    cands = np.empty((k, J))
    for i in range(k):
        v = _sign_fix(vecs[:, i])
        cands[i] = v / (H * np.linalg.norm(v))
    scale = max(abs(lam[0]), abs(lam[-1]), 1.0e-300)
    degenerate = J > 1 and (lam[1] - lam[0]) <= DEGENERACY_RTOL * scale
    sigma = float(np.sqrt(max(lam[0], 0.0)) / H)
    return LocalizationOutput(cands[0], cands, lam, sigma, degenerate)


def sigma_indicator(outputs):
    """Localization error indicator: the largest per-patch flux norm."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("no localization outputs given")
    return max(out.sigma for out in outputs)


@dataclass
class StabilizedBasis:
    """Per-element source choices forming a nonsingular coarse matrix."""

    chosen: list            # (J_K,) source values per coarse element K
    chosen_index: np.ndarray
    matrix: sp.csc_matrix   # columns are the sources extended by zero
    cond: float
    n_replaced: int


def _assemble_source_matrix(n_elems, element_ids, sources):
    rows, cols, vals = [], [], []
    for k, (ids, g) in enumerate(zip(element_ids, sources)):
        rows.append(ids)
        cols.append(np.full(ids.size, k, dtype=np.int64))
        vals.append(g)
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_elems, len(sources))).tocsc()


def _cond(matrix):
    dense = matrix.toarray()
    s = np.linalg.svd(dense, compute_uv=False)
    if s[-1] == 0.0:
        return np.inf
    return float(s[0] / s[-1])


def stabilize_selection(n_elems, element_ids, outputs):
    """Choose one source per element so the coarse matrix stays well conditioned.

    With the default (smallest-eigenvector) choices the matrix is accepted
    as is when its condition number is below 1e8 and no eigenproblem was
    flagged degenerate.  Otherwise a greedy pass in element order picks,
    for flagged or rank-deficient columns, the candidate source whose
    component orthogonal to the previously accepted columns is largest
    (maximal determinant growth).  Raises :class:`UnstableBasis` when no
    selection reaches the condition limit.
    """
    defaults = [out.source_values for out in outputs]
    G = _assemble_source_matrix(n_elems, element_ids, defaults)
    flagged = [out.degenerate for out in outputs]
    cond = _cond(G) if n_elems <= 4096 else _sparse_cond(G)
    if cond <= COND_LIMIT and not any(flagged):
        return StabilizedBasis(defaults, np.zeros(len(outputs), dtype=np.int64),
                               G, cond, 0)

    n_cols = len(outputs)
    Q = np.zeros((n_elems, n_cols))
    chosen = []
    chosen_idx = np.zeros(n_cols, dtype=np.int64)
    n_replaced = 0
    col_norm = None
    for k, (ids, out) in enumerate(zip(element_ids, outputs)):
        cand_cols = np.zeros((out.candidates.shape[0], n_elems))
        cand_cols[:, ids] = out.candidates
        resid = cand_cols - (cand_cols @ Q[:, :k]) @ Q[:, :k].T
        resid_norms = np.linalg.norm(resid, axis=1)
        if col_norm is None:
            col_norm = np.linalg.norm(cand_cols[0])
        troubled = out.degenerate or resid_norms[0] <= 1e-8 * col_norm
        pick = int(np.argmax(resid_norms)) if troubled else 0
        if pick != 0:
            n_replaced += 1
        chosen.append(out.candidates[pick])
        chosen_idx[k] = pick
        r = resid[pick]
        rn = resid_norms[pick]
        if rn > 1e-14 * col_norm:
            Q[:, k] = r / rn
        # a zero residual column leaves Q rank-deficient; the final
        # condition check below rejects the basis in that case

    G = _assemble_source_matrix(n_elems, element_ids, chosen)
    cond = _cond(G) if n_elems <= 4096 else _sparse_cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise UnstableBasis(
            f"coarse source matrix condition {cond:.3e} exceeds {COND_LIMIT:.0e} "
            f"after {n_replaced} replacements")
    return StabilizedBasis(chosen, chosen_idx, G, cond, n_replaced)


def _sparse_cond(G):
    from scipy.sparse.linalg import svds
    k = 1
    smax = svds(G, k=k, which="LM", return_singular_vectors=False)[0]
    smin = svds(G, k=k, which="SM", return_singular_vectors=False)[0]
    return float(smax / smin) if smin > 0 else np.inf
