"""Greedy reduced-basis training of patch-local indicator responses.

For a fixed patch and coarse element, snapshots are selected from a
training set by a residual-based a posteriori estimator, orthonormalized
in the local H1 inner product, and compressed into parameter-independent
tables: reduced form matrices, Riesz-representative inner products for the
estimator, boundary-flux traces, and element averages.  Everything the
online phase needs is dense and small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import SingularReducedSystem


@dataclass
class GreedyConfig:
    """Stopping rule and training data for one greedy run."""

    tol: float
    training: np.ndarray
    max_m: int = 60
    keep_riesz_vectors: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_m < 1:
            raise ValueError("basis size cap must be at least 1")
        self.training = np.atleast_2d(np.asarray(self.training, dtype=float))


@dataclass
class ReducedSpace:
    """Trained reduced space of one (patch, element) pair.

    ``basis`` rows are H1-orthonormal on the patch; ``form_grams[q][i][j]``
    couples test function i with trial function j of the q-th affine form;
    ``vss``/``vsp``/``vpp`` are the Riesz-representative inner products
    driving the fast estimator; ``traces`` and ``averages`` are the
    boundary-flux samples and coarse-element averages of the basis.
    """

    element: int
    mus: np.ndarray
    basis: np.ndarray
    rhs_coeffs: np.ndarray
    form_grams: np.ndarray
    vss: np.ndarray
    vsp: np.ndarray
    vpp: float
    traces: np.ndarray
    averages: np.ndarray
    history: np.ndarray
    p_norm: float
    exhausted: bool
    riesz_vectors: np.ndarray | None = None
    p_vector: np.ndarray | None = None

    @property
    def m(self):
        return self.basis.shape[0]

    @property
    def q_terms(self):
        return self.form_grams.shape[0]


def riesz_representative(ops, functional_vector):
    """H1 Riesz representative of a functional given by its dual vector."""
    return ops.v_factor.solve(np.asarray(functional_vector, dtype=float))


def rb_galerkin_solve(space, problem, mu):
    """Reduced coefficients of the indicator response at one parameter.

    Solves the m x m system assembled from the precomputed form matrices;
    no fine-scale data is touched.
    """
    theta = problem.theta(mu)
    A = np.einsum("q,qij->ij", theta, space.form_grams)
    if space.m > 1 and np.linalg.cond(A) > 1e12:
        raise SingularReducedSystem(
            f"reduced system condition {np.linalg.cond(A):.3e} at mu={mu}")
    try:
        return np.linalg.solve(A, space.rhs_coeffs)
    except np.linalg.LinAlgError as exc:
        raise SingularReducedSystem(str(exc)) from exc


def solve_coeffs_batch(form_grams, rhs_coeffs, thetas):
    """Reduced coefficients for a batch of affine weight vectors."""
    A = np.einsum("lq,qij->lij", thetas, form_grams)
    rhs = np.broadcast_to(rhs_coeffs, (thetas.shape[0], rhs_coeffs.size))
    try:
        return np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularReducedSystem(str(exc)) from exc


def _fast_delta_sq(vss, vsp, vpp, thetas, coeffs):
    y = (thetas[:, :, None] * coeffs[:, None, :]).reshape(thetas.shape[0], -1)
    V = vss.reshape(y.shape[1], y.shape[1])
    d2 = np.einsum("li,ij,lj->l", y, V, y) - 2.0 * (y @ vsp.ravel()) + vpp
    return np.maximum(d2, 0.0)


def estimator(space, problem, mu, coeffs, ops=None, mode="fast"):
    """Residual dual-norm estimate of the reduced approximation error.

    ``fast`` evaluates the expanded quadratic form of stored Riesz inner
    products (no fine arrays, noise floor around 1e-8 relative from
    cancellation); ``direct`` materializes the residual's Riesz
    representative from the retained fine vectors and measures its H1
    norm, which is the numerically robust path near exactness.
    """
    theta = problem.theta(mu)
    coeffs = np.asarray(coeffs, dtype=float)
    if mode == "fast":
        d2 = _fast_delta_sq(space.vss, space.vsp, space.vpp,
                            theta[None, :], coeffs[None, :])
        return float(np.sqrt(d2[0]))
    if mode == "direct":
        if space.riesz_vectors is None or space.p_vector is None:
            raise ValueError("direct estimator needs retained Riesz vectors")
        if ops is None:
            raise ValueError("direct estimator needs the patch operators")
        tau = np.einsum("qm,qmn->n", theta[:, None] * coeffs[None, :],
                        space.riesz_vectors) - space.p_vector
        return fem.norm(ops.h1_gram, tau)
    raise ValueError(f"unknown estimator mode {mode!r}")


class _Trainer:
    """Incrementally grown reduced tables for one (patch, element) pair."""

    def __init__(self, ops, element, max_m):
        self.ops = ops
        self.element = int(element)
        self.Q = ops.problem.q_terms
        n = ops.n_dofs
        Q, M = self.Q, max_m
        self.load = ops.indicator_load(element)
        self.p_vec = riesz_representative(ops, self.load)
        self.p_norm = ops.v_norm(self.p_vec)
        self.vpp = float(self.load @ self.p_vec)
        self.m = 0
        self.basis = np.zeros((M, n))
        self.bw = np.zeros((Q, M, n))      # B_q @ w_m
        self.riesz = np.zeros((Q, M, n))   # Riesz representatives of the form functionals
        self.form_grams = np.zeros((Q, M, M))
        self.vss = np.zeros((Q, M, Q, M))
        self.vsp = np.zeros((Q, M))
        self.rhs_coeffs = np.zeros(M)
        self.traces = np.zeros((M, ops.trace.n_samples))
        self.averages = np.zeros((M, ops.patch.n_coarse))

    def orthonormalize(self, w):
        """Classical Gram-Schmidt with one re-orthogonalization pass."""
        original = self.ops.v_norm(w)
        B = self.basis[:self.m]
        for _ in range(2):
            if self.m:
                w = w - B.T @ (B @ (self.ops.h1_gram @ w))
        nrm = self.ops.v_norm(w)
        if original == 0.0 or nrm <= 1e-12 * original:
            return None
        return w / nrm

    def extend(self, mu):
        chi = self.ops.factorize(mu).solve(self.load)
        w = self.orthonormalize(chi)
        if w is None:
            return False
        m, Q = self.m, self.Q
        bw_new = np.stack([self.ops.forms[q] @ w for q in range(Q)])
        s_new = self.ops.v_factor.solve_many(bw_new)

        self.basis[m] = w
        self.bw[:, m] = bw_new
        self.riesz[:, m] = s_new
        self.rhs_coeffs[m] = float(self.load @ w)
        self.traces[m] = self.ops.trace.apply(w)
        self.averages[m] = fem.patch_element_averages(self.ops.patch, w)

        old = self.basis[:m]
        for q in range(Q):
            self.form_grams[q, :m, m] = old @ bw_new[q]          # test old, trial new
            self.form_grams[q, m, :m] = self.bw[q, :m] @ w       # test new, trial old
            self.form_grams[q, m, m] = float(w @ bw_new[q])
        # (s_a, s_b)_H1 = B_a(w, s_b) through the defining identity
        if m:
            s_old = self.riesz[:, :m].reshape(Q * m, -1)
            bw_old = self.bw[:, :m].reshape(Q * m, -1)
            self.vss[:, m, :, :m] = (bw_new @ s_old.T).reshape(Q, Q, m)
            self.vss[:, :m, :, m] = (bw_old @ s_new.T).reshape(Q, m, Q)
        corner = bw_new @ s_new.T                                  # (Q, Q)
        self.vss[:, m, :, m] = 0.5 * (corner + corner.T)
        self.vsp[:, m] = bw_new @ self.p_vec
        self.m = m + 1
        return True

    def view(self, symmetrize=True):
        m = self.m
        vss = self.vss[:, :m, :, :m]
        if symmetrize:
            flat = vss.reshape(self.Q * m, self.Q * m)
            vss = (0.5 * (flat + flat.T)).reshape(self.Q, m, self.Q, m)
        return vss, self.vsp[:, :m], self.form_grams[:, :m, :m], self.rhs_coeffs[:m]

    def finalize(self, mus, history, exhausted, keep_riesz):
        m = self.m
        vss, vsp, grams, rhs = self.view()
        return ReducedSpace(
            element=self.element,
            mus=np.array(mus),
            basis=self.basis[:m].copy(),
            rhs_coeffs=rhs.copy(),
            form_grams=grams.copy(),
            vss=vss.copy(),
            vsp=vsp.copy(),
            vpp=self.vpp,
            traces=self.traces[:m].copy(),
            averages=self.averages[:m].copy(),
            history=np.array(history),
            p_norm=self.p_norm,
            exhausted=exhausted,
            riesz_vectors=self.riesz[:, :m].copy() if keep_riesz else None,
            p_vector=self.p_vec.copy() if keep_riesz else None,
        )


def greedy_train(ops, element, config):
    """Greedy snapshot selection for one patch element until the training error meets tol.

    Starts from the training parameter closest to the box center, then
    repeatedly adds the parameter with the largest estimated error.
    ``history[m-1]`` records the training error max Delta / |p| reached
    with m basis functions; ties in the argmax resolve to the lowest
    training index.  Stops early with ``exhausted`` set when the basis cap
    is hit above tolerance.
    """
    problem = ops.problem
    training = config.training
    thetas_tr = np.stack([problem.theta(mu) for mu in training])

    trainer = _Trainer(ops, element, min(config.max_m, len(training)))
    center = np.array([(lo + hi) / 2.0 for lo, hi in problem.parameter_box])
    first = int(np.argmin(np.linalg.norm(training - center[None, :], axis=1)))
    if not trainer.extend(training[first]):
        raise SingularReducedSystem("first snapshot has zero H1 norm")
    selected = [first]

    history = []
    exhausted = False
    while True:
        vss, vsp, grams, rhs = trainer.view()
        coeffs = solve_coeffs_batch(grams, rhs, thetas_tr)
        deltas = np.sqrt(_fast_delta_sq(vss, vsp, trainer.vpp, thetas_tr, coeffs))
        deltas[selected] = -1.0
        trerr = float(deltas.max() / trainer.p_norm) if len(selected) < len(training) else 0.0
        history.append(trerr)
        if trerr <= config.tol:
            break
        if trainer.m >= config.max_m:
            exhausted = True
            break
        nxt = int(np.argmax(deltas))
        if not trainer.extend(training[nxt]):
            break  # snapshot linearly dependent at numerical precision
        selected.append(nxt)

    return trainer.finalize(training[selected], history, exhausted,
                            config.keep_riesz_vectors)


def truncate_space(space, tol):
    """Prefix of a trained space as if the greedy had stopped at a looser tolerance.

    Valid because the greedy is hierarchical: the first m basis functions
    and tables of a run at a tighter tolerance coincide with a run stopped
    at trerr(m) <= tol.
    """
    hit = np.flatnonzero(space.history <= tol)
    if hit.size == 0:
        return space
    m = int(hit[0]) + 1
    if m >= space.m:
        return space
    return ReducedSpace(
        element=space.element,
        mus=space.mus[:m],
        basis=space.basis[:m],
        rhs_coeffs=space.rhs_coeffs[:m],
        form_grams=space.form_grams[:, :m, :m],
        vss=space.vss[:, :m, :, :m],
        vsp=space.vsp[:, :m],
        vpp=space.vpp,
        traces=space.traces[:m],
        averages=space.averages[:m],
        history=space.history[:m],
        p_norm=space.p_norm,
        exhausted=False,
        riesz_vectors=None if space.riesz_vectors is None else space.riesz_vectors[:, :m],
        p_vector=space.p_vector,
    )


@dataclass
class TraceGrams:
    """Boundary-flux inner products across all (element, basis-function) pairs of a patch.

    ``matrix[offsets[i]+l, offsets[j]+m]`` is the weighted L2(Sigma) inner
    product of basis flux l of element i with basis flux m of element j:
    the four-index array stored as one symmetric block matrix.
    """

    offsets: np.ndarray
    matrix: np.ndarray

    def block(self, i, j):
        o = self.offsets
        return self.matrix[o[i]:o[i + 1], o[j]:o[j + 1]]

    @property
    def n_blocks(self):
        return self.offsets.size - 1


def precompute_trace_grams(spaces, weights):
    """Assemble the flux Gram blocks of all reduced spaces on one patch."""
    sizes = [space.m for space in spaces]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    stacked = np.concatenate([space.traces for space in spaces], axis=0)
    mat = (stacked * weights[None, :]) @ stacked.T
    return TraceGrams(offsets, 0.5 * (mat + mat.T))
