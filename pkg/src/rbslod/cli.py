"""Command-line driver: offline training, online solves, reference solves, studies.

Configuration comes from a line-oriented ``key = value`` text file, with
command-line flags taking precedence.  Exit codes: 0 success, 2
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import archive as ar
from . import errors, fem, offline, online
from .mesh import build_coarse_mesh, build_fine_mesh, max_feasible_ell
from .problems import (RhsSpec, constant_rhs, gaussian_rhs, get_problem,
                       sample_training_set, sinusoidal_rhs)
from .rboffline import truncate_space

CONFIG_ERRORS = (errors.ConfigError, errors.OutOfBox, errors.PatchCoversDomain,
                 errors.ArchiveMismatch, errors.SchemaMismatch)


@dataclass
class RunConfig:
    problem: str = "mass_transfer"
    n: int = 16
    r: int = 16
    ell: int = 2
    tol: float = 1e-4
    max_m: int = 60
    training: str = ""
    mu: tuple = (0.05, 1.0, 0.5, 0.5, 0.15)
    rhs: tuple = ("constant",)
    out: str = "."
    archive: str = ""
    jobs: int = 0
    seed: int = 0
    reference: bool = False
    ells: tuple = ()
    ns: tuple = ()
    tols: tuple = (1e-2, 1e-4, 1e-6)
    h_exp: int = 7

    def validate(self):
        if self.n < 2:
            raise errors.ConfigError(f"n = {self.n} must be at least 2")
        if self.r < 1:
            raise errors.ConfigError(f"refinement r = {self.r} must be positive")
        if self.ell < 1:
            raise errors.ConfigError(f"ell = {self.ell} must be at least 1")
        if not (0 < self.tol <= 1):
            raise errors.ConfigError(f"tol = {self.tol} outside (0, 1]")
        if self.max_m < 1:
            raise errors.ConfigError("max_m must be at least 1")
        return self

    def resolved_jobs(self):
        if self.jobs > 0:
            return self.jobs
        env = os.environ.get("RBSLOD_JOBS", "")
        return max(1, int(env)) if env.isdigit() and env else 1

    def archive_path(self):
        return self.archive or os.path.join(self.out, "offline.rbsl")

    def training_layout(self, problem):
        text = self.training
        if not text:
            text = "grid:20" if problem.n_params > 1 else "equidistant:100"
        kind, _, count = text.partition(":")
        if kind not in ("grid", "equidistant") or not count.isdigit():
            raise errors.ConfigError(f"bad training layout {text!r}")
        return kind, int(count)

    def as_text(self):
        lines = []
        for key, value in (
            ("problem", self.problem), ("n", self.n), ("r", self.r),
            ("ell", self.ell), ("tol", self.tol), ("max_m", self.max_m),
            ("training", self.training),
            ("mu", ",".join(f"{v:.17g}" for v in self.mu)),
            ("rhs", ";".join(self.rhs)), ("out", self.out),
            ("archive", self.archive), ("jobs", self.jobs), ("seed", self.seed),
        ):
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise errors.ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _parse_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _parse_ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def config_from_sources(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
        casts = {
            "n": int, "r": int, "ell": int, "max_m": int, "jobs": int,
            "seed": int, "h_exp": int, "tol": float,
            "mu": _parse_floats, "tols": _parse_floats,
            "ells": _parse_ints, "ns": _parse_ints,
            "rhs": lambda v: tuple(s.strip() for s in v.split(";") if s.strip()),
        }
        for key, value in raw.items():
            if not hasattr(cfg, key):
                raise errors.ConfigError(f"unknown config key {key!r}")
            cast = casts.get(key, str)
            try:
                setattr(cfg, key, cast(value))
            except ValueError as exc:
                raise errors.ConfigError(f"bad value for {key!r}: {value!r}") from exc
    overrides = {}
    for key in ("problem", "n", "r", "ell", "tol", "max_m", "training", "out",
                "archive", "jobs", "seed", "reference", "h_exp"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "mu", None) is not None:
        overrides["mu"] = _parse_floats(args.mu)
    if getattr(args, "rhs", None):
        overrides["rhs"] = tuple(args.rhs)
    if getattr(args, "ells", None) is not None:
        overrides["ells"] = _parse_ints(args.ells)
    if getattr(args, "ns", None) is not None:
        overrides["ns"] = _parse_ints(args.ns)
    if getattr(args, "tols", None) is not None:
        overrides["tols"] = _parse_floats(args.tols)
    return replace(cfg, **overrides).validate()


def resolve_rhs(spec, config, problem):
    """Turn an rhs selector string into an evaluator.

    Gaussian parameters come either inline (``gaussian:m3,m4,m5``) or from
    the trailing components of the configured parameter vector.
    """
    kind, _, params = spec.partition(":")
    if kind == "constant":
        return constant_rhs(float(params) if params else 1.0)
    if kind == "sinusoidal":
        return sinusoidal_rhs()
    if kind == "gaussian":
        if params:
            vals = _parse_floats(params)
        else:
            tail = config.mu[problem.n_params:problem.n_params + 3]
            if len(tail) != 3:
                raise errors.ConfigError(
                    "gaussian rhs needs three source parameters (inline or in mu)")
            vals = tail
        return gaussian_rhs(*vals)
    raise errors.ConfigError(f"unknown rhs kind {spec!r}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [f"{v:.12e}" if isinstance(v, float) else str(v) for v in row]
            fh.write(",".join(cells) + "\n")
    return path


def _pde_mu(config, problem):
    mu = config.mu[:problem.n_params]
    if len(mu) != problem.n_params:
        raise errors.ConfigError(
            f"{problem.name} needs {problem.n_params} PDE parameters, got {len(config.mu)}")
    return np.array(mu)


def cmd_offline(config):
    problem = get_problem(config.problem)
    mesh = build_coarse_mesh(config.n)
    if config.ell > max_feasible_ell(mesh):
        raise errors.PatchCoversDomain(
            f"ell = {config.ell} makes central patches cover the domain at n = {config.n}; "
            f"largest feasible ell is {max_feasible_ell(mesh)}")
    layout = config.training_layout(problem)
    training = sample_training_set(problem, layout)
    t0 = time.perf_counter()
    arch = offline.train_offline(
        problem, config.n, config.r, config.ell, training, config.tol,
        max_m=config.max_m, jobs=config.resolved_jobs(),
        training_descriptor=f"{layout[0]}:{layout[1]}")
    elapsed = time.perf_counter() - t0
    os.makedirs(config.out, exist_ok=True)
    path = config.archive_path()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ar.write_archive(path, arch)
    rows = offline.training_history_rows(arch)
    csv_path = _write_csv(os.path.join(config.out, "trerr.csv"),
                          ["K", "T", "M", "trerr"], rows)
    print(f"offline: {len(arch.classes)} patch classes, "
          f"max basis size {arch.max_basis_size()}, {elapsed:.1f}s")
    print(f"archive: {path}")
    print(f"history: {csv_path}")
    return 0


def cmd_solve(config):
    problem = get_problem(config.problem)
    arch = ar.read_archive(config.archive_path())
    mu = _pde_mu(config, problem)
    fem.reset_fine_solve_count()
    t0 = time.perf_counter()
    basis = online.build_basis(arch, problem, mu)
    stability = online.riesz_stability_check(basis.coarse_system())
    build_time = time.perf_counter() - t0
    os.makedirs(config.out, exist_ok=True)

    fine = basis.fine
    m = fine.coarse.n_per_axis * fine.refinement
    u_ref_cache = {}
    for idx, spec in enumerate(config.rhs):
        rhs = resolve_rhs(spec, config, problem)
        t1 = time.perf_counter()
        coeffs = online.coarse_solve(basis, rhs)
        u = online.reconstruct(basis, coeffs, mode="fine")
        solve_time = time.perf_counter() - t1
        path = os.path.join(config.out, f"solution_{idx}.rbsg")
        ar.write_solution_grid(path, u.reshape(m + 1, m + 1))
        print(f"rhs[{idx}] {rhs.describe()}: solve {solve_time * 1e3:.1f} ms "
              f"-> {path}")
        if config.reference:
            u_ref = u_ref_cache.get(spec)
            if u_ref is None:
                u_ref = online.solve_reference(problem, fine, mu, rhs)
                u_ref_cache[spec] = u_ref
            report = online.error_report(u, u_ref, fine)
            print(f"rhs[{idx}] errors: rel_v = {report['rel_v']:.6e}, "
                  f"rel_l2 = {report['rel_l2']:.6e}")
    online_solves = fem.fine_solve_count() - (config.reference and len(u_ref_cache))
    print(f"basis build {build_time:.2f}s, coarse cond {stability.cond:.3e}, "
          f"online fine solves {max(online_solves, 0)}")
    return 0


def cmd_reference(config):
    problem = get_problem(config.problem)
    mesh = build_coarse_mesh(config.n)
    fine = build_fine_mesh(mesh, config.r)
    mu = _pde_mu(config, problem)
    rhs = resolve_rhs(config.rhs[0], config, problem)
    u = online.solve_reference(problem, fine, mu, rhs)
    os.makedirs(config.out, exist_ok=True)
    m = config.n * config.r
    path = os.path.join(config.out, "reference.rbsg")
    ar.write_solution_grid(path, u.reshape(m + 1, m + 1))
    print(f"reference: {path}")
    return 0


def _solve_errors(basis, problem, fine, mu, rhs, u_ref):
    coeffs = online.coarse_solve(basis, rhs)
    u = online.reconstruct(basis, coeffs, mode="fine")
    return online.error_report(u, u_ref, fine)["rel_v"]


def cmd_study(config, kind):
    problem = get_problem(config.problem)
    os.makedirs(config.out, exist_ok=True)
    mu = _pde_mu(config, problem)
    rhs = resolve_rhs(config.rhs[0], config, problem)
    jobs = config.resolved_jobs()
    tols = tuple(sorted(config.tols, reverse=True))

    if kind == "tol_sweep":
        rows = _study_tol_sweep(config, problem, mu, rhs, tols, jobs)
        path = _write_csv(os.path.join(config.out, "tol_sweep.csv"),
                          ["tol", "err_rbslod", "err_slod", "gap"], rows)
    elif kind == "ell_decay":
        ells = config.ells or (1, 2, 3, 4)
        rows = _study_ell_decay(config, problem, mu, rhs, ells, tols, jobs)
        header = ["ell"] + [f"err_rbslod_tol{t:g}" for t in tols] + ["err_slod", "sigma"]
        path = _write_csv(os.path.join(config.out, "ell_decay.csv"), header, rows)
    elif kind == "h_convergence":
        ns = config.ns or (4, 8, 16, 32)
        ells = config.ells or (2, 2, 3, 3)
        if len(ells) != len(ns):
            raise errors.ConfigError("ells schedule must match ns")
        rows = _study_h_convergence(config, problem, mu, ells, ns, jobs)
        path = _write_csv(os.path.join(config.out, "h_convergence.csv"),
                          ["n", "H", "ell", "tol", "err_rbslod", "err_slod"], rows)
    else:
        raise errors.ConfigError(f"unknown study kind {kind!r}")
    print(f"study: {path}")
    return 0


def _trained_archive(config, problem, n, r, ell, tol, jobs):
    layout = config.training_layout(problem)
    training = sample_training_set(problem, layout)
    return offline.train_offline(problem, n, r, ell, training, tol,
                                 max_m=config.max_m, jobs=jobs,
                                 training_descriptor=f"{layout[0]}:{layout[1]}")


def _truncated_basis(arch, problem, mu, tol):
    """Online basis as if the archive had been trained at a looser tolerance."""
    pruned = ar.OfflineArchive(
        n=arch.n, r=arch.r, ell=arch.ell, tol=tol, max_m=arch.max_m,
        problem_name=arch.problem_name, problem_hash=arch.problem_hash,
        training_descriptor=arch.training_descriptor,
        classes=[_truncate_class(rec, tol) for rec in arch.classes])
    return online.build_basis(pruned, problem, mu)


def _truncate_class(rec, tol):
    """Class record as trained at a looser tolerance: prefix spaces, sliced Gram blocks."""
    spaces = [ar.SpaceRecord.from_space(truncate_space(s.to_space(), tol))
              for s in rec.spaces]
    sizes = [s.m for s in spaces]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    total = int(offsets[-1])
    gram = np.zeros((total, total))
    for i, si in enumerate(spaces):
        for j, sj in enumerate(spaces):
            block = rec.trace_gram[
                rec.trace_offsets[i]:rec.trace_offsets[i] + si.m,
                rec.trace_offsets[j]:rec.trace_offsets[j] + sj.m]
            gram[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = block
    return ar.ClassRecord(rec.key, rec.members, offsets, gram, spaces)


def _study_tol_sweep(config, problem, mu, rhs, tols, jobs):
    mesh = build_coarse_mesh(config.n)
    fine = build_fine_mesh(mesh, config.r)
    arch = _trained_archive(config, problem, config.n, config.r, config.ell,
                            min(tols), jobs)
    u_ref = online.solve_reference(problem, fine, mu, rhs)
    basis_slod = online.build_basis_exact(problem, mesh, fine, mu, config.ell)
    err_slod = _solve_errors(basis_slod, problem, fine, mu, rhs, u_ref)
    rows = []
    for tol in tols:
        basis = _truncated_basis(arch, problem, mu, tol)
        err = _solve_errors(basis, problem, fine, mu, rhs, u_ref)
        rows.append((float(tol), err, err_slod, abs(err - err_slod)))
    return rows


def _study_ell_decay(config, problem, mu, rhs, ells, tols, jobs):
    mesh = build_coarse_mesh(config.n)
    fine = build_fine_mesh(mesh, config.r)
    u_ref = online.solve_reference(problem, fine, mu, rhs)
    rows = []
    for ell in ells:
        if ell > max_feasible_ell(mesh):
            raise errors.PatchCoversDomain(
                f"ell = {ell} infeasible at n = {config.n}")
        arch = _trained_archive(config, problem, config.n, config.r, ell,
                                min(tols), jobs)
        basis_slod = online.build_basis_exact(problem, mesh, fine, mu, ell)
        err_slod = _solve_errors(basis_slod, problem, fine, mu, rhs, u_ref)
        sigma = max(d.output.sigma for d in basis_slod.class_data)
        errs = []
        for tol in tols:
            basis = _truncated_basis(arch, problem, mu, tol)
            errs.append(_solve_errors(basis, problem, fine, mu, rhs, u_ref))
        rows.append((int(ell), *errs, err_slod, sigma))
    return rows


def _study_h_convergence(config, problem, mu, ells, ns, jobs):
    rhs = sinusoidal_rhs()
    rows = []
    for n, ell in zip(ns, ells):
        if (1 << config.h_exp) % n:
            raise errors.ConfigError(
                f"h = 2^-{config.h_exp} is not a refinement of n = {n}")
        r = (1 << config.h_exp) // n
        mesh = build_coarse_mesh(n)
        fine = build_fine_mesh(mesh, r)
        ell_eff = min(ell, max_feasible_ell(mesh))
        arch = _trained_archive(config, problem, n, r, ell_eff, config.tol, jobs)
        u_ref = online.solve_reference(problem, fine, mu, rhs)
        basis = online.build_basis(arch, problem, mu)
        err = _solve_errors(basis, problem, fine, mu, rhs, u_ref)
        basis_slod = online.build_basis_exact(problem, mesh, fine, mu, ell_eff)
        err_slod = _solve_errors(basis_slod, problem, fine, mu, rhs, u_ref)
        rows.append((int(n), 1.0 / n, int(ell_eff), float(config.tol), err, err_slod))
    return rows


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rbslod",
        description="Localized multiscale solver with reduced-basis offline compression")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--problem", choices=("mass_transfer", "model_diffusion"))
        p.add_argument("--n", type=int, help="coarse elements per axis")
        p.add_argument("--r", type=int, help="fine refinement per coarse element")
        p.add_argument("--ell", type=int, help="oversampling layers")
        p.add_argument("--tol", type=float, help="greedy training tolerance")
        p.add_argument("--max-m", dest="max_m", type=int)
        p.add_argument("--training", help="training layout, e.g. grid:20")
        p.add_argument("--mu", help="comma-separated parameter vector")
        p.add_argument("--rhs", action="append",
                       help="right-hand side kind (repeatable in solve)")
        p.add_argument("--jobs", type=int, help="parallel patch workers")
        p.add_argument("--out", help="output directory")
        p.add_argument("--archive", help="archive file path")
        p.add_argument("--seed", type=int, help="reserved for sampled layouts")

    p_off = sub.add_parser("offline", help="greedy training, writes the archive")
    add_common(p_off)
    p_sol = sub.add_parser("solve", help="online solve from a prebuilt archive")
    add_common(p_sol)
    p_sol.add_argument("--reference", action="store_true",
                       help="also solve the global fine problem and report errors")
    p_ref = sub.add_parser("reference", help="global fine-scale solve only")
    add_common(p_ref)
    p_study = sub.add_parser("study", help="parameter studies emitting CSV tables")
    p_study.add_argument("kind", choices=("ell_decay", "h_convergence", "tol_sweep"))
    add_common(p_study)
    p_study.add_argument("--ells", help="comma-separated oversampling schedule")
    p_study.add_argument("--ns", help="comma-separated coarse sizes")
    p_study.add_argument("--tols", help="comma-separated tolerances")
    p_study.add_argument("--h-exp", dest="h_exp", type=int,
                         help="fine mesh exponent, h = 2^-h_exp")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_sources(args)
        if args.command == "offline":
            return cmd_offline(config)
        if args.command == "solve":
            return cmd_solve(config)
        if args.command == "reference":
            return cmd_reference(config)
        if args.command == "study":
            return cmd_study(config, args.kind)
        raise errors.ConfigError(f"unknown command {args.command!r}")
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except errors.RBSLODError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
