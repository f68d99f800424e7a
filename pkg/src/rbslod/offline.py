"""Offline driver: greedy training over all patch classes into an archive.

Training tasks for distinct patch classes are independent; with jobs > 1
they run in forked worker processes (problems are reconstructed by name in
the workers since coefficient closures do not pickle).  Results are
collected in deterministic class-key order regardless of the worker count.
"""

from __future__ import annotations

import multiprocessing as mp

import numpy as np

from .archive import ClassRecord, OfflineArchive, SpaceRecord, problem_config_hash
from .localization import PatchOperators
from .mesh import (build_coarse_mesh, build_fine_mesh, build_patch,
                   patch_compute_classes, patch_element_set)
from .problems import get_problem
from .rboffline import GreedyConfig, greedy_train, precompute_trace_grams

_WORKER = {}


def train_class(problem, mesh, fine, ell, key, members, config):
    """Train every element of one patch class and assemble its flux Gram blocks."""
    patch = build_patch(mesh, fine, int(members[0]), ell, problem.bc)
    ops = PatchOperators(patch, problem, factor_cache=32)
    spaces = [greedy_train(ops, t, config) for t in range(patch.n_coarse)]
    grams = precompute_trace_grams(spaces, ops.trace.weights)
    records = [SpaceRecord.from_space(s) for s in spaces]
    return ClassRecord(tuple(int(v) for v in key), np.asarray(members, dtype=np.int64),
                       grams.offsets, grams.matrix, records)


def _init_worker(problem_name, n, r, ell, training, tol, max_m):
    mesh = build_coarse_mesh(n)
    _WORKER.update(
        problem=get_problem(problem_name),
        mesh=mesh,
        fine=build_fine_mesh(mesh, r),
        ell=ell,
        config=GreedyConfig(tol=tol, training=training, max_m=max_m),
    )


def _run_class(task):
    key, members = task
    return train_class(_WORKER["problem"], _WORKER["mesh"], _WORKER["fine"],
                       _WORKER["ell"], key, members, _WORKER["config"])


def train_offline(problem, n, r, ell, training, tol, max_m=60, jobs=1,
                  training_descriptor=""):
    """Run the full offline phase and return the archive (not yet written to disk)."""
    mesh = build_coarse_mesh(n)
    fine = build_fine_mesh(mesh, r)
    classes = patch_compute_classes(mesh, ell)
    tasks = list(classes.items())
    config = GreedyConfig(tol=tol, training=training, max_m=max_m)

    if jobs > 1 and len(tasks) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(jobs, len(tasks)), initializer=_init_worker,
                      initargs=(problem.name, n, r, ell, config.training,
                                tol, max_m)) as pool:
            records = pool.map(_run_class, tasks, chunksize=1)
    else:
        records = [train_class(problem, mesh, fine, ell, key, members, config)
                   for key, members in tasks]

    return OfflineArchive(
        n=n, r=r, ell=ell, tol=tol, max_m=max_m,
        problem_name=problem.name,
        problem_hash=problem_config_hash(problem, n, r, ell),
        training_descriptor=training_descriptor,
        classes=records,
    )


def training_history_rows(archive):
    """(K, T, M, trerr) rows over all class representatives, for the CSV report.

    K is the representative coarse element of the class, T the global index
    of the trained patch element.
    """
    mesh = archive.coarse_mesh()
    rows = []
    for rec in archive.classes:
        k_rep = int(rec.members[0])
        elems = patch_element_set(mesh, k_rep, archive.ell)
        for space in rec.spaces:
            t_global = int(elems[space.element])
            for m, err in enumerate(space.history, start=1):
                rows.append((k_rep, t_global, m, float(err)))
    return rows
