"""Shared fixtures; the expensive continuation runs are session-scoped."""
import time

import numpy as np
import pytest

from pdecont.engine import cont, findbif, pmcont, swibra
from pdecont.library import make_state
from pdecont.mesh import Mesh

RUNTIMES = {}


def _timed(key, fn):
    t0 = time.perf_counter()
    out = fn()
    RUNTIMES[key] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def unit_square_2():
    """Two-triangle unit square (0,0)-(1,1)."""
    pts = [[0, 0], [1, 0], [1, 1], [0, 1]]
    tris = [[0, 1, 2], [0, 2, 3]]
    edges = [[0, 1, 1], [1, 2, 2], [2, 3, 3], [3, 0, 4]]
    return Mesh(pts, edges, tris, segment_count=4)


@pytest.fixture(scope="session")
def reference_triangle():
    return Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 1], [1, 2, 1], [2, 0, 1]],
                [[0, 1, 2]], segment_count=1)


@pytest.fixture(scope="session")
def bratu_run():
    """Full Bratu run over the fold and past the first simple bifurcation."""
    state, problem = make_state("bratu")
    _timed("bratu", lambda: cont(state, problem))
    return state, problem


@pytest.fixture(scope="session")
def bratu_branch_state(bratu_run):
    """State continued off the first Bratu bifurcation (the q branch)."""
    state, problem = bratu_run
    q = swibra(state.bifpoints[0], state, ds=0.05)
    q.settings.nsteps = 20
    q.settings.lammin = 0.1
    cont(q, problem)
    return q, problem


@pytest.fixture(scope="session")
def ac_run():
    """Allen-Cahn trivial branch with the first three bifurcations."""
    state, problem = make_state("ac")
    _timed("ac", lambda: cont(state, problem))
    return state, problem


@pytest.fixture(scope="session")
def ac_short_run():
    """Allen-Cahn run up to just past the first bifurcation (cheaper)."""
    state, problem = make_state("ac", settings=dict(nsteps=14, lammax=1.6))
    cont(state, problem)
    return state, problem


@pytest.fixture(scope="session")
def chem_run():
    state, problem = make_state("chemtax")
    _timed("chemtax", lambda: cont(state, problem))
    return state, problem


@pytest.fixture(scope="session")
def schnak_onset():
    state, problem = make_state("schnak")
    result = _timed("schnak", lambda: findbif(state, problem))
    return state, problem, result


@pytest.fixture(scope="session")
def schnak_stripe(schnak_onset):
    """Stripe branch continued from the Turing onset with pmcont."""
    state, problem, result = schnak_onset
    bif = result.bifpoint
    n_p = bif.mesh.n_points
    stripe = bif.phi1[:n_p] - bif.phi1[:n_p].mean()
    stripe = stripe / np.linalg.norm(stripe)
    q = swibra(bif, state, ds=-0.05)
    q.settings.nsteps = 18
    q.settings.mst = 3
    q.settings.resfac = 0.1
    q.settings.dsmax = 0.15
    q.settings.bifchecksw = 0
    q.settings.lammin = 2.4
    overlaps = []

    class Recorder:
        def log(self, msg):
            pass

        def bifurcation(self, *args):
            pass

        def accepted(self, st, rec):
            v = st.u[:n_p] - st.u[:n_p].mean()
            nv = np.linalg.norm(v)
            overlaps.append((rec.lam, 0.0 if nv == 0 else abs(v @ stripe) / nv))

    pmcont(q, problem, Recorder())
    return q, problem, overlaps
