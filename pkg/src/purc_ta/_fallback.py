"""Pure numpy implementation of one dual-ascent iteration.

Mirrors ``_ckernels.iterate``; also handles any perturbation function, while
the compiled kernel is specialised to the entropy perturbation.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .purc import ENTROPY


def incidence_matrices(tail, head, n_nodes):
    """Sparse ``A`` (-1 at tail, +1 at head) and ``|A|``."""
    n_links = tail.shape[0]
    cols = np.concatenate([np.arange(n_links), np.arange(n_links)])
    rows = np.concatenate([tail, head])
    a = sp.csr_matrix((np.concatenate([-np.ones(n_links), np.ones(n_links)]), (rows, cols)),
                      shape=(n_nodes, n_links))
    return a, abs(a).tocsr()


def node_balance(x, a, orig, dest):
    """Per-unit gradient ``A x^w - b^w`` for every type, shape ``(W, V)``."""
    g = np.asarray((a @ x.T).T)
    rows = np.arange(x.shape[0])
    g[rows, orig] += 1.0
    g[rows, dest] -= 1.0
    return g


def incident_sum(vals, abs_a):
    """Per-node sum of ``vals`` over incident links (in or out)."""
    return np.asarray((abs_a @ vals.T).T)


def link_times(X, t0, cap, beta, power):
    return t0 * (1.0 + beta * (X / cap) ** power)


def link_times_deriv(X, t0, cap, beta, power):
    return t0 * beta * power * X ** (power - 1.0) / cap ** power


def link_integral(X, t0, cap, beta, power):
    return t0 * (X + beta * X ** (power + 1.0) / ((power + 1.0) * cap ** power))


def iterate(eta, eta_tilde, tstar, x, tail, head, t0, cap, beta, power,
            q, theta, zweight, orig, dest, clip, scaled, step, momentum, gamma2,
            theta_ref, threads=0, perturbation=ENTROPY, incidence=None):
    """Run loading, potential update and travel-time update in place.

    Returns ``(n_clamped, n_skipped, R1, R2, Z, G)`` where R1 and the
    objectives refer to the flows loaded at the incoming potentials.
    """
    n_types, n_nodes = eta.shape
    n_links = tail.shape[0]
    rows = np.arange(n_types)
    a, abs_a = incidence if incidence is not None else incidence_matrices(tail, head, n_nodes)

    # loading
    y = eta[:, tail] - eta[:, head] - theta[:, None] * tstar[None, :]
    y, n_clamped = perturbation.clamp(y)
    xl = perturbation.inv_deriv(y)
    if clip:
        np.minimum(xl, 1.0, out=xl)
    x[...] = xl

    grad = node_balance(x, a, orig, dest)
    curv = perturbation.curvature_inv(x)

    # objectives at the loaded flows and incoming potentials
    fsum = perturbation.value(x).sum(axis=1)
    multiplier = ((eta[:, tail] - eta[:, head]) * x).sum(axis=1) + eta[rows, dest] - eta[rows, orig]
    r1_rows = np.abs(grad).sum(axis=1)

    # potentials
    if scaled:
        den = incident_sum(curv, abs_a)
        direction = np.divide(grad, den, out=np.zeros_like(grad), where=den > 0)
        direction *= step
    else:
        direction = (step * q)[:, None] * grad
    # destination entries are never touched
    keep_eta, keep_tilde = eta[rows, dest], eta_tilde[rows, dest]
    new_tilde = eta + direction
    eta[...] = new_tilde + momentum * (new_tilde - eta_tilde)
    eta_tilde[...] = new_tilde
    eta[rows, dest] = keep_eta
    eta_tilde[rows, dest] = keep_tilde

    # travel times: one damped Newton step on t(X) - t* = 0
    X = q @ x
    S = (q * theta) @ np.where(x > 0, curv, 0.0)
    tX = link_times(X, t0, cap, beta, power)
    U = tX - tstar
    dU = -link_times_deriv(X, t0, cap, beta, power) * S - 1.0
    ok = np.abs(dU) >= 1e-12
    n_skipped = int(n_links - np.count_nonzero(ok))
    newt = np.where(ok, tstar - gamma2 * U / np.where(ok, dU, 1.0), tstar)
    tstar[...] = np.maximum(newt, t0)

    total = q.sum()
    r1 = float(q @ r1_rows) / total / n_nodes if total > 0 else 0.0
    r2 = float(np.abs(tX - tstar).sum()) / n_links if n_links else 0.0
    z = theta_ref * float(link_integral(X, t0, cap, beta, power).sum()) + float((zweight * q) @ fsum)
    g = z - float((zweight * q) @ multiplier)
    return n_clamped, n_skipped, r1, r2, z, g
