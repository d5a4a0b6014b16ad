"""One-sided (Hestenes) Jacobi SVD for small dense matrices.

Columns of the working matrix are orthogonalised by plane rotations applied
in cyclic sweeps. Each sweep visits every column pair once using round-robin
(tournament) ordering, so the n/2 pairs of one round are disjoint and are
rotated together in one vectorised step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericError, ShapeError

MAX_SWEEPS = 60
ROTATION_TOL = 1e-15


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray  # (m, r)
    sigma: np.ndarray  # (r,) descending, >= 0
    vt: np.ndarray  # (r, n)

    @property
    def rank(self):
        return self.sigma.shape[0]


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair of range(n) once."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    k = len(idx)
    rounds = []
    for _ in range(k - 1):
        pairs = [(idx[i], idx[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p), max(p)) for p in pairs if -1 not in p]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _jacobi_tall(a):
    """Orthogonalise the columns of a (m >= n). Returns (A V, V, sweeps, residual)."""
    m, n = a.shape
    a = a.copy()
    v = np.eye(n)
    if n == 1:
        return a, v, 0, 0.0
    rounds = _round_robin(n)
    scale = float(np.max(np.sum(a * a, axis=0)))
    tiny = (np.finfo(float).eps * max(m, n)) ** 2 * scale
    residual = 0.0
    for sweep in range(1, MAX_SWEEPS + 1):
        residual = 0.0
        rotated = False
        for i, j in rounds:
            ai, aj = a[:, i], a[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            norm = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > ROTATION_TOL * norm) & (np.minimum(alpha, beta) > tiny)
            if not active.any():
                continue
            rel = np.abs(gamma[active]) / norm[active]
            residual = max(residual, float(rel.max()))
            rotated = True
            ia, ja = i[active], j[active]
            g, al, be = gamma[active], alpha[active], beta[active]
            zeta = (be - al) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = a[:, ia], a[:, ja]
            a[:, ia] = c * ai - s * aj
            a[:, ja] = s * ai + c * aj
            vi, vj = v[:, ia], v[:, ja]
            v[:, ia] = c * vi - s * vj
            v[:, ja] = s * vi + c * vj
        if not rotated:
            return a, v, sweep, residual
    raise ConvergenceError(
        f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (residual {residual:.3e})", residual)


def _complete_basis(q, valid):
    """Replace columns of q where ``valid`` is False by an orthonormal completion."""
    m, r = q.shape
    out = q.copy()
    keep = [k for k in range(r) if valid[k]]
    for k in range(r):
        if valid[k]:
            continue
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                for b in keep:
                    cand -= (out[:, b] @ cand) * out[:, b]
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                out[:, k] = cand / nrm
                keep.append(k)
                break
    return out


def _fix_signs(u, vt):
    """Make the largest-|.| entry of every u column non-negative (lowest row wins ties)."""
    rows = np.argmax(np.abs(u), axis=0)
    flip = u[rows, np.arange(u.shape[1])] < 0
    u = u.copy()
    vt = vt.copy()
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0
    return u, vt


def svd(w):
    """Thin SVD ``w = u @ diag(sigma) @ vt`` with r = min(m, n)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise NumericError("svd: input has non-finite entries")
    m, n = w.shape
    transposed = m < n
    a = w.T if transposed else w
    av, v, _, _ = _jacobi_tall(a)
    sigma = np.sqrt(np.einsum("ij,ij->j", av, av))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    av = av[:, order]
    v = v[:, order]
    cutoff = np.finfo(float).eps * max(m, n) * (sigma[0] if sigma.size else 0.0)
    valid = sigma > cutoff
    q = np.zeros_like(av)
    q[:, valid] = av[:, valid] / sigma[valid]
    if not valid.all():
        q = _complete_basis(q, valid)
    if transposed:
        u, vt = v, q.T
    else:
        u, vt = q, v.T
    u, vt = _fix_signs(u, vt)
    return SvdFactors(u=u, sigma=sigma, vt=vt)


def reconstruct(f):
    return (f.u * f.sigma) @ f.vt


def spectrum_stats(f, eps=1e-8):
    """Numerical rank at tolerance eps * sigma_1 and cumulative energy fractions."""
    s = np.asarray(f.sigma, dtype=np.float64)
    top = s[0] if s.size else 0.0
    rank = int(np.sum(s > eps * top)) if top > 0 else 0
    energy = s * s
    total = energy.sum()
    fractions = np.cumsum(energy) / total if total > 0 else np.zeros_like(s)
    return {"rank_eps": rank, "energy_fractions": fractions}
