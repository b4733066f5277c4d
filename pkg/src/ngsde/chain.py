"""Gaussian Markov chain exponential family on a time grid.

The variational posterior over x_0..x_T is parameterized by natural
parameters (h, J, L) with density

    q(x_{0:T}) = exp( -1/2 sum_i x_i^T J_i x_i - sum_i x_{i+1}^T L_i x_i
                      + sum_i h_i^T x_i - A(h, J, L) ),

so the full precision matrix is block tridiagonal with diagonal blocks J_i
and sub-diagonal blocks L_i.  The log normalizer A is computed either by
sequential forward elimination (O(D^3 T)) or by an associative scan over
two-endpoint Gaussian potentials (O(D^3 log T) depth); both routes also
yield the mean parameters

    mu_{i,1} = m_i,   mu_{i,2} = S_i + m_i m_i^T,
    mu_{i,3} = S_{i+1,i} + m_{i+1} m_i^T,

where S_{i+1,i} = Cov(x_{i+1}, x_i).

All operations accept arbitrary leading batch dimensions on the parameter
arrays, e.g. h of shape (n_trials, T+1, D).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import NotPositiveDefinite
from .linalg import chol_pd, logdet_from_chol, solve_pd, inv_pd, symmetrize
from .parallel import SERIAL

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NaturalParams:
    """Natural parameters (h, J, L) of the chain.

    Shapes: h (..., T+1, D); J (..., T+1, D, D) symmetric; L (..., T, D, D).
    For a single-node chain (T = 0), L has a zero-length time axis.
    """

    h: np.ndarray
    J: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        J = symmetrize(np.asarray(self.J, dtype=float))
        L = np.asarray(self.L, dtype=float)
        if J.shape[:-1] != h.shape or J.shape[-1] != h.shape[-1]:
            raise ValueError("J must have shape h.shape + (D,)")
        expected_L = h.shape[:-2] + (h.shape[-2] - 1,) + (h.shape[-1],) * 2
        if L.shape != expected_L:
            raise ValueError(f"L must have shape {expected_L}, got {L.shape}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "L", L)

    @property
    def num_steps(self):
        return self.h.shape[-2] - 1

    @property
    def dim(self):
        return self.h.shape[-1]

    @property
    def batch_shape(self):
        return self.h.shape[:-2]

    def map_batch(self, idx):
        """Select a batch entry (returns a view-backed NaturalParams)."""
        return NaturalParams(self.h[idx], self.J[idx], self.L[idx])

    def save(self, path):
        np.savez(path, h=self.h, J=self.J, L=self.L)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(h=data["h"], J=data["J"], L=data["L"])


@dataclass(frozen=True)
class MeanParams:
    """Mean parameters (m, mu2, mu3) of the chain, batch-aware like
    :class:`NaturalParams`."""

    m: np.ndarray
    mu2: np.ndarray
    mu3: np.ndarray

    @property
    def covs(self):
        """Marginal covariances S_i = mu2_i - m_i m_i^T."""
        return symmetrize(self.mu2 - self.m[..., :, None] * self.m[..., None, :])

    @property
    def cross_covs(self):
        """Lag-one covariances S_{i+1,i} = mu3_i - m_{i+1} m_i^T."""
        return self.mu3 - self.m[..., 1:, :, None] * self.m[..., :-1, None, :]

    @classmethod
    def from_moments(cls, m, covs, cross_covs):
        m = np.asarray(m, dtype=float)
        covs = np.asarray(covs, dtype=float)
        mu2 = covs + m[..., :, None] * m[..., None, :]
        mu3 = np.asarray(cross_covs, dtype=float) + (
            m[..., 1:, :, None] * m[..., :-1, None, :]
        )
        return cls(m=m, mu2=mu2, mu3=mu3)

    def save(self, path):
        np.savez(path, m=self.m, mu2=self.mu2, mu3=self.mu3)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(m=data["m"], mu2=data["mu2"], mu3=data["mu3"])


# ---------------------------------------------------------------------------
# two-endpoint Gaussian potentials and the associative combine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPotential:
    """Unnormalized Gaussian potential over an ordered variable pair (x_l, x_r):

        exp( logZ - 1/2 x_l^T J1 x_l - 1/2 x_r^T J2 x_r - x_r^T L x_l
             + h1^T x_l + h2^T x_r ).

    The identity element (flagged) behaves like a Dirac coupling: combining
    with it returns the other operand unchanged, which is what padding an
    associative scan requires.
    """

    J1: np.ndarray
    J2: np.ndarray
    L: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    logZ: float = 0.0
    is_identity: bool = False

    @classmethod
    def identity(cls, dim):
        z = np.zeros((dim, dim))
        v = np.zeros(dim)
        return cls(J1=z, J2=z.copy(), L=z.copy(), h1=v, h2=v.copy(),
                   logZ=0.0, is_identity=True)

    @property
    def dim(self):
        return self.h1.shape[-1]


def combine_potentials(a, b):
    """Marginalize the shared middle variable of two adjacent potentials.

    For a over (x_i, x_j) and b over (x_j, x_k), returns the potential over
    (x_i, x_k) obtained by integrating out x_j.  Raises
    :class:`NotPositiveDefinite` when a.J2 + b.J1 fails factorization.
    """
    if a.is_identity:
        return b
    if b.is_identity:
        return a
    res = _combine_arrays(
        (a.J1, a.J2, a.L, a.h1, a.h2, np.asarray(a.logZ, dtype=float)),
        (b.J1, b.J2, b.L, b.h1, b.h2, np.asarray(b.logZ, dtype=float)),
    )
    return GaussianPotential(J1=res[0], J2=res[1], L=res[2], h1=res[3],
                             h2=res[4], logZ=float(res[5]))


def _combine_arrays(a, b):
    """Batched potential combine; operands are (J1, J2, L, h1, h2, logZ) tuples."""
    aJ1, aJ2, aL, ah1, ah2, alogZ = a
    bJ1, bJ2, bL, bh1, bh2, blogZ = b
    d = ah1.shape[-1]
    Jc = aJ2 + bJ1
    chol = chol_pd(Jc)
    logdet = logdet_from_chol(chol)
    hc = ah2 + bh1
    # one batched solve for all right-hand sides: [hc | a.L | b.L^T]
    rhs = np.concatenate(
        [hc[..., :, None], aL, np.swapaxes(bL, -1, -2)], axis=-1
    )
    sol = np.linalg.solve(symmetrize(Jc), rhs)
    sol_h = sol[..., 0]
    sol_aL = sol[..., 1:1 + d]
    sol_bLT = sol[..., 1 + d:]
    aLT = np.swapaxes(aL, -1, -2)
    J1 = symmetrize(aJ1 - aLT @ sol_aL)
    J2 = symmetrize(bJ2 - bL @ sol_bLT)
    Lnew = -(bL @ sol_aL)
    h1 = ah1 - np.einsum("...ji,...j->...i", aL, sol_h)
    h2 = bh2 - np.einsum("...ij,...j->...i", bL, sol_h)
    logZ = (
        alogZ + blogZ + 0.5 * d * LOG_2PI - 0.5 * logdet
        + 0.5 * np.einsum("...i,...i->...", hc, sol_h)
    )
    return J1, J2, Lnew, h1, h2, logZ


def _marginalize_right(J1, J2, L, h1, h2, logZ):
    """Integrate the right variable out of a pair potential.

    Returns (J, h, logc) for the remaining potential over the left variable.
    """
    d = h1.shape[-1]
    chol = chol_pd(J2)
    logdet = logdet_from_chol(chol)
    rhs = np.concatenate([h2[..., :, None], L], axis=-1)
    sol = np.linalg.solve(symmetrize(J2), rhs)
    sol_h, sol_L = sol[..., 0], sol[..., 1:]
    LT = np.swapaxes(L, -1, -2)
    J = symmetrize(J1 - LT @ sol_L)
    h = h1 - np.einsum("...ji,...j->...i", L, sol_h)
    logc = (
        logZ + 0.5 * d * LOG_2PI - 0.5 * logdet
        + 0.5 * np.einsum("...i,...i->...", h2, sol_h)
    )
    return J, h, logc


def _gauss_integral(J, h):
    """log of int exp(-1/2 x^T J x + h^T x) dx for PD J."""
    d = h.shape[-1]
    chol = chol_pd(J)
    logdet = logdet_from_chol(chol)
    sol = np.linalg.solve(symmetrize(J), h[..., :, None])[..., 0]
    return 0.5 * d * LOG_2PI - 0.5 * logdet + 0.5 * np.einsum(
        "...i,...i->...", h, sol
    )


def _chain_elements(eta):
    """Stack the per-step scan elements a_{i-1,i}, i = 0..T.

    Element i is a potential over (x_{i-1}, x_i) with J2 = J_i, h2 = h_i and
    cross block L_{i-1} (zero for i = 0; x_{-1} is a vacuous slot).
    """
    h, J, L = eta.h, eta.J, eta.L
    batch = h.shape[:-2]
    n, d = h.shape[-2], h.shape[-1]
    zJ = np.zeros(batch + (n, d, d))
    zh = np.zeros(batch + (n, d))
    Lfull = np.zeros(batch + (n, d, d))
    if n > 1:
        Lfull[..., 1:, :, :] = L
    logZ = np.zeros(batch + (n,))
    return (zJ, J.copy(), Lfull, zh, h.copy(), logZ)


# per-field distance of the time axis from the end: (J1, J2, L, h1, h2, logZ)
_TIME_AXES = (-3, -3, -3, -2, -2, -1)


def _take_time(pots, sl):
    """Slice the time axis of each stacked potential field."""
    out = []
    for p, ax in zip(pots, _TIME_AXES):
        idx = [slice(None)] * p.ndim
        idx[ax] = sl
        out.append(p[tuple(idx)])
    return tuple(out)


def _set_time(pots, sl, values):
    for p, v, ax in zip(pots, values, _TIME_AXES):
        idx = [slice(None)] * p.ndim
        idx[ax] = sl
        p[tuple(idx)] = v


def _empty_like_time(pots, n):
    out = []
    for p, ax in zip(pots, _TIME_AXES):
        shape = list(p.shape)
        shape[ax + p.ndim] = n
        out.append(np.empty(shape, dtype=p.dtype))
    return out


def _scan_work_efficient(pots, ctx, flip):
    """Recursive pairwise inclusive scan (work-efficient, O(log n) depth).

    Adjacent elements are contracted pairwise, the half-length sequence is
    scanned recursively, and the odd positions are filled with one more
    batched combine -- O(n) combines total, issued as O(log n) batched
    C-level calls.  ``flip`` reverses the operand order of the combine,
    which together with a time-reversal of the inputs yields suffix scans.
    """
    n = pots[5].shape[-1]
    if n == 1:
        return tuple(np.array(p, copy=True) for p in pots)
    half = n // 2
    even = _take_time(pots, slice(0, 2 * half, 2))
    odd = _take_time(pots, slice(1, 2 * half, 2))
    paired = (_combine_level(odd, even, ctx) if flip
              else _combine_level(even, odd, ctx))
    scanned = _scan_work_efficient(paired, ctx, flip)
    out = _empty_like_time(pots, n)
    _set_time(out, slice(1, 2 * half, 2), scanned)
    _set_time(out, slice(0, 1), _take_time(pots, slice(0, 1)))
    rest = _take_time(pots, slice(2, n, 2))
    k = rest[5].shape[-1]
    if k:
        prev = _take_time(scanned, slice(0, k))
        fills = (_combine_level(rest, prev, ctx) if flip
                 else _combine_level(prev, rest, ctx))
        _set_time(out, slice(2, n, 2), fills)
    return tuple(out)


def _scan_inclusive(pots, reverse=False, ctx=None):
    """Inclusive associative scan over the time axis of stacked potentials.

    Forward: out[i] = e_0 * e_1 * ... * e_i.
    Reverse: out[i] = e_i * e_{i+1} * ... * e_{n-1}.
    Realized as a work-efficient pairwise-contraction scan: O(n) combines
    total issued in O(log n) batched levels; ``ctx`` may additionally split
    each level's batch across worker threads.
    """
    ctx = ctx or SERIAL
    if not reverse:
        return _scan_work_efficient(pots, ctx, flip=False)
    flipped = _take_time(pots, slice(None, None, -1))
    scanned = _scan_work_efficient(flipped, ctx, flip=True)
    return _take_time(scanned, slice(None, None, -1))


def _combine_level(left, right, ctx):
    """Combine aligned slabs of potentials, optionally chunked across threads."""
    slices = ctx.chunk_slices(left[5].shape[-1])
    if len(slices) == 1:
        return _combine_arrays(left, right)
    outs = ctx.map(
        lambda sl: _combine_arrays(_take_time(left, sl), _take_time(right, sl)),
        slices,
    )
    return tuple(
        np.concatenate([o[k] for o in outs], axis=_TIME_AXES[k]) for k in range(6)
    )


# ---------------------------------------------------------------------------
# log normalizer
# ---------------------------------------------------------------------------


def _forward_eliminate(eta):
    """Sequential forward elimination along the chain.

    Returns (logZ, Wc, wc) where Wc[i], wc[i] are the conditional precision
    and linear coefficient of x_i given x_{i+1} after eliminating x_0..x_{i-1}:
    q(x_i | x_{i+1}) has precision Wc[i] and mean Wc[i]^{-1}(wc[i] - L_i^T x_{i+1}).
    """
    h, J, L = eta.h, eta.J, eta.L
    batch = h.shape[:-2]
    n, d = h.shape[-2], h.shape[-1]
    Wc = np.empty(batch + (n, d, d))
    wc = np.empty(batch + (n, d))
    logZ = np.zeros(batch)
    Jp = np.zeros(batch + (d, d))
    hp = np.zeros(batch + (d,))
    for i in range(n):
        Ji = symmetrize(J[..., i, :, :] + Jp)
        hi = h[..., i, :] + hp
        chol = chol_pd(Ji, index=i)
        logdet = logdet_from_chol(chol)
        if i < n - 1:
            Li = L[..., i, :, :]
            rhs = np.concatenate(
                [hi[..., :, None], np.swapaxes(Li, -1, -2)], axis=-1
            )
            sol = np.linalg.solve(Ji, rhs)
            sol_h, sol_LT = sol[..., 0], sol[..., 1:]
            Jp = -symmetrize(Li @ sol_LT)
            hp = -np.einsum("...ij,...j->...i", Li, sol_h)
        else:
            sol_h = np.linalg.solve(Ji, hi[..., :, None])[..., 0]
        logZ = logZ + (
            0.5 * d * LOG_2PI - 0.5 * logdet
            + 0.5 * np.einsum("...i,...i->...", hi, sol_h)
        )
        Wc[..., i, :, :] = Ji
        wc[..., i, :] = hi
    return logZ, Wc, wc


def log_normalizer_sequential(eta):
    """A(eta) by forward elimination; O(D^3 T) sequential work."""
    logZ, _, _ = _forward_eliminate(eta)
    return logZ if logZ.shape else float(logZ)


def log_normalizer_parallel(eta, ctx=None):
    """A(eta) via the associative potential scan; O(D^3 log T) depth."""
    pots = _chain_elements(eta)
    prefix = _scan_inclusive(pots, reverse=False, ctx=ctx)
    n = eta.num_steps + 1
    last = _take_time(prefix, slice(n - 1, n))
    # final marginalization of x_T (the flat dummy element a_{T,T+1})
    J2 = last[1][..., 0, :, :]
    h2 = last[4][..., 0, :]
    logZ = last[5][..., 0] + _gauss_integral(J2, h2)
    return logZ if logZ.shape else float(logZ)


# ---------------------------------------------------------------------------
# natural -> mean conversion
# ---------------------------------------------------------------------------


def _marginals_sequential(eta):
    """Marginals via forward elimination plus backward RTS-style recursion."""
    _, Wc, wc = _forward_eliminate(eta)
    h, J, L = eta.h, eta.J, eta.L
    batch = h.shape[:-2]
    n, d = h.shape[-2], h.shape[-1]
    m = np.empty(batch + (n, d))
    S = np.empty(batch + (n, d, d))
    X = np.empty(batch + (max(n - 1, 0), d, d))
    Wn = symmetrize(Wc[..., n - 1, :, :])
    Sn = inv_pd(Wn, index=n - 1)
    S[..., n - 1, :, :] = symmetrize(Sn)
    m[..., n - 1, :] = np.einsum("...ij,...j->...i", Sn, wc[..., n - 1, :])
    for i in range(n - 2, -1, -1):
        Wi = Wc[..., i, :, :]
        Li = L[..., i, :, :]
        rhs = np.concatenate(
            [wc[..., i, :, None], np.swapaxes(Li, -1, -2),
             np.broadcast_to(np.eye(d), Wi.shape)],
            axis=-1,
        )
        sol = np.linalg.solve(Wi, rhs)
        mi0 = sol[..., 0]           # Wc^{-1} wc
        G = -sol[..., 1:1 + d]      # gain -Wc^{-1} L^T
        Winv = sol[..., 1 + d:]
        m_next = m[..., i + 1, :]
        S_next = S[..., i + 1, :, :]
        m[..., i, :] = mi0 + np.einsum("...ij,...j->...i", G, m_next)
        S[..., i, :, :] = symmetrize(Winv + G @ S_next @ np.swapaxes(G, -1, -2))
        X[..., i, :, :] = S_next @ np.swapaxes(G, -1, -2)
    return MeanParams.from_moments(m, S, X)


def _marginals_parallel(eta, ctx=None):
    """Marginals via a forward prefix scan plus a backward suffix scan.

    For each index, the prefix potential summarizes all factors up to and
    including a_{i-1,i}; the integrated suffix potential summarizes all
    later factors.  Their fusion gives the marginal, and fusing
    (prefix_i, a_{i,i+1}, suffix_{i+1}) gives the pairwise joint used for
    lag-one cross covariances.
    """
    h, J, L = eta.h, eta.J, eta.L
    batch = h.shape[:-2]
    n, d = h.shape[-2], h.shape[-1]
    pots = _chain_elements(eta)
    prefix = _scan_inclusive(pots, reverse=False, ctx=ctx)
    Jf = prefix[1]
    hf = prefix[4]
    Jb = np.zeros(batch + (n, d, d))
    hb = np.zeros(batch + (n, d))
    if n > 1:
        tail = _take_time(pots, slice(1, n))
        suffix = _scan_inclusive(tail, reverse=True, ctx=ctx)
        Jb_part, hb_part, _ = _marginalize_right(*suffix)
        Jb[..., : n - 1, :, :] = Jb_part
        hb[..., : n - 1, :] = hb_part
    # marginals: precision Jf + Jb, linear term hf + hb
    P = symmetrize(Jf + Jb)
    chol_pd(P)
    sol = np.linalg.solve(P, np.concatenate(
        [(hf + hb)[..., :, None], np.broadcast_to(np.eye(d), P.shape)], axis=-1
    ))
    m = sol[..., 0]
    S = symmetrize(sol[..., 1:])
    if n == 1:
        X = np.zeros(batch + (0, d, d))
        return MeanParams.from_moments(m, S, X)
    # pairwise joints over (x_i, x_{i+1}), i = 0..T-1
    Jf_l = Jf[..., :-1, :, :]
    hf_l = hf[..., :-1, :]
    Jr = J[..., 1:, :, :] + Jb[..., 1:, :, :]
    hr = h[..., 1:, :] + hb[..., 1:, :]
    joint = np.zeros(batch + (n - 1, 2 * d, 2 * d))
    joint[..., :d, :d] = Jf_l
    joint[..., d:, d:] = Jr
    joint[..., d:, :d] = L
    joint[..., :d, d:] = np.swapaxes(L, -1, -2)
    joint = symmetrize(joint)
    chol_pd(joint)
    cov = np.linalg.inv(joint)
    X = cov[..., d:, :d]
    return MeanParams.from_moments(m, S, X)


def natural_to_mean(eta, method="sequential", ctx=None):
    """Mean parameters (gradient of the log normalizer) of the chain.

    ``method`` selects the sequential block-tridiagonal solve or the
    parallel prefix/suffix potential scans; both agree to tight tolerance
    and raise :class:`NotPositiveDefinite` on invalid parameters.
    """
    if method == "sequential":
        return _marginals_sequential(eta)
    if method == "parallel":
        return _marginals_parallel(eta, ctx=ctx)
    raise ValueError(f"unknown conversion method: {method}")


# ---------------------------------------------------------------------------
# inner products, KL divergence, entropy
# ---------------------------------------------------------------------------


def natural_mean_inner(eta, mu):
    """<eta, mu> in the (h, -J/2, -L) pairing against (x, x x^T, x_{i+1} x_i^T)."""
    term_h = np.einsum("...id,...id->...", eta.h, mu.m)
    term_J = -0.5 * np.einsum("...iab,...iab->...", eta.J, mu.mu2)
    term_L = -np.einsum("...iab,...iab->...", eta.L, mu.mu3)
    return term_h + term_J + term_L


def entropy(eta, mu=None, method="sequential", ctx=None):
    """Differential entropy of the chain: A(eta) - <eta, mu>."""
    if mu is None:
        mu = natural_to_mean(eta, method=method, ctx=ctx)
    A = (log_normalizer_parallel(eta, ctx=ctx) if method == "parallel"
         else log_normalizer_sequential(eta))
    return A - natural_mean_inner(eta, mu)


def kl_divergence(eta1, eta2, mu1=None, method="sequential", ctx=None):
    """KL(q(eta1) || q(eta2)) = <eta1 - eta2, mu1> - A(eta1) + A(eta2)."""
    if mu1 is None:
        mu1 = natural_to_mean(eta1, method=method, ctx=ctx)
    diff = NaturalParams(
        h=eta1.h - eta2.h, J=eta1.J - eta2.J, L=eta1.L - eta2.L
    )
    if method == "parallel":
        A1 = log_normalizer_parallel(eta1, ctx=ctx)
        A2 = log_normalizer_parallel(eta2, ctx=ctx)
    else:
        A1 = log_normalizer_sequential(eta1)
        A2 = log_normalizer_sequential(eta2)
    return natural_mean_inner(diff, mu1) - A1 + A2


# ---------------------------------------------------------------------------
# mean -> natural conversion (used by tests and baselines)
# ---------------------------------------------------------------------------


def mean_to_natural(mu):
    """Invert natural_to_mean through the Markov-chain factorization.

    The chain density factorizes as q(x_0) prod_i q(x_{i+1} | x_i); each
    conditional is recovered from the pairwise second moments, then the
    quadratic forms are accumulated into (h, J, L).
    """
    m = mu.m
    S = mu.covs
    X = mu.cross_covs
    batch = m.shape[:-2]
    n, d = m.shape[-2], m.shape[-1]
    J = np.zeros(batch + (n, d, d))
    h = np.zeros(batch + (n, d))
    L = np.zeros(batch + (max(n - 1, 0), d, d))
    S0 = S[..., 0, :, :]
    S0inv = inv_pd(S0, index=0)
    J[..., 0, :, :] += S0inv
    h[..., 0, :] += np.einsum("...ij,...j->...i", S0inv, m[..., 0, :])
    for i in range(n - 1):
        Si = S[..., i, :, :]
        Xi = X[..., i, :, :]
        F = np.swapaxes(solve_pd(Si, np.swapaxes(Xi, -1, -2), index=i), -1, -2)
        Q = symmetrize(S[..., i + 1, :, :] - F @ np.swapaxes(Xi, -1, -2))
        Qinv = inv_pd(Q, index=i)
        b = m[..., i + 1, :] - np.einsum("...ij,...j->...i", F, m[..., i, :])
        QinvF = Qinv @ F
        J[..., i, :, :] += symmetrize(np.swapaxes(F, -1, -2) @ QinvF)
        J[..., i + 1, :, :] += Qinv
        L[..., i, :, :] = -QinvF
        h[..., i, :] += -np.einsum("...ji,...j->...i", QinvF, b)
        h[..., i + 1, :] += np.einsum("...ij,...j->...i", Qinv, b)
    return NaturalParams(h=h, J=symmetrize(J), L=L)


# ---------------------------------------------------------------------------
# linear-SDE chains
# ---------------------------------------------------------------------------


def lds_chain(trans_A, trans_b, trans_Q, init_mean, init_cov):
    """Natural parameters of a linear-Gaussian chain.

    Transitions are x_{i+1} ~ N(trans_A[i] x_i + trans_b[i], trans_Q[i]) with
    x_0 ~ N(init_mean, init_cov).  Arrays may carry leading batch dims.
    """
    trans_A = np.asarray(trans_A, dtype=float)
    trans_b = np.asarray(trans_b, dtype=float)
    trans_Q = np.asarray(trans_Q, dtype=float)
    nt = trans_A.shape[-3]
    d = trans_A.shape[-1]
    batch = np.broadcast_shapes(
        trans_A.shape[:-3], np.shape(init_mean)[:-1]
    )
    n = nt + 1
    J = np.zeros(batch + (n, d, d))
    h = np.zeros(batch + (n, d))
    L = np.zeros(batch + (nt, d, d))
    Vinv = inv_pd(np.asarray(init_cov, dtype=float))
    J[..., 0, :, :] += Vinv
    h[..., 0, :] += np.einsum("...ij,...j->...i", Vinv, np.asarray(init_mean, dtype=float))
    Qinv = inv_pd(trans_Q)
    QinvA = Qinv @ trans_A
    Qinvb = np.einsum("...tij,...tj->...ti", Qinv, trans_b)
    J[..., :-1, :, :] += symmetrize(np.swapaxes(trans_A, -1, -2) @ QinvA)
    J[..., 1:, :, :] += Qinv
    L[...] = -QinvA
    h[..., :-1, :] += -np.einsum("...tji,...tj->...ti", QinvA, trans_b)
    h[..., 1:, :] += Qinvb
    return NaturalParams(h=h, J=symmetrize(J), L=L)


def em_discretize_linear(A, b, Sigma, deltas):
    """Euler-Maruyama transition system (Atil, btil, Q) of a linear SDE.

    Returns arrays of shape (T, D, D), (T, D), (T, D, D) for a drift
    f(x) = A x + b with diffusion covariance Sigma on the given step sizes.
    """
    deltas = np.asarray(deltas, dtype=float)
    d = A.shape[-1]
    eye = np.eye(d)
    Atil = eye + deltas[:, None, None] * A
    btil = deltas[:, None] * b
    Q = deltas[:, None, None] * Sigma
    return Atil, btil, Q
