"""Gaussian beliefs and their propagation.

The belief over the plant state is kept as a Gaussian (mean, covariance)
pair.  For black-box plants it is propagated with a stochastic
(perturbed-observation) Ensemble Kalman Filter; for linear plants the
exact Kalman recursions are available and double as the reference the
EnKF is tested against.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import FilterDegenerateError, InsufficientEnsembleError

__all__ = [
    "GaussianBelief",
    "Ensemble",
    "belief_from_ensemble",
    "sample_ensemble",
    "enkf_predict",
    "enkf_update",
    "kalman_predict",
    "kalman_update",
    "psd_sqrt",
]


def psd_sqrt(M):
    """A factor S with S @ S.T = M for symmetric PSD M.

    Cholesky when M is definite, eigen square root (negatives clipped)
    otherwise.
    """
    M = np.asarray(M, dtype=float)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(0.5 * (M + M.T))
        return Q * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class GaussianBelief:
    """Belief (mean, cov); construction re-symmetrizes the covariance and
    floors its spectrum at zero if it is indefinite beyond roundoff."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        n = self.mean.size
        if cov.shape != (n, n):
            raise ValueError(f"cov must be {n}x{n}, got {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        # cheap PSD probe; full eigen floor only when it fails
        jitter = 1e-12 * max(1.0, float(np.trace(cov)))
        try:
            np.linalg.cholesky(cov + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            w, Q = np.linalg.eigh(cov)
            cov = (Q * np.clip(w, 0.0, None)) @ Q.T
            cov = 0.5 * (cov + cov.T)
        self.cov = cov

    @property
    def dim(self):
        return self.mean.size


@dataclass
class Ensemble:
    """Particle representation of a belief: members has shape (M, n_x)."""

    members: np.ndarray

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members))
        if self.members.shape[0] < 2:
            raise InsufficientEnsembleError("ensemble needs at least 2 members")
        if not np.isfinite(np.sum(self.members)):
            raise ValueError("ensemble members must be finite")

    @property
    def size(self):
        return self.members.shape[0]

    @property
    def dim(self):
        return self.members.shape[1]


def belief_from_ensemble(ens):
    """Sample mean and unbiased (M-1 denominator) sample covariance."""
    members = ens.members if isinstance(ens, Ensemble) else np.atleast_2d(ens)
    M = members.shape[0]
    if M < 2:
        raise InsufficientEnsembleError("need at least 2 members for a covariance")
    mean = members.mean(axis=0)
    Xc = members - mean
    cov = Xc.T @ Xc / (M - 1)
    return GaussianBelief(mean, cov)


def sample_ensemble(belief, M, rng):
    """Draw an M-member ensemble from a GaussianBelief."""
    S = psd_sqrt(belief.cov)
    Z = rng.standard_normal((M, belief.dim))
    return Ensemble(belief.mean + Z @ S.T)


# ---------------------------------------------------------------------------
# Stochastic EnKF
# ---------------------------------------------------------------------------
#
# The public enkf_predict / enkf_update operate on Ensemble objects and
# draw their own noise.  The *_members kernels below them are the shared
# vectorized core: they take pre-drawn noise and broadcast over leading
# batch axes, which is what the trajectory optimizer's batched rollouts
# and the Monte Carlo engine use.  Both paths perform identical floating
# point operations.


def enkf_predict_members(members, control, w_draws, plant, k=0):
    """Propagate members (..., M, n_x) through plant.step with noise draws."""
    control = np.asarray(control)
    return plant.step(members, control[..., None, :], w_draws, k)


def enkf_update_members(members, y, v_draws, plant, V, k=0, inflation=1.0):
    """Perturbed-observation EnKF update, batched over leading axes.

    Gain K = P_xy (P_yy + V)^-1 from ensemble cross-covariances; each
    member is shifted by K (y + v_i - h(x_i, 0)).
    """
    M = members.shape[-2]
    xm = members.mean(axis=-2, keepdims=True)
    if inflation != 1.0:
        members = xm + inflation * (members - xm)
    Yp = plant.observe(members, 0.0, k)
    ym = Yp.mean(axis=-2, keepdims=True)
    Xc = members - xm
    Yc = Yp - ym
    fac = 1.0 / (M - 1)
    Pxy = np.swapaxes(Xc, -1, -2) @ Yc * fac
    Pyy = np.swapaxes(Yc, -1, -2) @ Yc * fac
    S = Pyy + V
    try:
        # K = Pxy S^-1, computed as solve(S, Pxy^T)^T with S symmetric
        Kt = np.linalg.solve(S, np.swapaxes(Pxy, -1, -2))
    except np.linalg.LinAlgError as e:
        raise FilterDegenerateError(f"innovation covariance singular at step k={k}") from e
    innov = np.asarray(y)[..., None, :] + v_draws - Yp
    return members + innov @ Kt


def enkf_predict(ens, control, plant, rng_stream, k=0):
    """One EnKF forecast: each member stepped with its own w ~ N(0, W)."""
    W_sqrt = psd_sqrt(plant.spec.W)
    w = rng_stream.standard_normal((ens.size, plant.n_u)) @ W_sqrt.T
    return Ensemble(enkf_predict_members(ens.members, control, w, plant, k))


def enkf_update(ens, measurement, plant, rng_stream, k=0, inflation=1.0):
    """One perturbed-observation analysis with draws v_i ~ N(0, V)."""
    V = plant.spec.V
    V_sqrt = psd_sqrt(V)
    v = rng_stream.standard_normal((ens.size, plant.n_y)) @ V_sqrt.T
    updated = enkf_update_members(ens.members, measurement, v, plant, V, k, inflation)
    return Ensemble(updated)


# ---------------------------------------------------------------------------
# Exact Kalman recursions (linear plants)
# ---------------------------------------------------------------------------


def kalman_predict(belief, control, A, B, W):
    """mu' = A mu + B u,  P' = A P A' + B W B'."""
    mean = A @ belief.mean + B @ np.asarray(control, dtype=float)
    cov = A @ belief.cov @ A.T + B @ W @ B.T
    return GaussianBelief(mean, cov)


def kalman_update(belief, measurement, C, V):
    """Standard measurement update with the Joseph-form covariance."""
    P = belief.cov
    S = C @ P @ C.T + V
    try:
        K = np.linalg.solve(S, C @ P).T
    except np.linalg.LinAlgError as e:
        raise FilterDegenerateError("innovation covariance singular") from e
    mean = belief.mean + K @ (np.asarray(measurement, dtype=float) - C @ belief.mean)
    IKC = np.eye(P.shape[0]) - K @ C
    cov = IKC @ P @ IKC.T + K @ V @ K.T
    return GaussianBelief(mean, cov)
