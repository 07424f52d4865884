"""Open-loop trajectory optimization in belief space.

Minimizes a quadratic belief-space cost over the control sequence by
plain gradient descent with backtracking,

    U <- U - alpha * grad J(U),

where J(U) is evaluated through a deterministic belief rollout: the
nominal observations come from the noiseless plant rollout under U, and
the belief is filtered against those observations (EnKF for black-box
plants, exact Kalman filter for linear ones).  With a fixed seed the
map U -> J(U) is deterministic, so central finite differences with
common random numbers give a consistent gradient.

The finite-difference evaluation is the hot path: 2*N*n_u rollouts per
gradient.  Rollouts perturbed at time j share the baseline trajectory
bit-exactly up to j, so the engine below snapshots the baseline once and
spawns each perturbed rollout at its perturbation time, halving the
work; noise draws are pre-generated per step and shared by every
rollout (common random numbers).
"""

from dataclasses import dataclass, field
import json

import numpy as np

from .belief import (
    GaussianBelief,
    belief_from_ensemble,
    enkf_predict_members,
    enkf_update_members,
    psd_sqrt,
)
from .exceptions import GradientEvaluationError
from .rng import stream

__all__ = [
    "CostSpec",
    "NominalTrajectory",
    "OptimizeOptions",
    "nominal_cost",
    "rollout_belief",
    "gradient_fd",
    "optimize",
]


def _sym_check(M, name, positive=False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(M)
    if positive and w.min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    if not positive and w.min() < -1e-10:
        raise ValueError(f"{name} must be positive semi-definite")
    return M


@dataclass(frozen=True)
class CostSpec:
    """Quadratic belief-space cost.

    Stage k:  (mu_k - target)' Q_mean (mu_k - target)
              + q_trace * tr(Sigma_k) + u_k' R_u u_k
    Terminal: (mu_N - target)' Q_terminal (mu_N - target)
              + q_trace * tr(Sigma_N)
    """

    Q_mean: np.ndarray
    q_trace: float
    R_u: np.ndarray
    Q_terminal: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q_mean", _sym_check(self.Q_mean, "Q_mean"))
        object.__setattr__(self, "Q_terminal", _sym_check(self.Q_terminal, "Q_terminal"))
        object.__setattr__(self, "R_u", _sym_check(self.R_u, "R_u", positive=True))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float).reshape(-1))
        if self.q_trace < 0:
            raise ValueError("q_trace must be >= 0")
        if self.target.size != self.Q_mean.shape[0]:
            raise ValueError("target length must match Q_mean")

    @classmethod
    def from_weights(cls, n_x, n_u, q_mean=1.0, r_u=1.0, q_terminal=1.0, q_trace=0.0, target=0.0):
        """Build diagonal weights from scalars or per-entry vectors."""

        def diag(v, n):
            v = np.asarray(v, dtype=float)
            return np.diag(np.full(n, float(v))) if v.ndim == 0 else np.diag(v)

        tgt = np.asarray(target, dtype=float)
        if tgt.ndim == 0:
            tgt = np.full(n_x, float(tgt))
        return cls(
            Q_mean=diag(q_mean, n_x),
            q_trace=float(q_trace),
            R_u=diag(r_u, n_u),
            Q_terminal=diag(q_terminal, n_x),
            target=tgt,
        )


@dataclass
class NominalTrajectory:
    """Optimized nominal: controls (N, n_u), means/covs/observations over
    k = 0..N, the nominal cost, and optimizer bookkeeping."""

    controls: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    observations: np.ndarray
    nominal_cost: float
    iterations: int
    converged: bool
    # accepted-iterate costs, in-memory diagnostic only (not serialized)
    cost_history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float)
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        n = self.controls.shape[0]
        for name, arr in (("means", self.means), ("covs", self.covs), ("observations", self.observations)):
            if arr.shape[0] != n + 1:
                raise ValueError(f"{name} must have length N+1 = {n + 1}, got {arr.shape[0]}")
        if not np.isfinite(self.nominal_cost):
            raise ValueError("nominal_cost must be finite")

    @property
    def horizon(self):
        return self.controls.shape[0]

    def beliefs(self):
        return [GaussianBelief(m, c) for m, c in zip(self.means, self.covs)]

    def to_json(self, path):
        payload = {
            "controls": self.controls.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "observations": self.observations.tolist(),
            "nominal_cost": float(self.nominal_cost),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            controls=np.asarray(payload["controls"], dtype=float),
            means=np.asarray(payload["means"], dtype=float),
            covs=np.asarray(payload["covs"], dtype=float),
            observations=np.asarray(payload["observations"], dtype=float),
            nominal_cost=payload["nominal_cost"],
            iterations=payload["iterations"],
            converged=payload["converged"],
        )


def _cost_from_arrays(means, covs_trace, controls, spec):
    """Total cost from stacked means (N+1, n_x), per-step covariance
    traces (N+1,) and controls (N, n_u)."""
    d = means - spec.target
    stage_state = np.einsum("ki,ij,kj->k", d[:-1], spec.Q_mean, d[:-1])
    term = d[-1] @ spec.Q_terminal @ d[-1]
    ctrl = np.einsum("ki,ij,kj->k", controls, spec.R_u, controls)
    total = stage_state.sum() + ctrl.sum() + term
    if spec.q_trace:
        total += spec.q_trace * covs_trace.sum()
    return float(total)


def nominal_cost(beliefs, controls, spec):
    """Cost of a belief trajectory under a control sequence."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if len(beliefs) != controls.shape[0] + 1:
        raise ValueError(f"need N+1 = {controls.shape[0] + 1} beliefs, got {len(beliefs)}")
    means = np.stack([b.mean for b in beliefs])
    if means.shape[1] != spec.target.size:
        raise ValueError("belief dimension does not match cost spec")
    traces = np.array([np.trace(b.cov) for b in beliefs])
    return _cost_from_arrays(means, traces, controls, spec)


# ---------------------------------------------------------------------------
# Rollout engines
# ---------------------------------------------------------------------------


class _EnkfEngine:
    """Batched deterministic EnKF rollouts with shared noise draws.

    All rollouts of one engine instance consume identical per-step
    draws, so costs are common-random-number comparable across control
    sequences.
    """

    def __init__(self, plant, b0, M, seed, inflation=1.0, dtype=np.float64):
        self.plant = plant
        self.b0 = b0
        self.M = int(M)
        self.seed = seed
        self.inflation = inflation
        self.dtype = np.dtype(dtype)
        N = plant.horizon
        W_s = psd_sqrt(plant.spec.W)
        V_s = psd_sqrt(plant.spec.V)
        g_init = stream(seed, "enkf-init")
        g_w = stream(seed, "enkf-w")
        g_v = stream(seed, "enkf-v")
        self.members0 = (b0.mean + g_init.standard_normal((self.M, plant.n_x)) @ psd_sqrt(b0.cov).T).astype(self.dtype)
        self.w_draws = (g_w.standard_normal((N, self.M, plant.n_u)) @ W_s.T).astype(self.dtype)
        self.v_draws = (g_v.standard_normal((N, self.M, plant.n_y)) @ V_s.T).astype(self.dtype)
        self.V = plant.spec.V.astype(self.dtype)

    def _step_batch(self, D, E, controls, k):
        """Advance det states D (B, n_x) and ensembles E (B, M, n_x) one
        step under controls (B, n_u); returns (D', E', y', post_means)."""
        plant = self.plant
        D_next = plant.step(D, controls, self.dtype.type(0.0), k)
        y_next = plant.observe(D_next, self.dtype.type(0.0), k + 1)
        E_pred = enkf_predict_members(E, controls, self.w_draws[k], plant, k)
        E_next = enkf_update_members(
            E_pred, y_next, self.v_draws[k], plant, self.V, k + 1, self.inflation
        )
        return D_next, E_next, y_next, E_next.mean(axis=-2)

    def rollout(self, controls, want_beliefs=False):
        """Single rollout; returns (means, traces, observations,
        beliefs-or-None).  means[0] is the exact prior mean (the belief
        at k=0 is the given prior, not a sample estimate)."""
        plant, spec_b0 = self.plant, self.b0
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        N = controls.shape[0]
        D = spec_b0.mean.astype(self.dtype)[None]
        E = self.members0[None].copy()
        means = np.empty((N + 1, plant.n_x))
        traces = np.empty(N + 1)
        obs = np.empty((N + 1, plant.n_y))
        means[0] = spec_b0.mean
        traces[0] = np.trace(spec_b0.cov)
        obs[0] = plant.observe(spec_b0.mean, 0.0, 0)
        beliefs = [GaussianBelief(spec_b0.mean, spec_b0.cov)] if want_beliefs else None
        u = controls.astype(self.dtype)
        for k in range(N):
            D, E, y, post_mean = self._step_batch(D, E, u[k][None], k)
            means[k + 1] = post_mean[0]
            obs[k + 1] = y[0]
            traces[k + 1] = float(((E[0] - post_mean[0]) ** 2).sum() / (self.M - 1))
            if want_beliefs:
                beliefs.append(belief_from_ensemble(E[0]))
        return means, traces, obs, beliefs

    def cost(self, controls, spec):
        means, traces, _, _ = self.rollout(controls)
        return _cost_from_arrays(means, traces, np.asarray(controls, dtype=float), spec)

    def cost_and_gradient(self, controls, spec, h, chunk=64):
        """Baseline cost and the central-difference gradient (N, n_u).

        Perturbed rollouts are spawned from baseline snapshots at their
        perturbation time; perturbation times are processed in chunks of
        `chunk` to bound memory.
        """
        plant = self.plant
        U = np.asarray(controls, dtype=float)
        N, n_u = U.shape
        dt_u = U.astype(self.dtype)

        # baseline pass, snapshotting states so jobs can fork mid-way
        D_snap = np.empty((N, plant.n_x), dtype=self.dtype)
        E_snap = np.empty((N, self.M, plant.n_x), dtype=self.dtype)
        means = np.empty((N + 1, plant.n_x))
        traces = np.zeros(N + 1)
        D = self.b0.mean.astype(self.dtype)[None]
        E = self.members0[None].copy()
        means[0] = self.b0.mean
        traces[0] = np.trace(self.b0.cov)
        for k in range(N):
            D_snap[k] = D[0]
            E_snap[k] = E[0]
            D, E, _, post_mean = self._step_batch(D, E, dt_u[k][None], k)
            means[k + 1] = post_mean[0]
            if spec.q_trace:
                traces[k + 1] = float(((E[0] - post_mean[0]) ** 2).sum() / (self.M - 1))
        d = means - spec.target
        state_cost = np.einsum("ki,ij,kj->k", d, spec.Q_mean, d)
        state_cost[-1] = d[-1] @ spec.Q_terminal @ d[-1]
        if spec.q_trace:
            state_cost += spec.q_trace * traces
        ctrl_cost = np.einsum("ki,ij,kj->k", U, spec.R_u, U)
        J0 = float(state_cost.sum() + ctrl_cost.sum())

        grad = np.zeros((N, n_u))
        # suffix state costs for every perturbed rollout
        Qm = spec.Q_mean
        Qt = spec.Q_terminal
        tgt = spec.target
        hh = self.dtype.type(h)
        for j0 in range(0, N, chunk):
            j1 = min(j0 + chunk, N)
            n_jobs = 2 * n_u * (j1 - j0)
            Db = np.empty((n_jobs, plant.n_x), dtype=self.dtype)
            Eb = np.empty((n_jobs, self.M, plant.n_x), dtype=self.dtype)
            suffix = np.zeros(n_jobs)
            active = 0
            for k in range(j0, N):
                if k < j1:
                    lo = 2 * n_u * (k - j0)
                    for m in range(n_u):
                        Db[lo + 2 * m] = Db[lo + 2 * m + 1] = D_snap[k]
                        Eb[lo + 2 * m] = Eb[lo + 2 * m + 1] = E_snap[k]
                    active = lo + 2 * n_u
                ub = np.broadcast_to(dt_u[k], (active, n_u)).copy()
                if k < j1:
                    for m in range(n_u):
                        ub[lo + 2 * m, m] += hh
                        ub[lo + 2 * m + 1, m] -= hh
                try:
                    Db[:active], Eb[:active], _, post_mean = self._step_batch(
                        Db[:active], Eb[:active], ub, k
                    )
                except FloatingPointError as e:  # pragma: no cover - defensive
                    raise GradientEvaluationError(str(e)) from e
                dd = post_mean.astype(float) - tgt
                q = Qt if k == N - 1 else Qm
                suffix[:active] += np.einsum("bi,bi->b", dd @ q, dd)
                if spec.q_trace:
                    ctr = ((Eb[:active] - post_mean[:, None, :]) ** 2).sum(axis=(1, 2)) / (self.M - 1)
                    suffix[:active] += spec.q_trace * ctr
            if not np.all(np.isfinite(suffix)):
                bad = int(np.flatnonzero(~np.isfinite(suffix))[0])
                j = j0 + bad // (2 * n_u)
                m = (bad % (2 * n_u)) // 2
                sign = "+" if bad % 2 == 0 else "-"
                raise GradientEvaluationError(
                    f"non-finite cost perturbing control entry (k={j}, channel={m}, {sign}h)"
                )
            # assemble central differences; shared prefixes cancel exactly,
            # and the control term of a quadratic is exact under central FD
            for j in range(j0, j1):
                lo = 2 * n_u * (j - j0)
                plus = suffix[lo : lo + 2 * n_u : 2]
                minus = suffix[lo + 1 : lo + 2 * n_u : 2]
                grad[j] = (plus - minus) / (2.0 * h) + 2.0 * (spec.R_u @ U[j])
        return J0, grad


class _KalmanEngine:
    """Exact-KF counterpart of _EnkfEngine for linear plants.

    The covariance recursion is control-independent, so gains and
    covariance traces are computed once; batched rollouts only carry
    means.
    """

    def __init__(self, plant, b0, seed=None, dtype=np.float64):
        if not hasattr(plant, "matrices"):
            raise ValueError("exact-KF rollouts need a linear plant exposing matrices(k)")
        self.plant = plant
        self.b0 = b0
        N = plant.horizon
        W, V = plant.spec.W, plant.spec.V
        self.gains = []
        self.traces = np.empty(N + 1)
        P = b0.cov.copy()
        self.traces[0] = np.trace(P)
        eye = np.eye(plant.n_x)
        for k in range(N):
            A, B, _ = plant.matrices(k)
            _, _, C1 = plant.matrices(k + 1)
            P = A @ P @ A.T + B @ W @ B.T
            S = C1 @ P @ C1.T + V
            K = np.linalg.solve(S, C1 @ P).T
            self.gains.append(K)
            IKC = eye - K @ C1
            P = IKC @ P @ IKC.T + K @ V @ K.T
            self.traces[k + 1] = np.trace(P)
        self.P_final = P

    def _roll_means(self, U_batch):
        """Means (B, N+1, n_x) of the filtered belief for each control
        sequence, tracking each sequence's own nominal observations."""
        plant = self.plant
        B_, N, _ = U_batch.shape
        mu = np.broadcast_to(self.b0.mean, (B_, plant.n_x)).copy()
        xd = mu.copy()
        out = np.empty((B_, N + 1, plant.n_x))
        out[:, 0] = mu
        for k in range(N):
            A, Bm, _ = plant.matrices(k)
            _, _, C1 = plant.matrices(k + 1)
            xd = xd @ A.T + U_batch[:, k] @ Bm.T
            y = xd @ C1.T
            mu = mu @ A.T + U_batch[:, k] @ Bm.T
            mu = mu + (y - mu @ C1.T) @ self.gains[k].T
            out[:, k + 1] = mu
        return out

    def rollout(self, controls, want_beliefs=False):
        U = np.atleast_2d(np.asarray(controls, dtype=float))
        means = self._roll_means(U[None])[0]
        obs = np.empty((means.shape[0], self.plant.n_y))
        xd = self.b0.mean.copy()
        obs[0] = self.plant.observe(xd, 0.0, 0)
        for k in range(U.shape[0]):
            xd = self.plant.step(xd, U[k], 0.0, k)
            obs[k + 1] = self.plant.observe(xd, 0.0, k + 1)
        beliefs = None
        if want_beliefs:
            covs = self.covariances()
            beliefs = [GaussianBelief(m, c) for m, c in zip(means, covs)]
        return means, self.traces.copy(), obs, beliefs

    def covariances(self):
        plant = self.plant
        N = plant.horizon
        covs = np.empty((N + 1, plant.n_x, plant.n_x))
        P = self.b0.cov.copy()
        covs[0] = P
        eye = np.eye(plant.n_x)
        for k in range(N):
            A, B, _ = plant.matrices(k)
            _, _, C1 = plant.matrices(k + 1)
            P = A @ P @ A.T + B @ plant.spec.W @ B.T
            K = self.gains[k]
            IKC = eye - K @ C1
            P = IKC @ P @ IKC.T + K @ plant.spec.V @ K.T
            covs[k + 1] = P
        return covs

    def cost(self, controls, spec):
        means, traces, _, _ = self.rollout(controls)
        return _cost_from_arrays(means, traces, np.atleast_2d(np.asarray(controls, dtype=float)), spec)

    def cost_and_gradient(self, controls, spec, h, chunk=None):
        U = np.atleast_2d(np.asarray(controls, dtype=float))
        N, n_u = U.shape
        J0 = self.cost(U, spec)
        batch = np.repeat(U[None], 2 * N * n_u, axis=0)
        idx = 0
        for j in range(N):
            for m in range(n_u):
                batch[idx, j, m] += h
                batch[idx + 1, j, m] -= h
                idx += 2
        means = self._roll_means(batch)
        d = means - spec.target
        sc = np.einsum("bki,ij,bkj->bk", d[:, :-1], spec.Q_mean, d[:, :-1]).sum(axis=1)
        sc += np.einsum("bi,ij,bj->b", d[:, -1], spec.Q_terminal, d[:, -1])
        cc = np.einsum("bki,ij,bkj->bk", batch, spec.R_u, batch).sum(axis=1)
        tot = sc + cc
        if spec.q_trace:
            tot += spec.q_trace * self.traces.sum()
        if not np.all(np.isfinite(tot)):
            bad = int(np.flatnonzero(~np.isfinite(tot))[0])
            raise GradientEvaluationError(
                f"non-finite cost perturbing control entry (k={bad // (2 * n_u)}, "
                f"channel={(bad % (2 * n_u)) // 2}, {'+' if bad % 2 == 0 else '-'}h)"
            )
        grad = ((tot[0::2] - tot[1::2]) / (2.0 * h)).reshape(N, n_u)
        return J0, grad


def _make_engine(plant, b0, M, seed, method, inflation=1.0, dtype=np.float64):
    if method == "enkf":
        return _EnkfEngine(plant, b0, M, seed, inflation, dtype)
    if method == "kf":
        return _KalmanEngine(plant, b0)
    raise ValueError(f"unknown rollout method {method!r}")


def rollout_belief(u_seq, b0, plant, M=100, seed=0, method="enkf", inflation=1.0):
    """Deterministic belief rollout under u_seq; returns N+1 beliefs.

    Nominal observations are generated by the noiseless plant rollout
    from the prior mean, and the filter tracks those observations.  The
    fixed seed makes the whole map u_seq -> beliefs a pure function.
    """
    engine = _make_engine(plant, b0, M, seed, method, inflation)
    _, _, _, beliefs = engine.rollout(np.asarray(u_seq, dtype=float), want_beliefs=True)
    return beliefs


def gradient_fd(u_seq, b0, plant, spec, h=1e-4, seed=0, M=100, method="enkf", inflation=1.0):
    """Central-difference gradient of the rollout cost, (N, n_u).

    The same seed drives the +h and -h rollouts (common random
    numbers), so EnKF sampling noise cancels to first order.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    engine = _make_engine(plant, b0, M, seed, method, inflation)
    _, grad = engine.cost_and_gradient(np.asarray(u_seq, dtype=float), spec, h)
    return grad


@dataclass
class OptimizeOptions:
    alpha: float = 1e-2
    max_iters: int = 200
    tol: float = 1e-4
    M: int = 100
    seed: int = 0
    h: float = 1e-4
    method: str = "enkf"
    inflation: float = 1.0
    dtype: str = "float64"
    normalize_alpha: bool = True
    max_halvings: int = 30
    chunk: int = 64
    verbose: bool = False


def optimize(u_init, b0, plant, spec, opts=None):
    """Gradient descent with backtracking on the rollout cost.

    The step size alpha is restored at every iteration and halved
    within an iteration until the cost decreases.  Stops when the cost
    improvement falls below tol*(1+|J|), when the gradient norm falls
    below tol, or at max_iters (returning the best iterate seen,
    converged=False).
    """
    opts = opts or OptimizeOptions()
    U = np.atleast_2d(np.asarray(u_init, dtype=float)).copy()
    N = U.shape[0]
    engine = _make_engine(plant, b0, opts.M, opts.seed, opts.method, opts.inflation, np.dtype(opts.dtype))
    J = engine.cost(U, spec)
    history = [J]
    iterations = 0
    converged = False
    for it in range(opts.max_iters):
        J0, grad = engine.cost_and_gradient(U, spec, opts.h, chunk=opts.chunk)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= opts.tol:
            converged = True
            break
        alpha = opts.alpha
        if opts.normalize_alpha:
            alpha = alpha / (1.0 + np.abs(grad).max())
        accepted = False
        for _ in range(opts.max_halvings):
            U_try = U - alpha * grad
            J_try = engine.cost(U_try, spec)
            if J_try < J:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # stuck at the sampling-noise floor; keep the best iterate
            break
        delta = J - J_try
        U, J = U_try, J_try
        history.append(J)
        iterations = it + 1
        if opts.verbose:
            print(f"iter {iterations}: J={J:.6g} |grad|={gnorm:.3g} alpha={alpha:.3g}")
        if delta <= opts.tol * (1.0 + abs(J)):
            converged = True
            break
    means, traces, obs, beliefs = engine.rollout(U, want_beliefs=True)
    covs = np.stack([b.cov for b in beliefs])
    final_cost = nominal_cost(beliefs, U, spec)
    return NominalTrajectory(
        controls=U,
        means=np.stack([b.mean for b in beliefs]),
        covs=covs,
        observations=obs,
        nominal_cost=final_cost,
        iterations=iterations,
        converged=converged,
        cost_history=history,
    )
