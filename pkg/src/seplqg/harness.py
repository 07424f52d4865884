"""End-to-end evaluation: Monte Carlo closed-loop runs, the cost
linearization-error check, probe-position error bands, and complexity
accounting.

Every Monte Carlo run draws its noise from counter-based streams keyed
(base_seed, run_index, channel), so reports are bit-reproducible and
independent of chunking.  Open-loop comparison runs consume the same
draws as their closed-loop partner (common random numbers), making the
error comparison paired.
"""

from dataclasses import dataclass, field

import numpy as np

from .belief import enkf_predict_members, enkf_update_members, psd_sqrt
from .exceptions import IntegrationDivergedError
from .plant import Plant
from .rng import stream
from .sysid import collect_impulse_responses

__all__ = [
    "MonteCarloReport",
    "ComplexityReport",
    "run_monte_carlo",
    "check_theorem1",
    "complexity_report",
    "cost_gradient_coefficients",
    "probe_output_rows",
    "closed_loop_band",
    "probe_nodes_from_fractions",
]


def probe_nodes_from_fractions(n_x, fractions):
    return tuple(int(round(f * (n_x - 1))) for f in fractions)


# ---------------------------------------------------------------------------
# Cost linearization coefficients (finite differences of the stage costs)
# ---------------------------------------------------------------------------


def cost_gradient_coefficients(nominal, spec, h=1e-5):
    """Gradients of the stage costs at the nominal trajectory.

    Central finite differences of the stage cost in each belief-mean
    coordinate and each control coordinate (and in the covariance
    diagonal when the trace term is active).  Returns (C_mu (N+1, n_x),
    C_u (N, n_u), c_trace) where row N of C_mu is the terminal-cost
    gradient.
    """
    means = nominal.means
    U = nominal.controls
    N, n_u = U.shape
    n_x = means.shape[1]
    tgt = spec.target
    C_mu = np.empty((N + 1, n_x))
    eye = np.eye(n_x)

    def state_cost(mu, Q):
        d = mu - tgt
        return np.einsum("...i,...i->...", d @ Q, d)

    for k in range(N + 1):
        Q = spec.Q_terminal if k == N else spec.Q_mean
        plus = state_cost(means[k] + h * eye, Q)
        minus = state_cost(means[k] - h * eye, Q)
        C_mu[k] = (plus - minus) / (2.0 * h)

    eye_u = np.eye(n_u)
    C_u = np.empty((N, n_u))
    for k in range(N):
        plus = np.einsum("...i,...i->...", (U[k] + h * eye_u) @ spec.R_u, U[k] + h * eye_u)
        minus = np.einsum("...i,...i->...", (U[k] - h * eye_u) @ spec.R_u, U[k] - h * eye_u)
        C_u[k] = (plus - minus) / (2.0 * h)

    # the trace term is linear in the covariance diagonal: d(cost)/dSigma_ii
    # by the same central difference, identical for every i and k
    c_trace = 0.0
    if spec.q_trace:
        c_trace = (spec.q_trace * (1.0 + h) - spec.q_trace * (1.0 - h)) / (2.0 * h)
    return C_mu, C_u, c_trace


# ---------------------------------------------------------------------------
# Probe output rows and closed-loop bands
# ---------------------------------------------------------------------------


class _ProbeView:
    """Plant wrapper observing arbitrary state entries (noiselessly)."""

    def __init__(self, plant, nodes):
        self.plant = plant
        self.nodes = np.asarray(nodes, dtype=int)
        self.spec = plant.spec
        self.n_x, self.n_u, self.n_y = plant.n_x, plant.n_u, len(nodes)
        self.horizon, self.dt = plant.horizon, plant.dt

    def step(self, state, control, process_noise, k=0):
        return self.plant.step(state, control, process_noise, k)

    def observe(self, state, meas_noise, k=0):
        return np.asarray(state)[..., self.nodes] + meas_noise

    def simulate_nominal(self, x0, controls):
        return Plant.simulate_nominal(self, x0, controls)


def probe_output_rows(plant, nominal, rom, nodes, epsilon=1e-2, lag=None):
    """Identify ROM output rows for extra state entries.

    Collects impulse responses of the probed entries and fits, at each
    time k, the map from the ROM deviation state to the probe deviation
    by least squares over the impulses within `lag` steps (default: the
    ROM's own Hankel depth, time_range start).  Returns (N+1, n_probe,
    n_r).
    """
    view = _ProbeView(plant, nodes)
    probe_markov = collect_impulse_responses(view, nominal, epsilon)
    N = rom.horizon
    n_r, n_u = rom.n_r, rom.n_u
    n_p = len(nodes)
    if lag is None:
        lag = max(2 * rom.time_range[0], 8)
    C_probe = np.zeros((N + 1, n_p, n_r))
    # impulse-driven ROM states a^{(j,m)}_k = Phi_hat(k, j+1) B_hat_j e_m,
    # propagated lazily: states[j] holds the (n_r, n_u) block for impulse time j
    states = {}
    for k in range(1, N + 1):
        states[k - 1] = rom.B_hat[k - 1].copy()
        rows = []
        targets = []
        for j in range(max(0, k - lag), k):
            rows.append(states[j].T)  # (n_u, n_r)
            targets.append(probe_markov.data[k, j].T)  # (n_u, n_p)
        A_mat = np.concatenate(rows)
        b_mat = np.concatenate(targets)
        sol, *_ = np.linalg.lstsq(A_mat, b_mat, rcond=None)
        C_probe[k] = sol.T
        if k < N:
            for j in list(states):
                if j < k - lag:
                    del states[j]
                else:
                    states[j] = rom.A_hat[k] @ states[j]
    C_probe[0] = C_probe[1]
    return C_probe


def closed_loop_band(controller, C_rows):
    """Two-sigma envelope of probe deviations under the closed loop.

    Propagates the joint covariance of (true ROM deviation, estimator
    prior) exactly through the LQG loop from zero initial deviation and
    projects it with the probe output rows; returns (N+1, n_probe).
    """
    rom = controller.rom
    N, n_r = rom.horizon, rom.n_r
    W = np.asarray(controller.W, dtype=float)
    V = np.asarray(controller.V, dtype=float)
    n_p = C_rows.shape[1]
    band = np.zeros((N + 1, n_p))
    Z = np.zeros((2 * n_r, 2 * n_r))  # cov of (da, da_hat_prior)
    eye = np.eye(n_r)
    for k in range(N):
        A, B, C = rom.A_hat[k], rom.B_hat[k], rom.C_hat[k]
        K, L = controller.K_gains[k], controller.L_gains[k]
        BL = B @ L
        KC = K @ C
        F = np.block(
            [
                [A - BL @ KC, -BL @ (eye - KC)],
                [(A - BL) @ KC, (A - BL) @ (eye - KC)],
            ]
        )
        Gw = np.vstack([B, np.zeros_like(B)])
        Gv = np.vstack([-BL @ K, (A - BL) @ K])
        Z = F @ Z @ F.T + Gw @ W @ Gw.T + Gv @ V @ Gv.T
        Z = 0.5 * (Z + Z.T)
        Saa = Z[:n_r, :n_r]
        var = np.einsum("pi,ij,pj->p", C_rows[k + 1], Saa, C_rows[k + 1])
        band[k + 1] = 2.0 * np.sqrt(np.clip(var, 0.0, None))
    return band


# ---------------------------------------------------------------------------
# Monte Carlo engine
# ---------------------------------------------------------------------------


@dataclass
class MonteCarloReport:
    """Aggregated paired closed/open-loop Monte Carlo results."""

    n_runs: int
    base_seed: int
    mean_traj: np.ndarray  # (N+1, n_x) closed-loop average
    probe_positions: tuple
    probe_nodes: tuple
    run0_closed_err: np.ndarray  # (N+1, n_probe)
    run0_open_err: np.ndarray
    two_sigma: np.ndarray
    mse_closed: np.ndarray  # (n_probe,) time- and run-averaged squared error
    mse_open: np.ndarray
    delta_J_samples: np.ndarray
    cost_samples: np.ndarray
    nominal_cost: float
    failures: int

    @property
    def delta_J_mean(self):
        return float(self.delta_J_samples.mean())

    @property
    def delta_J_se(self):
        n = len(self.delta_J_samples)
        return float(self.delta_J_samples.std(ddof=1) / np.sqrt(n))


def _safe_step(plant, X, U, w, k):
    """Step a batch of runs; on divergence, retry row by row and report
    which runs failed instead of aborting the whole batch."""
    try:
        return plant.step(X, U, w, k), None
    except IntegrationDivergedError:
        out = np.empty_like(X)
        bad = np.zeros(X.shape[0], dtype=bool)
        for i in range(X.shape[0]):
            try:
                out[i] = plant.step(X[i], U[i], w[i], k)
            except IntegrationDivergedError:
                out[i] = 0.0
                bad[i] = True
        return out, bad


def _simulate_chunk(plant, nominal, controller, run_ids, base_seed, belief, coeffs, cost,
                    probe_nodes, collect_first, mean_sum):
    """Simulate one chunk of paired runs; returns per-run aggregates.

    mean_sum (N+1, n_x) is accumulated in strict run-index order so the
    report is bit-identical no matter how runs are chunked."""
    rom = controller.rom
    N = nominal.horizon
    R = len(run_ids)
    n_x, n_u, n_y = plant.n_x, plant.n_u, plant.n_y
    x0 = nominal.means[0]
    W_s = psd_sqrt(plant.spec.W)
    V_s = psd_sqrt(plant.spec.V)
    V = plant.spec.V

    # per-run streams; w/v predrawn, filter draws per step
    w_all = np.empty((R, N, n_u))
    v_all = np.empty((R, N + 1, n_y))
    for i, r in enumerate(run_ids):
        w_all[i] = stream(base_seed, r, "w").standard_normal((N, n_u)) @ W_s.T
        v_all[i] = stream(base_seed, r, "v").standard_normal((N + 1, n_y)) @ V_s.T

    belief_mode = belief[0] if belief else None
    if belief_mode == "enkf":
        M = belief[1]
        gens_w = [stream(base_seed, r, "enkf-w") for r in run_ids]
        gens_v = [stream(base_seed, r, "enkf-v") for r in run_ids]
        members = np.empty((R, M, n_x))
        S0 = psd_sqrt(nominal.covs[0])
        for i, r in enumerate(run_ids):
            Z = stream(base_seed, r, "enkf-init").standard_normal((M, n_x))
            members[i] = x0 + Z @ S0.T
        mu_belief = np.broadcast_to(x0, (R, n_x)).copy()
    elif belief_mode == "kf":
        kf_gains = belief[1]
        mu_belief = np.broadcast_to(x0, (R, n_x)).copy()

    x_cl = np.broadcast_to(x0, (R, n_x)).copy()
    x_ol = x_cl.copy()
    a_hat = np.zeros((R, rom.n_r))
    failed = np.zeros(R, dtype=bool)

    for _ in range(R):
        mean_sum[0] += x0
    probe_nodes = np.asarray(probe_nodes, dtype=int)
    n_p = len(probe_nodes)
    sq_closed = np.zeros((R, n_p))
    sq_open = np.zeros((R, n_p))
    run0 = None
    if collect_first:
        run0 = {
            "closed": np.zeros((N + 1, n_p)),
            "open": np.zeros((N + 1, n_p)),
        }
    delta_J = np.zeros(R)
    cost_acc = np.zeros(R)
    if cost is not None:
        d0 = x0 - cost.target
        base_state_cost = float(d0 @ cost.Q_mean @ d0)
        cost_acc += base_state_cost
        if cost.q_trace:
            cost_acc += cost.q_trace * np.trace(nominal.covs[0])
    if coeffs is not None:
        C_mu, C_u, c_trace = coeffs
        trace_nom = np.einsum("kii->k", nominal.covs) if c_trace else None

    for k in range(N):
        # measurement and controller update
        y = plant.observe(x_cl, v_all[:, k], k)
        dy = y - nominal.observations[k]
        C = rom.C_hat[k]
        a_hat = a_hat + (dy - a_hat @ C.T) @ controller.K_gains[k].T
        du = -(a_hat @ controller.L_gains[k].T)
        u = nominal.controls[k] + du
        a_hat = a_hat @ rom.A_hat[k].T + du @ rom.B_hat[k].T

        if coeffs is not None:
            delta_J += du @ C_u[k]
        if cost is not None:
            cost_acc += np.einsum("ri,ij,rj->r", u, cost.R_u, u)

        # paired plant steps (shared process noise draws)
        x_cl, bad_cl = _safe_step(plant, x_cl, u, w_all[:, k], k)
        U_ol = np.broadcast_to(nominal.controls[k], (R, n_u))
        x_ol, bad_ol = _safe_step(plant, x_ol, U_ol, w_all[:, k], k)

        bad = ~(np.isfinite(np.sum(x_cl, axis=-1)) & np.isfinite(np.sum(x_ol, axis=-1)) & np.isfinite(np.sum(a_hat, axis=-1)))
        if bad_cl is not None:
            bad |= bad_cl
        if bad_ol is not None:
            bad |= bad_ol
        if bad.any():
            failed |= bad
        if failed.any():
            # freeze failed runs on the nominal so the batch stays healthy
            x_cl[failed] = nominal.means[k + 1]
            x_ol[failed] = nominal.means[k + 1]
            a_hat[failed] = 0.0

        # belief run alongside, driven by the applied controls and the
        # measurements the controller saw
        if belief_mode == "enkf":
            wb = np.empty((R, M, n_u))
            vb = np.empty((R, M, n_y))
            for i in range(R):
                wb[i] = gens_w[i].standard_normal((M, n_u)) @ W_s.T
                vb[i] = gens_v[i].standard_normal((M, n_y)) @ V_s.T
            members = enkf_predict_members(members, u, wb, plant, k)
            y_next = plant.observe(x_cl, v_all[:, k + 1], k + 1)
            members = enkf_update_members(members, y_next, vb, plant, V, k + 1)
            mu_belief = members.mean(axis=1)
        elif belief_mode == "kf":
            A, B, C1 = kf_gains["ABC"][k]
            y_next = plant.observe(x_cl, v_all[:, k + 1], k + 1)
            mu_pred = mu_belief @ A.T + u @ B.T
            mu_belief = mu_pred + (y_next - mu_pred @ C1.T) @ kf_gains["K"][k].T

        if coeffs is not None:
            delta_J += (mu_belief - nominal.means[k + 1]) @ C_mu[k + 1]
            if c_trace and belief_mode == "enkf":
                tr = ((members - mu_belief[:, None, :]) ** 2).sum(axis=(1, 2)) / (M - 1)
                delta_J += c_trace * (tr - trace_nom[k + 1])
        if cost is not None and k + 1 <= N - 1:
            d = mu_belief - cost.target
            cost_acc += np.einsum("ri,ij,rj->r", d, cost.Q_mean, d)
            if cost.q_trace and belief_mode == "enkf":
                tr = ((members - mu_belief[:, None, :]) ** 2).sum(axis=(1, 2)) / (M - 1)
                cost_acc += cost.q_trace * tr

        for i in range(R):
            mean_sum[k + 1] += x_cl[i]
        if n_p:
            err_c = x_cl[:, probe_nodes] - nominal.means[k + 1][probe_nodes]
            err_o = x_ol[:, probe_nodes] - nominal.means[k + 1][probe_nodes]
            sq_closed += err_c**2
            sq_open += err_o**2
            if collect_first:
                run0["closed"][k + 1] = err_c[0]
                run0["open"][k + 1] = err_o[0]

    if cost is not None:
        d = mu_belief - cost.target if belief_mode else x_cl - cost.target
        cost_acc += np.einsum("ri,ij,rj->r", d, cost.Q_terminal, d)
        if cost.q_trace and belief_mode == "enkf":
            tr = ((members - mu_belief[:, None, :]) ** 2).sum(axis=(1, 2)) / (M - 1)
            cost_acc += cost.q_trace * tr

    return {
        "sq_closed": sq_closed,
        "sq_open": sq_open,
        "run0": run0,
        "delta_J": delta_J,
        "cost": cost_acc,
        "failed": failed,
    }


def run_monte_carlo(plant, nominal, controller, n_runs, base_seed, probe_positions=(0.4, 0.9),
                    cost=None, belief="enkf", belief_size=100, chunk=100, probe_rows=None,
                    epsilon=1e-2):
    """Paired closed/open-loop Monte Carlo evaluation.

    Each run simulates the true plant under the LQG loop and, with the
    same noise draws, under the open-loop nominal controls.  When a cost
    spec is given, a belief filter runs alongside each closed-loop
    simulation (EnKF of size belief_size, or the exact KF via
    belief="kf" for linear plants) to produce per-run realized costs and
    first-order cost deviations.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    probe_nodes = probe_nodes_from_fractions(plant.n_x, probe_positions)
    two_sigma = np.zeros((nominal.horizon + 1, len(probe_nodes)))
    if probe_nodes:
        if probe_rows is None:
            probe_rows = probe_output_rows(plant, nominal, controller.rom, probe_nodes, epsilon)
        two_sigma = closed_loop_band(controller, probe_rows)

    belief_arg = None
    if cost is not None:
        if belief == "enkf":
            belief_arg = ("enkf", belief_size)
        elif belief == "kf":
            belief_arg = ("kf", _kf_gain_table(plant, nominal))
        else:
            raise ValueError(f"unknown belief mode {belief!r}")
    coeffs = cost_gradient_coefficients(nominal, cost) if cost is not None else None

    N = nominal.horizon
    mean_sum = np.zeros((N + 1, plant.n_x))
    sq_closed_runs = np.empty((n_runs, len(probe_nodes)))
    sq_open_runs = np.empty((n_runs, len(probe_nodes)))
    delta_J = np.empty(n_runs)
    cost_samples = np.empty(n_runs)
    failures = 0
    run0 = None
    for lo in range(0, n_runs, chunk):
        ids = range(lo, min(lo + chunk, n_runs))
        out = _simulate_chunk(
            plant, nominal, controller, list(ids), base_seed, belief_arg, coeffs, cost,
            probe_nodes, collect_first=(lo == 0), mean_sum=mean_sum,
        )
        hi = lo + len(out["delta_J"])
        sq_closed_runs[lo:hi] = out["sq_closed"]
        sq_open_runs[lo:hi] = out["sq_open"]
        delta_J[lo:hi] = out["delta_J"]
        cost_samples[lo:hi] = out["cost"]
        failures += int(out["failed"].sum())
        if lo == 0:
            run0 = out["run0"]
    # strict run-order folds keep aggregates independent of chunking
    sq_closed = np.zeros(len(probe_nodes))
    sq_open = np.zeros(len(probe_nodes))
    for r in range(n_runs):
        sq_closed += sq_closed_runs[r]
        sq_open += sq_open_runs[r]
    if failures > max(1, n_runs // 100):
        raise RuntimeError(f"{failures}/{n_runs} Monte Carlo runs diverged")

    denom = n_runs * (N + 1)
    return MonteCarloReport(
        n_runs=n_runs,
        base_seed=base_seed,
        mean_traj=mean_sum / n_runs,
        probe_positions=tuple(probe_positions),
        probe_nodes=probe_nodes,
        run0_closed_err=run0["closed"] if run0 else np.zeros((N + 1, 0)),
        run0_open_err=run0["open"] if run0 else np.zeros((N + 1, 0)),
        two_sigma=two_sigma,
        mse_closed=sq_closed / denom,
        mse_open=sq_open / denom,
        delta_J_samples=delta_J if cost is not None else np.zeros(0),
        cost_samples=cost_samples if cost is not None else np.zeros(0),
        nominal_cost=float(nominal.nominal_cost),
        failures=failures,
    )


def _kf_gain_table(plant, nominal):
    """Exact-KF gains in plant coordinates for linear plants."""
    if not hasattr(plant, "matrices"):
        raise ValueError('belief="kf" needs a linear plant exposing matrices(k)')
    N = nominal.horizon
    P = nominal.covs[0].copy()
    gains = []
    abc = []
    eye = np.eye(plant.n_x)
    for k in range(N):
        A, B, _ = plant.matrices(k)
        _, _, C1 = plant.matrices(k + 1)
        abc.append((A, B, C1))
        P = A @ P @ A.T + B @ plant.spec.W @ B.T
        S = C1 @ P @ C1.T + plant.spec.V
        K = np.linalg.solve(S, C1 @ P).T
        gains.append(K)
        IKC = eye - K @ C1
        P = IKC @ P @ IKC.T + K @ plant.spec.V @ K.T
    return {"K": gains, "ABC": abc}


def check_theorem1(plant, nominal, controller, spec, n_runs, base_seed, h=1e-5,
                   belief="enkf", belief_size=100, chunk=100):
    """Monte Carlo check that the expected first-order cost deviation
    vanishes: returns (mean delta_J, standard error, nominal cost)."""
    if n_runs < 100:
        raise ValueError("n_runs must be >= 100 for a meaningful check")
    report = run_monte_carlo(
        plant,
        nominal,
        controller,
        n_runs,
        base_seed,
        probe_positions=(),
        cost=spec,
        belief=belief,
        belief_size=belief_size,
        chunk=chunk,
    )
    return report.delta_J_mean, report.delta_J_se, float(nominal.nominal_cost)


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------


@dataclass
class ComplexityReport:
    """Riccati sizes of the full belief-space design versus the ROM design."""

    n_x: int
    n_r: int
    belief_dim: int
    ratio: float
    order_exponent: int
    no_reduction: bool

    def summary(self):
        lines = [
            f"{self.belief_dim} x {self.belief_dim} vs {self.n_r} x {self.n_r} Riccati",
            f"complexity reduction n_x^4/n_r^2 = {self.ratio:.3g} (O(10^{self.order_exponent}))",
        ]
        if self.no_reduction:
            lines.append("no reduction in estimator/controller order (n_r >= n_x)")
        return "\n".join(lines)


def complexity_report(n_x, n_r):
    """Arithmetic reproduction of the design-complexity comparison.

    The full belief-space design would solve Riccati equations in the
    belief dimension n_x + n_x^2 (mean plus covariance entries); the ROM
    design solves two n_r x n_r recursions.  The reduction ratio is
    n_x^4 / n_r^2.
    """
    if n_x < 1 or n_r < 1:
        raise ValueError("n_x and n_r must be >= 1")
    ratio = float(n_x) ** 4 / float(n_r) ** 2
    return ComplexityReport(
        n_x=n_x,
        n_r=n_r,
        belief_dim=n_x + n_x * n_x,
        ratio=ratio,
        order_exponent=int(round(np.log10(ratio))),
        no_reduction=n_r >= n_x,
    )
