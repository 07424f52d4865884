"""Time-varying LQG synthesis on the identified reduced-order model.

Backward LQR Riccati recursion for the feedback gains, forward Kalman
Riccati recursion for the estimator gains, and the online control law
that tracks the nominal trajectory:

    du_k = -L_k da_hat_k,     u_k = u_bar_k + du_k

with da_hat the estimate of the ROM deviation state.  Process noise
enters the ROM through the input matrix (B W B'), matching the plant
contract where disturbances share the control channels.
"""

from dataclasses import dataclass, field
import json

import numpy as np

from .exceptions import DegenerateMeasurementError, IllPosedCostError
from .sysid import LtvRom

__all__ = [
    "LqgController",
    "lqr_backward",
    "kf_forward",
    "design_lqg",
    "closed_loop_step",
]


def _weight_at(Q, k):
    Q = np.asarray(Q, dtype=float)
    return Q[k] if Q.ndim == 3 else Q


def lqr_backward(rom, Qk, QN, Rk):
    """Finite-horizon discrete LQR on the ROM sequences.

    S_N = Q_N
    L_k = (R_k + B' S_{k+1} B)^-1 B' S_{k+1} A
    S_k = Q_k + A' S_{k+1} A - A' S_{k+1} B L_k

    Returns (L_gains (N, n_u, n_r), S (N+1, n_r, n_r)).  Qk may be one
    matrix or a per-step stack; same for Rk.
    """
    N = rom.horizon
    n_r, n_u = rom.n_r, rom.n_u
    L = np.empty((N, n_u, n_r))
    S = np.empty((N + 1, n_r, n_r))
    S[N] = _weight_at(QN, 0)
    for k in range(N - 1, -1, -1):
        A, B = rom.A_hat[k], rom.B_hat[k]
        SB = S[k + 1] @ B
        G = _weight_at(Rk, k) + B.T @ SB
        try:
            L[k] = np.linalg.solve(G, SB.T @ A)
        except np.linalg.LinAlgError as e:
            raise IllPosedCostError(f"R + B'SB singular at step k={k}") from e
        Sk = _weight_at(Qk, k) + A.T @ S[k + 1] @ A - A.T @ SB @ L[k]
        S[k] = 0.5 * (Sk + Sk.T)
    return L, S


def kf_forward(rom, W, V, P0):
    """Forward Kalman Riccati recursion on the ROM.

    P_pred = A_k P_k A_k' + B_k W B_k'
    K_{k+1} = P_pred C_{k+1}' (C_{k+1} P_pred C_{k+1}' + V)^-1
    P_{k+1} = Joseph(P_pred, K_{k+1})

    K_0 comes from the prior P0 the same way, so a measurement update is
    available at every step 0..N.  Returns (K_gains (N+1, n_r, n_y),
    P (N+1, n_r, n_r)) with P the post-update covariances.
    """
    N = rom.horizon
    n_r, n_y = rom.n_r, rom.n_y
    W = np.asarray(W, dtype=float)
    V = np.asarray(V, dtype=float)
    K = np.empty((N + 1, n_r, n_y))
    P = np.empty((N + 1, n_r, n_r))
    eye = np.eye(n_r)

    def update(P_pred, k):
        C = rom.C_hat[k]
        S = C @ P_pred @ C.T + V
        try:
            Kk = np.linalg.solve(S, C @ P_pred).T
        except np.linalg.LinAlgError as e:
            raise DegenerateMeasurementError(f"innovation covariance singular at step k={k}") from e
        IKC = eye - Kk @ C
        Pk = IKC @ P_pred @ IKC.T + Kk @ V @ Kk.T
        return Kk, 0.5 * (Pk + Pk.T)

    K[0], P[0] = update(np.asarray(P0, dtype=float), 0)
    for k in range(N):
        A, B = rom.A_hat[k], rom.B_hat[k]
        P_pred = A @ P[k] @ A.T + B @ W @ B.T
        K[k + 1], P[k + 1] = update(P_pred, k + 1)
    return K, P


@dataclass
class LqgController:
    """Offline gains plus the online estimator state.

    a_hat is the current ROM deviation estimate; reset() rewinds it for
    a fresh closed-loop run.  P_filter holds the post-update estimator
    covariances, S_traces the LQR cost-to-go traces (diagnostics).
    """

    rom: LtvRom
    L_gains: np.ndarray
    K_gains: np.ndarray
    Qk: np.ndarray
    QN: np.ndarray
    Rk: np.ndarray
    W: np.ndarray
    V: np.ndarray
    P_filter: np.ndarray
    S_traces: np.ndarray
    a_hat: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.a_hat is None:
            self.reset()

    def reset(self):
        self.a_hat = np.zeros(self.rom.n_r)

    @property
    def horizon(self):
        return self.rom.horizon

    def to_json(self, path):
        payload = {
            "L_gains": self.L_gains.tolist(),
            "K_gains": self.K_gains.tolist(),
            "Qk": np.asarray(self.Qk).tolist(),
            "QN": np.asarray(self.QN).tolist(),
            "Rk": np.asarray(self.Rk).tolist(),
            "W": np.asarray(self.W).tolist(),
            "V": np.asarray(self.V).tolist(),
            "P_filter": self.P_filter.tolist(),
            "S_traces": self.S_traces.tolist(),
            "rom": {
                "A_hat": self.rom.A_hat.tolist(),
                "B_hat": self.rom.B_hat.tolist(),
                "C_hat": self.rom.C_hat.tolist(),
                "n_r": int(self.rom.n_r),
                "time_range": list(self.rom.time_range),
                "singular_values": {},
                "gap_warning": bool(self.rom.gap_warning),
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        rom = LtvRom(
            A_hat=np.asarray(payload["rom"]["A_hat"]),
            B_hat=np.asarray(payload["rom"]["B_hat"]),
            C_hat=np.asarray(payload["rom"]["C_hat"]),
            n_r=payload["rom"]["n_r"],
            time_range=tuple(payload["rom"]["time_range"]),
            singular_values={},
            gap_warning=payload["rom"].get("gap_warning", False),
        )
        return cls(
            rom=rom,
            L_gains=np.asarray(payload["L_gains"]),
            K_gains=np.asarray(payload["K_gains"]),
            Qk=np.asarray(payload["Qk"]),
            QN=np.asarray(payload["QN"]),
            Rk=np.asarray(payload["Rk"]),
            W=np.asarray(payload["W"]),
            V=np.asarray(payload["V"]),
            P_filter=np.asarray(payload["P_filter"]),
            S_traces=np.asarray(payload["S_traces"]),
        )


def default_rom_weights(rom, q_y=1.0, r=0.1, terminal_scale=10.0, ridge=1e-8):
    """Output-weighted ROM-space cost: Q_k = C_k' Q_y C_k + ridge*I.

    The ridge keeps the stage weights positive definite; QN scales the
    final stage weight.
    """
    n_r, n_u, n_y = rom.n_r, rom.n_u, rom.n_y
    Qy = q_y * np.eye(n_y) if np.ndim(q_y) == 0 else np.asarray(q_y, dtype=float)
    N = rom.horizon
    Qk = np.empty((N, n_r, n_r))
    for k in range(N):
        C = rom.C_hat[k]
        Qk[k] = C.T @ Qy @ C + ridge * np.eye(n_r)
    CN = rom.C_hat[N]
    QN = terminal_scale * (CN.T @ Qy @ CN + ridge * np.eye(n_r))
    Rk = r * np.eye(n_u) if np.ndim(r) == 0 else np.asarray(r, dtype=float)
    return Qk, QN, Rk


def design_lqg(rom, W=None, V=None, P0=None, Qk=None, QN=None, Rk=None,
               q_y=1.0, r=0.1, terminal_scale=10.0, ridge=1e-8):
    """Design the tracking LQG controller for a ROM.

    Explicit Qk/QN/Rk win; otherwise the output-weighted defaults are
    used.  W, V default to identity; P0 to identity in ROM coordinates.
    """
    if Qk is None or QN is None or Rk is None:
        dQk, dQN, dRk = default_rom_weights(rom, q_y, r, terminal_scale, ridge)
        Qk = dQk if Qk is None else Qk
        QN = dQN if QN is None else QN
        Rk = dRk if Rk is None else Rk
    W = np.eye(rom.n_u) if W is None else np.asarray(W, dtype=float)
    V = np.eye(rom.n_y) if V is None else np.asarray(V, dtype=float)
    P0 = np.eye(rom.n_r) if P0 is None else np.asarray(P0, dtype=float)
    L, S = lqr_backward(rom, Qk, QN, Rk)
    K, P = kf_forward(rom, W, V, P0)
    return LqgController(
        rom=rom,
        L_gains=L,
        K_gains=K,
        Qk=np.asarray(Qk, dtype=float),
        QN=np.asarray(QN, dtype=float),
        Rk=np.asarray(Rk, dtype=float),
        W=W,
        V=V,
        P_filter=P,
        S_traces=np.einsum("kii->k", S),
    )


def closed_loop_step(ctrl, k, y, nominal):
    """Apply one measurement and return the control for step k.

    Order: innovation against the nominal observation, measurement
    update of da_hat with K_k, control du = -L_k da_hat, then the time
    update of da_hat with (A_k, B_k).  Call with k = 0..N-1; the
    returned control is u_bar_k + du_k.
    """
    rom = ctrl.rom
    if not 0 <= k < rom.horizon:
        raise IndexError(f"step index {k} outside horizon [0, {rom.horizon})")
    dy = np.asarray(y, dtype=float) - nominal.observations[k]
    C = rom.C_hat[k]
    a = ctrl.a_hat
    a = a + ctrl.K_gains[k] @ (dy - C @ a)
    du = -ctrl.L_gains[k] @ a
    ctrl.a_hat = rom.A_hat[k] @ a + rom.B_hat[k] @ du
    return nominal.controls[k] + du
