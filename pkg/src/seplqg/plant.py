"""Black-box plant contract and concrete plants.

A plant is anything that can be stepped and observed:

    x[k+1] = f(x[k], u[k], w[k]),    y[k] = h(x[k], v[k])

with zero-mean Gaussian white noises w ~ N(0, W) entering through the
control channels and v ~ N(0, V) additive at the sensors.  Everything
downstream (belief propagation, trajectory optimization, impulse-response
identification, Monte Carlo evaluation) only touches plants through this
interface, so swapping the nonlinear heat slab for a small linear oracle
is a one-line change in tests.

`step` and `observe` are pure functions of their arguments and broadcast
over leading batch dimensions: a state array of shape (..., n_x) maps to
(..., n_x).  The optional time index `k` matters only for time-varying
plants (see `LinearPlant` with stacked matrices).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import IntegrationDivergedError

__all__ = [
    "PlantSpec",
    "Plant",
    "HeatPlantConfig",
    "HeatPlant",
    "LinearPlant",
]


def _check_psd(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-10:
        raise ValueError(f"{name} must be positive semi-definite")
    return M


@dataclass(frozen=True)
class PlantSpec:
    """Dimensions, horizon and noise covariances of a plant.

    W is n_u x n_u (process noise enters through the control channels),
    V is n_y x n_y (additive measurement noise).
    """

    n_x: int
    n_u: int
    n_y: int
    W: np.ndarray
    V: np.ndarray
    horizon: int
    dt: float

    def __post_init__(self):
        if min(self.n_x, self.n_u, self.n_y) < 1:
            raise ValueError("state/control/measurement dimensions must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "W", _check_psd(self.W, "W"))
        object.__setattr__(self, "V", _check_psd(self.V, "V"))
        if self.W.shape[0] != self.n_u:
            raise ValueError(f"W must be {self.n_u}x{self.n_u}")
        if self.V.shape[0] != self.n_y:
            raise ValueError(f"V must be {self.n_y}x{self.n_y}")


class Plant:
    """Base class wiring a PlantSpec to step/observe implementations."""

    spec: PlantSpec

    @property
    def n_x(self):
        return self.spec.n_x

    @property
    def n_u(self):
        return self.spec.n_u

    @property
    def n_y(self):
        return self.spec.n_y

    @property
    def horizon(self):
        return self.spec.horizon

    @property
    def dt(self):
        return self.spec.dt

    def step(self, state, control, process_noise, k=0):
        raise NotImplementedError

    def observe(self, state, meas_noise, k=0):
        raise NotImplementedError

    def simulate_nominal(self, x0, controls):
        """Noiseless rollout: states (N+1, n_x) and observations (N+1, n_y).

        controls must have length N = horizon of the rollout; shorter
        sequences roll out a shorter horizon.
        """
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        n_steps = controls.shape[0]
        states = np.empty((n_steps + 1, self.n_x))
        obs = np.empty((n_steps + 1, self.n_y))
        states[0] = np.asarray(x0, dtype=float)
        obs[0] = self.observe(states[0], 0.0, 0)
        for k in range(n_steps):
            states[k + 1] = self.step(states[k], controls[k], 0.0, k)
            obs[k + 1] = self.observe(states[k + 1], 0.0, k + 1)
        return states, obs


def _as_finite(x, what, k):
    # NaN/inf propagate through the sum, so one reduction checks the array
    if not np.isfinite(np.sum(x)):
        raise IntegrationDivergedError(f"{what} produced a non-finite state at step k={k}")
    return x


# ---------------------------------------------------------------------------
# Nonlinear heat slab
# ---------------------------------------------------------------------------

_DEFAULT_POSITIONS = (0.1, 0.3, 0.5, 0.7, 0.9)

# explicit-Euler stability margin: max K*dt/dx^2 over the operating
# temperature range must stay below this
_STABILITY_LIMIT = 0.5
_DEFAULT_DIFFUSION_NUMBER = 0.38


@dataclass(frozen=True)
class HeatPlantConfig:
    """One-dimensional heat slab with point actuators and point sensors.

    Dynamics: dT/dt = K(x,T) d2T/dx2 - eta*T + u(t), with insulated left
    end (ghost-node Neumann) and a fixed right end T(L,t) = t_right.
    Diffusivity is affine in temperature, K(x,T) = k0*(1 + k1*T).
    Actuation and sensing happen at the grid nodes nearest the given
    fractional positions.  When k0 is omitted it defaults to
    0.38*dx^2/dt, which keeps the explicit scheme stable over
    temp_range with the default k1.

    `insulated` is a test-only switch that replaces both boundary
    conditions with zero-flux ones in conservation form, so the plain
    spatial sum of temperature is conserved when eta = 0, u = 0 and k1
    = 0.
    """

    n_grid: int = 100
    L: float = 1.0
    eta: float = 5e-4
    k0: float = None
    k1: float = 1e-3
    actuators: tuple = _DEFAULT_POSITIONS
    sensors: tuple = _DEFAULT_POSITIONS
    t_init: float = 100.0
    t_right: float = 150.0
    dt: float = 0.25
    horizon: int = 250
    insulated: bool = False
    temp_range: tuple = (0.0, 300.0)

    def __post_init__(self):
        if self.n_grid < 3:
            raise ValueError("n_grid must be >= 3")
        if self.L <= 0 or self.dt <= 0 or self.horizon < 1:
            raise ValueError("L, dt must be positive and horizon >= 1")
        if self.k0 is None:
            object.__setattr__(self, "k0", _DEFAULT_DIFFUSION_NUMBER * self.dx**2 / self.dt)
        if self.k0 < 0:
            raise ValueError("k0 must be non-negative")
        lo, hi = self.temp_range
        if 1.0 + self.k1 * lo <= 0 or 1.0 + self.k1 * hi <= 0:
            raise ValueError(f"diffusivity factor 1 + k1*T must stay positive on temp_range {self.temp_range}")
        kmax = self.k0 * max(1.0 + self.k1 * lo, 1.0 + self.k1 * hi)
        number = kmax * self.dt / self.dx**2
        if number > _STABILITY_LIMIT + 1e-12:
            raise ValueError(
                f"explicit scheme unstable: max K*dt/dx^2 = {number:.4g} > {_STABILITY_LIMIT} "
                f"over temp_range {self.temp_range}"
            )
        for name in ("actuators", "sensors"):
            fr = np.asarray(getattr(self, name), dtype=float)
            if fr.ndim != 1 or len(fr) < 1 or fr.min() < 0 or fr.max() > 1:
                raise ValueError(f"{name} must be fractions in [0, 1]")
            object.__setattr__(self, name, tuple(fr))
        if len(set(self.actuator_nodes)) != len(self.actuator_nodes):
            raise ValueError("actuator positions map to duplicate grid nodes")
        if len(set(self.sensor_nodes)) != len(self.sensor_nodes):
            raise ValueError("sensor positions map to duplicate grid nodes")

    @property
    def dx(self):
        return self.L / (self.n_grid - 1)

    @property
    def actuator_nodes(self):
        return tuple(int(round(f * (self.n_grid - 1))) for f in self.actuators)

    @property
    def sensor_nodes(self):
        return tuple(int(round(f * (self.n_grid - 1))) for f in self.sensors)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        for key in ("actuators", "sensors", "temp_range"):
            if key in raw and raw[key] is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self):
        return {
            "n_grid": self.n_grid,
            "L": self.L,
            "eta": self.eta,
            "k0": self.k0,
            "k1": self.k1,
            "actuators": list(self.actuators),
            "sensors": list(self.sensors),
            "t_init": self.t_init,
            "t_right": self.t_right,
            "dt": self.dt,
            "horizon": self.horizon,
        }


class HeatPlant(Plant):
    """Explicit finite-difference model of the nonlinear heat slab.

    One step of forward Euler with a centered second difference.  The
    left end uses a ghost node for the Neumann condition; the right-end
    (Dirichlet) entry is carried through unchanged, so trajectories
    started with state[-1] = t_right keep it exactly.  Control and
    process noise enter together as point sources at the actuator
    nodes.
    """

    def __init__(self, config=None, W=None, V=None):
        self.config = config if config is not None else HeatPlantConfig()
        c = self.config
        n_u = len(c.actuators)
        n_y = len(c.sensors)
        self.spec = PlantSpec(
            n_x=c.n_grid,
            n_u=n_u,
            n_y=n_y,
            W=np.eye(n_u) if W is None else np.asarray(W, dtype=float),
            V=np.eye(n_y) if V is None else np.asarray(V, dtype=float),
            horizon=c.horizon,
            dt=c.dt,
        )
        self._act = np.asarray(c.actuator_nodes)
        self._sen = np.asarray(c.sensor_nodes)
        self._inv_dx2 = 1.0 / c.dx**2

    def initial_state(self):
        """Uniform t_init profile with the Dirichlet entry at t_right."""
        x0 = np.full(self.config.n_grid, float(self.config.t_init))
        if not self.config.insulated:
            x0[-1] = self.config.t_right
        return x0

    def step(self, state, control, process_noise, k=0):
        c = self.config
        T = np.asarray(state)
        if T.dtype not in (np.float32, np.float64):
            T = T.astype(float)
        dtype = T.dtype
        with np.errstate(invalid="ignore", over="ignore"):
            lap = np.empty_like(T)
            np.subtract(T[..., 2:], T[..., 1:-1], out=lap[..., 1:-1])
            lap[..., 1:-1] -= T[..., 1:-1]
            lap[..., 1:-1] += T[..., :-2]
            if c.insulated:
                # conservation (zero-flux) form at both ends
                lap[..., 0] = T[..., 1] - T[..., 0]
                lap[..., -1] = T[..., -2] - T[..., -1]
            else:
                lap[..., 0] = 2.0 * (T[..., 1] - T[..., 0])
                lap[..., -1] = 0.0
            # K(x,T)/dx^2 * lap, reusing lap as scratch
            diff = np.multiply(T, dtype.type(c.k1 * c.k0 * self._inv_dx2), dtype=dtype)
            diff += dtype.type(c.k0 * self._inv_dx2)
            diff *= lap
            out = np.multiply(T, dtype.type(1.0 - c.eta * c.dt), dtype=dtype)
            diff *= dtype.type(c.dt)
            out += diff
            drive = np.multiply(np.add(control, process_noise, dtype=dtype), dtype.type(c.dt))
            out[..., self._act] += drive
            if not c.insulated:
                out[..., -1] = T[..., -1]
        return _as_finite(out, "heat plant step", k)

    def observe(self, state, meas_noise, k=0):
        T = np.asarray(state)
        return T[..., self._sen] + meas_noise


# ---------------------------------------------------------------------------
# Linear oracle plants
# ---------------------------------------------------------------------------


class LinearPlant(Plant):
    """Linear plant x[k+1] = A_k x + B_k (u + w), y = C_k x + v.

    A, B, C may be single matrices (time-invariant) or stacked arrays
    with a leading time axis (A, B of length >= horizon; C of length >=
    horizon + 1).  Used as an oracle: the Kalman filter, the LQ optimum
    and the Markov parameters are all available in closed form.
    """

    def __init__(self, A, B, C, W=None, V=None, dt=1.0, horizon=None):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        C = np.asarray(C, dtype=float)
        self._tv = A.ndim == 3
        if self._tv != (B.ndim == 3) or self._tv != (C.ndim == 3):
            raise ValueError("A, B, C must be all time-varying or all constant")
        n_x = A.shape[-1]
        n_u = B.shape[-1]
        n_y = C.shape[-2]
        if horizon is None:
            horizon = A.shape[0] if self._tv else 1
        self._A, self._B, self._C = A, B, C
        self.spec = PlantSpec(
            n_x=n_x,
            n_u=n_u,
            n_y=n_y,
            W=np.zeros((n_u, n_u)) if W is None else np.asarray(W, dtype=float),
            V=np.zeros((n_y, n_y)) if V is None else np.asarray(V, dtype=float),
            horizon=horizon,
            dt=dt,
        )

    def matrices(self, k):
        """(A_k, B_k, C_k); a constant plant ignores k.  A and B exist for
        k = 0..N-1, C for k = 0..N."""
        if self._tv:
            return self._A[k], self._B[k], self.output_matrix(k)
        return self._A, self._B, self._C

    def output_matrix(self, k):
        if not self._tv:
            return self._C
        return self._C[min(k, self._C.shape[0] - 1)]

    def step(self, state, control, process_noise, k=0):
        A = self._A[k] if self._tv else self._A
        B = self._B[k] if self._tv else self._B
        x = np.asarray(state, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            drive = np.add(control, process_noise, dtype=x.dtype)
            out = x @ A.T.astype(x.dtype) + drive @ B.T.astype(x.dtype)
        return _as_finite(out, "linear plant step", k)

    def observe(self, state, meas_noise, k=0):
        C = self.output_matrix(k)
        x = np.asarray(state, dtype=float)
        return x @ C.T.astype(x.dtype) + meas_noise
