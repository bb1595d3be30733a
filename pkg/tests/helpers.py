"""Shared builders for the test suite: random states, FD Jacobians, linear factors."""
import numpy as np

from rvlio.estimator import (
    BiasWalkFactor,
    Extrinsics,
    ImuFactor,
    ImuMeasurement,
    LidarFactor,
    LidarRelativePose,
    NavState,
    RadarFactor,
    RadarVelocityFactorInput,
    preintegrate,
)
from rvlio.estimator.factors import Factor, state_local, state_local_jacobian
from rvlio.geometry import Pose, rot_y, so3_exp

GRAVITY = np.array([0.0, 0.0, -9.81])
ORIGIN = NavState(Pose.identity(), np.zeros(3))


def random_state(rng, t=0.0) -> NavState:
    return NavState(
        Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 5),
        rng.normal(size=3) * 5,
        rng.normal(size=3) * 0.1,
        rng.normal(size=3) * 0.01,
        t,
    )


def pitched_extrinsics(pitch_deg=2.5, lever=(0.4, 0.0, 0.3)) -> Extrinsics:
    return Extrinsics(
        imu_to_radar_rotation=rot_y(np.deg2rad(pitch_deg)).T,
        radar_position_in_imu=np.array(lever, dtype=float),
    )


def fd_jacobian(residual, states, idx, h=1e-6):
    """Central differences of ``residual`` w.r.t. the tangent of ``states[idx]``."""
    cols = []
    for k in range(15):
        d = np.zeros(15)
        d[k] = h
        plus, minus = list(states), list(states)
        plus[idx] = states[idx].retract(d)
        minus[idx] = states[idx].retract(-d)
        cols.append((residual(plus) - residual(minus)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_error(num, ana) -> float:
    return float(np.abs(num - ana).max() / max(1.0, np.abs(ana).max()))


def random_imu_factor(rng, dt=0.1, rate=200):
    si, sj = random_state(rng, 0.0), random_state(rng, dt)
    n = int(round(dt * rate))
    imu = [
        ImuMeasurement(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], i / rate)
        for i in range(n + 1)
    ]
    delta = preintegrate(imu, si.bias, t_start=0.0, t_end=dt)
    return ImuFactor(0, 1, delta, GRAVITY), [si, sj]


def random_lidar_factor(rng, dt=0.1):
    si, sj = random_state(rng, 0.0), random_state(rng, dt)
    meas = LidarRelativePose(
        Pose(so3_exp(rng.normal(size=3) * 0.1), rng.normal(size=3)), np.eye(6) * 1e-4, 0.0, dt
    )
    return LidarFactor(0, 1, meas), [si, sj]


def random_bias_walk_factor(rng, dt=0.1):
    return BiasWalkFactor(0, 1, dt, 1e-4, 1e-5), [random_state(rng, 0.0), random_state(rng, dt)]


def random_radar_factor(rng, ext=None):
    ext = ext or pitched_extrinsics()
    s = random_state(rng)
    inp = RadarVelocityFactorInput(rng.normal() * 5, 0.169**2, rng.normal(size=3), 0.0)
    return RadarFactor(0, inp, ext), [s]


class LinearFactor(Factor):
    """``r = A_i d_i + A_j d_j - b`` with ``d`` the chart coordinates about the origin.

    Only the position, velocity and bias blocks may carry data: with the
    rotation rows tied to zero the solution keeps R = I, where the chart is
    exactly linear, so a window built from these factors is a linear-Gaussian
    problem.
    """

    def __init__(self, keys, blocks, b):
        self.keys = tuple(keys)
        self.blocks = [np.asarray(A, dtype=float) for A in blocks]
        self.b = np.asarray(b, dtype=float)
        self.sqrt_info = np.eye(len(self.b))

    def residual(self, states):
        return sum(A @ state_local(ORIGIN, s) for A, s in zip(self.blocks, states)) - self.b

    def whitened(self, states):
        return self.residual(states)

    def linearize(self, states):
        jacs = []
        for A, s in zip(self.blocks, states):
            jacs.append(A @ state_local_jacobian(ORIGIN, s, state_local(ORIGIN, s)))
        return self.residual(states), jacs


def linear_block(rng, rows=15, scale=1.0):
    """Random 15-column block that leaves rotation on an identity diagonal."""
    A = np.zeros((rows, 15))
    A[:3, :3] = np.eye(3)
    A[3:, 3:] = rng.normal(size=(rows - 3, 12)) * scale + np.eye(12)[: rows - 3] * 2.0
    return A


def linear_chain_factors(rng, n_nodes):
    """Prior on node 0 plus random linear between-factors and a few unary factors."""
    factors = [LinearFactor([0], [linear_block(rng)], np.r_[np.zeros(3), rng.normal(size=12)])]
    for k in range(1, n_nodes):
        Ai = -linear_block(rng)
        Aj = linear_block(rng)
        Ai[:3, :3] = -np.eye(3)
        factors.append(LinearFactor([k - 1, k], [Ai, Aj], np.r_[np.zeros(3), rng.normal(size=12)]))
        if k % 3 == 0:
            U = linear_block(rng) * 0.5
            factors.append(LinearFactor([k], [U], np.r_[np.zeros(3), rng.normal(size=12)]))
    return factors


def node_state(t: float) -> NavState:
    """Node initial guess for linear chains: identity rotation, deliberately off elsewhere."""
    return NavState(Pose.identity(), np.ones(3), np.full(3, 0.1), np.full(3, -0.1), t)
