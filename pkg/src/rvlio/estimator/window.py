"""Fixed-lag factor graph window: on-manifold least squares and marginalization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .factors import Factor, MarginalPrior, huber_loss, huber_weight
from .types import STATE_DIM, NavState, StaleMeasurement

log = logging.getLogger(__name__)

TIE_SLACK = 1e-9


@dataclass
class OptimizeResult:
    converged: bool
    iterations: int
    costs: list[float] = field(default_factory=list)

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


class FactorGraphWindow:
    """Time-ordered nodes plus the factors attached to them.

    Node ids are monotonically increasing integers; ``states[id]`` holds the
    current estimate. Marginalized information lives on as
    :class:`MarginalPrior` factors.
    """

    def __init__(self, lag: float = 1.5, huber_delta: float | None = 1.345):
        self.lag = lag
        self.huber_delta = huber_delta
        self.node_ids: list[int] = []
        self.states: dict[int, NavState] = {}
        self.factors: list[Factor] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def newest(self) -> int:
        return self.node_ids[-1]

    @property
    def oldest(self) -> int:
        return self.node_ids[0]

    def add_node(self, state: NavState) -> int:
        if self.node_ids and state.timestamp <= self.states[self.newest].timestamp:
            raise ValueError("node timestamps must be strictly increasing")
        key = self._next_id
        self._next_id += 1
        self.node_ids.append(key)
        self.states[key] = state
        return key

    def add_factor(self, factor: Factor) -> None:
        missing = [k for k in factor.keys if k not in self.states]
        if missing:
            raise KeyError(f"factor references unknown nodes {missing}")
        self.factors.append(factor)

    def timestamps(self) -> np.ndarray:
        return np.array([self.states[k].timestamp for k in self.node_ids])

    def nearest_node(self, t: float, tolerance: float | None = None) -> int:
        """Node closest in time to ``t``; exact ties go to the earlier node.

        Raises :class:`StaleMeasurement` when ``t`` lies before the oldest
        node by more than ``tolerance`` (default: half the node spacing).
        """
        if not self.node_ids:
            raise StaleMeasurement("window has no nodes")
        ts = self.timestamps()
        if tolerance is None:
            tolerance = 0.5 * float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0
        if t < ts[0] - tolerance - 1e-12:
            raise StaleMeasurement(f"measurement at {t:.4f} s precedes window tail {ts[0]:.4f} s")
        j = int(np.searchsorted(ts, t))
        if j == 0:
            return self.node_ids[0]
        if j == len(ts):
            return self.node_ids[-1]
        # ties go to the earlier node; 1 ns slack so decimal midpoints like 10.005 count as ties
        return self.node_ids[j - 1] if (t - ts[j - 1]) - (ts[j] - t) <= TIE_SLACK else self.node_ids[j]

    # -- least squares ------------------------------------------------------

    def _robust_terms(self, factor: Factor, rw: np.ndarray):
        """Per-row IRLS weights and total robust cost of a whitened residual."""
        delta = self.huber_delta if factor.robust else None
        if factor.row_robust:
            return self._row_loss(rw, factor.robust)
        norm = float(np.sqrt(rw @ rw))
        weight = huber_weight(norm, delta) if delta is not None else 1.0
        return weight, huber_loss(norm, delta)

    def _factor_terms(self, factor: Factor, states: dict[int, NavState]):
        r, jacs = factor.linearize([states[k] for k in factor.keys])
        L = factor.sqrt_info
        rw = L @ r
        jw = [L @ J for J in jacs]
        weight, loss = self._robust_terms(factor, rw)
        return rw, jw, weight, loss

    @staticmethod
    def _split(factors):
        """Group factors with a vectorized path by type; the rest stay single."""
        groups: dict[type, list[Factor]] = {}
        rows: list[Factor] = []
        singles = []
        for f in factors:
            if hasattr(type(f), "batch_linearize"):
                groups.setdefault(type(f), []).append(f)
            elif hasattr(type(f), "batch_rows"):
                rows.append(f)
            else:
                singles.append(f)
        return groups, rows, singles

    def _row_loss(self, rw: np.ndarray, robust: bool):
        delta = self.huber_delta if robust else None
        a = np.abs(rw)
        if delta is None:
            return np.ones_like(a), 0.5 * float(rw @ rw)
        w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
        loss = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
        return w, float(loss.sum())

    def _batch_norm_loss(self, fs, rw: np.ndarray):
        """Weights of stacked residuals ``rw`` (n, m): shape (n, m) for row-robust factors, else (n,)."""
        if fs[0].row_robust:
            w, loss = self._row_loss(rw.ravel(), fs[0].robust)
            return w.reshape(rw.shape), loss
        norms = np.sqrt(np.einsum("ni,ni->n", rw, rw))
        delta = self.huber_delta if fs[0].robust else None
        if delta is None:
            return np.ones_like(norms), float(0.5 * np.sum(norms**2))
        inside = norms <= delta
        w = np.where(inside, 1.0, delta / np.maximum(norms, 1e-300))
        loss = np.where(inside, 0.5 * norms**2, delta * (norms - 0.5 * delta))
        return w, float(loss.sum())

    def cost(self, states: dict[int, NavState] | None = None, factors=None) -> float:
        states = self.states if states is None else states
        groups, rows, singles = self._split(self.factors if factors is None else factors)
        total = 0.0
        if rows:
            # one row-stacked class only (radar)
            e, _, _, inv_sigma = type(rows[0]).batch_rows(rows, [states[f.keys[0]] for f in rows], False)
            total += self._row_loss(inv_sigma * e, rows[0].robust)[1]
        for cls, fs in groups.items():
            r = cls.batch_linearize(
                fs, [states[f.keys[0]] for f in fs], [states[f.keys[1]] for f in fs], jacobians=False
            )
            L = np.array([f.sqrt_info for f in fs])
            total += self._batch_norm_loss(fs, np.einsum("nij,nj->ni", L, r))[1]
        for f in singles:
            rw = f.whitened([states[k] for k in f.keys])
            total += self._robust_terms(f, rw)[1]
        return total

    def _normal_equations(self, keys: list[int], factors, states):
        offset = {k: i * STATE_DIM for i, k in enumerate(keys)}
        n = len(keys) * STATE_DIM
        H = np.zeros((n, n))
        g = np.zeros(n)
        total = 0.0
        # block views: Hb[a, b] is the (a, b) node block, gb[a] the node gradient
        Hb = H.reshape(len(keys), STATE_DIM, len(keys), STATE_DIM).transpose(0, 2, 1, 3)
        gb = g.reshape(len(keys), STATE_DIM)
        groups, rows, singles = self._split(factors)
        if rows:
            node = np.array([offset[f.keys[0]] for f in rows]) // STATE_DIM
            e, Jn, owner, inv_sigma = type(rows[0]).batch_rows(rows, [states[f.keys[0]] for f in rows])
            rw = inv_sigma * e
            w, loss = self._row_loss(rw, rows[0].robust)
            total += loss
            # J rows are shared within a factor: sum the scalar weights per owner
            hw = np.bincount(owner, w * inv_sigma**2, minlength=len(rows))
            gw = np.bincount(owner, w * inv_sigma * rw, minlength=len(rows))
            np.add.at(gb, node, gw[:, None] * Jn)
            np.add.at(Hb, (node, node), hw[:, None, None] * (Jn[:, :, None] * Jn[:, None, :]))
        for cls, fs in groups.items():
            r, Ji, Jj = cls.batch_linearize(fs, [states[f.keys[0]] for f in fs], [states[f.keys[1]] for f in fs])
            L = np.array([f.sqrt_info for f in fs])
            rw = np.einsum("nij,nj->ni", L, r)
            w, loss = self._batch_norm_loss(fs, rw)
            total += loss
            sw = np.sqrt(w)
            if sw.ndim == 1:
                sw = np.repeat(sw[:, None], rw.shape[1], axis=1)
            A = sw[:, :, None] * (L @ Ji)
            B = sw[:, :, None] * (L @ Jj)
            rw = sw * rw
            gi = np.einsum("nmk,nm->nk", A, rw)
            gj = np.einsum("nmk,nm->nk", B, rw)
            Hii = np.swapaxes(A, 1, 2) @ A
            Hij = np.swapaxes(A, 1, 2) @ B
            Hjj = np.swapaxes(B, 1, 2) @ B
            ki = np.array([offset[f.keys[0]] for f in fs]) // STATE_DIM
            kj = np.array([offset[f.keys[1]] for f in fs]) // STATE_DIM
            np.add.at(gb, ki, gi)
            np.add.at(gb, kj, gj)
            np.add.at(Hb, (ki, ki), Hii)
            np.add.at(Hb, (kj, kj), Hjj)
            np.add.at(Hb, (ki, kj), Hij)
            np.add.at(Hb, (kj, ki), np.swapaxes(Hij, 1, 2))
        for f in singles:
            rw, jw, w, c = self._factor_terms(f, states)
            total += c
            sl = [slice(offset[k], offset[k] + STATE_DIM) for k in f.keys]
            if np.ndim(w):
                # row weights: scale rows by sqrt(w) so J^T W J and J^T W r follow
                sw = np.sqrt(w)
                rw = sw * rw
                jw = [sw[:, None] * J for J in jw]
                w = 1.0
            for a, (sa, Ja) in enumerate(zip(sl, jw)):
                g[sa] += w * (Ja.T @ rw)
                for b in range(a, len(sl)):
                    blk = w * (Ja.T @ jw[b])
                    H[sa, sl[b]] += blk
                    if b != a:
                        H[sl[b], sa] += blk.T
        return H, g, total

    def linearize(self) -> tuple[np.ndarray, np.ndarray, float]:
        """Gauss-Newton system ``(H, g, cost)`` over all nodes in window order."""
        return self._normal_equations(self.node_ids, self.factors, self.states)

    def _retract_all(self, delta: np.ndarray) -> dict[int, NavState]:
        return {
            k: self.states[k].retract(delta[i * STATE_DIM : (i + 1) * STATE_DIM])
            for i, k in enumerate(self.node_ids)
        }

    def optimize(
        self, max_iterations: int = 50, step_tolerance: float = 1e-8, cost_tolerance: float = 1e-6
    ) -> OptimizeResult:
        """Gauss-Newton with Levenberg-Marquardt damping on rejected steps.

        Only steps that do not increase the (Huber) cost are accepted, so the
        recorded cost sequence is non-increasing. A trial point is linearized
        right away; when accepted that system is reused for the next step.
        Stops when the step norm drops below ``step_tolerance`` or an accepted
        step lowers the cost by less than ``cost_tolerance`` relative.
        """
        if not self.node_ids:
            return OptimizeResult(True, 0, [0.0])
        H, g, cost = self.linearize()
        costs = [cost]
        lam = 0.0
        for it in range(1, max_iterations + 1):
            scale = np.maximum(np.diag(H), 1e-9)
            while True:
                try:
                    A = H + lam * np.diag(scale)
                    step = -cho_solve(cho_factor(A, check_finite=False), g, check_finite=False)
                    if not np.all(np.isfinite(step)):
                        raise np.linalg.LinAlgError("non-finite step")
                except np.linalg.LinAlgError:
                    # not positive definite: damp and retry
                    lam = max(lam * 10.0, 1e-6)
                    continue
                step_norm = float(np.linalg.norm(step))
                log.debug("iter %d lam %.1e step %.3e cost %.9f", it, lam, step_norm, cost)
                trial = self._retract_all(step)
                if step_norm < step_tolerance:
                    # final step: a cost check is enough
                    trial_cost = self.cost(trial)
                    if trial_cost <= cost:
                        self.states = trial
                        costs.append(trial_cost)
                    return OptimizeResult(True, it, costs)
                Ht, gt, trial_cost = self._normal_equations(self.node_ids, self.factors, trial)
                if trial_cost <= cost:
                    self.states = trial
                    small = cost - trial_cost <= cost_tolerance * cost
                    H, g, cost = Ht, gt, trial_cost
                    costs.append(cost)
                    if small:
                        # flat directions (weak gauge) would only creep from here
                        return OptimizeResult(True, it, costs)
                    lam = 0.0 if lam < 1e-6 else lam / 10.0
                    break
                if lam > 1e10:
                    # no descent left at this resolution: current point is the minimum
                    return OptimizeResult(True, it, costs)
                lam = max(lam * 10.0, 1e-6)
        log.debug("window optimization stopped after %d iterations", max_iterations)
        return OptimizeResult(False, max_iterations, costs)

    # -- marginalization ----------------------------------------------------

    def marginalize_old(self, lag: float | None = None) -> list[int]:
        """Drop nodes older than ``newest - lag`` into a dense Gaussian prior.

        The prior is the Schur complement of the linearized system of every
        factor touching a dropped node, evaluated at the current estimate.
        Returns the removed node ids.
        """
        lag = self.lag if lag is None else lag
        if not self.node_ids:
            return []
        t_new = self.states[self.newest].timestamp
        drop = [k for k in self.node_ids if self.states[k].timestamp < t_new - lag - 1e-9]
        if not drop:
            return []
        drop_set = set(drop)
        touching = [f for f in self.factors if drop_set.intersection(f.keys)]
        keep_factors = [f for f in self.factors if not drop_set.intersection(f.keys)]
        involved = sorted({k for f in touching for k in f.keys})
        retained = [k for k in involved if k not in drop_set]
        order = drop + retained
        H, g, _ = self._normal_equations(order, touching, self.states)
        m = len(drop) * STATE_DIM
        H_mm, H_ms, H_ss = H[:m, :m], H[:m, m:], H[m:, m:]
        g_m, g_s = g[:m], g[m:]
        H_mm = 0.5 * (H_mm + H_mm.T)
        try:
            X = np.linalg.solve(H_mm, np.column_stack([H_ms, g_m]))
        except np.linalg.LinAlgError:
            X = np.linalg.pinv(H_mm) @ np.column_stack([H_ms, g_m])
        H_prior = H_ss - H_ms.T @ X[:, :-1]
        g_prior = g_s - H_ms.T @ X[:, -1]

        self.factors = keep_factors
        if retained:
            anchors = [self.states[k] for k in retained]
            self.factors.append(MarginalPrior(retained, anchors, H_prior, g_prior))
        self.node_ids = [k for k in self.node_ids if k not in drop_set]
        for k in drop:
            del self.states[k]
        return drop

    def marginal_covariance(self, keys: list[int] | None = None) -> np.ndarray:
        """Covariance of ``keys`` (default: all nodes) from the current linearization."""
        H, _, _ = self.linearize()
        cov = np.linalg.inv(H)
        if keys is None:
            return cov
        idx = np.concatenate(
            [np.arange(STATE_DIM) + self.node_ids.index(k) * STATE_DIM for k in keys]
        )
        return cov[np.ix_(idx, idx)]
