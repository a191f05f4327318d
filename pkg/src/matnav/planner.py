"""Sampling-based planner: perturb a nominal control sequence, roll out the
planar dynamics, cost each trajectory with the velocity-conditioned terrain
map, and softmin-average the perturbations into a new nominal.

The terrain term is evaluated purely through the map's closed-form query
(batched over all sampled states), so changing a sampled velocity never
triggers any re-prediction - the efficiency contract the whole planner rests
on. Rollout and costing are vectorised across samples; each iteration reads
the immutable map and owns its trajectory buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import DEFAULT_LIMITS, PlanState, VehicleLimits, rollout_batch
from .errors import InvalidSpecError
from .matmap import MatMap, position_only_batch, query_batch

COST_MODES = ("motion_aware", "position_only")

# Horizon presets: (horizon seconds, soft speed cap m/s). Long horizons pair
# with cautious speeds, short ones with aggressive speeds; the cap enters the
# cost as a quadratic overspeed penalty, the same mechanism one would use to
# emulate a slower vehicle on identical hardware.
HORIZON_PRESETS = {"T1": (5.0, 2.0), "T2": (3.0, 4.5), "T3": (2.0, 6.5)}


@dataclass(frozen=True)
class PlannerConfig:
    """MPPI hyperparameters and cost weights.

    The temperature and acceleration-noise defaults were calibrated so
    flat-terrain plans from rest reach the goal on a straight path within 5
    iterations across seeds; with costs on this problem's scale, a softer
    softmin (temperature well above 1) averages many good samples per update
    instead of riding a single one.
    """

    horizon_steps: int = 30
    samples: int = 1024
    iterations: int = 5
    temperature: float = 15.0
    noise_accel: float = 1.5
    noise_kappa_rate: float = 0.3
    r_accel: float = 0.05
    r_kappa_rate: float = 0.05
    w_goal: float = 1.0
    w_terminal: float = 10.0
    w_overspeed: float = 2.0
    v_soft_max: float = 8.0
    terrain_weight: float = 80.0
    dt: float = 0.1
    cost_mode: str = "motion_aware"
    oob_cost: float = 2.0

    def __post_init__(self):
        if min(self.horizon_steps, self.samples, self.iterations) < 1:
            raise InvalidSpecError("horizon_steps, samples, iterations must be >= 1")
        if self.temperature <= 0:
            raise InvalidSpecError("temperature must be positive")
        if self.noise_accel <= 0 or self.noise_kappa_rate <= 0:
            raise InvalidSpecError("noise deviations must be positive")
        if self.dt <= 0:
            raise InvalidSpecError("dt must be positive")
        if self.cost_mode not in COST_MODES:
            raise InvalidSpecError(f"cost_mode must be one of {COST_MODES}")

    def with_preset(self, preset: str) -> "PlannerConfig":
        """Config with horizon and speed cap set from a named preset (T1/T2/T3)."""
        if preset not in HORIZON_PRESETS:
            raise InvalidSpecError(f"unknown horizon preset {preset!r}")
        seconds, v_cap = HORIZON_PRESETS[preset]
        steps = int(round(seconds / self.dt))
        return replace(self, horizon_steps=steps, v_soft_max=v_cap)

    @property
    def noise_std(self):
        return np.array([self.noise_accel, self.noise_kappa_rate])


@dataclass
class PlanResult:
    """Output of one planning call."""

    controls: np.ndarray  # (T, 2) optimised nominal sequence
    states: np.ndarray  # (T, 5) its rollout
    iteration_best_costs: list[float]
    first_control: np.ndarray  # (2,)


def sample_perturbations(nominal: np.ndarray, noise_std, n: int, seed,
                         limits: VehicleLimits = DEFAULT_LIMITS) -> np.ndarray:
    """N control sequences from zero-mean Gaussian perturbations of the nominal.

    Perturbed sequences are clamped to the control limits after addition.
    ``seed`` may be an integer or a numpy Generator; equal seeds give equal
    samples.
    """
    rng = np.random.default_rng(seed)
    nominal = np.asarray(nominal, dtype=np.float64)
    t = nominal.shape[0]
    noise = rng.normal(0.0, 1.0, size=(n, t, 2)) * np.asarray(noise_std)
    seqs = nominal[None, :, :] + noise
    return _clamp_controls(seqs, limits)


def _clamp_controls(seqs: np.ndarray, limits: VehicleLimits) -> np.ndarray:
    seqs[..., 0] = np.clip(seqs[..., 0], limits.a_min, limits.a_max)
    seqs[..., 1] = np.clip(seqs[..., 1], -limits.u_kappa_max, limits.u_kappa_max)
    return seqs


def trajectory_cost(states, controls, mat: MatMap, goal, cfg: PlannerConfig):
    """Stage costs (control effort + terrain + goal tracking) plus terminal cost.

    Accepts a single (T, 5) trajectory or an (N, T, 5) batch; returns a float
    or an (N,) vector accordingly. In motion_aware mode the terrain term is
    the closed-form velocity-conditioned query at each state; position_only
    collapses it to the cell's peak penalty. States outside the map incur the
    configured out-of-map cost.
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    single = states.ndim == 2
    if single:
        states = states[None, :, :]
        controls = controls[None, :, :]
    if states.shape[:2] != controls.shape[:2]:
        raise InvalidSpecError("states and controls must cover the same steps")
    n, t, _ = states.shape
    goal = np.asarray(goal, dtype=np.float64)

    control_cost = np.sum(
        cfg.r_accel * controls[:, :, 0] ** 2 + cfg.r_kappa_rate * controls[:, :, 1] ** 2,
        axis=1,
    )

    pts = states[:, :, :2].reshape(n * t, 2)
    vels = states[:, :, 3].reshape(n * t)
    if cfg.cost_mode == "motion_aware":
        terrain = query_batch(mat, pts, vels, oob_cost=cfg.oob_cost)
    else:
        terrain = position_only_batch(mat, pts, oob_cost=cfg.oob_cost)
    terrain_cost = cfg.terrain_weight * terrain.reshape(n, t).sum(axis=1)

    dists = np.linalg.norm(states[:, :, :2] - goal[None, None, :], axis=2)
    goal_cost = cfg.w_goal * dists.sum(axis=1)
    overspeed = np.maximum(0.0, states[:, :, 3] - cfg.v_soft_max)
    speed_cost = cfg.w_overspeed * np.sum(overspeed**2, axis=1)
    terminal = cfg.w_terminal * dists[:, -1]

    j = control_cost + terrain_cost + goal_cost + speed_cost + terminal
    return float(j[0]) if single else j


def mppi_update(nominal: np.ndarray, perturbed: np.ndarray, costs: np.ndarray,
                temperature: float,
                limits: VehicleLimits = DEFAULT_LIMITS) -> np.ndarray:
    """Softmin-weighted average of the perturbations around the nominal.

    Costs are shifted by their minimum before exponentiation, which makes the
    update exactly invariant to adding a constant to every cost and keeps the
    exponentials well-scaled for large sample counts.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if not np.all(np.isfinite(costs)):
        raise InvalidSpecError("all sample costs must be finite")
    w = np.exp(-(costs - costs.min()) / temperature)
    w /= w.sum()
    delta = np.asarray(perturbed, dtype=np.float64) - nominal[None, :, :]
    new = nominal + np.einsum("n,ntc->tc", w, delta)
    return _clamp_controls(new, limits)


def plan(s0: PlanState, mat: MatMap, goal, cfg: PlannerConfig, seed,
         nominal: np.ndarray | None = None,
         limits: VehicleLimits = DEFAULT_LIMITS) -> PlanResult:
    """Iterated sample/rollout/cost/update; returns the final nominal's rollout.

    Deterministic for a fixed seed. The terrain map is touched only through
    its closed-form queries: no per-velocity re-prediction happens anywhere in
    the loop.
    """
    rng = np.random.default_rng(seed)
    t = cfg.horizon_steps
    if nominal is None:
        nominal = np.zeros((t, 2))
    else:
        nominal = np.array(nominal, dtype=np.float64, copy=True)
        if nominal.shape != (t, 2):
            raise InvalidSpecError(f"nominal must be ({t}, 2)")

    best_costs = []
    for _ in range(cfg.iterations):
        perturbed = sample_perturbations(nominal, cfg.noise_std, cfg.samples, rng, limits)
        states = rollout_batch(s0, perturbed, cfg.dt, limits)
        costs = trajectory_cost(states, perturbed, mat, goal, cfg)
        best_costs.append(float(costs.min()))
        nominal = mppi_update(nominal, perturbed, costs, cfg.temperature, limits)

    final_states = rollout_batch(s0, nominal[None, :, :], cfg.dt, limits)[0]
    return PlanResult(
        controls=nominal,
        states=final_states,
        iteration_best_costs=best_costs,
        first_control=nominal[0].copy(),
    )
