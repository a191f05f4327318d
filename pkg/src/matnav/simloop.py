"""Closed-loop episodes: perceive (or load) a cost map, replan at a fixed
period, execute the first planned control in the simulator, repeat.

Also hosts end-to-end dataset generation: for each terrain, drive the
data-collection runs, build the label map, and bundle the artefacts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DEFAULT_LIMITS,
    DEFAULT_SIM,
    Control,
    EpisodeResult,
    SimConfig,
    VehicleLimits,
    collect_training_runs,
    compute_metrics,
    detect_rollover,
    initial_sim_state,
    step_sim,
)
from .errors import InvalidSpecError, OutOfBoundsError
from .labeling import LabelConfig, build_label_map
from .matmap import MatMap
from .planner import PlannerConfig, plan
from .predictor import SurrogateModel, predict_matmap
from .terrain import HeightMap, TerrainSpec, VehicleGeometry, generate_terrain

MAT_SOURCES = ("ground_truth_labels", "surrogate_prediction")


@dataclass(frozen=True)
class ScenarioSpec:
    """One closed-loop episode: terrain, route, planner setup, and seed."""

    terrain: TerrainSpec
    start: tuple[float, float]
    goal: tuple[float, float]
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    waypoints: tuple = ()
    extent: float = 24.0
    resolution: float = 0.1
    mat_source: str = "ground_truth_labels"
    timeout: float = 60.0
    replan_period: float = 0.1
    seed: int = 0
    goal_radius: float = 1.0
    waypoint_radius: float = 2.0

    def __post_init__(self):
        if self.mat_source not in MAT_SOURCES:
            raise InvalidSpecError(f"mat_source must be one of {MAT_SOURCES}")
        if self.timeout <= 0 or self.replan_period <= 0:
            raise InvalidSpecError("timeout and replan_period must be positive")

    @property
    def targets(self):
        return tuple(self.waypoints) + (tuple(self.goal),)


def run_episode(scenario: ScenarioSpec, hm: HeightMap, mat: MatMap | None = None,
                model: SurrogateModel | None = None,
                geom: VehicleGeometry = VehicleGeometry(),
                sim_cfg: SimConfig = DEFAULT_SIM,
                limits: VehicleLimits = DEFAULT_LIMITS,
                record_plans: bool = False) -> EpisodeResult:
    """Execute one episode; deterministic for a fixed scenario seed.

    The cost map comes either from the supplied ground-truth labels or from a
    one-shot surrogate prediction on the height map; the planning loop then
    only ever evaluates it in closed form. The first planned control is
    applied for a full replan period (acceleration mapped linearly to
    throttle, curvature rate integrated by the simulator). Leaving the map
    ends the episode as stuck.
    """
    if scenario.mat_source == "ground_truth_labels":
        if mat is None:
            raise InvalidSpecError("ground_truth_labels scenario needs a label map")
    else:
        if model is None:
            raise InvalidSpecError("surrogate_prediction scenario needs a model")
        mat = predict_matmap(model, hm)

    if not (hm.contains(scenario.start) and hm.contains(scenario.goal)):
        raise OutOfBoundsError(scenario.start, hm.bounds)

    targets = [np.asarray(t, dtype=np.float64) for t in scenario.targets]
    target_idx = 0
    heading0 = math.atan2(
        targets[0][1] - scenario.start[1], targets[0][0] - scenario.start[0]
    )
    s = initial_sim_state(hm, scenario.start, heading0, geom)
    rng = np.random.default_rng(scenario.seed)

    steps_per_replan = max(1, int(round(scenario.replan_period / sim_cfg.dt)))
    window = max(2, int(round(sim_cfg.stuck_window / sim_cfg.dt)))
    nominal = None
    plans = []
    t = 0.0
    rows = [[t, s.x, s.y, s.v, s.z, s.roll, s.pitch, 0.0]]
    speed_hist = []
    outcome = "timeout"

    while t < scenario.timeout:
        target = targets[target_idx]
        result = plan(s.planar(), mat, target, scenario.planner, rng,
                      nominal=nominal, limits=limits)
        if record_plans:
            plans.append(result)
        # Receding horizon: execute the first control, warm-start the next
        # cycle with the sequence shifted one step.
        nominal = np.vstack([result.controls[1:], result.controls[-1:]])
        u = Control(float(result.first_control[0]), float(result.first_control[1]))
        throttle = float(np.clip(u.accel / limits.a_max, 0.0, 1.0))

        done = False
        for _ in range(steps_per_replan):
            try:
                s = step_sim(s, u, throttle, hm, geom, sim_cfg, limits)
            except OutOfBoundsError:
                outcome = "stuck"
                done = True
                break
            t += sim_cfg.dt
            rows.append([t, s.x, s.y, s.v, s.z, s.roll, s.pitch, s.throttle])
            speed_hist.append(s.v)

            if detect_rollover(s, sim_cfg.rollover_threshold):
                outcome = "rollover"
                done = True
                break
            d = float(np.hypot(s.x - target[0], s.y - target[1]))
            if target_idx < len(targets) - 1:
                if d <= scenario.waypoint_radius:
                    target_idx += 1
            elif d <= scenario.goal_radius:
                outcome = "reached"
                done = True
                break
            if len(speed_hist) >= window and float(np.mean(speed_hist[-window:])) < sim_cfg.stuck_speed:
                outcome = "stuck"
                done = True
                break
        if done:
            break

    traj = np.asarray(rows)
    detour = traversal_time = energy = None
    if outcome == "reached":
        detour, traversal_time, energy = compute_metrics(
            traj[:, 1:3], traj[:, 0], scenario.start, scenario.goal, traj[:, 7],
            goal_radius=scenario.goal_radius,
        )
    return EpisodeResult(
        outcome=outcome,
        trajectory=traj,
        detour=detour,
        traversal_time=traversal_time,
        energy=energy,
        plans=plans,
    )


def widen_labels_lateral(mat: MatMap, mask: np.ndarray, hm: HeightMap,
                         chord_y: float, half_width: float | None = None,
                         elevation_tol: float = 0.05):
    """Extend chord-line labels laterally so rollouts stay on labelled ground.

    A labelled column's parameters are valid wherever the terrain in that
    column looks the same as where they were measured, so the labelled cell
    nearest the chord row is replicated across rows whose elevation matches
    within ``elevation_tol`` (optionally capped to a corridor half-width).
    Rows with different terrain - e.g. the flat ground beyond a strip
    obstacle's end - stay unlabelled and cost-free, which is what lets a
    conservative planner detour around the feature. Surrogate predictions
    cover the map natively and never need this.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    chord_row = int(round((chord_y - mat.origin[1]) / mat.resolution))
    rows_idx = np.arange(h)
    if half_width is None:
        corridor = np.ones(h, dtype=bool)
    else:
        half_cells = int(round(half_width / mat.resolution))
        corridor = np.abs(rows_idx - chord_row) <= half_cells

    a = mat.a.copy()
    mu = mat.mu.copy()
    sigma = mat.sigma.copy()
    out_mask = mask.copy()
    for c in range(w):
        rows = np.nonzero(mask[:, c])[0]
        if len(rows) == 0:
            continue
        src = rows[np.argmin(np.abs(rows - chord_row))]
        same = corridor & (np.abs(hm.elevations[:, c] - hm.elevations[src, c]) <= elevation_tol)
        a[same, c] = mat.a[src, c]
        mu[same, c] = mat.mu[src, c]
        sigma[same, c] = mat.sigma[src, c]
        out_mask[same, c] = True
    return MatMap(a, mu, sigma, mat.resolution, mat.origin, mat.bounds), out_mask


@dataclass
class TerrainDataset:
    """All artefacts of one terrain's self-supervised labelling pass."""

    terrain_id: str
    spec: TerrainSpec
    height_map: HeightMap
    label_map: MatMap
    mask: np.ndarray
    logs: list


def generate_dataset(terrain_specs, speeds, geom: VehicleGeometry,
                     label_cfg: LabelConfig = LabelConfig(),
                     extent: float = 24.0, resolution: float = 0.1,
                     start=None, goal=None,
                     sim_cfg: SimConfig = DEFAULT_SIM,
                     limits: VehicleLimits = DEFAULT_LIMITS) -> list[TerrainDataset]:
    """Run the full labelling pipeline over a list of terrains.

    For each terrain: generate the height map, execute one straight run per
    commanded speed, and fit the label map. Deterministic given specs, speeds,
    and config (regeneration is byte-identical).
    """
    terrain_specs = list(terrain_specs)
    if not terrain_specs:
        raise InvalidSpecError("need at least one terrain spec")
    if start is None:
        start = (2.0, extent / 2.0)
    if goal is None:
        goal = (extent - 2.0, extent / 2.0)

    out = []
    for i, spec in enumerate(terrain_specs):
        terrain_id = f"{spec.kind}_{i}"
        hm = generate_terrain(spec, extent, resolution)
        logs = collect_training_runs(
            hm, speeds, start, goal, geom, terrain_id=terrain_id,
            cfg=sim_cfg, limits=limits,
        )
        mat, mask = build_label_map(hm, logs, label_cfg, geom)
        out.append(TerrainDataset(terrain_id, spec, hm, mat, mask, logs))
    return out
