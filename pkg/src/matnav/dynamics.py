"""Vehicle dynamics: planner model, closed-loop simulator, and data-collection runs.

Two layers share the same planar kinematics (position, heading, speed,
curvature driven by acceleration and curvature rate):

* ``step_plan``/``rollout`` integrate only the planar model with RK4 - this is
  what the sampling planner propagates.
* ``step_sim`` adds elevation, vertical velocity, and attitude on a height
  map, with a deliberately simple grounded/ballistic two-mode contact model.
  On flat terrain the planar fields of ``step_sim`` reduce exactly to
  ``step_plan``.

Contact model. Grounded vehicles ride the terrain surface at the quasi-static
attitude and go airborne when the ground falls away faster than gravity can
pull them down (the required downward acceleration would exceed g). Airborne
flight is ballistic with planar velocity and attitude frozen. Three impact
mechanisms perturb the attitude, all scaled by how much vertical speed change
the suspension cannot absorb:

* landing: unabsorbed vertical impact speed, softened by forward speed - a
  slow drop into a hole is destabilising, a fast flat landing is not;
* ascent: climbable-but-steep ground taken fast demands a vertical speed the
  chassis cannot soak up (curbs and bump ramps rattle hard at speed, not at a
  crawl);
* crash: faces steeper than the climbable grade stop the vehicle dead with a
  kick proportional to the speed thrown away.

These few rules produce the speed-dependent outcomes the cost labels need:
slow ditch entries nose-dive in or jam against the far wall, fast entries
clear it; bumps and curbs are benign at a crawl and violent at speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GoalNotReachedError, InvalidSpecError, OutOfBoundsError
from .terrain import HeightMap, VehicleGeometry, sample_elevation, static_orientation

GRAVITY = 9.81


@dataclass(frozen=True)
class VehicleLimits:
    """Actuation envelope, scaled to a 1/5-scale RC platform."""

    v_max: float = 8.0
    a_min: float = -4.0
    a_max: float = 3.0
    kappa_max: float = 0.5
    u_kappa_max: float = 1.0


DEFAULT_LIMITS = VehicleLimits()


@dataclass(frozen=True)
class PlanState:
    """Planar planner state: position, heading, speed, curvature."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    v: float = 0.0
    kappa: float = 0.0

    def as_array(self):
        return np.array([self.x, self.y, self.heading, self.v, self.kappa])

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    accel: float = 0.0
    kappa_rate: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    """Simulator step size and contact-model constants.

    The kick constants were calibrated so the canonical obstacles produce the
    intended speed-dependent outcomes (see module docstring); all are exposed
    for sensitivity studies.
    """

    dt: float = 0.01
    gravity: float = GRAVITY
    # attitude kick = kick_scale * max(0, |dv_z| - impact_absorb) / (v + kick_v0)
    kick_scale: float = 4.0
    kick_v0: float = 0.5
    impact_absorb: float = 2.4
    # terrain following and geometry probing
    vz_follow_max: float = 4.0
    grade_probe: float = 0.15  # look-ahead distance for slope sensing (m)
    max_grade: float = 2.0  # steepest climbable rise/run
    lip_catch: float = 0.25  # deepest face an airborne vehicle can land over (m)
    crash_kick_per_speed: float = 0.3
    # exponential relaxation of attitude offsets toward the static orientation
    attitude_tau: float = 0.25
    rollover_threshold: float = math.pi / 3
    stuck_window: float = 3.0
    stuck_speed: float = 0.05
    # a tipped vehicle slides to rest: deceleration and minimum slide length
    tumble_decel: float = 4.0
    tumble_min: float = 0.4


DEFAULT_SIM = SimConfig()


@dataclass(frozen=True)
class SimState:
    """Simulator state: planar fields plus vertical/attitude dynamics.

    ``roll_off``/``pitch_off`` are decaying impact-induced offsets on top of
    the quasi-static attitude, and ``ascent_excess`` tracks how much of the
    current climb's vertical-speed demand has already been charged; carrying
    them in the state keeps stepping a pure function.
    """

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    v: float = 0.0
    kappa: float = 0.0
    z: float = 0.0
    v_z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    grounded: bool = True
    throttle: float = 0.0
    roll_off: float = 0.0
    pitch_off: float = 0.0
    ascent_excess: float = 0.0

    def planar(self) -> PlanState:
        return PlanState(self.x, self.y, self.heading, self.v, self.kappa)


def initial_sim_state(hm: HeightMap, position, heading, geom: VehicleGeometry) -> SimState:
    """Vehicle at rest on the terrain surface with quasi-static attitude."""
    x, y = float(position[0]), float(position[1])
    z = sample_elevation(hm, (x, y))
    roll, pitch = static_orientation(hm, (x, y), heading, geom)
    return SimState(x=x, y=y, heading=heading, z=z, roll=roll, pitch=pitch)


def _rk4_kernel(x, y, h, v, k, a, uk, dt, limits):
    """One RK4 step of the planar model on component arrays.

    Acceleration and curvature rate are held constant over the step, so their
    stage values are exact; the position/heading stages use them directly.
    Speed and curvature are clamped to the envelope after the step.
    """
    half = 0.5 * dt
    c1 = np.cos(h)
    s1 = np.sin(h)
    dx1 = v * c1
    dy1 = v * s1
    dh1 = v * k

    v2 = v + half * a
    k2 = k + half * uk
    h2 = h + half * dh1
    c2 = np.cos(h2)
    s2 = np.sin(h2)
    dx2 = v2 * c2
    dy2 = v2 * s2
    dh2 = v2 * k2

    h3 = h + half * dh2
    c3 = np.cos(h3)
    s3 = np.sin(h3)
    dx3 = v2 * c3
    dy3 = v2 * s3
    dh3 = v2 * k2

    v4 = v + dt * a
    k4 = k + dt * uk
    h4 = h + dt * dh3
    c4 = np.cos(h4)
    s4 = np.sin(h4)
    dx4 = v4 * c4
    dy4 = v4 * s4
    dh4 = v4 * k4

    sixth = dt / 6.0
    x = x + sixth * (dx1 + 2.0 * dx2 + 2.0 * dx3 + dx4)
    y = y + sixth * (dy1 + 2.0 * dy2 + 2.0 * dy3 + dy4)
    h = h + sixth * (dh1 + 2.0 * dh2 + 2.0 * dh3 + dh4)
    v = np.clip(v4, 0.0, limits.v_max)
    k = np.clip(k4, -limits.kappa_max, limits.kappa_max)
    return x, y, h, v, k


def step_plan(s: PlanState, u: Control, dt: float,
              limits: VehicleLimits = DEFAULT_LIMITS) -> PlanState:
    """One RK4 step of the planar model; speed and curvature clamped after."""
    if dt <= 0:
        raise InvalidSpecError("dt must be positive")
    a = float(np.clip(u.accel, limits.a_min, limits.a_max))
    uk = float(np.clip(u.kappa_rate, -limits.u_kappa_max, limits.u_kappa_max))
    x, y, h, v, k = _rk4_kernel(s.x, s.y, s.heading, s.v, s.kappa, a, uk, dt, limits)
    return PlanState(float(x), float(y), float(h), float(v), float(k))


def rollout(s0: PlanState, controls, dt: float,
            limits: VehicleLimits = DEFAULT_LIMITS) -> list[PlanState]:
    """Repeated step_plan; one state per control."""
    controls = list(controls)
    if not controls:
        raise InvalidSpecError("control sequence must be non-empty")
    out = []
    s = s0
    for u in controls:
        s = step_plan(s, u, dt, limits)
        out.append(s)
    return out


def rollout_batch(s0: PlanState, controls: np.ndarray, dt: float,
                  limits: VehicleLimits = DEFAULT_LIMITS) -> np.ndarray:
    """Propagate N control sequences at once.

    ``controls`` is (N, T, 2); returns (N, T, 5) states [x, y, heading, v,
    kappa] after each control. Equivalent to N independent ``rollout`` calls.
    """
    controls = np.asarray(controls, dtype=np.float64)
    n, t, _ = controls.shape
    a_all = np.clip(controls[:, :, 0], limits.a_min, limits.a_max)
    uk_all = np.clip(controls[:, :, 1], -limits.u_kappa_max, limits.u_kappa_max)
    x = np.full(n, s0.x)
    y = np.full(n, s0.y)
    h = np.full(n, s0.heading)
    v = np.full(n, s0.v)
    k = np.full(n, s0.kappa)
    out = np.empty((n, t, 5))
    for step in range(t):
        x, y, h, v, k = _rk4_kernel(x, y, h, v, k, a_all[:, step], uk_all[:, step], dt, limits)
        out[:, step, 0] = x
        out[:, step, 1] = y
        out[:, step, 2] = h
        out[:, step, 3] = v
        out[:, step, 4] = k
    return out


def _probe_grade(hm: HeightMap, x, y, heading, z_here, probe: float) -> float:
    """Forward slope over a fixed probe distance (phase-robust wall sensing)."""
    px = x + probe * math.cos(heading)
    py = y + probe * math.sin(heading)
    (xmin, xmax), (ymin, ymax) = hm.bounds
    px = min(max(px, xmin), xmax)
    py = min(max(py, ymin), ymax)
    d = math.hypot(px - x, py - y)
    if d < 1e-6:
        return 0.0
    return (sample_elevation(hm, (px, py)) - z_here) / d


def step_sim(s: SimState, u: Control, throttle: float, hm: HeightMap,
             geom: VehicleGeometry, cfg: SimConfig = DEFAULT_SIM,
             limits: VehicleLimits = DEFAULT_LIMITS) -> SimState:
    """One simulator step (dt <= 0.02 s); see module docstring for the model."""
    if cfg.dt > 0.02:
        raise InvalidSpecError("simulator dt must be <= 0.02 s")
    if not s.grounded:
        return _step_airborne(s, hm, geom, cfg, throttle)
    return _step_grounded(s, u, throttle, hm, geom, cfg, limits)


def _step_grounded(s: SimState, u: Control, throttle, hm, geom, cfg, limits) -> SimState:
    dt = cfg.dt
    decay = math.exp(-dt / cfg.attitude_tau)
    p = step_plan(s.planar(), u, dt, limits)
    z_terr_new = sample_elevation(hm, (p.x, p.y))
    rise = z_terr_new - s.z
    grade = _probe_grade(hm, s.x, s.y, s.heading, s.z, cfg.grade_probe)

    if rise > 1e-9 and grade > cfg.max_grade:
        # Unclimbable face: stop dead where we are; the kick grows with the
        # speed thrown away, so a fast wall hit can flip the vehicle while a
        # creeping bonk barely registers.
        kick = cfg.crash_kick_per_speed * s.v
        roll_off = s.roll_off * decay
        pitch_off = s.pitch_off * decay - kick
        st_roll, st_pitch = static_orientation(hm, (s.x, s.y), s.heading, geom)
        return replace(
            s, v=0.0, v_z=0.0, grounded=True, throttle=throttle,
            roll_off=roll_off, pitch_off=pitch_off,
            roll=st_roll + roll_off, pitch=st_pitch + pitch_off,
            ascent_excess=0.0,
        )

    z_ballistic = s.z + s.v_z * dt - 0.5 * cfg.gravity * dt * dt
    if z_ballistic > z_terr_new + 1e-9:
        # Terrain fell away faster than free fall: airborne, planar velocity
        # and attitude frozen until contact.
        v_z = float(np.clip(s.v_z, -cfg.vz_follow_max, cfg.vz_follow_max))
        return SimState(
            x=p.x, y=p.y, heading=p.heading, v=p.v, kappa=p.kappa,
            z=z_ballistic, v_z=v_z - cfg.gravity * dt,
            roll=s.roll, pitch=s.pitch, grounded=False, throttle=throttle,
            roll_off=s.roll_off, pitch_off=s.pitch_off,
            ascent_excess=s.ascent_excess,
        )

    # Ascent rattle on climbable slopes: the demanded vertical speed beyond
    # what the suspension absorbs is charged incrementally (telescoped), so
    # the total kick over a ramp entry does not depend on step phasing.
    pitch_kick = 0.0
    ascent_excess = 0.0
    if 0.0 < grade <= cfg.max_grade:
        demand = p.v * grade
        ascent_excess = max(0.0, demand - cfg.impact_absorb)
        charge = max(0.0, ascent_excess - s.ascent_excess)
        if charge > 0.0:
            pitch_kick = cfg.kick_scale * charge / (p.v + cfg.kick_v0)

    v_z = float(np.clip(rise / dt, -cfg.vz_follow_max, cfg.vz_follow_max))
    roll_off = s.roll_off * decay
    pitch_off = s.pitch_off * decay + pitch_kick
    st_roll, st_pitch = static_orientation(hm, (p.x, p.y), p.heading, geom)
    return SimState(
        x=p.x, y=p.y, heading=p.heading, v=p.v, kappa=p.kappa,
        z=z_terr_new, v_z=v_z,
        roll=st_roll + roll_off, pitch=st_pitch + pitch_off,
        grounded=True, throttle=throttle,
        roll_off=roll_off, pitch_off=pitch_off,
        ascent_excess=ascent_excess,
    )


def _step_airborne(s: SimState, hm: HeightMap, geom: VehicleGeometry,
                   cfg: SimConfig, throttle: float) -> SimState:
    dt = cfg.dt
    x = s.x + s.v * math.cos(s.heading) * dt
    y = s.y + s.v * math.sin(s.heading) * dt
    z = s.z + s.v_z * dt - 0.5 * cfg.gravity * dt * dt
    v_z = s.v_z - cfg.gravity * dt
    z_terr = sample_elevation(hm, (x, y))

    if z > z_terr:
        return replace(s, x=x, y=y, z=z, v_z=v_z, throttle=throttle)

    penetration = z_terr - z
    if penetration > cfg.lip_catch:
        # Flew into a face (e.g. the far wall of a ditch): drop to the ground
        # at the impact point with all forward speed gone.
        z_floor = sample_elevation(hm, (s.x, s.y))
        kick = cfg.crash_kick_per_speed * s.v
        st_roll, st_pitch = static_orientation(hm, (s.x, s.y), s.heading, geom)
        pitch_off = s.pitch_off - kick
        return replace(
            s, v=0.0, z=z_floor, v_z=0.0, grounded=True, throttle=throttle,
            roll_off=s.roll_off, pitch_off=pitch_off,
            roll=st_roll + s.roll_off, pitch=st_pitch + pitch_off,
            ascent_excess=0.0,
        )

    # Landing (possibly catching a low lip): unabsorbed vertical impact kicks
    # the nose down, softened by forward speed. When the arc intercepted a
    # rising face whose top sits within a catchable height, the front wheels
    # carry the vehicle onto the top instead of leaving it part-way up.
    z_land = z_terr
    cos_h, sin_h = math.cos(s.heading), math.sin(s.heading)
    (xmin, xmax), (ymin, ymax) = hm.bounds

    def _ahead(dist):
        px = min(max(x + dist * cos_h, xmin), xmax)
        py = min(max(y + dist * sin_h, ymin), ymax)
        return sample_elevation(hm, (px, py))

    on_face = _ahead(hm.resolution) - z_terr > 0.02
    if on_face:
        z_top = _ahead(0.5 * geom.wheelbase)
        if 0.0 < z_top - z_terr <= cfg.lip_catch:
            z_land = z_top
    impact = max(0.0, -v_z)
    unabsorbed = max(0.0, impact - cfg.impact_absorb)
    kick = cfg.kick_scale * unabsorbed / (s.v + cfg.kick_v0)
    st_roll, st_pitch = static_orientation(hm, (x, y), s.heading, geom)
    pitch_off = s.pitch_off - kick
    return SimState(
        x=x, y=y, heading=s.heading, v=s.v, kappa=s.kappa,
        z=z_land, v_z=0.0,
        roll=st_roll + s.roll_off, pitch=st_pitch + pitch_off,
        grounded=True, throttle=throttle,
        roll_off=s.roll_off, pitch_off=pitch_off,
        ascent_excess=0.0,
    )


def detect_rollover(s: SimState, threshold: float = DEFAULT_SIM.rollover_threshold) -> bool:
    return abs(s.roll) > threshold or abs(s.pitch) > threshold


@dataclass
class TraversalLog:
    """Per-run record of a vehicle-terrain interaction experiment.

    ``records`` is an (M, 7) array with columns [time, x, y, v, roll, pitch,
    throttle]; timestamps strictly increase.
    """

    run_id: int
    records: np.ndarray
    commanded_speed: float
    start: tuple[float, float]
    goal: tuple[float, float]
    terrain_id: str
    outcome: str  # reached | rollover | stuck | timeout

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=np.float64)
        if self.records.ndim != 2 or self.records.shape[1] != 7:
            raise InvalidSpecError("records must be (M, 7)")
        if self.records.shape[0] < 2:
            raise InvalidSpecError("a traversal log needs at least 2 records")
        if np.any(np.diff(self.records[:, 0]) <= 0):
            raise InvalidSpecError("record timestamps must strictly increase")
        if self.outcome not in OUTCOMES:
            raise InvalidSpecError(f"unknown outcome {self.outcome!r}")

    @property
    def times(self):
        return self.records[:, 0]

    @property
    def positions(self):
        return self.records[:, 1:3]

    @property
    def speeds(self):
        return self.records[:, 3]

    @property
    def attitudes(self):
        return self.records[:, 4:6]

    @property
    def throttles(self):
        return self.records[:, 6]

    @property
    def reached(self) -> bool:
        return self.outcome == "reached"


OUTCOMES = ("reached", "rollover", "stuck", "timeout")


@dataclass
class EpisodeResult:
    """Closed-loop episode outcome with detour/time/energy metrics.

    Metrics are populated only when the goal was reached.
    """

    outcome: str
    trajectory: np.ndarray  # (M, 8): time, x, y, v, z, roll, pitch, throttle
    detour: float | None = None
    traversal_time: float | None = None
    energy: float | None = None
    plans: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise InvalidSpecError(f"unknown outcome {self.outcome!r}")
        if len(self.trajectory) == 0:
            raise InvalidSpecError("episode trajectory must be non-empty")
        if (self.outcome == "reached") != (self.detour is not None):
            raise InvalidSpecError("metrics must be present iff the goal was reached")


def compute_metrics(positions, times, start, goal, throttles, goal_radius: float = 0.5):
    """(detour, traversal_time, energy) of a goal-reaching trajectory.

    detour = arc length - straight-line start-goal distance; energy is the
    trapezoidal integral of throttle over time. A trajectory whose endpoint is
    not within ``goal_radius`` of the goal has no defined metrics.
    """
    positions = np.asarray(positions, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    throttles = np.asarray(throttles, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    gap = float(np.linalg.norm(positions[-1] - goal))
    if gap > goal_radius:
        raise GoalNotReachedError(f"trajectory ends {gap:.2f} m from the goal")
    arc = float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    straight = float(np.linalg.norm(goal - np.asarray(start, float)))
    # The run stops once inside the goal radius; credit the remaining gap so a
    # dead-straight run scores zero detour regardless of the stop tolerance.
    detour = arc + gap - straight
    total_time = float(times[-1] - times[0])
    energy = float(np.trapezoid(throttles, times))
    return detour, total_time, energy


def run_straight_traversal(hm: HeightMap, commanded_speed: float, start, goal,
                           geom: VehicleGeometry, run_id: int = 0,
                           terrain_id: str = "terrain",
                           cfg: SimConfig = DEFAULT_SIM,
                           limits: VehicleLimits = DEFAULT_LIMITS,
                           goal_radius: float = 0.5,
                           speed_gain: float = 4.0,
                           timeout: float | None = None) -> TraversalLog:
    """Drive straight start->goal under a speed-holding controller.

    The run terminates on goal arrival, rollover (terminal attitude pushed to
    +/- pi/2 on the dominant axis: the vehicle ends on its side), stuck
    (mean speed below the stuck threshold over the stuck window), timeout, or
    leaving the map (logged as stuck).
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    dist = float(np.linalg.norm(goal - start))
    if timeout is None:
        timeout = 2.0 * dist / max(commanded_speed, 0.1) + 15.0

    s = initial_sim_state(hm, start, heading, geom)
    t = 0.0
    rows = [[t, s.x, s.y, s.v, s.roll, s.pitch, 0.0]]
    outcome = "timeout"
    window = max(2, int(round(cfg.stuck_window / cfg.dt)))
    speed_hist = []

    while t < timeout:
        a_cmd = float(np.clip(speed_gain * (commanded_speed - s.v), limits.a_min, limits.a_max))
        throttle = float(np.clip(a_cmd / limits.a_max, 0.0, 1.0))
        try:
            s = step_sim(s, Control(a_cmd, 0.0), throttle, hm, geom, cfg, limits)
        except OutOfBoundsError:
            outcome = "stuck"
            break
        t += cfg.dt
        rows.append([t, s.x, s.y, s.v, s.roll, s.pitch, s.throttle])
        speed_hist.append(s.v)

        if detect_rollover(s, cfg.rollover_threshold):
            # The vehicle flips and slides to rest on its side (dominant axis
            # at 90 degrees), wrecking the stretch of ground it tumbles over.
            if abs(s.roll) >= abs(s.pitch):
                roll_t = math.copysign(math.pi / 2, s.roll)
                pitch_t = s.pitch
            else:
                roll_t = s.roll
                pitch_t = math.copysign(math.pi / 2, s.pitch)
            rows[-1][4] = roll_t
            rows[-1][5] = pitch_t
            v_t = max(s.v, math.sqrt(2.0 * cfg.tumble_decel * cfg.tumble_min))
            x_t, y_t = s.x, s.y
            cos_h, sin_h = math.cos(s.heading), math.sin(s.heading)
            while v_t > 0.0:
                v_t = max(0.0, v_t - cfg.tumble_decel * cfg.dt)
                x_t += v_t * cos_h * cfg.dt
                y_t += v_t * sin_h * cfg.dt
                if not hm.contains((x_t, y_t)):
                    break
                t += cfg.dt
                rows.append([t, x_t, y_t, v_t, roll_t, pitch_t, 0.0])
            outcome = "rollover"
            break
        if np.hypot(s.x - goal[0], s.y - goal[1]) <= goal_radius:
            outcome = "reached"
            break
        if len(speed_hist) >= window and float(np.mean(speed_hist[-window:])) < cfg.stuck_speed:
            outcome = "stuck"
            break

    return TraversalLog(
        run_id=run_id,
        records=np.asarray(rows),
        commanded_speed=float(commanded_speed),
        start=(float(start[0]), float(start[1])),
        goal=(float(goal[0]), float(goal[1])),
        terrain_id=terrain_id,
        outcome=outcome,
    )


def collect_training_runs(hm: HeightMap, speeds, start, goal, geom: VehicleGeometry,
                          terrain_id: str = "terrain",
                          cfg: SimConfig = DEFAULT_SIM,
                          limits: VehicleLimits = DEFAULT_LIMITS) -> list[TraversalLog]:
    """One straight traversal per commanded speed over the same terrain."""
    speeds = list(speeds)
    if len(speeds) < 2:
        raise InvalidSpecError("need at least 2 commanded speeds")
    if not (hm.contains(start) and hm.contains(goal)):
        raise OutOfBoundsError(start if not hm.contains(start) else goal, hm.bounds)
    return [
        run_straight_traversal(
            hm, v, start, goal, geom, run_id=i, terrain_id=terrain_id,
            cfg=cfg, limits=limits,
        )
        for i, v in enumerate(speeds)
    ]
