"""Self-supervised construction of velocity-conditioned cost labels.

Pipeline: several runs cross the same terrain at different commanded speeds;
each run is resampled onto common reference stations along the start-goal
chord; per station and run a traversability score in [0, 1] combines
discounted rollover risk with normalised time/energy effort; the per-station
(velocity, score) samples are fitted with a bounded Gaussian, which is
stamped into the label map around the station together with a validity mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, ResampleError, UnderDeterminedFitError
from .matmap import DEFAULT_BOUNDS, GaussianParams, MatMap, ParamBounds
from .terrain import HeightMap, VehicleGeometry, orientation_bounds
from .dynamics import TraversalLog


@dataclass(frozen=True)
class VelocityCostSample:
    """One (velocity, traversability score) observation at a map position."""

    velocity: float
    score: float

    def __post_init__(self):
        if not math.isfinite(self.velocity):
            raise InvalidSpecError("sample velocity must be finite")
        if not (0.0 <= self.score <= 1.0):
            raise InvalidSpecError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class LabelConfig:
    """Knobs of the label pipeline.

    Discounting uses gamma = 0.9 over a 20-station horizon: at the 0.2 m
    resample spacing that covers roughly two seconds of post-event dynamics at
    typical crossing speeds. Runs that never reach the goal are charged 1.5x
    the worst completing run's raw time/energy, which penalises failure
    without saturating the normalisation.
    """

    spacing: float = 0.2
    gamma: float = 0.9
    horizon: int = 20
    weight_roll: float = 0.8
    weight_time: float = 0.1
    weight_energy: float = 0.1
    stamp_radius_cells: int = 2
    bounds: ParamBounds = field(default_factory=ParamBounds)
    score_floor: float = 0.02
    min_runs: int = 3
    dnf_penalty: float = 1.5

    def __post_init__(self):
        if self.spacing <= 0:
            raise InvalidSpecError("spacing must be positive")
        if not (0.0 < self.gamma < 1.0):
            raise InvalidSpecError("gamma must lie in (0, 1)")
        if self.horizon < 0:
            raise InvalidSpecError("horizon must be >= 0")
        w = (self.weight_roll, self.weight_time, self.weight_energy)
        if any(x < 0 for x in w):
            raise InvalidSpecError("weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise InvalidSpecError(f"weights must sum to 1, got {sum(w)}")

    @property
    def weights(self):
        return (self.weight_roll, self.weight_time, self.weight_energy)


@dataclass
class ResampledRun:
    """A traversal log interpolated onto the common chord stations.

    Arrays cover stations 0..len-1 of the shared reference set (a run that
    failed partway covers only a prefix). ``remaining_time`` and
    ``remaining_energy`` hold raw effort-to-goal values and are NaN for runs
    that never reached the goal.
    """

    run_id: int
    commanded_speed: float
    reached: bool
    positions: np.ndarray  # (M, 2) chord station positions
    velocity: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    throttle: np.ndarray
    time: np.ndarray
    remaining_time: np.ndarray
    remaining_energy: np.ndarray

    def __len__(self):
        return len(self.velocity)

    @property
    def attitudes(self):
        return np.stack([self.roll, self.pitch], axis=1)


def chord_stations(start, goal, spacing):
    """Reference positions at arc-length multiples of spacing along the chord."""
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    chord = float(np.linalg.norm(goal - start))
    if chord < spacing:
        raise ResampleError(f"chord length {chord:.3f} m shorter than spacing {spacing}")
    m = int(math.floor(chord / spacing + 1e-9))
    s = np.arange(m + 1) * spacing
    u = (goal - start) / chord
    return start[None, :] + s[:, None] * u[None, :], s


def resample_trajectory(log: TraversalLog, spacing: float) -> ResampledRun:
    """Interpolate a run's records onto the start-goal chord stations.

    Progress along the chord is the running maximum of the projected arc
    length, so jittery records cannot move a station backwards. Fields are
    linearly interpolated between the bracketing records; a run that failed
    partway covers only the stations it actually passed.
    """
    if spacing <= 0:
        raise InvalidSpecError("spacing must be positive")
    stations, s_ref = chord_stations(log.start, log.goal, spacing)

    start = np.asarray(log.start, dtype=np.float64)
    goal = np.asarray(log.goal, dtype=np.float64)
    u = (goal - start) / np.linalg.norm(goal - start)
    proj = (log.positions - start[None, :]) @ u
    progress = np.maximum.accumulate(proj)
    if float(progress[-1]) < spacing:
        raise ResampleError(
            f"run {log.run_id} progressed {progress[-1]:.3f} m, "
            f"shorter than spacing {spacing}"
        )

    covered = s_ref <= progress[-1] + 1e-9
    s_q = s_ref[covered]

    def interp(col):
        return np.interp(s_q, progress, col)

    vel = interp(log.speeds)
    roll = interp(log.records[:, 4])
    pitch = interp(log.records[:, 5])
    throttle = interp(log.throttles)
    time = interp(log.times)

    if log.reached:
        total_time = float(log.times[-1])
        energy_cum = np.concatenate(
            [[0.0], np.cumsum(np.diff(log.times) * 0.5 * (log.throttles[1:] + log.throttles[:-1]))]
        )
        total_energy = float(energy_cum[-1])
        rem_time = total_time - time
        rem_energy = total_energy - np.interp(time, log.times, energy_cum)
    else:
        rem_time = np.full_like(time, np.nan)
        rem_energy = np.full_like(time, np.nan)

    return ResampledRun(
        run_id=log.run_id,
        commanded_speed=log.commanded_speed,
        reached=log.reached,
        positions=stations[covered],
        velocity=vel,
        roll=roll,
        pitch=pitch,
        throttle=throttle,
        time=time,
        remaining_time=rem_time,
        remaining_energy=rem_energy,
    )


def rollover_risk_raw(theta, lower, upper) -> float:
    """Largest per-component violation of the safe attitude band (rad)."""
    theta = np.asarray(theta, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    over = float(np.max(theta - upper))
    under = float(np.max(lower - theta))
    return max(0.0, over, under)


def raw_deviation_series(attitudes, lower, upper) -> np.ndarray:
    """Vectorised rollover_risk_raw over an (M, 2) attitude series."""
    att = np.asarray(attitudes, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    over = np.max(att - upper[None, :], axis=1)
    under = np.max(lower[None, :] - att, axis=1)
    return np.maximum(0.0, np.maximum(over, under))


def rollover_risk(raw_series, gamma: float, horizon: int) -> np.ndarray:
    """Discounted future deviation, normalised so a sustained 90 deg excess is 1.

    At index i the raw excesses over the next ``horizon`` steps (truncated at
    the series end) are accumulated with weights gamma**k and divided by the
    accumulation a constant pi/2 excess would produce over the same window,
    then clamped to [0, 1].
    """
    raw = np.asarray(raw_series, dtype=np.float64)
    if raw.ndim != 1 or len(raw) == 0:
        raise InvalidSpecError("raw series must be a non-empty 1D sequence")
    if not (0.0 < gamma < 1.0):
        raise InvalidSpecError("gamma must lie in (0, 1)")
    n = len(raw)
    powers = gamma ** np.arange(horizon + 1)
    out = np.empty(n)
    for i in range(n):
        k = min(horizon, n - 1 - i) + 1
        acc = float(np.dot(powers[:k], raw[i : i + k]))
        norm = (math.pi / 2.0) * float(np.sum(powers[:k]))
        out[i] = min(1.0, acc / norm)
    return out


def effort_metrics(runs, i: int, dnf_penalty: float = 1.5):
    """Min-max normalised (t_time, t_energy) across runs at station i.

    Runs that never reached the goal are charged ``dnf_penalty`` times the
    worst completing run's raw value; if no run completed, every run gets the
    same sentinel and normalises to zero. All-equal raw values normalise to
    zero for every run.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise InvalidSpecError("need at least 2 runs sharing the station")
    if any(i >= len(r) for r in runs):
        raise InvalidSpecError(f"station {i} not covered by every run")
    raw_t = np.array([r.remaining_time[i] for r in runs])
    raw_e = np.array([r.remaining_energy[i] for r in runs])
    return _normalise_raw(raw_t, dnf_penalty), _normalise_raw(raw_e, dnf_penalty)


def _normalise_raw(raw: np.ndarray, dnf_penalty: float) -> np.ndarray:
    raw = raw.astype(np.float64, copy=True)
    dnf = np.isnan(raw)
    if np.all(dnf):
        raw[:] = 1.0
    elif np.any(dnf):
        raw[dnf] = dnf_penalty * float(np.nanmax(raw))
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def traversability_score(t_roll, t_time, t_energy, weights) -> float:
    """Convex combination of the three difficulty terms."""
    w_r, w_t, w_e = weights
    return w_r * t_roll + w_t * t_time + w_e * t_energy


def fit_gaussian(samples, bounds: ParamBounds = DEFAULT_BOUNDS,
                 score_floor: float = 0.02, max_iter: int = 100,
                 step_tol: float = 1e-8) -> GaussianParams:
    """Least-squares Gaussian fit to (velocity, score) samples within bounds.

    Moment-matching initialisation (peak from the max score, centre and width
    from score-weighted moments) followed by damped least squares with
    box-projected steps; only improving steps are accepted, so the returned
    residual never exceeds the initialiser's. Scores that are all below
    ``score_floor`` short-circuit to the flat profile (A=0).
    """
    samples = list(samples)
    if len(samples) < 3:
        raise UnderDeterminedFitError(f"need >= 3 samples, got {len(samples)}")
    v = np.array([s.velocity for s in samples], dtype=np.float64)
    t = np.array([s.score for s in samples], dtype=np.float64)
    return _fit_arrays(v, t, bounds, score_floor, max_iter, step_tol)


def _fit_arrays(v, t, bounds, score_floor, max_iter, step_tol) -> GaussianParams:
    if len(np.unique(v)) < 2:
        raise UnderDeterminedFitError("all sample velocities are equal")
    if np.all(t < score_floor):
        mu = float(np.clip(np.mean(v), bounds.mu_lo, bounds.mu_hi))
        return GaussianParams(0.0, mu, bounds.sigma_min)

    p = np.array(_moment_init(v, t, bounds))
    sse = _sse(p, v, t)
    lam = 1e-3
    for _ in range(max_iter):
        jac = _jacobian(p, v)
        resid = t - _model(p, v)
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        try:
            delta = np.linalg.solve(jtj + lam * (np.diag(np.diag(jtj)) + 1e-12 * np.eye(3)), jtr)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        cand = np.array(bounds.clip(*(p + delta)), dtype=np.float64)
        cand_sse = _sse(cand, v, t)
        if cand_sse < sse:
            step = float(np.max(np.abs(cand - p)))
            p, sse = cand, cand_sse
            lam = max(lam / 3.0, 1e-12)
            if step < step_tol:
                break
        else:
            lam *= 3.0
            if lam > 1e12:
                break
    return GaussianParams(float(p[0]), float(p[1]), float(p[2]))


def _moment_init(v, t, bounds):
    a0 = float(np.clip(np.max(t), 0.0, bounds.a_max))
    w = np.maximum(t, 1e-12)
    mu0 = float(np.sum(w * v) / np.sum(w))
    var0 = float(np.sum(w * (v - mu0) ** 2) / np.sum(w))
    sigma0 = math.sqrt(max(var0, bounds.sigma_min**2))
    return (
        a0,
        float(np.clip(mu0, bounds.mu_lo, bounds.mu_hi)),
        float(np.clip(sigma0, bounds.sigma_min, bounds.sigma_max)),
    )


def _model(p, v):
    a, mu, sigma = p
    return a * np.exp(-((v - mu) ** 2) / (2.0 * sigma * sigma))


def _sse(p, v, t):
    r = t - _model(p, v)
    return float(r @ r)


def _jacobian(p, v):
    a, mu, sigma = p
    d = v - mu
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return np.stack([g, a * g * d / (sigma * sigma), a * g * d * d / (sigma**3)], axis=1)


def build_label_map(hm: HeightMap, logs, cfg: LabelConfig,
                    geom: VehicleGeometry | None = None):
    """Assemble the label map and mask for one terrain from its traversal runs.

    Per reference station: score every covering run, fit the bounded Gaussian
    (stations with too few samples or velocities are skipped, their cells stay
    unmasked), and stamp the parameters into all cells within the stamping
    radius, nearest station winning on overlap. Unlabelled cells carry the
    flat sentinel profile (A=0) with the mask false. Deterministic given logs
    and config.
    """
    logs = list(logs)
    if len(logs) < cfg.min_runs:
        raise InvalidSpecError(f"need >= {cfg.min_runs} runs, got {len(logs)}")
    terrain_ids = {log.terrain_id for log in logs}
    if len(terrain_ids) != 1:
        raise InvalidSpecError(f"runs span multiple terrains: {sorted(terrain_ids)}")
    endpoints = {(log.start, log.goal) for log in logs}
    if len(endpoints) != 1:
        raise InvalidSpecError("runs must share start and goal")
    geom = geom or VehicleGeometry()

    stations, _ = chord_stations(logs[0].start, logs[0].goal, cfg.spacing)
    heading = math.atan2(
        logs[0].goal[1] - logs[0].start[1], logs[0].goal[0] - logs[0].start[0]
    )
    runs = []
    for log in logs:
        try:
            runs.append(resample_trajectory(log, cfg.spacing))
        except ResampleError:
            continue  # a run that went nowhere contributes no samples

    # Safe attitude band over the whole labelled segment.
    lower, upper = orientation_bounds(
        hm, list(stations), [heading] * len(stations), geom
    )

    risk = {}
    for r in runs:
        raw = raw_deviation_series(r.attitudes, lower, upper)
        risk[r.run_id] = rollover_risk(raw, cfg.gamma, cfg.horizon)

    shape = (hm.height_cells, hm.width_cells)
    a = np.zeros(shape)
    mu = np.full(shape, cfg.bounds.mu_lo)
    sigma = np.full(shape, cfg.bounds.sigma_min)
    mask = np.zeros(shape, dtype=bool)
    best_dist = np.full(shape, np.inf)

    offsets = _stamp_offsets(cfg.stamp_radius_cells)
    for i, p_i in enumerate(stations):
        covering = [r for r in runs if i < len(r)]
        if len(covering) < 3:
            continue
        vels = np.array([r.velocity[i] for r in covering])
        if len(np.unique(vels)) < 2:
            continue
        t_time, t_energy = effort_metrics(covering, i, cfg.dnf_penalty)
        scores = np.array([
            traversability_score(risk[r.run_id][i], t_time[k], t_energy[k], cfg.weights)
            for k, r in enumerate(covering)
        ])
        scores = np.clip(scores, 0.0, 1.0)
        try:
            psi = _fit_arrays(vels, scores, cfg.bounds, cfg.score_floor, 100, 1e-8)
        except UnderDeterminedFitError:
            continue
        _stamp(hm, p_i, psi, offsets, a, mu, sigma, mask, best_dist)

    mat = MatMap(a, mu, sigma, hm.resolution, hm.origin, cfg.bounds)
    return mat, mask


def _stamp_offsets(radius: int):
    offs = []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            d = math.hypot(dr, dc)
            if d <= radius + 1e-9:
                offs.append((dr, dc, d))
    return offs


def _stamp(hm, p_i, psi: GaussianParams, offsets, a, mu, sigma, mask, best_dist):
    try:
        col, row = hm.world_to_cell(p_i)
    except Exception:
        return
    h, w = a.shape
    for dr, dc, d in offsets:
        r, c = row + dr, col + dc
        if 0 <= r < h and 0 <= c < w and d < best_dist[r, c]:
            a[r, c] = psi.peak_penalty
            mu[r, c] = psi.critical_velocity
            sigma[r, c] = psi.sensitivity
            mask[r, c] = True
            best_dist[r, c] = d
