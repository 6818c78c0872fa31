//! Synthetic BEV world: seeded scenario generation, a kinematic expert that
//! follows the route with a constant-deceleration stop profile, time-shifted
//! trajectory resampling, Gaussian label-noise injection, and raster channels
//! for the encoder. Stands in for sensors and human driving logs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::GridMeta;

/// Waypoints per trajectory.
pub const T_F: usize = 8;
/// Planning horizon in seconds.
pub const HORIZON: f64 = 4.0;
/// Seconds between waypoints.
pub const DT: f64 = HORIZON / T_F as f64;
/// Ego footprint disc radius in meters, shared with the scorer.
pub const EGO_RADIUS: f64 = 1.0;

/// Deterministically mix a master seed with stream tags (splitmix64 chain).
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut z = master;
    for &t in tags {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(t.wrapping_mul(0xbf58476d1ce4e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub fn one_hot(&self) -> [f64; 3] {
        match self {
            Command::Left => [1.0, 0.0, 0.0],
            Command::Straight => [0.0, 1.0, 0.0],
            Command::Right => [0.0, 0.0, 1.0],
        }
    }
}

/// Current-frame kinematic state plus the navigation command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoStatus {
    pub velocity: [f64; 2],
    pub accel: [f64; 2],
    pub command: Command,
}

impl EgoStatus {
    /// 7-value input feature: vx, vy, ax, ay, command one-hot.
    pub fn feature(&self) -> [f64; 7] {
        let c = self.command.one_hot();
        [
            self.velocity[0],
            self.velocity[1],
            self.accel[0],
            self.accel[1],
            c[0],
            c[1],
            c[2],
        ]
    }

    pub fn speed(&self) -> f64 {
        (self.velocity[0] * self.velocity[0] + self.velocity[1] * self.velocity[1]).sqrt()
    }
}

/// Future waypoints (x, y, heading) in the ego frame at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<[f64; 3]>,
    pub dt: f64,
}

impl Trajectory {
    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p[0], p[1])).collect()
    }

    /// Finite-difference speeds with the given start point standing in for
    /// the position at t = 0.
    pub fn speeds_from(&self, start: (f64, f64)) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len());
        let mut prev = start;
        for p in &self.points {
            let d = ((p[0] - prev.0).powi(2) + (p[1] - prev.1).powi(2)).sqrt();
            out.push(d / self.dt);
            prev = (p[0], p[1]);
        }
        out
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.speeds_from((0.0, 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Flatten to the diffusion state layout (T_f * 3, row per waypoint).
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Self {
        let points = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self { points, dt }
    }
}

/// Disc obstacle with constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    pub velocity: [f64; 2],
}

impl Obstacle {
    pub fn center_at(&self, t: f64) -> (f64, f64) {
        (self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Archetype {
    Straight,
    LeftTurn,
    RightTurn,
    StopForObstacle,
    CurveFollow,
}

/// One synthetic driving situation: rasters come from these fields, the
/// expert trajectory is the supervision signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub meta: GridMeta,
    pub drivable: Vec<bool>,
    pub obstacles: Vec<Obstacle>,
    pub route: Vec<[f64; 2]>,
    pub ego0: EgoStatus,
    pub expert: Trajectory,
    pub archetype: Archetype,
}

/// Generation knobs. Defaults give a 32 m forward-biased grid at 1 m/cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub grid_h: usize,
    pub grid_w: usize,
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub half_width: f64,
    pub max_decorative_obstacles: usize,
    pub retries: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            resolution: 1.0,
            origin_x: -7.5,
            origin_y: -15.5,
            half_width: 3.0,
            max_decorative_obstacles: 3,
            retries: 40,
        }
    }
}

impl WorldParams {
    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::new(self.grid_h, self.grid_w, self.resolution, (self.origin_x, self.origin_y))
    }
}

// ---- route geometry --------------------------------------------------------------

/// Polyline with cached cumulative arc length. `s_origin` is the arc length
/// of the point closest to the ego start (the frame origin).
#[derive(Debug, Clone)]
pub struct Route {
    pub pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    pub s_origin: f64,
}

impl Route {
    pub fn from_points(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut s = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            s += d;
            cum.push(s);
        }
        let mut r = Self { pts, cum, s_origin: 0.0 };
        r.s_origin = r.project((0.0, 0.0));
        r
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    /// Pose (x, y, heading) at arc length `s`, clamped to the ends.
    pub fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        let n = self.pts.len();
        if n == 1 {
            return (self.pts[0][0], self.pts[0][1], 0.0);
        }
        let s = s.clamp(0.0, self.length());
        let mut seg = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if seg >= n - 1 {
            seg = n - 2;
        }
        let (a, b) = (self.pts[seg], self.pts[seg + 1]);
        let seg_len = (self.cum[seg + 1] - self.cum[seg]).max(1e-12);
        let t = (s - self.cum[seg]) / seg_len;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        let theta = (b[1] - a[1]).atan2(b[0] - a[0]);
        (x, y, theta)
    }

    /// Arc length of the closest point on the polyline to `p`.
    pub fn project(&self, p: (f64, f64)) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.pts.len().saturating_sub(1) {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((p.0 - a[0]) * dx + (p.1 - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
            let d2 = (p.0 - cx).powi(2) + (p.1 - cy).powi(2);
            if d2 < best.0 {
                best = (d2, self.cum[i] + t * len2.sqrt());
            }
        }
        best.1
    }

    /// Distance from `p` to the polyline.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        let s = self.project(p);
        let (x, y, _) = self.pose_at(s);
        ((p.0 - x).powi(2) + (p.1 - y).powi(2)).sqrt()
    }
}

/// Constant-speed motion with an optional constant-deceleration stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedProfile {
    pub v0: f64,
    /// Arc length (relative to the ego start) at which the profile stops.
    pub stop_s: Option<f64>,
}

impl SpeedProfile {
    pub fn decel(&self) -> f64 {
        match self.stop_s {
            Some(s) if s > 0.0 && self.v0 > 0.0 => self.v0 * self.v0 / (2.0 * s),
            _ => 0.0,
        }
    }

    pub fn s_at(&self, t: f64) -> f64 {
        match self.stop_s {
            None => self.v0 * t,
            Some(stop) if stop <= 0.0 => 0.0,
            Some(stop) => {
                let a = self.decel();
                if a <= 0.0 {
                    return (self.v0 * t).min(stop);
                }
                let t_stop = self.v0 / a;
                if t >= t_stop {
                    stop
                } else {
                    (self.v0 * t - 0.5 * a * t * t).min(stop)
                }
            }
        }
    }

    pub fn v_at(&self, t: f64) -> f64 {
        match self.stop_s {
            None => self.v0,
            Some(stop) if stop <= 0.0 => 0.0,
            Some(_) => {
                let a = self.decel();
                (self.v0 - a * t).max(0.0)
            }
        }
    }

    pub fn a_at(&self, t: f64) -> f64 {
        match self.stop_s {
            None => 0.0,
            Some(stop) if stop <= 0.0 => 0.0,
            Some(_) => {
                let a = self.decel();
                if self.v_at(t) > 0.0 {
                    -a
                } else {
                    0.0
                }
            }
        }
    }
}

/// Continuous expert path: route geometry plus a speed profile. Both the
/// stored expert trajectory and every resample are samples of this object.
#[derive(Debug, Clone)]
pub struct ExpertPath {
    pub route: Route,
    pub profile: SpeedProfile,
}

impl ExpertPath {
    pub fn pose_at_time(&self, t: f64) -> (f64, f64, f64) {
        let s = self.profile.s_at(t);
        self.route.pose_at(self.route.s_origin + s)
    }

    /// Sample a T_f-point trajectory starting at time `offset`.
    pub fn sample(&self, offset: f64, t_f: usize, dt: f64) -> Trajectory {
        let points = (1..=t_f)
            .map(|i| {
                let (x, y, th) = self.pose_at_time(offset + i as f64 * dt);
                [x, y, th]
            })
            .collect();
        Trajectory { points, dt }
    }
}

/// Margin kept between the ego disc and a blocking obstacle at full stop.
pub const STOP_GAP: f64 = 0.6;
/// Comfort deceleration budget the generator plans stops with.
const PLANNED_DECEL: f64 = 2.3;

/// Reconstructs the continuous expert path of a scenario: route following at
/// the initial speed with a constant-deceleration stop behind the first
/// blocking obstacle.
pub fn expert_path(route: Route, obstacles: &[Obstacle], v0: f64) -> ExpertPath {
    let mut stop: Option<f64> = None;
    for ob in obstacles {
        let lateral = route.distance((ob.center[0], ob.center[1]));
        if lateral <= ob.radius + EGO_RADIUS + 0.25 {
            let s_obs = route.project((ob.center[0], ob.center[1])) - route.s_origin;
            if s_obs > 0.0 {
                let s_stop = s_obs - (ob.radius + EGO_RADIUS + STOP_GAP);
                stop = Some(match stop {
                    Some(cur) => cur.min(s_stop),
                    None => s_stop,
                });
            }
        }
    }
    ExpertPath {
        route,
        profile: SpeedProfile { v0, stop_s: stop },
    }
}

/// Route follower sampled at T_f points over the horizon. Emits a full-stop
/// trajectory (all points at the start pose) when no stop distance remains.
pub fn expert_policy(route: Route, obstacles: &[Obstacle], v0: f64) -> Trajectory {
    expert_path(route, obstacles, v0).sample(0.0, T_F, DT)
}

/// Re-samples the scenario's continuous expert path starting at `offset`
/// seconds, in the scenario's own frame. The result augments the dataset;
/// it never replaces the original trajectory.
pub fn resample_trajectory(s: &Scenario, offset: f64) -> Result<Trajectory> {
    if !(0.0..DT).contains(&offset) {
        return Err(Error::InvalidArgument {
            what: "resample offset",
            detail: format!("offset {offset} outside [0, {DT})"),
        });
    }
    let path = scenario_expert_path(s);
    Ok(path.sample(offset, T_F, s.expert.dt))
}

/// The continuous path underlying a scenario's stored expert trajectory.
pub fn scenario_expert_path(s: &Scenario) -> ExpertPath {
    expert_path(Route::from_points(s.route.clone()), &s.obstacles, s.ego0.speed())
}

/// Adds iid zero-mean Gaussian noise with std `sigma` to the x and y of each
/// waypoint; headings are left untouched.
pub fn inject_noise(t: &Trajectory, sigma: f64, rng: &mut ChaCha8Rng) -> Trajectory {
    if sigma == 0.0 {
        return t.clone();
    }
    let points = t
        .points
        .iter()
        .map(|p| {
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            [p[0] + sigma * nx, p[1] + sigma * ny, p[2]]
        })
        .collect();
    Trajectory { points, dt: t.dt }
}

// ---- generation ------------------------------------------------------------------

fn gen_route(arch: Archetype, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, f64) {
    // Returns (polyline, minimum curve radius along it). The polyline starts
    // 8 m behind the origin and passes through (0, 0) heading +x.
    const STEP: f64 = 0.5;
    match arch {
        Archetype::Straight | Archetype::StopForObstacle => {
            let pts = (0..=106).map(|k| [-8.0 + STEP * k as f64, 0.0]).collect();
            (pts, f64::INFINITY)
        }
        Archetype::LeftTurn | Archetype::RightTurn => {
            let sign = if arch == Archetype::LeftTurn { 1.0 } else { -1.0 };
            let l0: f64 = rng.gen_range(3.0..8.0);
            let r: f64 = rng.gen_range(8.0..14.0);
            let phi: f64 = rng.gen_range(1.05..1.55); // 60..89 degrees
            let mut pts: Vec<[f64; 2]> = Vec::new();
            let mut s = -8.0;
            while s < l0 {
                pts.push([s, 0.0]);
                s += STEP;
            }
            // Arc segment: center at (l0, sign*r).
            let arc_len = r * phi;
            let mut a = 0.0;
            while a <= arc_len {
                let th = a / r;
                pts.push([l0 + r * th.sin(), sign * r * (1.0 - th.cos())]);
                a += STEP;
            }
            // Straight continuation along the exit heading.
            let (ex, ey) = (l0 + r * phi.sin(), sign * r * (1.0 - phi.cos()));
            let (hx, hy) = (phi.cos(), sign * phi.sin());
            let mut d = STEP;
            while d <= 25.0 {
                pts.push([ex + hx * d, ey + hy * d]);
                d += STEP;
            }
            (pts, r)
        }
        Archetype::CurveFollow => {
            let wavelength: f64 = rng.gen_range(26.0..44.0);
            let k = std::f64::consts::TAU / wavelength;
            let a_max = 1.0 / (9.0 * k * k); // min curve radius 9 m
            let amp: f64 = rng.gen_range((0.4 * a_max).min(1.0)..a_max);
            let pts = (0..=212)
                .map(|i| {
                    let x = -8.0 + 0.25 * i as f64;
                    [x, amp * (1.0 - (k * x).cos())]
                })
                .collect();
            (pts, 1.0 / (amp * k * k))
        }
    }
}

fn command_from_route(route: &Route) -> Command {
    let (_, _, th0) = route.pose_at(route.s_origin);
    let look = (route.length() - route.s_origin).min(15.0);
    let (_, _, th1) = route.pose_at(route.s_origin + look);
    let mut d = th1 - th0;
    while d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    }
    while d < -std::f64::consts::PI {
        d += std::f64::consts::TAU;
    }
    if d > 0.26 {
        Command::Left
    } else if d < -0.26 {
        Command::Right
    } else {
        Command::Straight
    }
}

fn rasterize_drivable(route: &Route, half_width: f64, meta: GridMeta) -> Vec<bool> {
    let mut mask = vec![false; meta.cells()];
    for i in 0..meta.h {
        for j in 0..meta.w {
            let c = meta.cell_center(i, j);
            if route.distance(c) <= half_width {
                mask[i * meta.w + j] = true;
            }
        }
    }
    mask
}

/// Clearance required between an obstacle sweep and the route so neither the
/// expert NC check nor DAC is ever at risk from decorative obstacles.
fn decorative_clear(route: &Route, ob: &Obstacle) -> bool {
    let mut t = 0.0;
    while t <= HORIZON + 1e-9 {
        let c = ob.center_at(t);
        if route.distance(c) < ob.radius + EGO_RADIUS + 1.2 {
            return false;
        }
        t += 0.25;
    }
    true
}

/// Deterministic-in-seed scenario construction. Infeasible draws retry with
/// fresh randomness from the same stream; the budget is `params.retries`.
pub fn generate_scenario(seed: u64, params: &WorldParams) -> Result<Scenario> {
    let meta = params.meta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5ce9]));
    for _attempt in 0..params.retries {
        if let Some(s) = try_generate(seed, params, meta, &mut rng) {
            return Ok(s);
        }
    }
    Err(Error::Infeasible {
        detail: format!("seed {seed}: no feasible scenario in {} attempts", params.retries),
    })
}

fn try_generate(seed: u64, params: &WorldParams, meta: GridMeta, rng: &mut ChaCha8Rng) -> Option<Scenario> {
    let arch = match rng.gen_range(0..5) {
        0 => Archetype::Straight,
        1 => Archetype::LeftTurn,
        2 => Archetype::RightTurn,
        3 => Archetype::StopForObstacle,
        _ => Archetype::CurveFollow,
    };
    let (pts, min_radius) = gen_route(arch, rng);
    let route = Route::from_points(pts);

    // Speed: curvature-limited so the expert's lateral acceleration stays
    // inside the comfort budget.
    let v_curve_cap = if min_radius.is_finite() {
        0.9 * (PLANNED_DECEL * min_radius).sqrt()
    } else {
        f64::INFINITY
    };
    let v_hi = v_curve_cap.min(4.8);
    if v_hi < 1.5 {
        return None;
    }
    let v0: f64 = rng.gen_range(1.5..v_hi.max(1.6));

    let mut obstacles: Vec<Obstacle> = Vec::new();
    if arch == Archetype::StopForObstacle {
        let r_obs: f64 = rng.gen_range(0.8..1.4);
        let d_need = v0 * v0 / (2.0 * PLANNED_DECEL) + r_obs + EGO_RADIUS + STOP_GAP + 0.3;
        if d_need > 19.0 {
            return None;
        }
        let s_obs: f64 = rng.gen_range(d_need..(d_need + 6.0).min(19.5));
        let (ox, oy, _) = route.pose_at(route.s_origin + s_obs);
        obstacles.push(Obstacle {
            center: [ox, oy],
            radius: r_obs,
            velocity: [0.0, 0.0],
        });
    }

    // Decorative obstacles, placed clear of the route sweep.
    let deco = rng.gen_range(0..=params.max_decorative_obstacles);
    for _ in 0..deco {
        for _try in 0..20 {
            let radius: f64 = rng.gen_range(0.8..1.5);
            let cx: f64 = rng.gen_range(meta.origin.0..meta.origin.0 + meta.resolution * meta.h as f64);
            let cy: f64 = rng.gen_range(meta.origin.1..meta.origin.1 + meta.resolution * meta.w as f64);
            let moving = rng.gen_bool(0.3);
            let velocity = if moving {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let sp: f64 = rng.gen_range(0.1..0.8);
                [sp * ang.cos(), sp * ang.sin()]
            } else {
                [0.0, 0.0]
            };
            let ob = Obstacle { center: [cx, cy], radius, velocity };
            if decorative_clear(&route, &ob) {
                obstacles.push(ob);
                break;
            }
        }
    }

    let path = expert_path(route, &obstacles, v0);
    let expert = path.sample(0.0, T_F, DT);

    // Feasibility: every waypoint inside the grid and on drivable cells.
    let drivable = rasterize_drivable(&path.route, params.half_width, meta);
    for p in &expert.points {
        match meta.cell_of((p[0], p[1])) {
            Some((i, j)) if drivable[i * meta.w + j] => {}
            _ => return None,
        }
    }

    let a0 = path.profile.a_at(0.0);
    let ego0 = EgoStatus {
        velocity: [v0, 0.0],
        accel: [a0, 0.0],
        command: command_from_route(&path.route),
    };

    Some(Scenario {
        seed,
        meta,
        drivable,
        obstacles,
        route: path.route.pts.clone(),
        ego0,
        expert,
        archetype: arch,
    })
}

/// Raster input channels, each h*w, row-major with i along x and j along y:
/// 0 drivable mask, 1 obstacle occupancy, 2 obstacle closeness
/// (1 at a disc surface, fading linearly to 0 at 10 m), 3 route closeness
/// (1 on the centerline, 0 beyond twice the corridor half-width).
pub fn raster_channels(s: &Scenario, half_width: f64) -> [Vec<f64>; 4] {
    let meta = s.meta;
    let n = meta.cells();
    let mut drivable = vec![0.0; n];
    let mut occupancy = vec![0.0; n];
    let mut closeness = vec![0.0; n];
    let mut route_prox = vec![0.0; n];
    let route = Route::from_points(s.route.clone());
    for i in 0..meta.h {
        for j in 0..meta.w {
            let idx = i * meta.w + j;
            let c = meta.cell_center(i, j);
            if s.drivable[idx] {
                drivable[idx] = 1.0;
            }
            let mut min_d = f64::INFINITY;
            for ob in &s.obstacles {
                let d = ((c.0 - ob.center[0]).powi(2) + (c.1 - ob.center[1]).powi(2)).sqrt() - ob.radius;
                min_d = min_d.min(d);
                if d <= 0.0 {
                    occupancy[idx] = 1.0;
                }
            }
            if min_d.is_finite() {
                closeness[idx] = (1.0 - (min_d.max(0.0) / 10.0)).clamp(0.0, 1.0);
            }
            let dr = route.distance(c);
            route_prox[idx] = (1.0 - dr / (2.0 * half_width)).clamp(0.0, 1.0);
        }
    }
    [drivable, occupancy, closeness, route_prox]
}

// ---- dataset I/O -----------------------------------------------------------------

pub mod dataset {
    //! Line-oriented dataset file: a manifest header object, then one
    //! self-describing record per scenario. Round-trips bit-exactly.

    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::path::Path;

    pub const FORMAT: &str = "bevdiff-scenarios";
    pub const VERSION: u32 = 1;

    #[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
    pub struct Manifest {
        pub format: String,
        pub version: u32,
        pub count: usize,
        pub master_seed: u64,
        pub world: WorldParams,
    }

    #[derive(Serialize, Deserialize)]
    struct Record {
        seed: u64,
        meta: GridMeta,
        drivable_first: bool,
        drivable_runs: Vec<usize>,
        obstacles: Vec<Obstacle>,
        route: Vec<[f64; 2]>,
        ego0: EgoStatus,
        expert: Trajectory,
        archetype: Archetype,
    }

    fn rle_encode(bits: &[bool]) -> (bool, Vec<usize>) {
        if bits.is_empty() {
            return (false, Vec::new());
        }
        let first = bits[0];
        let mut runs = Vec::new();
        let mut cur = bits[0];
        let mut len = 0usize;
        for &b in bits {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        runs.push(len);
        (first, runs)
    }

    fn rle_decode(first: bool, runs: &[usize], expect: usize) -> Result<Vec<bool>> {
        let mut out = Vec::with_capacity(expect);
        let mut cur = first;
        for &r in runs {
            out.extend(std::iter::repeat(cur).take(r));
            cur = !cur;
        }
        if out.len() != expect {
            return Err(Error::Format {
                detail: format!("drivable RLE expands to {} cells, expected {expect}", out.len()),
            });
        }
        Ok(out)
    }

    impl Record {
        fn from_scenario(s: &Scenario) -> Self {
            let (first, runs) = rle_encode(&s.drivable);
            Self {
                seed: s.seed,
                meta: s.meta,
                drivable_first: first,
                drivable_runs: runs,
                obstacles: s.obstacles.clone(),
                route: s.route.clone(),
                ego0: s.ego0,
                expert: s.expert.clone(),
                archetype: s.archetype,
            }
        }

        fn into_scenario(self) -> Result<Scenario> {
            let drivable = rle_decode(self.drivable_first, &self.drivable_runs, self.meta.h * self.meta.w)?;
            Ok(Scenario {
                seed: self.seed,
                meta: self.meta,
                drivable,
                obstacles: self.obstacles,
                route: self.route,
                ego0: self.ego0,
                expert: self.expert,
                archetype: self.archetype,
            })
        }
    }

    pub fn write_dataset(path: &Path, scenarios: &[Scenario], master_seed: u64, world: &WorldParams) -> Result<()> {
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            count: scenarios.len(),
            master_seed,
            world: world.clone(),
        };
        let mut f = std::fs::File::create(path)?;
        let head = serde_json::to_string(&manifest).map_err(|e| Error::Format { detail: e.to_string() })?;
        writeln!(f, "{head}")?;
        for s in scenarios {
            let line = serde_json::to_string(&Record::from_scenario(s))
                .map_err(|e| Error::Format { detail: e.to_string() })?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn read_dataset(path: &Path) -> Result<(Manifest, Vec<Scenario>)> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format { detail: "empty dataset file".into() })??;
        let manifest: Manifest =
            serde_json::from_str(&head).map_err(|e| Error::Format { detail: format!("manifest: {e}") })?;
        if manifest.format != FORMAT {
            return Err(Error::Format {
                detail: format!("unknown dataset format {:?}", manifest.format),
            });
        }
        if manifest.version != VERSION {
            return Err(Error::VersionMismatch { found: manifest.version, expected: VERSION });
        }
        let mut out = Vec::with_capacity(manifest.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::Format { detail: format!("record: {e}") })?;
            out.push(rec.into_scenario()?);
        }
        if out.len() != manifest.count {
            return Err(Error::Format {
                detail: format!("manifest count {} but {} records", manifest.count, out.len()),
            });
        }
        Ok((manifest, out))
    }
}
