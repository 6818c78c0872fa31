//! Closed-loop style scoring of trajectories against scenarios: collision,
//! drivable-area compliance, time-to-collision, comfort, and progress
//! sub-scores folded into a weighted composite, plus the best-of-K rollout
//! protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Route, Scenario, Trajectory, EGO_RADIUS};

/// Per-trajectory sub-scores. `dac` is the binarized compliance gate; the
/// raw fraction is kept in `dac_fraction` for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub nc: f64,
    pub dac: f64,
    pub dac_fraction: f64,
    pub ttc: f64,
    pub comf: f64,
    pub ep: f64,
    pub pdms: f64,
    /// Set when the trajectory was rejected outright (non-finite input).
    pub flagged: bool,
}

/// Weights of the soft sub-scores inside the composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub w_ttc: f64,
    pub w_comf: f64,
    pub w_ep: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self { w_ttc: 5.0, w_comf: 2.0, w_ep: 5.0 }
    }
}

/// Every scoring threshold in one place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    /// Interpolation rate along the trajectory, Hz.
    pub sim_hz: f64,
    /// Constant-velocity projection horizon for the TTC check, seconds.
    pub ttc_horizon: f64,
    /// Comfort bound on acceleration magnitude, m/s^2.
    pub max_accel: f64,
    /// Comfort bound on jerk magnitude, m/s^3.
    pub max_jerk: f64,
    /// Ego footprint radius, meters.
    pub ego_radius: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            sim_hz: 10.0,
            ttc_horizon: 1.0,
            max_accel: 3.0,
            max_jerk: 10.0,
            ego_radius: EGO_RADIUS,
        }
    }
}

fn zero_report(flagged: bool) -> ScoreReport {
    ScoreReport {
        nc: 0.0,
        dac: 0.0,
        dac_fraction: 0.0,
        ttc: 0.0,
        comf: 0.0,
        ep: 0.0,
        pdms: 0.0,
        flagged,
    }
}

/// Scores one trajectory (in the scenario's ego frame) against the scenario.
pub fn score_trajectory(
    s: &Scenario,
    t: &Trajectory,
    w: &CompositeWeights,
    p: &ScoreParams,
) -> ScoreReport {
    if !t.is_finite() || t.points.is_empty() {
        return zero_report(true);
    }
    let dt = t.dt;
    let horizon = dt * t.points.len() as f64;

    // Node sequence: start pose at t=0, then each waypoint.
    let mut nodes: Vec<(f64, f64, f64)> = Vec::with_capacity(t.points.len() + 1);
    nodes.push((0.0, 0.0, 0.0));
    for (i, pt) in t.points.iter().enumerate() {
        nodes.push(((i + 1) as f64 * dt, pt[0], pt[1]));
    }
    let pose_at = |time: f64| -> (f64, f64) {
        let k = (time / dt).floor() as usize;
        let k = k.min(nodes.len() - 2);
        let (t0, x0, y0) = nodes[k];
        let (t1, x1, y1) = nodes[k + 1];
        let a = ((time - t0) / (t1 - t0).max(1e-12)).clamp(0.0, 1.0);
        (x0 + a * (x1 - x0), y0 + a * (y1 - y0))
    };

    // No-collision: sweep interpolated poses against moving obstacle discs.
    let steps = (horizon * p.sim_hz).round() as usize;
    let mut nc = 1.0;
    'outer: for k in 0..=steps {
        let time = k as f64 / p.sim_hz;
        let (x, y) = pose_at(time);
        for ob in &s.obstacles {
            let (ox, oy) = ob.center_at(time);
            let d = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
            if d < ob.radius + p.ego_radius {
                nc = 0.0;
                break 'outer;
            }
        }
    }

    // Drivable-area compliance: fraction of interpolated poses on drivable
    // cells; out-of-grid counts as non-compliant. Binary score needs all.
    let mut inside = 0usize;
    for k in 0..=steps {
        let time = k as f64 / p.sim_hz;
        let pos = pose_at(time);
        if let Some((i, j)) = s.meta.cell_of(pos) {
            if s.drivable[i * s.meta.w + j] {
                inside += 1;
            }
        }
    }
    let dac_fraction = inside as f64 / (steps + 1) as f64;
    let dac = if inside == steps + 1 { 1.0 } else { 0.0 };

    // Waypoint velocities by finite differences (start node included).
    let mut vels: Vec<(f64, f64)> = Vec::with_capacity(t.points.len() + 1);
    vels.push((s.ego0.velocity[0], s.ego0.velocity[1]));
    for i in 1..nodes.len() {
        let (_, x0, y0) = nodes[i - 1];
        let (_, x1, y1) = nodes[i];
        vels.push(((x1 - x0) / dt, (y1 - y0) / dt));
    }

    // Time-to-collision: project each waypoint at constant velocity and test
    // against obstacles moving along their own velocities.
    let mut ttc = 1.0;
    'ttc: for (i, pt) in t.points.iter().enumerate() {
        let wp_time = (i + 1) as f64 * dt;
        let (vx, vy) = vels[i + 1];
        let substeps = (p.ttc_horizon * p.sim_hz).round() as usize;
        for k in 1..=substeps {
            let tau = k as f64 / p.sim_hz;
            let (x, y) = (pt[0] + vx * tau, pt[1] + vy * tau);
            for ob in &s.obstacles {
                let (ox, oy) = ob.center_at(wp_time + tau);
                let d = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
                if d < ob.radius + p.ego_radius {
                    ttc = 0.0;
                    break 'ttc;
                }
            }
        }
    }

    // Comfort: acceleration and jerk magnitudes by finite differences.
    let mut comf = 1.0;
    let mut accels: Vec<(f64, f64)> = Vec::new();
    for i in 1..vels.len() {
        let a = ((vels[i].0 - vels[i - 1].0) / dt, (vels[i].1 - vels[i - 1].1) / dt);
        if (a.0 * a.0 + a.1 * a.1).sqrt() > p.max_accel {
            comf = 0.0;
        }
        accels.push(a);
    }
    for i in 1..accels.len() {
        let j = (
            (accels[i].0 - accels[i - 1].0) / dt,
            (accels[i].1 - accels[i - 1].1) / dt,
        );
        if (j.0 * j.0 + j.1 * j.1).sqrt() > p.max_jerk {
            comf = 0.0;
        }
    }

    // Ego progress: arc length reached along the route, relative to the
    // expert's progress.
    let route = Route::from_points(s.route.clone());
    let progress = |traj: &Trajectory| -> f64 {
        traj.points
            .iter()
            .map(|pt| route.project((pt[0], pt[1])) - route.s_origin)
            .fold(0.0f64, f64::max)
    };
    let expert_prog = progress(&s.expert);
    let ego_prog = progress(t);
    let ep = if expert_prog <= 1e-9 {
        1.0
    } else {
        (ego_prog / expert_prog).clamp(0.0, 1.0)
    };

    let mut report = ScoreReport {
        nc,
        dac,
        dac_fraction,
        ttc,
        comf,
        ep,
        pdms: 0.0,
        flagged: false,
    };
    report.pdms = pdms(&report, w).unwrap_or(0.0);
    report
}

/// Weighted composite with multiplicative collision and compliance gates.
pub fn pdms(r: &ScoreReport, w: &CompositeWeights) -> Result<f64> {
    let total = w.w_ttc + w.w_comf + w.w_ep;
    if !(total > 0.0) {
        return Err(Error::InvalidArgument {
            what: "composite weights",
            detail: "weights must sum to a positive value".into(),
        });
    }
    Ok(r.nc * r.dac * (w.w_ttc * r.ttc + w.w_comf * r.comf + w.w_ep * r.ep) / total)
}

/// Result of a best-of-K evaluation on one scenario.
#[derive(Debug, Clone)]
pub struct BestOfK {
    pub best: f64,
    pub std: f64,
    pub scores: Vec<f64>,
}

/// Draws K rollouts from the sampler closure (indexed 0..K), scores each,
/// and reports the maximum plus the spread of the K composite scores.
pub fn best_of_k<F>(
    mut sample: F,
    s: &Scenario,
    k: usize,
    w: &CompositeWeights,
    p: &ScoreParams,
) -> Result<BestOfK>
where
    F: FnMut(usize) -> Trajectory,
{
    if k == 0 {
        return Err(Error::InvalidArgument {
            what: "rollout count",
            detail: "K must be at least 1".into(),
        });
    }
    let scores: Vec<f64> = (0..k).map(|i| score_trajectory(s, &sample(i), w, p).pdms).collect();
    Ok(summarize_rollouts(&scores))
}

/// Max and population standard deviation of a set of rollout scores.
pub fn summarize_rollouts(scores: &[f64]) -> BestOfK {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / scores.len() as f64;
    BestOfK {
        best,
        std: var.sqrt(),
        scores: scores.to_vec(),
    }
}

/// Best score over the first k rollouts, for each requested k. Reusing one
/// set of draws makes best-of-K monotone in K by construction.
pub fn prefix_best(scores: &[f64], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| scores[..k.min(scores.len())].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Comma-separated score table with an aggregate footer row.
pub fn score_table_csv(rows: &[(String, ScoreReport)]) -> String {
    let mut out = String::from("scenario,nc,dac,ttc,comf,ep,pdms\n");
    let mut agg = [0.0f64; 6];
    for (id, r) in rows {
        out.push_str(&format!(
            "{id},{},{},{},{},{:.6},{:.6}\n",
            r.nc, r.dac, r.ttc, r.comf, r.ep, r.pdms
        ));
        agg[0] += r.nc;
        agg[1] += r.dac;
        agg[2] += r.ttc;
        agg[3] += r.comf;
        agg[4] += r.ep;
        agg[5] += r.pdms;
    }
    let n = rows.len().max(1) as f64;
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        agg[0] / n,
        agg[1] / n,
        agg[2] / n,
        agg[3] / n,
        agg[4] / n,
        agg[5] / n
    ));
    out
}
