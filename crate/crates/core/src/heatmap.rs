//! Gaussian BEV heatmap targets and the focal loss that supervises the
//! predicted heatmap.
//!
//! The target field assigns every cell the maximum over per-waypoint
//! Gaussians centered at future ego positions; the Gaussian width follows
//! the configured radius policy (a velocity-scaled sigma by default).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Metric layout of a BEV grid. `origin` is the world coordinate of the
/// center of cell (0, 0); cell (i, j) is at origin + (i, j) * resolution,
/// with i along world x and j along world y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub h: usize,
    pub w: usize,
    pub resolution: f64,
    pub origin: (f64, f64),
}

impl GridMeta {
    pub fn new(h: usize, w: usize, resolution: f64, origin: (f64, f64)) -> Result<Self> {
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument {
                what: "grid size",
                detail: format!("H and W must be at least 8, got {h}x{w}"),
            });
        }
        if !(resolution > 0.0) {
            return Err(Error::InvalidArgument {
                what: "grid resolution",
                detail: format!("must be positive, got {resolution}"),
            });
        }
        Ok(Self { h, w, resolution, origin })
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Fractional cell coordinates of a world point. Out-of-grid points are
    /// returned unclamped; use [`GridMeta::contains_cell`] to flag them.
    pub fn world_to_grid(&self, p: (f64, f64)) -> (f64, f64) {
        (
            (p.0 - self.origin.0) / self.resolution,
            (p.1 - self.origin.1) / self.resolution,
        )
    }

    pub fn grid_to_world(&self, c: (f64, f64)) -> (f64, f64) {
        (
            self.origin.0 + c.0 * self.resolution,
            self.origin.1 + c.1 * self.resolution,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        self.grid_to_world((i as f64, j as f64))
    }

    pub fn contains_cell(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, p: (f64, f64)) -> Option<(usize, usize)> {
        let (ci, cj) = self.world_to_grid(p);
        let (i, j) = (ci.round() as i64, cj.round() as i64);
        if self.contains_cell(i, j) {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    /// Nearest cell center to a world point, also for out-of-grid points.
    pub fn snap(&self, p: (f64, f64)) -> (f64, f64) {
        let (ci, cj) = self.world_to_grid(p);
        self.grid_to_world((ci.round(), cj.round()))
    }
}

/// Dense H×W field of values in [0, 1] plus its grid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub values: Vec<f64>,
    pub meta: GridMeta,
}

impl HeatmapTarget {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.meta.w + j]
    }
}

/// Width policy for the per-waypoint Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RadiusPolicy {
    /// Fixed sigma in meters for every waypoint.
    Constant { radius: f64 },
    /// Sigma scales with waypoint speed: max(gamma * v_i, sigma_min), meters.
    Velocity { gamma: f64, sigma_min: f64 },
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        RadiusPolicy::Velocity { gamma: 0.4, sigma_min: 0.5 }
    }
}

impl RadiusPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RadiusPolicy::Constant { radius } => radius > 0.0,
            RadiusPolicy::Velocity { gamma, sigma_min } => gamma > 0.0 && sigma_min > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "radius policy",
                detail: format!("{self:?} has a non-positive parameter"),
            })
        }
    }

    pub fn sigma(&self, speed: f64) -> f64 {
        match *self {
            RadiusPolicy::Constant { radius } => radius,
            RadiusPolicy::Velocity { gamma, sigma_min } => (gamma * speed).max(sigma_min),
        }
    }
}

/// Builds the heatmap target: per cell, the max over waypoint Gaussians
/// exp(-((x-x_i)^2 + (y-y_i)^2) / (2 sigma_i^2)).
///
/// Each Gaussian only needs to touch cells within a few sigma of its center,
/// so the writer visits an 8-sigma window per waypoint; beyond that the
/// contribution is below 1e-13 and cannot change the max at the comparison
/// tolerances used anywhere in this crate. Waypoints outside the grid still
/// contribute through whatever part of their window overlaps it.
pub fn gaussian_bev_target(
    waypoints: &[(f64, f64)],
    speeds: &[f64],
    policy: RadiusPolicy,
    meta: GridMeta,
) -> Result<HeatmapTarget> {
    if waypoints.is_empty() {
        return Err(Error::InvalidArgument {
            what: "trajectory",
            detail: "empty trajectory".into(),
        });
    }
    if speeds.len() != waypoints.len() {
        return Err(Error::InvalidArgument {
            what: "speeds",
            detail: format!("{} speeds for {} waypoints", speeds.len(), waypoints.len()),
        });
    }
    policy.validate()?;
    for (p, v) in waypoints.iter().zip(speeds) {
        if !(p.0.is_finite() && p.1.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite { context: "gaussian_bev_target waypoint" });
        }
        if *v < 0.0 {
            return Err(Error::InvalidArgument {
                what: "speed",
                detail: format!("negative speed {v}"),
            });
        }
    }

    let mut values = vec![0.0; meta.cells()];
    for (p, &v) in waypoints.iter().zip(speeds) {
        let sigma = policy.sigma(v);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let reach = 8.0 * sigma / meta.resolution;
        let (ci, cj) = meta.world_to_grid(*p);
        let i0 = ((ci - reach).floor().max(0.0)) as usize;
        let i1 = ((ci + reach).ceil().min(meta.h as f64 - 1.0)).max(0.0) as usize;
        let j0 = ((cj - reach).floor().max(0.0)) as usize;
        let j1 = ((cj + reach).ceil().min(meta.w as f64 - 1.0)).max(0.0) as usize;
        if ci + reach < 0.0 || cj + reach < 0.0 {
            continue;
        }
        for i in i0..=i1.min(meta.h - 1) {
            for j in j0..=j1.min(meta.w - 1) {
                let (cx, cy) = meta.cell_center(i, j);
                let d2 = (cx - p.0) * (cx - p.0) + (cy - p.1) * (cy - p.1);
                let g = (-d2 * inv).exp();
                let cell = &mut values[i * meta.w + j];
                if g > *cell {
                    *cell = g;
                }
            }
        }
    }
    Ok(HeatmapTarget { values, meta })
}

/// Threshold above which a target cell is treated as a positive sample.
pub const POSITIVE_THRESHOLD: f64 = 1.0 - 1e-9;
/// Predicted probabilities are clamped into [CLAMP, 1-CLAMP] before the log.
pub const PRED_CLAMP: f64 = 1e-6;

/// Focal loss between a predicted heatmap and a Gaussian target, normalized
/// by the count of positive cells (at least one).
///
/// Positive cells (GT = 1): -(1-P)^alpha * log P.
/// Negative cells (GT < 1): -P^alpha * (1-GT)^gamma * log(1-P).
pub fn gaussian_focal_loss(
    pred: &HeatmapTarget,
    target: &HeatmapTarget,
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    if pred.meta.h != target.meta.h || pred.meta.w != target.meta.w {
        return Err(Error::ShapeMismatch {
            op: "gaussian_focal_loss",
            left: vec![pred.meta.h, pred.meta.w],
            right: vec![target.meta.h, target.meta.w],
        });
    }
    let mut positives = 0usize;
    let mut loss = 0.0;
    for (&p_raw, &gt) in pred.values.iter().zip(&target.values) {
        let p = p_raw.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        if gt >= POSITIVE_THRESHOLD {
            positives += 1;
            loss -= (1.0 - p).powf(alpha) * p.ln();
        } else {
            loss -= p.powf(alpha) * (1.0 - gt).powf(gamma) * (1.0 - p).ln();
        }
    }
    Ok(loss / positives.max(1) as f64)
}

/// Tape-level focal loss for training: identical math to
/// [`gaussian_focal_loss`], differentiable w.r.t. the predicted heatmap.
/// `pred` is a tape node holding H*W probabilities in (0, 1).
pub fn focal_loss_graph(
    tape: &mut Tape,
    pred: Var,
    target: &HeatmapTarget,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let n = target.values.len();
    if tape.data(pred).len() != n {
        return Err(Error::ShapeMismatch {
            op: "focal_loss_graph",
            left: tape.shape(pred).to_vec(),
            right: vec![target.meta.h, target.meta.w],
        });
    }
    let mut pos_mask = vec![0.0; n];
    let mut neg_weight = vec![0.0; n];
    let mut positives = 0usize;
    for (i, &gt) in target.values.iter().enumerate() {
        if gt >= POSITIVE_THRESHOLD {
            pos_mask[i] = 1.0;
            positives += 1;
        } else {
            neg_weight[i] = (1.0 - gt).powf(gamma);
        }
    }
    let norm = 1.0 / positives.max(1) as f64;

    let shape = tape.shape(pred).to_vec();
    let pos_mask = tape.constant(Tensor::new(shape.clone(), pos_mask)?);
    let neg_weight = tape.constant(Tensor::new(shape, neg_weight)?);

    let p = tape.clamp(pred, PRED_CLAMP, 1.0 - PRED_CLAMP);
    let one_minus_p = tape.one_minus(p);

    // Positive branch: (1-P)^alpha * (-ln P)
    let w_pos = tape.pow_const(one_minus_p, alpha);
    let ln_p = tape.ln(p);
    let pos_term = tape.mul(w_pos, ln_p)?;
    let pos_masked = tape.mul(pos_term, pos_mask)?;

    // Negative branch: P^alpha * (1-GT)^gamma * (-ln(1-P))
    let w_neg = tape.pow_const(p, alpha);
    let ln_q = tape.ln(one_minus_p);
    let neg_term = tape.mul(w_neg, ln_q)?;
    let neg_masked = tape.mul(neg_term, neg_weight)?;

    let joined = tape.add(pos_masked, neg_masked)?;
    let total = tape.sum(joined);
    Ok(tape.scale(total, -norm))
}

/// Plain-text PGM (P2) dump, values scaled to 0..255, with a sidecar
/// metadata comment line carrying the grid layout.
pub fn heatmap_to_pgm(t: &HeatmapTarget) -> String {
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!(
        "# meta h={} w={} resolution={} origin={},{}\n",
        t.meta.h, t.meta.w, t.meta.resolution, t.meta.origin.0, t.meta.origin.1
    ));
    out.push_str(&format!("{} {}\n255\n", t.meta.w, t.meta.h));
    for i in 0..t.meta.h {
        let row: Vec<String> = (0..t.meta.w)
            .map(|j| format!("{}", (t.at(i, j).clamp(0.0, 1.0) * 255.0).round() as u32))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_pgm(t: &HeatmapTarget, path: &std::path::Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(heatmap_to_pgm(t).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradSlice};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn meta32() -> GridMeta {
        GridMeta::new(32, 32, 1.0, (-7.5, -15.5)).unwrap()
    }

    /// Independent straight-line evaluation of the target field: per cell,
    /// max over every waypoint Gaussian, no windowing.
    fn brute_force_target(
        waypoints: &[(f64, f64)],
        speeds: &[f64],
        policy: RadiusPolicy,
        meta: GridMeta,
    ) -> Vec<f64> {
        let mut out = vec![0.0; meta.cells()];
        for i in 0..meta.h {
            for j in 0..meta.w {
                let (cx, cy) = meta.cell_center(i, j);
                let mut best = 0.0f64;
                for (p, &v) in waypoints.iter().zip(speeds) {
                    let sigma = policy.sigma(v);
                    let d2 = (cx - p.0) * (cx - p.0) + (cy - p.1) * (cy - p.1);
                    best = best.max((-d2 / (2.0 * sigma * sigma)).exp());
                }
                out[i * meta.w + j] = best;
            }
        }
        out
    }

    #[test]
    fn waypoint_on_cell_center_reads_one() {
        let meta = meta32();
        let p = meta.cell_center(10, 16);
        let t = gaussian_bev_target(&[p], &[3.0], RadiusPolicy::default(), meta).unwrap();
        assert_eq!(t.at(10, 16), 1.0);
    }

    #[test]
    fn two_waypoint_midpoint_value() {
        // Waypoints at (0,0) and (4,0) with sigma 2: a cell center at (2,0)
        // reads max(e^{-4/8}, e^{-4/8}) = e^{-0.5}.
        let meta = GridMeta::new(16, 16, 1.0, (-2.0, -8.0)).unwrap();
        let t = gaussian_bev_target(
            &[(0.0, 0.0), (4.0, 0.0)],
            &[0.0, 0.0],
            RadiusPolicy::Constant { radius: 2.0 },
            meta,
        )
        .unwrap();
        let (ci, cj) = meta.world_to_grid((2.0, 0.0));
        let v = t.at(ci.round() as usize, cj.round() as usize);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12, "got {v}");
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn zero_speed_velocity_mode_equals_sigma_min_constant() {
        let meta = meta32();
        let wps = [(1.0, 0.5), (3.0, -0.25), (4.5, 2.0)];
        let speeds = [0.0, 0.0, 0.0];
        let vel = gaussian_bev_target(&wps, &speeds, RadiusPolicy::Velocity { gamma: 0.4, sigma_min: 0.5 }, meta).unwrap();
        let cst = gaussian_bev_target(&wps, &speeds, RadiusPolicy::Constant { radius: 0.5 }, meta).unwrap();
        assert_eq!(vel.values, cst.values);
    }

    #[test]
    fn default_policy_is_velocity_mode() {
        match RadiusPolicy::default() {
            RadiusPolicy::Velocity { gamma, sigma_min } => {
                assert!(gamma > 0.0 && sigma_min > 0.0);
            }
            other => panic!("default policy should be velocity-aware, got {other:?}"),
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_trajectories() {
        let mut rng = StdRng::seed_from_u64(99);
        let meta = meta32();
        for case in 0..100 {
            let n = rng.gen_range(1..=8);
            let wps: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(-12.0..28.0), rng.gen_range(-20.0..20.0)))
                .collect();
            let speeds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..12.0)).collect();
            let policy = if case % 3 == 0 {
                RadiusPolicy::Constant { radius: rng.gen_range(0.5..5.0) }
            } else {
                RadiusPolicy::Velocity { gamma: 0.4, sigma_min: 0.5 }
            };
            let fast = gaussian_bev_target(&wps, &speeds, policy, meta).unwrap();
            let slow = brute_force_target(&wps, &speeds, policy, meta);
            for (a, b) in fast.values.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn monotone_decay_along_ray_from_single_waypoint() {
        let meta = meta32();
        let p = meta.cell_center(12, 16);
        let t = gaussian_bev_target(&[p], &[5.0], RadiusPolicy::default(), meta).unwrap();
        for j in 16..32 {
            if j > 16 {
                assert!(t.at(12, j) <= t.at(12, j - 1));
            }
        }
        for i in 12..32 {
            if i > 12 {
                assert!(t.at(i, 16) <= t.at(i - 1, 16));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let meta = meta32();
        assert!(gaussian_bev_target(&[], &[], RadiusPolicy::default(), meta).is_err());
        assert!(gaussian_bev_target(&[(f64::NAN, 0.0)], &[1.0], RadiusPolicy::default(), meta).is_err());
        assert!(GridMeta::new(4, 32, 1.0, (0.0, 0.0)).is_err());
        assert!(GridMeta::new(32, 32, 0.0, (0.0, 0.0)).is_err());
    }

    fn single_cell_target(gt: f64) -> HeatmapTarget {
        // An 8x8 grid whose top-left cell carries the value under test and
        // every other cell exactly matches the prediction, contributing 0.
        let meta = GridMeta::new(8, 8, 1.0, (0.0, 0.0)).unwrap();
        let mut values = vec![0.0; 64];
        values[0] = gt;
        HeatmapTarget { values, meta }
    }

    #[test]
    fn focal_loss_positive_branch_value() {
        // Single positive cell with P = 0.5, alpha 2: 0.25 * ln 2 = 0.1733.
        let meta = GridMeta::new(8, 8, 1.0, (0.0, 0.0)).unwrap();
        let mut tv = vec![0.0; 64];
        tv[0] = 1.0;
        let target = HeatmapTarget { values: tv, meta };
        let mut pv = vec![PRED_CLAMP; 64];
        pv[0] = 0.5;
        let pred = HeatmapTarget { values: pv, meta };
        let loss = gaussian_focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        let expected = 0.25 * 2.0f64.ln();
        // Off cells contribute ~alpha*clamp^2 * ln ~ 1e-12 in total.
        assert!((loss - expected).abs() < 1e-4, "loss {loss} vs {expected}");
        assert!((loss - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_loss_negative_branch_value() {
        // Single cell, GT = 0.5, P = 0.5, alpha 2, gamma 4:
        // 0.25 * 0.0625 * ln 2 = 0.010830.
        let target = single_cell_target(0.5);
        let mut pv = vec![PRED_CLAMP; 64];
        pv[0] = 0.5;
        let pred = HeatmapTarget { values: pv, meta: target.meta };
        let loss = gaussian_focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        let expected = 0.25 * 0.0625 * 2.0f64.ln();
        assert!((loss - expected).abs() < 1e-4, "loss {loss} vs {expected}");
        assert!((loss - 0.01083).abs() < 1e-4);
    }

    #[test]
    fn focal_loss_vanishes_on_perfect_prediction() {
        let meta = meta32();
        let p = meta.cell_center(9, 14);
        let target = gaussian_bev_target(&[p], &[2.0], RadiusPolicy::default(), meta).unwrap();
        // Perfect prediction: 1 at the positive, ~0 where GT ~ 0. Use the
        // clamped extremes so the logs stay finite.
        let pred_values: Vec<f64> = target
            .values
            .iter()
            .map(|&g| if g >= POSITIVE_THRESHOLD { 1.0 - PRED_CLAMP } else { PRED_CLAMP })
            .collect();
        let pred = HeatmapTarget { values: pred_values, meta };
        let loss = gaussian_focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        assert!(loss.abs() <= 1e-4, "loss {loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn focal_loss_is_nonnegative_on_random_fields() {
        let mut rng = StdRng::seed_from_u64(5);
        let meta = meta32();
        for _ in 0..20 {
            let p = (rng.gen_range(-5.0..20.0), rng.gen_range(-10.0..10.0));
            let target = gaussian_bev_target(&[meta.snap(p)], &[rng.gen_range(0.0..8.0)], RadiusPolicy::default(), meta).unwrap();
            let pred_values: Vec<f64> = (0..meta.cells()).map(|_| rng.gen_range(0.001..0.999)).collect();
            let pred = HeatmapTarget { values: pred_values, meta };
            let loss = gaussian_focal_loss(&pred, &target, 2.0, 4.0).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn focal_loss_rejects_grid_mismatch() {
        let a = single_cell_target(1.0);
        let meta = GridMeta::new(16, 8, 1.0, (0.0, 0.0)).unwrap();
        let b = HeatmapTarget { values: vec![0.0; 128], meta };
        assert!(gaussian_focal_loss(&b, &a, 2.0, 4.0).is_err());
    }

    #[test]
    fn graph_focal_loss_matches_scalar_and_checks_gradient() {
        let mut rng = StdRng::seed_from_u64(17);
        let meta = GridMeta::new(8, 8, 1.0, (0.0, 0.0)).unwrap();
        let p = meta.cell_center(3, 4);
        let target = gaussian_bev_target(&[p], &[4.0], RadiusPolicy::default(), meta).unwrap();
        let pred_values: Vec<f64> = (0..64).map(|_| rng.gen_range(0.05..0.95)).collect();

        let scalar = gaussian_focal_loss(
            &HeatmapTarget { values: pred_values.clone(), meta },
            &target,
            2.0,
            4.0,
        )
        .unwrap();

        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(vec![64], pred_values.clone()).unwrap());
        let loss = focal_loss_graph(&mut tape, pred, &target, 2.0, 4.0).unwrap();
        assert!((tape.scalar(loss) - scalar).abs() < 1e-12);

        let grads = tape.backward(loss).unwrap();
        assert!(grads.grad(pred).is_some());

        let theta = Tensor::new(vec![64], pred_values).unwrap();
        let err = grad_check(
            |t, pv| focal_loss_graph(t, pv, &target, 2.0, 4.0),
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "focal grad rel err {err}");
    }

    #[test]
    fn world_grid_round_trip() {
        let meta = meta32();
        assert_eq!(meta.world_to_grid(meta.origin), (0.0, 0.0));
        let step = meta.grid_to_world((1.0, 0.0));
        assert_eq!(meta.world_to_grid(step), (1.0, 0.0));
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            let p = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let rt = meta.grid_to_world(meta.world_to_grid(p));
            assert!((rt.0 - p.0).abs() <= 1e-9 && (rt.1 - p.1).abs() <= 1e-9);
        }
    }

    #[test]
    fn pgm_dump_has_header_and_meta() {
        let meta = GridMeta::new(8, 8, 0.5, (1.0, -2.0)).unwrap();
        let t = HeatmapTarget { values: vec![0.5; 64], meta };
        let pgm = heatmap_to_pgm(&t);
        assert!(pgm.starts_with("P2\n"));
        assert!(pgm.contains("# meta h=8 w=8 resolution=0.5 origin=1,-2"));
        assert!(pgm.contains("\n8 8\n255\n"));
        assert!(pgm.contains("128"));
    }
}
