//! Noise schedules, the forward corruption process, the stochastic ancestral
//! reverse step, and a deterministic strided sampler operating directly on
//! flattened trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beta/alpha tables indexed by diffusion step. Index 0 is the clean-data
/// boundary: alpha_bar[0] = 1 by convention; betas[t] is defined for
/// t in 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,      // betas[0] unused, = 0
    alphas: Vec<f64>,     // alphas[0] = 1
    alpha_bars: Vec<f64>, // alpha_bars[0] = 1
    sigmas: Vec<f64>,     // posterior noise level; sigmas[0] unused
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
}

pub fn make_schedule(t_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::InvalidArgument {
            what: "schedule length",
            detail: format!("need T >= 2, got {t_steps}"),
        });
    }
    match kind {
        ScheduleKind::Linear { beta_start, beta_end } => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::InvalidArgument {
                    what: "beta range",
                    detail: format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"),
                });
            }
            let betas: Vec<f64> = (0..t_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
                .collect();
            NoiseSchedule::from_betas(betas)
        }
    }
}

impl NoiseSchedule {
    /// Builds the derived tables from per-step variances beta[1..=T]
    /// (passed without the unused leading slot).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidArgument {
                what: "schedule length",
                detail: format!("need T >= 2, got {}", betas.len()),
            });
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidArgument {
                what: "beta values",
                detail: "every beta must lie in (0, 1)".into(),
            });
        }
        let t = betas.len();
        let mut b = Vec::with_capacity(t + 1);
        b.push(0.0);
        b.extend_from_slice(&betas);
        let mut alphas = vec![1.0];
        let mut alpha_bars = vec![1.0];
        for s in 1..=t {
            let a = 1.0 - b[s];
            alphas.push(a);
            alpha_bars.push(alpha_bars[s - 1] * a);
        }
        let mut sigmas = vec![0.0];
        for s in 1..=t {
            // Posterior choice sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t));
            // zero at t = 1 since abar_0 = 1.
            let v = b[s] * (1.0 - alpha_bars[s - 1]) / (1.0 - alpha_bars[s]);
            sigmas.push(v.sqrt());
        }
        Ok(Self { betas: b, alphas, alpha_bars, sigmas })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument {
                what: "diffusion step",
                detail: format!("t={t} outside [1, {}]", self.t_max()),
            });
        }
        Ok(())
    }
}

/// A corrupted trajectory sample together with the draw that produced it.
#[derive(Debug, Clone)]
pub struct NoisedTrajectory {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<NoisedTrajectory> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            left: vec![x0.len()],
            right: vec![eps.len()],
        });
    }
    let ab = sched.alpha_bar(t);
    let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.iter().zip(eps).map(|(x, e)| ca * x + ce * e).collect();
    Ok(NoisedTrajectory { x_t, t, eps: eps.to_vec() })
}

/// One stochastic reverse step:
/// x_{t-1} = (x_t - ((1-alpha_t)/sqrt(1-abar_t)) eps_hat) / sqrt(alpha_t) + sigma_t * delta.
pub fn ddpm_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    delta: &[f64],
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if x_t.len() != eps_hat.len() || x_t.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            op: "ddpm_step",
            left: vec![x_t.len()],
            right: vec![eps_hat.len().max(delta.len())],
        });
    }
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let sig = sched.sigma(t);
    let c_eps = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(delta)
        .map(|((x, e), d)| inv_sqrt_a * (x - c_eps * e) + sig * d)
        .collect())
}

/// Strided, descending step indices for a deterministic sampler run:
/// `steps` evenly spaced indices in [1, T], starting at T.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::InvalidArgument {
            what: "sampler steps",
            detail: format!("steps={steps} with T={t_total}"),
        });
    }
    let ts: Vec<usize> = (1..=steps).map(|i| i * t_total / steps).rev().collect();
    for w in ts.windows(2) {
        if w[0] <= w[1] {
            return Err(Error::InvalidArgument {
                what: "sampler stride",
                detail: "step indices must be strictly decreasing".into(),
            });
        }
    }
    Ok(ts)
}

/// Deterministic (eta = 0) strided sampler. The model closure carries its
/// own conditioning; it maps (x_t, t) to predicted noise. The final output
/// is the clean estimate at the last step.
pub fn ddim_sample<F>(
    mut eps_model: F,
    sched: &NoiseSchedule,
    steps: usize,
    x_init: Vec<f64>,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let ts = ddim_timesteps(sched.t_max(), steps)?;
    let mut x = x_init;
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = eps_model(&x, t)?;
        if eps_hat.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "ddim_sample model output",
                left: vec![x.len()],
                right: vec![eps_hat.len()],
            });
        }
        let ab = sched.alpha_bar(t);
        let (sa, se) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0_hat: Vec<f64> = x.iter().zip(&eps_hat).map(|(xt, e)| (xt - se * e) / sa).collect();
        let t_next = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        if t_next == 0 {
            x = x0_hat;
        } else {
            let abn = sched.alpha_bar(t_next);
            let (san, sen) = (abn.sqrt(), (1.0 - abn).sqrt());
            x = x0_hat
                .iter()
                .zip(&eps_hat)
                .map(|(x0, e)| san * x0 + sen * e)
                .collect();
        }
    }
    Ok(x)
}
