//! Conditional noise predictor for trajectory denoising: ego-BEV
//! interaction, timestep embedding, query-based BEV compression, and
//! adaptive layer-norm blocks with zero-initialized gates so every block is
//! the identity map at initialization.

use crate::autodiff::{Tensor, Var};
use crate::encoder::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{Builder, CrossBlock, Ctx, Init, Linear, Mha, Mlp, ParamId, LN_EPS};

/// Which conditioning paths are active. Mirrors the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondFlags {
    /// Refine the ego query against BEV tokens before conditioning.
    pub eb_interaction: bool,
    /// Cross-attend trajectory tokens to compressed BEV queries.
    pub bev_cross: bool,
}

impl Default for CondFlags {
    fn default() -> Self {
        Self { eb_interaction: true, bev_cross: true }
    }
}

/// Raw interleaved sinusoidal embedding: e[2i] = sin(t w_i), e[2i+1] =
/// cos(t w_i), with geometrically spaced frequencies.
pub fn sinusoid_embed(t: usize, c: usize) -> Vec<f64> {
    let mut e = vec![0.0; c];
    let half = c / 2;
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / c as f64);
        let arg = t as f64 * freq;
        e[2 * i] = arg.sin();
        e[2 * i + 1] = arg.cos();
    }
    if c % 2 == 1 {
        e[c - 1] = 0.0;
    }
    e
}

/// One denoiser block: three gated sub-stages (temporal self-attention,
/// BEV cross-attention, pointwise MLP), each modulated by scale/shift/gate
/// vectors predicted from the condition.
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: Mha,
    pub cross: Mha,
    pub mlp: Mlp,
    width: usize,
}

impl DitBlock {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            // Zero-initialized: all shifts, scales, and gates start at zero,
            // making the block an exact identity.
            modulation: Linear::zeros(b, &format!("{name}.mod"), width, 9 * width),
            attn: Mha::new(b, &format!("{name}.attn"), width, heads),
            cross: Mha::new(b, &format!("{name}.cross"), width, heads),
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, mlp_hidden),
            width,
        }
    }

    fn modulate(cx: &mut Ctx, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s1 = cx.tape.add_scalar(scale, 1.0);
        let scaled = cx.tape.mul_row(x, s1)?;
        cx.tape.add_row(scaled, shift)
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var, cond_act: Var, q_bev: Option<Var>) -> Result<Var> {
        let c = self.width;
        let m = self.modulation.forward(cx, cond_act)?;
        let chunk = |cx: &mut Ctx, k: usize| cx.tape.slice_cols(m, k * c, (k + 1) * c);

        // Temporal self-attention over the waypoint axis.
        let (shift, scale, gate) = (chunk(cx, 0)?, chunk(cx, 1)?, chunk(cx, 2)?);
        let h = cx.tape.layer_norm(z, LN_EPS)?;
        let h = Self::modulate(cx, h, scale, shift)?;
        let a = self.attn.forward(cx, h, h)?;
        let gated = cx.tape.mul_row(a, gate)?;
        let mut z = cx.tape.add(z, gated)?;

        // Cross-attention to compressed BEV tokens.
        if let Some(qb) = q_bev {
            let (shift, scale, gate) = (chunk(cx, 3)?, chunk(cx, 4)?, chunk(cx, 5)?);
            let h = cx.tape.layer_norm(z, LN_EPS)?;
            let h = Self::modulate(cx, h, scale, shift)?;
            let a = self.cross.forward(cx, h, qb)?;
            let gated = cx.tape.mul_row(a, gate)?;
            z = cx.tape.add(z, gated)?;
        }

        // Pointwise MLP.
        let (shift, scale, gate) = (chunk(cx, 6)?, chunk(cx, 7)?, chunk(cx, 8)?);
        let h = cx.tape.layer_norm(z, LN_EPS)?;
        let h = Self::modulate(cx, h, scale, shift)?;
        let a = self.mlp.forward(cx, h)?;
        let gated = cx.tape.mul_row(a, gate)?;
        cx.tape.add(z, gated)
    }
}

pub struct NoisePredictor {
    /// Positional embedding added to flattened BEV tokens before the ego
    /// interaction and compression attentions.
    pub pos: ParamId,
    pub t_l1: Linear,
    pub t_l2: Linear,
    pub ego_query: ParamId,
    pub eb_blocks: Vec<CrossBlock>,
    pub qf_queries: ParamId,
    pub qf_block: CrossBlock,
    pub traj_in: Linear,
    pub traj_pos: ParamId,
    pub blocks: Vec<DitBlock>,
    pub head: Linear,
    dims: ModelDims,
}

/// Cached conditioning for repeated denoising of one scene.
pub struct SceneCondition {
    /// (1, C) refined or raw ego query.
    pub ego_hat: Vec<f64>,
    /// (M, C) compressed BEV tokens; absent when cross-attention is off.
    pub q_bev: Option<Vec<f64>>,
}

impl NoisePredictor {
    pub fn new(b: &mut Builder, dims: ModelDims) -> Self {
        let c = dims.c;
        let pos = b.tensor("dit.pos", vec![dims.cells(), c], Init::Uniform(0.02));
        let t_l1 = Linear::new(b, "dit.tembed.l1", c, c, Init::Xavier);
        let t_l2 = Linear::new(b, "dit.tembed.l2", c, c, Init::Xavier);
        let ego_query = b.tensor("dit.ego_query", vec![1, c], Init::Uniform(0.02));
        let eb_blocks = (0..dims.eb_layers)
            .map(|i| CrossBlock::new(b, &format!("dit.eb{i}"), c, dims.heads, c * dims.mlp_ratio))
            .collect();
        let qf_queries = b.tensor("dit.qf.queries", vec![dims.bev_queries, c], Init::Uniform(0.02));
        let qf_block = CrossBlock::new(b, "dit.qf.block", c, dims.heads, c * dims.mlp_ratio);
        let traj_in = Linear::new(b, "dit.traj_in", 3, c, Init::Xavier);
        let traj_pos = b.tensor("dit.traj_pos", vec![dims.t_f, c], Init::Uniform(0.02));
        let blocks = (0..dims.dit_blocks)
            .map(|i| DitBlock::new(b, &format!("dit.block{i}"), c, dims.heads, c * dims.mlp_ratio))
            .collect();
        // Zero-initialized head: the untrained predictor outputs exactly 0.
        let head = Linear::zeros(b, "dit.head", c, 3);
        Self {
            pos,
            t_l1,
            t_l2,
            ego_query,
            eb_blocks,
            qf_queries,
            qf_block,
            traj_in,
            traj_pos,
            blocks,
            head,
            dims,
        }
    }

    /// BEV tokens with positional features baked in.
    pub fn bev_tokens(&self, cx: &mut Ctx, f_traj: Var) -> Result<Var> {
        let pos = cx.p(self.pos);
        cx.tape.add(f_traj, pos)
    }

    /// Stacked cross-attention refinement of the learnable ego query
    /// against BEV tokens.
    pub fn ego_bev_interaction(&self, cx: &mut Ctx, tokens: Var) -> Result<Var> {
        let mut q = cx.p(self.ego_query);
        for blk in &self.eb_blocks {
            q = blk.forward(cx, q, tokens)?;
        }
        Ok(q)
    }

    /// Sinusoidal timestep embedding through a two-layer perceptron.
    pub fn timestep_embed(&self, cx: &mut Ctx, t: usize, t_max: usize) -> Result<Var> {
        if t > t_max {
            return Err(Error::InvalidArgument {
                what: "timestep",
                detail: format!("t={t} outside [0, {t_max}]"),
            });
        }
        let raw = cx.constant(Tensor::new(vec![1, self.dims.c], sinusoid_embed(t, self.dims.c))?);
        let h = self.t_l1.forward(cx, raw)?;
        let a = cx.tape.gelu(h);
        self.t_l2.forward(cx, a)
    }

    /// Compress BEV tokens into a fixed set of learnable queries.
    pub fn compress_bev(&self, cx: &mut Ctx, tokens: Var) -> Result<Var> {
        let q = cx.p(self.qf_queries);
        self.qf_block.forward(cx, q, tokens)
    }

    /// Per-waypoint linear lift plus the learned temporal embedding.
    pub fn encode_traj(&self, cx: &mut Ctx, x_t: Var) -> Result<Var> {
        let shape = cx.tape.shape(x_t).to_vec();
        if shape != [self.dims.t_f, 3] {
            return Err(Error::ShapeMismatch {
                op: "encode_traj",
                left: shape,
                right: vec![self.dims.t_f, 3],
            });
        }
        let lifted = self.traj_in.forward(cx, x_t)?;
        let pos = cx.p(self.traj_pos);
        cx.tape.add(lifted, pos)
    }

    /// Scene-dependent conditioning, computed once per scenario.
    pub fn condition(&self, cx: &mut Ctx, f_traj: Var, flags: CondFlags) -> Result<(Var, Option<Var>)> {
        let tokens = self.bev_tokens(cx, f_traj)?;
        let ego_hat = if flags.eb_interaction {
            self.ego_bev_interaction(cx, tokens)?
        } else {
            cx.p(self.ego_query)
        };
        let q_bev = if flags.bev_cross {
            Some(self.compress_bev(cx, tokens)?)
        } else {
            None
        };
        Ok((ego_hat, q_bev))
    }

    /// Noise prediction given precomputed conditioning nodes.
    pub fn eps_from(
        &self,
        cx: &mut Ctx,
        x_t: Var,
        t: usize,
        t_max: usize,
        ego_hat: Var,
        q_bev: Option<Var>,
    ) -> Result<Var> {
        let f_t = self.timestep_embed(cx, t, t_max)?;
        let cond = cx.tape.add(f_t, ego_hat)?;
        let cond_act = cx.tape.silu(cond)?;
        let mut z = self.encode_traj(cx, x_t)?;
        for blk in &self.blocks {
            z = blk.forward(cx, z, cond_act, q_bev)?;
        }
        let n = cx.tape.layer_norm(z, LN_EPS)?;
        self.head.forward(cx, n)
    }

    /// Full noise prediction from the fused BEV feature.
    pub fn predict_noise(
        &self,
        cx: &mut Ctx,
        x_t: Var,
        t: usize,
        t_max: usize,
        f_traj: Var,
        flags: CondFlags,
    ) -> Result<Var> {
        let (ego_hat, q_bev) = self.condition(cx, f_traj, flags)?;
        self.eps_from(cx, x_t, t, t_max, ego_hat, q_bev)
    }
}
