//! Trajectory-oriented BEV encoder: heatmap queries cross-attend to BEV and
//! ego tokens, a lightweight upsampling decoder emits the one-channel
//! predicted heatmap, and channel fusion produces the heatmap-conditioned
//! BEV feature handed to the denoiser.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::heatmap::GridMeta;
use crate::nn::{Builder, CrossBlock, Ctx, Init, Linear, ParamId};
use crate::world::EgoStatus;

/// H×W×C feature grid (channels-last) with metric metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub values: Vec<f64>,
    pub c: usize,
    pub meta: GridMeta,
}

impl BevGrid {
    pub fn new(values: Vec<f64>, c: usize, meta: GridMeta) -> Result<Self> {
        if values.len() != meta.cells() * c {
            return Err(Error::ShapeMismatch {
                op: "BevGrid",
                left: vec![values.len()],
                right: vec![meta.h, meta.w, c],
            });
        }
        Ok(Self { values, c, meta })
    }
}

/// Architecture dimensions shared by the encoder and the denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub eb_layers: usize,
    pub dit_blocks: usize,
    pub bev_queries: usize,
    pub mlp_ratio: usize,
    pub t_f: usize,
}

impl ModelDims {
    /// Heatmap query count: one per 4x-downsampled BEV cell.
    pub fn n_queries(&self) -> usize {
        (self.h / 4) * (self.w / 4)
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.h % 4 != 0 || self.w % 4 != 0 {
            return Err(Error::InvalidArgument {
                what: "grid size",
                detail: format!("H and W must be multiples of 4, got {}x{}", self.h, self.w),
            });
        }
        if self.c % self.heads != 0 {
            return Err(Error::InvalidArgument {
                what: "model width",
                detail: format!("C={} not divisible by heads={}", self.c, self.heads),
            });
        }
        Ok(())
    }
}

/// Raster input channel count produced by the world module.
pub const RASTER_CHANNELS: usize = 4;

pub struct EncoderOutput {
    /// (H*W, C) lifted BEV feature.
    pub f_bev: Var,
    /// (H*W, 1) predicted heatmap probabilities in (0, 1).
    pub heatmap: Var,
    /// (H*W, C) fused feature; equals `f_bev` when fusion is disabled.
    pub f_traj: Var,
}

pub struct BevEncoder {
    pub lift: Linear,
    pub pos: ParamId,
    pub queries: ParamId,
    pub ego_l1: Linear,
    pub ego_l2: Linear,
    pub blocks: Vec<CrossBlock>,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub head: Linear,
    pub fuse: Linear,
    dims: ModelDims,
    dec_c1: usize,
    dec_c2: usize,
}

impl BevEncoder {
    pub fn new(b: &mut Builder, dims: ModelDims) -> Self {
        let c = dims.c;
        let (dec_c1, dec_c2) = ((c / 2).max(4), (c / 4).max(2));
        let lift = Linear::new(b, "enc.lift", RASTER_CHANNELS, c, Init::Xavier);
        let pos = b.tensor("enc.pos", vec![dims.cells(), c], Init::Uniform(0.02));
        let queries = b.tensor("enc.queries", vec![dims.n_queries(), c], Init::Uniform(0.02));
        let ego_l1 = Linear::new(b, "enc.ego.l1", 7, c, Init::Xavier);
        let ego_l2 = Linear::new(b, "enc.ego.l2", c, c, Init::Xavier);
        let blocks = (0..dims.enc_layers)
            .map(|i| CrossBlock::new(b, &format!("enc.layer{i}"), c, dims.heads, c * dims.mlp_ratio))
            .collect();
        let conv1_w = b.tensor("enc.dec.conv1.w", vec![3, 3, c, dec_c1], Init::Xavier);
        let conv1_b = b.tensor("enc.dec.conv1.b", vec![dec_c1], Init::Zeros);
        let conv2_w = b.tensor("enc.dec.conv2.w", vec![3, 3, dec_c1, dec_c2], Init::Xavier);
        let conv2_b = b.tensor("enc.dec.conv2.b", vec![dec_c2], Init::Zeros);
        // Zero-initialized head: the untrained heatmap is uniformly 0.5.
        let head = Linear::zeros(b, "enc.dec.head", dec_c2, 1);
        let fuse = Linear::new(b, "enc.fuse", c + 1, c, Init::Xavier);
        Self {
            lift,
            pos,
            queries,
            ego_l1,
            ego_l2,
            blocks,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head,
            fuse,
            dims,
            dec_c1,
            dec_c2,
        }
    }

    /// Lift raster channels (H*W, 4) to the model width.
    pub fn lift_bev(&self, cx: &mut Ctx, raster: Var) -> Result<Var> {
        self.lift.forward(cx, raster)
    }

    /// Two-layer perceptron embedding of the ego status.
    pub fn encode_ego_status(&self, cx: &mut Ctx, ego: &EgoStatus) -> Result<Var> {
        let f = cx.constant(Tensor::new(vec![1, 7], ego.feature().to_vec())?);
        let h = self.ego_l1.forward(cx, f)?;
        let a = cx.tape.gelu(h);
        self.ego_l2.forward(cx, a)
    }

    /// Token sequence the heatmap queries attend to: positional embedding
    /// added to the flattened BEV feature, ego feature appended as one more
    /// token.
    pub fn key_value_tokens(&self, cx: &mut Ctx, f_bev: Var, f_ego: Var) -> Result<Var> {
        let pos = cx.p(self.pos);
        let tokens = cx.tape.add(f_bev, pos)?;
        cx.tape.concat_rows(tokens, f_ego)
    }

    /// Refine a query set against an arbitrary token sequence.
    pub fn attend_tokens(&self, cx: &mut Ctx, queries: Var, kv: Var) -> Result<Var> {
        let mut q = queries;
        for blk in &self.blocks {
            q = blk.forward(cx, q, kv)?;
        }
        Ok(q)
    }

    /// Full query refinement against BEV + ego tokens.
    pub fn heatmap_queries_attend(&self, cx: &mut Ctx, f_bev: Var, f_ego: Var) -> Result<Var> {
        let kv = self.key_value_tokens(cx, f_bev, f_ego)?;
        let q = cx.p(self.queries);
        self.attend_tokens(cx, q, kv)
    }

    /// Decode refined queries into the (H*W, 1) predicted heatmap: reshape
    /// to the 4x-downsampled grid, two stages of 2x upsample + 3x3
    /// convolution, a one-channel head, and a logistic squash.
    pub fn decode_heatmap(&self, cx: &mut Ctx, q_hat: Var) -> Result<Var> {
        let (h4, w4) = (self.dims.h / 4, self.dims.w / 4);
        let n = cx.tape.shape(q_hat)[0];
        if n != h4 * w4 {
            return Err(Error::InvalidArgument {
                what: "query count",
                detail: format!("{n} queries cannot reshape to {h4}x{w4}"),
            });
        }
        let c = self.dims.c;
        let grid = cx.tape.reshape(q_hat, vec![h4, w4, c])?;
        let up1 = cx.tape.upsample2x(grid, h4, w4, c)?;
        let w1 = cx.p(self.conv1_w);
        let conv1 = cx.tape.conv3x3(up1, w1, 2 * h4, 2 * w4, c, self.dec_c1)?;
        let flat1 = cx.tape.reshape(conv1, vec![2 * h4 * 2 * w4, self.dec_c1])?;
        let b1 = cx.p(self.conv1_b);
        let biased1 = cx.tape.add_row(flat1, b1)?;
        let act1 = cx.tape.gelu(biased1);
        let grid1 = cx.tape.reshape(act1, vec![2 * h4, 2 * w4, self.dec_c1])?;

        let up2 = cx.tape.upsample2x(grid1, 2 * h4, 2 * w4, self.dec_c1)?;
        let w2 = cx.p(self.conv2_w);
        let conv2 = cx.tape.conv3x3(up2, w2, 4 * h4, 4 * w4, self.dec_c1, self.dec_c2)?;
        let flat2 = cx.tape.reshape(conv2, vec![self.dims.cells(), self.dec_c2])?;
        let b2 = cx.p(self.conv2_b);
        let biased2 = cx.tape.add_row(flat2, b2)?;
        let act2 = cx.tape.gelu(biased2);

        let logits = self.head.forward(cx, act2)?;
        Ok(cx.tape.sigmoid(logits))
    }

    /// Channel concatenation (C+1) followed by a 1x1 convolution back to C.
    pub fn fuse_trajbev(&self, cx: &mut Ctx, f_bev: Var, heatmap: Var) -> Result<Var> {
        let joined = cx.tape.concat_cols(f_bev, heatmap)?;
        self.fuse.forward(cx, joined)
    }

    /// Encoder pipeline. With `trajbev` off the heatmap is still decoded
    /// (shape/finiteness contract) but fusion passes the raw BEV feature
    /// through unchanged.
    pub fn forward(&self, cx: &mut Ctx, raster: Var, ego: &EgoStatus, trajbev: bool) -> Result<EncoderOutput> {
        let f_bev = self.lift_bev(cx, raster)?;
        let f_ego = self.encode_ego_status(cx, ego)?;
        let q_hat = self.heatmap_queries_attend(cx, f_bev, f_ego)?;
        let heatmap = self.decode_heatmap(cx, q_hat)?;
        let f_traj = if trajbev {
            self.fuse_trajbev(cx, f_bev, heatmap)?
        } else {
            f_bev
        };
        Ok(EncoderOutput { f_bev, heatmap, f_traj })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::world::Command;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims_small() -> ModelDims {
        ModelDims {
            h: 8,
            w: 8,
            c: 16,
            heads: 4,
            enc_layers: 2,
            eb_layers: 2,
            dit_blocks: 2,
            bev_queries: 4,
            mlp_ratio: 4,
            t_f: 8,
        }
    }

    fn build(dims: ModelDims) -> (ParamSet, BevEncoder) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut b = Builder::new(&mut ps, &mut rng);
        let enc = BevEncoder::new(&mut b, dims);
        (ps, enc)
    }

    fn ego() -> EgoStatus {
        EgoStatus {
            velocity: [3.0, 0.0],
            accel: [0.0, 0.0],
            command: Command::Straight,
        }
    }

    #[test]
    fn query_count_matches_downsampling() {
        let dims = dims_small();
        assert_eq!(dims.n_queries(), dims.h * dims.w / 16);
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let raster = cx.constant(Tensor::full(vec![dims.cells(), RASTER_CHANNELS], 0.3));
        let f_bev = enc.lift_bev(&mut cx, raster).unwrap();
        let f_ego = enc.encode_ego_status(&mut cx, &ego()).unwrap();
        let q = enc.heatmap_queries_attend(&mut cx, f_bev, f_ego).unwrap();
        assert_eq!(cx.tape.shape(q), &[4, 16]);
    }

    #[test]
    fn ego_embedding_shape_and_zero_final_layer() {
        let dims = dims_small();
        let (mut ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let f = enc.encode_ego_status(&mut cx, &ego()).unwrap();
        assert_eq!(cx.tape.shape(f), &[1, 16]);
        drop(cx);

        // Zero the final layer: any status embeds to the zero vector.
        for (name, t) in ps.iter_mut() {
            if name.starts_with("enc.ego.l2") {
                t.data_mut().fill(0.0);
            }
        }
        let mut cx = Ctx::new(&ps);
        let f = enc.encode_ego_status(&mut cx, &ego()).unwrap();
        assert!(cx.tape.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn key_value_permutation_leaves_queries_unchanged() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        // Tokens with the positional features already baked in; permute rows
        // jointly and compare refined queries.
        let n = dims.cells() + 1;
        let data: Vec<f64> = (0..n * dims.c).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.5).collect();
        let kv_t = Tensor::new(vec![n, dims.c], data.clone()).unwrap();
        let mut permuted = vec![0.0; n * dims.c];
        let perm: Vec<usize> = (0..n).map(|i| (i * 17 + 5) % n).collect();
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * dims.c..(dst + 1) * dims.c].copy_from_slice(&data[src * dims.c..(src + 1) * dims.c]);
        }
        // The permutation must be a bijection for the comparison to hold.
        let mut seen = vec![false; n];
        for &s in &perm {
            assert!(!seen[s], "permutation not bijective");
            seen[s] = true;
        }
        let kv_p = Tensor::new(vec![n, dims.c], permuted).unwrap();

        let q = cx.p(enc.queries);
        let kv1 = cx.constant(kv_t);
        let o1 = enc.attend_tokens(&mut cx, q, kv1).unwrap();
        let kv2 = cx.constant(kv_p);
        let o2 = enc.attend_tokens(&mut cx, q, kv2).unwrap();
        for (a, b) in cx.tape.data(o1).iter().zip(cx.tape.data(o2)) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn decode_restores_full_grid_and_squashes() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let q = cx.constant(Tensor::full(vec![dims.n_queries(), dims.c], 0.7));
        let heat = enc.decode_heatmap(&mut cx, q).unwrap();
        assert_eq!(cx.tape.shape(heat), &[dims.cells(), 1]);
        assert!(cx.tape.data(heat).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_gives_uniform_half_before_training() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let raster = cx.constant(Tensor::full(vec![dims.cells(), RASTER_CHANNELS], 0.2));
        let out = enc.forward(&mut cx, raster, &ego(), true).unwrap();
        for &v in cx.tape.data(out.heatmap) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn decode_rejects_wrong_query_count() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let q = cx.constant(Tensor::full(vec![5, dims.c], 0.0));
        assert!(enc.decode_heatmap(&mut cx, q).is_err());
    }

    #[test]
    fn identity_fusion_construction() {
        let dims = dims_small();
        let (mut ps, enc) = build(dims);
        // fuse weight = [identity | 0], bias 0 -> f_traj == f_bev.
        let c = dims.c;
        let w = ps.get_mut(enc.fuse.w);
        w.data_mut().fill(0.0);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        if let Some(b) = enc.fuse.b {
            ps.get_mut(b).data_mut().fill(0.0);
        }
        let mut cx = Ctx::new(&ps);
        let f_bev = cx.constant(Tensor::full(vec![dims.cells(), c], 0.37));
        let heat = cx.constant(Tensor::full(vec![dims.cells(), 1], 0.9));
        let fused = enc.fuse_trajbev(&mut cx, f_bev, heat).unwrap();
        for (a, b) in cx.tape.data(fused).iter().zip(cx.tape.data(f_bev)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fusion_passes_gradient_to_heatmap() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let f_bev = cx.constant(Tensor::full(vec![dims.cells(), dims.c], 0.1));
        let heat = cx.tape.leaf(Tensor::full(vec![dims.cells(), 1], 0.4));
        let fused = enc.fuse_trajbev(&mut cx, f_bev, heat).unwrap();
        let sq = cx.tape.mul(fused, fused).unwrap();
        let loss = cx.tape.mean(sq);
        let grads = cx.tape.backward(loss).unwrap();
        use crate::autodiff::GradSlice;
        let g = grads.grad(heat).expect("heatmap gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn trajbev_off_routes_raw_bev() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let mut cx = Ctx::new(&ps);
        let raster = cx.constant(Tensor::full(vec![dims.cells(), RASTER_CHANNELS], 0.25));
        let out = enc.forward(&mut cx, raster, &ego(), false).unwrap();
        assert_eq!(cx.tape.data(out.f_traj), cx.tape.data(out.f_bev));
        assert!(cx.tape.data(out.heatmap).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let dims = dims_small();
        let (ps, enc) = build(dims);
        let run = || {
            let mut cx = Ctx::new(&ps);
            let raster = cx.constant(Tensor::full(vec![dims.cells(), RASTER_CHANNELS], 0.6));
            let out = enc.forward(&mut cx, raster, &ego(), true).unwrap();
            cx.tape.data(out.f_traj).to_vec()
        };
        assert_eq!(run(), run());
    }
}
