//! Parameter registry and the small set of layers the planner is built from.
//!
//! Layers hold [`ParamId`]s, not values. A [`Ctx`] binds a parameter set to a
//! fresh [`Tape`] for one forward pass; each parameter is leafed onto the
//! tape at most once, so fan-out gradients accumulate on a single node.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors. Registration order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    /// Uniform in ±bound.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Builds a module tree, registering parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(params: &'a mut ParamSet, rng: &'a mut ChaCha8Rng) -> Self {
        Self { params, rng }
    }

    pub fn tensor(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    4 => (shape[0] * shape[1] * shape[2], shape[3]),
                    _ => (n, n),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.params.register(name, Tensor::new(shape, data).expect("init shape"))
    }
}

/// One forward pass: a tape plus a lazy binding of parameters onto it.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Leaf the parameter onto the tape (once) and return its node.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Accumulate this pass's parameter gradients into `acc` (indexed like
    /// the parameter set; missing gradients contribute nothing).
    pub fn accumulate_grads(&self, grads: &[Option<Vec<f64>>], acc: &mut [Vec<f64>]) {
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(var) = slot {
                if let Some(g) = grads[var.0].as_ref() {
                    let dst = &mut acc[i];
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Zero-filled gradient accumulator matching a parameter set.
pub fn grad_buffer(params: &ParamSet) -> Vec<Vec<f64>> {
    (0..params.len()).map(|i| vec![0.0; params.get(ParamId(i)).numel()]).collect()
}

// ---- layers --------------------------------------------------------------------

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let w = b.tensor(&format!("{name}.w"), vec![fan_in, fan_out], init);
        let bias = b.tensor(&format!("{name}.b"), vec![fan_out], Init::Zeros);
        Self { w, b: Some(bias) }
    }

    pub fn zeros(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = b.tensor(&format!("{name}.w"), vec![fan_in, fan_out], Init::Zeros);
        let bias = b.tensor(&format!("{name}.b"), vec![fan_out], Init::Zeros);
        Self { w, b: Some(bias) }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = cx.p(b);
                cx.tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learnable gain and bias.
#[derive(Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, width: usize) -> Self {
        let g = b.tensor(&format!("{name}.g"), vec![width], Init::Ones);
        let bias = b.tensor(&format!("{name}.b"), vec![width], Init::Zeros);
        Self { g, b: bias, eps: LN_EPS }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let n = cx.tape.layer_norm(x, self.eps)?;
        let g = cx.p(self.g);
        let scaled = cx.tape.mul_row(n, g)?;
        let b = cx.p(self.b);
        cx.tape.add_row(scaled, b)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Mha {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize) -> Self {
        assert_eq!(width % heads, 0, "width must divide into heads");
        Self {
            wq: Linear::new(b, &format!("{name}.wq"), width, width, Init::Xavier),
            wk: Linear::new(b, &format!("{name}.wk"), width, width, Init::Xavier),
            wv: Linear::new(b, &format!("{name}.wv"), width, width, Init::Xavier),
            wo: Linear::new(b, &format!("{name}.wo"), width, width, Init::Xavier),
            heads,
            width,
        }
    }

    /// `xq` provides queries (m×C), `xkv` provides keys and values (n×C).
    pub fn forward(&self, cx: &mut Ctx, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.wq.forward(cx, xq)?;
        let k = self.wk.forward(cx, xkv)?;
        let v = self.wv.forward(cx, xkv)?;
        let hd = self.width / self.heads;
        let mut merged: Option<Var> = None;
        for h in 0..self.heads {
            let (from, to) = (h * hd, (h + 1) * hd);
            let qh = cx.tape.slice_cols(q, from, to)?;
            let kh = cx.tape.slice_cols(k, from, to)?;
            let vh = cx.tape.slice_cols(v, from, to)?;
            let oh = cx.tape.attention(qh, kh, vh)?;
            merged = Some(match merged {
                None => oh,
                Some(acc) => cx.tape.concat_cols(acc, oh)?,
            });
        }
        self.wo.forward(cx, merged.expect("at least one head"))
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(b, &format!("{name}.l1"), width, hidden, Init::Xavier),
            l2: Linear::new(b, &format!("{name}.l2"), hidden, width, Init::Xavier),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.l1.forward(cx, x)?;
        let a = cx.tape.gelu(h);
        self.l2.forward(cx, a)
    }
}

/// Pre-norm transformer block where a query set cross-attends to a token
/// sequence: q ← q + MHA(LN(q), LN(kv)); q ← q + MLP(LN(q)).
#[derive(Clone)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Mha,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(b: &mut Builder, name: &str, width: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(b, &format!("{name}.ln_q"), width),
            ln_kv: LayerNorm::new(b, &format!("{name}.ln_kv"), width),
            attn: Mha::new(b, &format!("{name}.attn"), width, heads),
            ln_mlp: LayerNorm::new(b, &format!("{name}.ln_mlp"), width),
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, mlp_hidden),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, q: Var, kv: Var) -> Result<Var> {
        let qn = self.ln_q.forward(cx, q)?;
        let kn = self.ln_kv.forward(cx, kv)?;
        let a = self.attn.forward(cx, qn, kn)?;
        let q = cx.tape.add(q, a)?;
        let qn = self.ln_mlp.forward(cx, q)?;
        let m = self.mlp.forward(cx, qn)?;
        cx.tape.add(q, m)
    }
}
