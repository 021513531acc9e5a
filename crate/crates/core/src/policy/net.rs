//! Elite-context policy network with a hand-written backward pass.
//!
//! rows of X -> linear embed -> one post-norm transformer encoder block
//! (multi-head self-attention, GELU feed-forward) -> mean over rows -> h.
//! h feeds a tanh MLP with one linear output per action head, and a separate
//! tanh MLP for the value estimate. There is no positional encoding, so the
//! network is invariant to the order of the rows.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Embedding and encoder width.
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width inside the encoder block.
    pub ff_dim: usize,
    /// Number of elite rows T.
    pub history: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { d_model: 256, n_heads: 4, ff_dim: 256, history: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in x out
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
        let b = Array1::from_shape_simple_fn(fan_out, &mut draw);
        Self { w, b }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut out = self.b.clone();
        for (&xi, row) in x.iter().zip(self.w.rows()) {
            out.scaled_add(xi, &row);
        }
        out
    }

    /// Accumulates parameter grads into `grad` and returns the input grad.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (&xi, mut row) in x.iter().zip(grad.w.rows_mut()) {
            row.scaled_add(xi, &dy);
        }
        grad.b += &dy;
        self.w.dot(&dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        Self { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let inner = dxhat * d - sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        inner * &(cache.inv_std.view().insert_axis(Axis(1)).mapv(|s| s / d))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// All learnable weights plus the per-head admissibility masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: NetConfig,
    pub action_len: usize,
    /// Admissible choices per action head; its lengths fix the head sizes.
    pub masks: Vec<Vec<bool>>,
    pub embed: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub trunk: Linear,
    pub heads: Vec<Linear>,
    pub value1: Linear,
    pub value2: Linear,
}

impl PolicyParams {
    /// Fresh parameters: fan-in uniform init, zeroed output layers so the
    /// initial policy is uniform over admissible choices.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, masks: Vec<Vec<bool>>, rng: &mut R) -> Self {
        assert!(config.d_model % config.n_heads == 0, "d_model must be divisible by n_heads");
        let d = config.d_model;
        let action_len = masks.len();
        Self {
            config,
            action_len,
            embed: Linear::uniform(action_len, d, rng),
            wq: Linear::uniform(d, d, rng),
            wk: Linear::uniform(d, d, rng),
            wv: Linear::uniform(d, d, rng),
            wo: Linear::uniform(d, d, rng),
            norm1: LayerNorm::new(d),
            ff1: Linear::uniform(d, config.ff_dim, rng),
            ff2: Linear::uniform(config.ff_dim, d, rng),
            norm2: LayerNorm::new(d),
            trunk: Linear::uniform(d, d, rng),
            heads: masks.iter().map(|m| Linear::zeros(d, m.len())).collect(),
            value1: Linear::uniform(d, d, rng),
            value2: Linear::zeros(d, 1),
            masks,
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config, self.masks.clone())
    }

    pub fn zeros(config: NetConfig, masks: Vec<Vec<bool>>) -> Self {
        let d = config.d_model;
        let ff = config.ff_dim;
        let action_len = masks.len();
        Self {
            config,
            action_len,
            embed: Linear::zeros(action_len, d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            norm1: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, ff),
            ff2: Linear::zeros(ff, d),
            norm2: LayerNorm::zeros(d),
            trunk: Linear::zeros(d, d),
            heads: masks.iter().map(|m| Linear::zeros(d, m.len())).collect(),
            value1: Linear::zeros(d, d),
            value2: Linear::zeros(d, 1),
            masks,
        }
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.masks.iter().map(Vec::len).collect()
    }

    /// Named tensors in a fixed order, with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        type Named<'a> = Vec<(String, Vec<usize>, &'a [f64])>;
        fn lin<'a>(name: &str, l: &'a Linear, out: &mut Named<'a>) {
            out.push((format!("{name}.w"), l.w.shape().to_vec(), l.w.as_slice().unwrap()));
            out.push((format!("{name}.b"), l.b.shape().to_vec(), l.b.as_slice().unwrap()));
        }
        lin("embed", &self.embed, &mut out);
        lin("attn.q", &self.wq, &mut out);
        lin("attn.k", &self.wk, &mut out);
        lin("attn.v", &self.wv, &mut out);
        lin("attn.o", &self.wo, &mut out);
        out.push(("norm1.gamma".into(), vec![self.config.d_model], self.norm1.gamma.as_slice().unwrap()));
        out.push(("norm1.beta".into(), vec![self.config.d_model], self.norm1.beta.as_slice().unwrap()));
        lin("ff1", &self.ff1, &mut out);
        lin("ff2", &self.ff2, &mut out);
        out.push(("norm2.gamma".into(), vec![self.config.d_model], self.norm2.gamma.as_slice().unwrap()));
        out.push(("norm2.beta".into(), vec![self.config.d_model], self.norm2.beta.as_slice().unwrap()));
        lin("trunk", &self.trunk, &mut out);
        for (i, h) in self.heads.iter().enumerate() {
            lin(&format!("head{i}"), h, &mut out);
        }
        lin("value1", &self.value1, &mut out);
        lin("value2", &self.value2, &mut out);
        out
    }

    /// Mutable views in the same order as [`PolicyParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut [f64]>) {
            out.push(l.w.as_slice_mut().unwrap());
            out.push(l.b.as_slice_mut().unwrap());
        }
        lin(&mut self.embed, &mut out);
        lin(&mut self.wq, &mut out);
        lin(&mut self.wk, &mut out);
        lin(&mut self.wv, &mut out);
        lin(&mut self.wo, &mut out);
        out.push(self.norm1.gamma.as_slice_mut().unwrap());
        out.push(self.norm1.beta.as_slice_mut().unwrap());
        lin(&mut self.ff1, &mut out);
        lin(&mut self.ff2, &mut out);
        out.push(self.norm2.gamma.as_slice_mut().unwrap());
        out.push(self.norm2.beta.as_slice_mut().unwrap());
        lin(&mut self.trunk, &mut out);
        for h in &mut self.heads {
            lin(h, &mut out);
        }
        lin(&mut self.value1, &mut out);
        lin(&mut self.value2, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<PolicyOutput, PolicyError> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Array2<f64>) -> Result<(PolicyOutput, ForwardCache), PolicyError> {
        let t = self.config.history;
        if x.dim() != (t, self.action_len) {
            return Err(PolicyError::Shape { expected: (t, self.action_len), got: x.dim() });
        }
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dk = d / nh;
        let scale = 1.0 / (dk as f64).sqrt();

        let e = self.embed.forward(x);
        let q = self.wq.forward(&e);
        let k = self.wk.forward(&e);
        let v = self.wv.forward(&e);
        let mut o = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(nh);
        for head in 0..nh {
            let cols = s![.., head * dk..(head + 1) * dk];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let a = self.wo.forward(&o);
        let r1 = &e + &a;
        let (u, n1) = self.norm1.forward(&r1);
        let f1 = self.ff1.forward(&u);
        let g = f1.mapv(gelu);
        let f2 = self.ff2.forward(&g);
        let r2 = &u + &f2;
        let (z, n2) = self.norm2.forward(&r2);
        let pooled = z.mean_axis(Axis(0)).unwrap();

        let trunk = self.trunk.forward_vec(pooled.view()).mapv(f64::tanh);
        let logits: Vec<Array1<f64>> = self.heads.iter().map(|h| h.forward_vec(trunk.view())).collect();
        let vh = self.value1.forward_vec(pooled.view()).mapv(f64::tanh);
        let value = self.value2.forward_vec(vh.view())[0];

        if !value.is_finite() || logits.iter().any(|l| l.iter().any(|x| !x.is_finite())) {
            return Err(PolicyError::NonFinite("policy forward".into()));
        }
        let dists = logits.iter().zip(&self.masks).map(|(l, m)| HeadDist::new(l.as_slice().unwrap(), m)).collect();
        let out = PolicyOutput { logits, value, pooled, dists };
        let cache = ForwardCache { x: x.clone(), e, q, k, v, probs, o, u, n1, f1, g, n2, trunk, vh };
        Ok((out, cache))
    }

    /// Backpropagates d(loss)/d(logits) and d(loss)/d(value) of one forward
    /// pass, accumulating into `grad`.
    pub(crate) fn backward(
        &self,
        out: &PolicyOutput,
        cache: &ForwardCache,
        dlogits: &[Array1<f64>],
        dvalue: f64,
        grad: &mut PolicyParams,
    ) {
        let t = self.config.history;
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dk = d / nh;
        let scale = 1.0 / (dk as f64).sqrt();

        // policy MLP
        let mut dtrunk = Array1::zeros(d);
        for ((head, ghead), dl) in self.heads.iter().zip(grad.heads.iter_mut()).zip(dlogits) {
            dtrunk += &head.backward_vec(cache.trunk.view(), dl.view(), ghead);
        }
        let dtrunk_pre = dtrunk * cache.trunk.mapv(|y| 1.0 - y * y);
        let mut dpooled = self.trunk.backward_vec(out.pooled.view(), dtrunk_pre.view(), &mut grad.trunk);

        // value MLP
        let dvalue = Array1::from_elem(1, dvalue);
        let dvh = self.value2.backward_vec(cache.vh.view(), dvalue.view(), &mut grad.value2);
        let dvh_pre = dvh * cache.vh.mapv(|y| 1.0 - y * y);
        dpooled += &self.value1.backward_vec(out.pooled.view(), dvh_pre.view(), &mut grad.value1);

        // mean pool
        let dz = Array2::from_shape_fn((t, d), |(_, j)| dpooled[j] / t as f64);

        // encoder block, feed-forward half
        let dr2 = self.norm2.backward(&cache.n2, &dz, &mut grad.norm2);
        let dg = self.ff2.backward(&cache.g, &dr2, &mut grad.ff2);
        let df1 = dg * cache.f1.mapv(gelu_grad);
        let du = &dr2 + &self.ff1.backward(&cache.u, &df1, &mut grad.ff1);

        // attention half
        let dr1 = self.norm1.backward(&cache.n1, &du, &mut grad.norm1);
        let do_ = self.wo.backward(&cache.o, &dr1, &mut grad.wo);
        let mut dq = Array2::zeros((t, d));
        let mut dk_ = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for (head, p) in cache.probs.iter().enumerate() {
            let cols = s![.., head * dk..(head + 1) * dk];
            let doh = do_.slice(cols);
            let dp = doh.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk_.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut de = dr1;
        de += &self.wq.backward(&cache.e, &dq, &mut grad.wq);
        de += &self.wk.backward(&cache.e, &dk_, &mut grad.wk);
        de += &self.wv.backward(&cache.e, &dv, &mut grad.wv);
        self.embed.backward(&cache.x, &de, &mut grad.embed);
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct ForwardCache {
    x: Array2<f64>,
    e: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    u: Array2<f64>,
    n1: NormCache,
    f1: Array2<f64>,
    g: Array2<f64>,
    n2: NormCache,
    trunk: Array1<f64>,
    vh: Array1<f64>,
}

/// Categorical distribution of one head restricted to its admissible choices.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDist {
    pub probs: Vec<f64>,
    /// ln p; negative infinity for masked choices.
    pub log_probs: Vec<f64>,
}

impl HeadDist {
    pub fn new(logits: &[f64], mask: &[bool]) -> Self {
        let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| (l - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> =
            logits.iter().zip(mask).map(|(&l, &m)| if m { l - log_z } else { f64::NEG_INFINITY }).collect();
        let probs = log_probs.iter().map(|&lp| lp.exp()).collect();
        Self { probs, log_probs }
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().zip(&self.log_probs).filter(|(&p, _)| p > 0.0).map(|(&p, &lp)| p * lp).sum::<f64>()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Raw per-head logits, before masking.
    pub logits: Vec<Array1<f64>>,
    pub value: f64,
    pub pooled: Array1<f64>,
    pub dists: Vec<HeadDist>,
}
