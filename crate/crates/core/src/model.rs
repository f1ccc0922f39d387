//! A small sequential CNN built from the decomposable layer types, with
//! per-sample forward/backward passes and stable parameter identifiers.
//!
//! Gradients are returned as a map keyed by [`ParamId`]; entries exist only
//! for the requested (tunable) parameters, so a frozen tensor can never
//! accumulate a gradient by accident.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atom_conv::{self, ConvCache, DecomposedConv2d};
use crate::error::{Error, Result};
use crate::kron_linear::{self, KronFactors};
use crate::overcomplete::{self, OvercompleteConv2d};
use crate::sparse::{DecomposeReport, SparseCodingConfig};
use crate::tensor::{
    conv2d, conv2d_backward_input, conv2d_backward_weight, matmul, ConvGeometry, Tensor,
};

/// Stable identifier of one parameter tensor; `usize` is the layer index.
/// The derived `Ord` makes optimizer-state iteration deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    ConvWeight(usize),
    ConvBias(usize),
    Atoms(usize),
    Beta(usize),
    SubAtoms(usize),
    KronB(usize),
    KronBias(usize),
    LoraDown(usize),
    LoraUp(usize),
    NormGain(usize),
    NormBias(usize),
    HeadWeight,
    HeadBias,
}

/// Low-rank adapter: effective update scale * W_down * W_up.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub w_down: Tensor, // (rows, r)
    pub w_up: Tensor,   // (r, cols)
    pub scale: f32,
}

impl LoRAAdapter {
    /// Standard init: W_down ~ N(0, 1/r), W_up = 0, so the step-0 update is
    /// exactly zero.
    pub fn zero_init(rows: usize, cols: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / r as f64).sqrt();
        let mut w_down = Tensor::zeros(&[rows, r]);
        for v in w_down.data_mut() {
            *v = (gaussian(&mut rng) * std) as f32;
        }
        Ok(LoRAAdapter {
            w_down,
            w_up: Tensor::zeros(&[r, cols]),
            scale: 1.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.w_down.shape()[1]
    }

    /// Dense update matrix scale * W_down * W_up, shape (rows, cols).
    pub fn delta(&self) -> Tensor {
        let (rows, r) = (self.w_down.shape()[0], self.w_down.shape()[1]);
        let cols = self.w_up.shape()[1];
        let mut d = matmul(self.w_down.data(), self.w_up.data(), rows, r, cols);
        for v in &mut d {
            *v *= self.scale;
        }
        Tensor::new(vec![rows, cols], d).expect("product shape")
    }

    /// The update folded back into conv layout (c_out, c_in, k, k), with the
    /// matrix indexed as (j*k + p, i*k + q). Parameter count is
    /// c_out*k*r + c_in*k*r, matching the usual conv-LoRA accounting.
    pub fn conv_delta(&self, c_out: usize, c_in: usize, k: usize) -> Result<Tensor> {
        if self.w_down.shape()[0] != c_out * k || self.w_up.shape()[1] != c_in * k {
            return Err(Error::ShapeMismatch(format!(
                "adapter is {}x{}, conv needs {}x{}",
                self.w_down.shape()[0],
                self.w_up.shape()[1],
                c_out * k,
                c_in * k
            )));
        }
        let d = self.delta();
        let mut out = Tensor::zeros(&[c_out, c_in, k, k]);
        for j in 0..c_out {
            for i in 0..c_in {
                for p in 0..k {
                    for q in 0..k {
                        out.set(&[j, i, p, q], d.at(&[j * k + p, i * k + q]));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// y = (W + scale*W_down*W_up) * x for x of shape (cols,) or (cols, n).
pub fn lora_forward(base_w: &Tensor, adapter: &LoRAAdapter, x: &Tensor) -> Result<Tensor> {
    if base_w.rank() != 2 {
        return Err(Error::ShapeMismatch("base weight must be a matrix".into()));
    }
    let (rows, cols) = (base_w.shape()[0], base_w.shape()[1]);
    let delta = adapter.delta();
    if delta.shape() != [rows, cols] {
        return Err(Error::ShapeMismatch(format!(
            "adapter update {:?} does not match base {:?}",
            delta.shape(),
            base_w.shape()
        )));
    }
    let mut w = base_w.clone();
    w.add_assign(&delta)?;
    let n = match x.shape() {
        [c] if *c == cols => 1,
        [c, n] if *c == cols => *n,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match {cols} columns",
                x.shape()
            )))
        }
    };
    let y = matmul(w.data(), x.data(), rows, cols, n);
    if x.rank() == 1 {
        Tensor::new(vec![rows], y)
    } else {
        Tensor::new(vec![rows, n], y)
    }
}

/// One layer of the sequential model. Convolutions consume (c, h, w).
#[derive(Debug, Clone)]
pub enum Layer {
    /// Dense convolution, optionally carrying a LoRA adapter on the weight.
    Conv {
        weight: Tensor, // (c_out, c_in, k, k)
        bias: Tensor,   // (c_out,)
        geom: ConvGeometry,
        lora: Option<LoRAAdapter>,
    },
    Decomposed(DecomposedConv2d),
    Overcomplete(OvercompleteConv2d),
    /// 1x1 channel-mixing layer stored as a Kronecker-sum factorization.
    Kron { factors: KronFactors, bias: Tensor },
    /// Per-sample, per-channel normalization with affine gain/bias.
    Norm {
        gain: Tensor, // (c,)
        bias: Tensor, // (c,)
        eps: f32,
    },
    Relu,
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Decomposed(_) => "decomposed-conv",
            Layer::Overcomplete(_) => "overcomplete-conv",
            Layer::Kron { .. } => "kron-linear",
            Layer::Norm { .. } => "norm",
            Layer::Relu => "relu",
            Layer::GlobalAvgPool => "global-avg-pool",
        }
    }
}

/// Per-layer forward cache for one sample.
pub enum LayerCache {
    Conv(ConvCache),
    Kron {
        input_hw: (usize, usize),
        x_flat: Tensor, // (c_in, h*w)
        w: Tensor,      // (c_out, c_in)
    },
    Norm {
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    Relu {
        mask: Tensor,
    },
    Pool {
        in_shape: Vec<usize>,
    },
    None,
}

/// Sequential model: feature layers, then a linear classifier head on the
/// pooled feature vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub head_w: Tensor, // (classes, features)
    pub head_b: Tensor, // (classes,)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.head_w.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.head_w.shape()[1]
    }

    /// All parameter ids present in the model, in `Ord` order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = BTreeSet::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { lora, .. } => {
                    ids.insert(ParamId::ConvWeight(idx));
                    ids.insert(ParamId::ConvBias(idx));
                    if lora.is_some() {
                        ids.insert(ParamId::LoraDown(idx));
                        ids.insert(ParamId::LoraUp(idx));
                    }
                }
                Layer::Decomposed(_) => {
                    ids.insert(ParamId::Atoms(idx));
                    ids.insert(ParamId::ConvBias(idx));
                }
                Layer::Overcomplete(_) => {
                    ids.insert(ParamId::Beta(idx));
                    ids.insert(ParamId::SubAtoms(idx));
                    ids.insert(ParamId::ConvBias(idx));
                }
                Layer::Kron { .. } => {
                    ids.insert(ParamId::KronB(idx));
                    ids.insert(ParamId::KronBias(idx));
                }
                Layer::Norm { .. } => {
                    ids.insert(ParamId::NormGain(idx));
                    ids.insert(ParamId::NormBias(idx));
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        ids.insert(ParamId::HeadWeight);
        ids.insert(ParamId::HeadBias);
        ids.into_iter().collect()
    }

    /// Borrow one parameter tensor.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::HeadWeight => Some(&self.head_w),
            ParamId::HeadBias => Some(&self.head_b),
            ParamId::ConvWeight(i) => match self.layers.get(i)? {
                Layer::Conv { weight, .. } => Some(weight),
                _ => None,
            },
            ParamId::ConvBias(i) => match self.layers.get(i)? {
                Layer::Conv { bias, .. } => Some(bias),
                Layer::Decomposed(l) => l.bias.as_ref(),
                Layer::Overcomplete(l) => l.bias.as_ref(),
                _ => None,
            },
            ParamId::Atoms(i) => match self.layers.get(i)? {
                Layer::Decomposed(l) => Some(&l.atoms.tensor),
                _ => None,
            },
            ParamId::Beta(i) => match self.layers.get(i)? {
                Layer::Overcomplete(l) => Some(&l.over.beta),
                _ => None,
            },
            ParamId::SubAtoms(i) => match self.layers.get(i)? {
                Layer::Overcomplete(l) => Some(&l.over.d1),
                _ => None,
            },
            ParamId::KronB(i) => match self.layers.get(i)? {
                Layer::Kron { factors, .. } => Some(&factors.b),
                _ => None,
            },
            ParamId::KronBias(i) => match self.layers.get(i)? {
                Layer::Kron { bias, .. } => Some(bias),
                _ => None,
            },
            ParamId::LoraDown(i) => match self.layers.get(i)? {
                Layer::Conv { lora: Some(a), .. } => Some(&a.w_down),
                _ => None,
            },
            ParamId::LoraUp(i) => match self.layers.get(i)? {
                Layer::Conv { lora: Some(a), .. } => Some(&a.w_up),
                _ => None,
            },
            ParamId::NormGain(i) => match self.layers.get(i)? {
                Layer::Norm { gain, .. } => Some(gain),
                _ => None,
            },
            ParamId::NormBias(i) => match self.layers.get(i)? {
                Layer::Norm { bias, .. } => Some(bias),
                _ => None,
            },
        }
    }

    /// Mutably borrow one parameter tensor.
    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::HeadWeight => Some(&mut self.head_w),
            ParamId::HeadBias => Some(&mut self.head_b),
            ParamId::ConvWeight(i) => match self.layers.get_mut(i)? {
                Layer::Conv { weight, .. } => Some(weight),
                _ => None,
            },
            ParamId::ConvBias(i) => match self.layers.get_mut(i)? {
                Layer::Conv { bias, .. } => Some(bias),
                Layer::Decomposed(l) => l.bias.as_mut(),
                Layer::Overcomplete(l) => l.bias.as_mut(),
                _ => None,
            },
            ParamId::Atoms(i) => match self.layers.get_mut(i)? {
                Layer::Decomposed(l) => Some(&mut l.atoms.tensor),
                _ => None,
            },
            ParamId::Beta(i) => match self.layers.get_mut(i)? {
                Layer::Overcomplete(l) => Some(&mut l.over.beta),
                _ => None,
            },
            ParamId::SubAtoms(i) => match self.layers.get_mut(i)? {
                Layer::Overcomplete(l) => Some(&mut l.over.d1),
                _ => None,
            },
            ParamId::KronB(i) => match self.layers.get_mut(i)? {
                Layer::Kron { factors, .. } => Some(&mut factors.b),
                _ => None,
            },
            ParamId::KronBias(i) => match self.layers.get_mut(i)? {
                Layer::Kron { bias, .. } => Some(bias),
                _ => None,
            },
            ParamId::LoraDown(i) => match self.layers.get_mut(i)? {
                Layer::Conv { lora: Some(a), .. } => Some(&mut a.w_down),
                _ => None,
            },
            ParamId::LoraUp(i) => match self.layers.get_mut(i)? {
                Layer::Conv { lora: Some(a), .. } => Some(&mut a.w_up),
                _ => None,
            },
            ParamId::NormGain(i) => match self.layers.get_mut(i)? {
                Layer::Norm { gain, .. } => Some(gain),
                _ => None,
            },
            ParamId::NormBias(i) => match self.layers.get_mut(i)? {
                Layer::Norm { bias, .. } => Some(bias),
                _ => None,
            },
        }
    }

    /// Forward pass over one (c, h, w) sample: logits, per-layer caches, and
    /// the pooled feature vector.
    pub fn forward_sample(&self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>, Tensor)> {
        if x.rank() != 3 {
            return Err(Error::ShapeMismatch("sample must be (c, h, w)".into()));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    geom,
                    lora,
                } => {
                    let eff = match lora {
                        Some(a) => {
                            let (c_out, c_in, k) =
                                (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                            let mut w = weight.clone();
                            let delta = a.conv_delta(c_out, c_in, k)?;
                            // zero-init adapters leave the weight bitwise
                            // untouched
                            if delta.data().iter().any(|&v| v != 0.0) {
                                w.add_assign(&delta)?;
                            }
                            w
                        }
                        None => weight.clone(),
                    };
                    let mut y = conv2d(&cur, &eff, *geom)?;
                    add_channel_bias(&mut y, bias);
                    let cache = ConvCache {
                        input: cur.clone(),
                        composed: eff,
                        geom: *geom,
                        out_shape: y.shape().to_vec(),
                    };
                    (y, LayerCache::Conv(cache))
                }
                Layer::Decomposed(l) => {
                    let (y, cache) = atom_conv::forward(l, &cur)?;
                    (y, LayerCache::Conv(cache))
                }
                Layer::Overcomplete(l) => {
                    let (y, cache) = overcomplete::forward3(l, &cur)?;
                    (y, LayerCache::Conv(cache))
                }
                Layer::Kron { factors, bias } => {
                    let (c_in, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
                    if factors.in_features() != c_in {
                        return Err(Error::ShapeMismatch(format!(
                            "kron layer expects {} channels, got {c_in}",
                            factors.in_features()
                        )));
                    }
                    let wmat = kron_linear::compose_linear(factors);
                    let c_out = factors.out_features();
                    let x_flat = cur.reshape(&[c_in, h * w])?;
                    let mut y = Tensor::new(
                        vec![c_out, h, w],
                        matmul(wmat.data(), x_flat.data(), c_out, c_in, h * w),
                    )?;
                    add_channel_bias(&mut y, bias);
                    (
                        y,
                        LayerCache::Kron {
                            input_hw: (h, w),
                            x_flat,
                            w: wmat,
                        },
                    )
                }
                Layer::Norm { gain, bias, eps } => {
                    let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
                    let hw = h * w;
                    let mut xhat = Tensor::zeros(&[c, h, w]);
                    let mut inv_std = vec![0.0f32; c];
                    let mut y = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let src = &cur.data()[ch * hw..(ch + 1) * hw];
                        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                        let var = src
                            .iter()
                            .map(|&v| (v as f64 - mean).powi(2))
                            .sum::<f64>()
                            / hw as f64;
                        let istd = 1.0 / (var + *eps as f64).sqrt();
                        inv_std[ch] = istd as f32;
                        let (g, b) = (gain.data()[ch], bias.data()[ch]);
                        for p in 0..hw {
                            let xh = ((src[p] as f64 - mean) * istd) as f32;
                            xhat.data_mut()[ch * hw + p] = xh;
                            y.data_mut()[ch * hw + p] = g * xh + b;
                        }
                    }
                    (y, LayerCache::Norm { xhat, inv_std })
                }
                Layer::Relu => {
                    let mut y = cur.clone();
                    let mut mask = Tensor::zeros(cur.shape());
                    for (p, v) in y.data_mut().iter_mut().enumerate() {
                        if *v > 0.0 {
                            mask.data_mut()[p] = 1.0;
                        } else {
                            *v = 0.0;
                        }
                    }
                    (y, LayerCache::Relu { mask })
                }
                Layer::GlobalAvgPool => {
                    let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
                    let hw = (h * w) as f64;
                    let mut y = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        let s: f64 = cur.data()[ch * h * w..(ch + 1) * h * w]
                            .iter()
                            .map(|&v| v as f64)
                            .sum();
                        y.data_mut()[ch] = (s / hw) as f32;
                    }
                    (
                        y,
                        LayerCache::Pool {
                            in_shape: vec![c, h, w],
                        },
                    )
                }
            };
            caches.push(cache);
            cur = y;
        }
        if cur.rank() != 1 || cur.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} do not match head input {}",
                cur.shape(),
                self.feature_dim()
            )));
        }
        let classes = self.num_classes();
        let mut logits = Tensor::new(
            vec![classes],
            matmul(self.head_w.data(), cur.data(), classes, cur.len(), 1),
        )?;
        for (l, b) in logits.data_mut().iter_mut().zip(self.head_b.data()) {
            *l += b;
        }
        Ok((logits, caches, cur))
    }

    /// Backward pass for one sample. `grad_logits` is dLoss/dlogits.
    /// Gradient tensors are produced only for ids in `tunable`; everything
    /// else stays frozen by construction.
    pub fn backward_sample(
        &self,
        caches: &[LayerCache],
        features: &Tensor,
        grad_logits: &Tensor,
        tunable: &BTreeSet<ParamId>,
    ) -> Result<BTreeMap<ParamId, Tensor>> {
        let classes = self.num_classes();
        let feat = self.feature_dim();
        if grad_logits.shape() != [classes] {
            return Err(Error::ShapeMismatch("grad_logits shape".into()));
        }
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        if tunable.contains(&ParamId::HeadWeight) {
            let gw = Tensor::from_fn(&[classes, feat], |ix| {
                grad_logits.data()[ix[0]] * features.data()[ix[1]]
            });
            grads.insert(ParamId::HeadWeight, gw);
        }
        if tunable.contains(&ParamId::HeadBias) {
            grads.insert(ParamId::HeadBias, grad_logits.clone());
        }
        // d/dfeatures = head_w^T grad_logits
        let mut g = Tensor::zeros(&[feat]);
        for c in 0..classes {
            let gl = grad_logits.data()[c];
            if gl == 0.0 {
                continue;
            }
            for f in 0..feat {
                g.data_mut()[f] += gl * self.head_w.data()[c * feat + f];
            }
        }
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let cache = &caches[idx];
            g = match (layer, cache) {
                (
                    Layer::Conv {
                        weight, lora, geom, ..
                    },
                    LayerCache::Conv(cache),
                ) => {
                    if g.shape() != cache.out_shape.as_slice() {
                        return Err(Error::ShapeMismatch("stale conv cache".into()));
                    }
                    let k = weight.shape()[2];
                    let want_w = tunable.contains(&ParamId::ConvWeight(idx));
                    let want_lora = lora.is_some()
                        && (tunable.contains(&ParamId::LoraDown(idx))
                            || tunable.contains(&ParamId::LoraUp(idx)));
                    if want_w || want_lora {
                        let grad_f = conv2d_backward_weight(&cache.input, &g, k, *geom)?;
                        if want_w {
                            grads.insert(ParamId::ConvWeight(idx), grad_f.clone());
                        }
                        if want_lora {
                            let a = lora.as_ref().expect("checked above");
                            let (gd, gu) = lora_conv_grads(a, &grad_f)?;
                            if tunable.contains(&ParamId::LoraDown(idx)) {
                                grads.insert(ParamId::LoraDown(idx), gd);
                            }
                            if tunable.contains(&ParamId::LoraUp(idx)) {
                                grads.insert(ParamId::LoraUp(idx), gu);
                            }
                        }
                    }
                    if tunable.contains(&ParamId::ConvBias(idx)) {
                        grads.insert(ParamId::ConvBias(idx), channel_bias_grad(&g));
                    }
                    if idx == 0 {
                        break;
                    }
                    conv2d_backward_input(&cache.composed, &g, cache.input.shape(), *geom)?
                }
                (Layer::Decomposed(l), LayerCache::Conv(cache)) => {
                    if tunable.contains(&ParamId::Atoms(idx)) {
                        grads.insert(ParamId::Atoms(idx), atom_conv::backward_atoms(l, &g, cache)?);
                    }
                    if tunable.contains(&ParamId::ConvBias(idx)) {
                        grads.insert(ParamId::ConvBias(idx), channel_bias_grad(&g));
                    }
                    if idx == 0 {
                        break;
                    }
                    atom_conv::backward_input(cache, &g)?
                }
                (Layer::Overcomplete(l), LayerCache::Conv(cache)) => {
                    let want_beta = tunable.contains(&ParamId::Beta(idx));
                    let want_d1 = tunable.contains(&ParamId::SubAtoms(idx));
                    if want_beta || want_d1 {
                        let (gb, gd1) = overcomplete::backward_overcomplete(l, &g, cache)?;
                        if want_beta {
                            grads.insert(ParamId::Beta(idx), gb);
                        }
                        if want_d1 {
                            grads.insert(ParamId::SubAtoms(idx), gd1);
                        }
                    }
                    if tunable.contains(&ParamId::ConvBias(idx)) {
                        grads.insert(ParamId::ConvBias(idx), channel_bias_grad(&g));
                    }
                    if idx == 0 {
                        break;
                    }
                    atom_conv::backward_input(cache, &g)?
                }
                (
                    Layer::Kron { factors, .. },
                    LayerCache::Kron {
                        input_hw: (h, w),
                        x_flat,
                        w: wmat,
                    },
                ) => {
                    let (c_out, c_in) = (factors.out_features(), factors.in_features());
                    let hw = h * w;
                    let g_flat = g.reshape(&[c_out, hw])?;
                    if tunable.contains(&ParamId::KronB(idx)) {
                        // grad_W = g_flat * x_flat^T, then chain to B
                        let xt = x_flat.permute(&[1, 0]);
                        let grad_w = Tensor::new(
                            vec![c_out, c_in],
                            matmul(g_flat.data(), xt.data(), c_out, hw, c_in),
                        )?;
                        grads.insert(ParamId::KronB(idx), kron_linear::backward_kron(factors, &grad_w)?);
                    }
                    if tunable.contains(&ParamId::KronBias(idx)) {
                        grads.insert(ParamId::KronBias(idx), channel_bias_grad(&g));
                    }
                    if idx == 0 {
                        break;
                    }
                    let wt = wmat.permute(&[1, 0]);
                    Tensor::new(
                        vec![c_in, *h, *w],
                        matmul(wt.data(), g_flat.data(), c_in, c_out, hw),
                    )?
                }
                (Layer::Norm { gain, .. }, LayerCache::Norm { xhat, inv_std }) => {
                    let (c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2]);
                    let hw = h * w;
                    let mut gg = Tensor::zeros(&[c]);
                    let mut gb = Tensor::zeros(&[c]);
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gs = &g.data()[ch * hw..(ch + 1) * hw];
                        let xs = &xhat.data()[ch * hw..(ch + 1) * hw];
                        let sum_g: f64 = gs.iter().map(|&v| v as f64).sum();
                        let sum_gx: f64 =
                            gs.iter().zip(xs).map(|(&a, &b)| a as f64 * b as f64).sum();
                        gg.data_mut()[ch] = sum_gx as f32;
                        gb.data_mut()[ch] = sum_g as f32;
                        let scale = gain.data()[ch] as f64 * inv_std[ch] as f64;
                        let mg = sum_g / hw as f64;
                        let mgx = sum_gx / hw as f64;
                        for p in 0..hw {
                            gx.data_mut()[ch * hw + p] =
                                (scale * (gs[p] as f64 - mg - xs[p] as f64 * mgx)) as f32;
                        }
                    }
                    if tunable.contains(&ParamId::NormGain(idx)) {
                        grads.insert(ParamId::NormGain(idx), gg);
                    }
                    if tunable.contains(&ParamId::NormBias(idx)) {
                        grads.insert(ParamId::NormBias(idx), gb);
                    }
                    gx
                }
                (Layer::Relu, LayerCache::Relu { mask }) => {
                    let mut gx = g;
                    for (v, m) in gx.data_mut().iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                    gx
                }
                (Layer::GlobalAvgPool, LayerCache::Pool { in_shape }) => {
                    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                    let inv = 1.0 / (h * w) as f32;
                    Tensor::from_fn(&[c, h, w], |ix| g.data()[ix[0]] * inv)
                }
                _ => return Err(Error::ShapeMismatch("cache does not match layer".into())),
            };
        }
        Ok(grads)
    }
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let c = y.shape()[0];
    let hw = y.shape()[1] * y.shape()[2];
    for j in 0..c {
        let b = bias.data()[j];
        for v in &mut y.data_mut()[j * hw..(j + 1) * hw] {
            *v += b;
        }
    }
}

fn channel_bias_grad(grad_y: &Tensor) -> Tensor {
    let c = grad_y.shape()[0];
    let hw = grad_y.shape()[1] * grad_y.shape()[2];
    let mut g = Tensor::zeros(&[c]);
    for j in 0..c {
        let s: f64 = grad_y.data()[j * hw..(j + 1) * hw]
            .iter()
            .map(|&v| v as f64)
            .sum();
        g.data_mut()[j] = s as f32;
    }
    g
}

/// Chain the conv-weight gradient to (grad_down, grad_up) of the adapter.
fn lora_conv_grads(adapter: &LoRAAdapter, grad_f: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c_out, c_in, k) = (grad_f.shape()[0], grad_f.shape()[1], grad_f.shape()[2]);
    let (rows, cols) = (c_out * k, c_in * k);
    // grad of the (rows, cols) update matrix under the (j*k+p, i*k+q) layout
    let mut gm = Tensor::zeros(&[rows, cols]);
    for j in 0..c_out {
        for i in 0..c_in {
            for p in 0..k {
                for q in 0..k {
                    gm.set(&[j * k + p, i * k + q], grad_f.at(&[j, i, p, q]));
                }
            }
        }
    }
    let r = adapter.rank();
    // grad_down = scale * gm * up^T; grad_up = scale * down^T * gm
    let up_t = adapter.w_up.permute(&[1, 0]);
    let mut gd = matmul(gm.data(), up_t.data(), rows, cols, r);
    for v in &mut gd {
        *v *= adapter.scale;
    }
    let down_t = adapter.w_down.permute(&[1, 0]);
    let mut gu = matmul(down_t.data(), gm.data(), r, rows, cols);
    for v in &mut gu {
        *v *= adapter.scale;
    }
    Ok((
        Tensor::new(vec![rows, r], gd)?,
        Tensor::new(vec![r, cols], gu)?,
    ))
}

/// Demo CNN: four 3x3 conv blocks (16-32-64-64, stride 2 twice) with
/// per-channel norm and ReLU, a 1x1 channel-mixing conv, global average
/// pooling, and a linear head.
pub fn demo_cnn(in_channels: usize, num_classes: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let blocks: [(usize, usize, usize); 4] = [
        (in_channels, 16, 1),
        (16, 32, 2),
        (32, 64, 2),
        (64, 64, 1),
    ];
    for &(c_in, c_out, stride) in &blocks {
        layers.push(conv_layer(c_in, c_out, 3, stride, 1, &mut rng));
        layers.push(Layer::Norm {
            gain: Tensor::from_fn(&[c_out], |_| 1.0),
            bias: Tensor::zeros(&[c_out]),
            eps: 1e-5,
        });
        layers.push(Layer::Relu);
    }
    // 1x1 mixing conv: the Kronecker-eligible layer. It also bottlenecks
    // the features (64 -> 16) so that linear probing is capacity-limited
    // and the quality of the frozen backbone actually shows in accuracy.
    layers.push(conv_layer(64, 16, 1, 1, 0, &mut rng));
    layers.push(Layer::Relu);
    layers.push(Layer::GlobalAvgPool);
    let head_std = (1.0 / 16.0f64).sqrt();
    let head_w = Tensor::from_fn(&[num_classes, 16], |_| (gaussian(&mut rng) * head_std) as f32);
    let head_b = Tensor::zeros(&[num_classes]);
    Model {
        layers,
        head_w,
        head_b,
    }
}

fn conv_layer(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| (gaussian(rng) * std) as f32);
    Layer::Conv {
        weight,
        bias: Tensor::zeros(&[c_out]),
        geom: ConvGeometry::new(stride, padding).expect("static geometry"),
        lora: None,
    }
}

/// Decomposition hyperparameters for a whole model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposeOptions {
    /// Filter atoms per conv layer.
    pub m: usize,
    /// Sub-atoms per atom; `Some` switches conv layers to the overcomplete
    /// parameterization after decomposition.
    pub m1: Option<usize>,
    /// Kronecker pairs for 1x1 / linear layers.
    pub m_c: usize,
    /// Square block size of the Kronecker factor B.
    pub k_c: usize,
    /// L1 weight; `None` scales 0.01 * mean |W| per layer.
    pub lambda: Option<f32>,
    pub seed: u64,
    pub max_outer: usize,
    pub max_ista: usize,
    pub tol: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions {
            m: 9,
            m1: None,
            m_c: 4,
            k_c: 4,
            lambda: None,
            seed: 0,
            max_outer: 50,
            max_ista: 100,
            tol: 1e-6,
        }
    }
}

/// Outcome of decomposing (or skipping) one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub report: Option<DecomposeReport>,
    pub skipped: Option<String>,
}

/// Replace every eligible dense conv by a decomposed (or overcomplete) conv
/// and every eligible 1x1 conv by a Kronecker factorization. Ineligible and
/// already-decomposed layers are skipped with a note, not an error.
pub fn decompose_model(model: &Model, opts: &DecomposeOptions) -> Result<(Model, Vec<LayerReport>)> {
    let mut out = model.clone();
    let mut reports = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        let entry = match layer {
            Layer::Conv {
                weight,
                bias,
                geom,
                lora,
            } => {
                let (c_out, c_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                if lora.is_some() {
                    LayerReport {
                        index: idx,
                        kind: layer.kind().into(),
                        report: None,
                        skipped: Some("carries a LoRA adapter; left dense".into()),
                    }
                } else if k == 1 {
                    if c_out % opts.k_c != 0 || c_in % opts.k_c != 0 {
                        LayerReport {
                            index: idx,
                            kind: layer.kind().into(),
                            report: None,
                            skipped: Some(format!(
                                "{c_out}x{c_in} not divisible into {}x{} blocks",
                                opts.k_c, opts.k_c
                            )),
                        }
                    } else {
                        let w2 = weight.reshape(&[c_out, c_in])?;
                        let cfg = layer_cfg(&w2, opts, idx);
                        let (factors, report) =
                            kron_linear::decompose_linear(&w2, opts.m_c, opts.k_c, opts.k_c, &cfg)?;
                        out.layers[idx] = Layer::Kron {
                            factors,
                            bias: bias.clone(),
                        };
                        LayerReport {
                            index: idx,
                            kind: "kron-linear".into(),
                            report: Some(report),
                            skipped: None,
                        }
                    }
                } else if opts.m > c_in * c_out * k * k {
                    LayerReport {
                        index: idx,
                        kind: layer.kind().into(),
                        report: None,
                        skipped: Some(format!("m = {} too large for this layer", opts.m)),
                    }
                } else {
                    let cfg = layer_cfg(weight, opts, idx);
                    let (dec, report) =
                        atom_conv::decompose_conv(weight, opts.m, *geom, Some(bias.clone()), &cfg)?;
                    out.layers[idx] = match opts.m1 {
                        Some(m1) => {
                            let over =
                                overcomplete::expand(&dec.atoms, m1, Some(dec.in_channels()))?;
                            Layer::Overcomplete(OvercompleteConv2d::new(
                                over,
                                dec.coeffs,
                                dec.geom,
                                dec.bias,
                            )?)
                        }
                        None => Layer::Decomposed(dec),
                    };
                    LayerReport {
                        index: idx,
                        kind: out.layers[idx].kind().into(),
                        report: Some(report),
                        skipped: None,
                    }
                }
            }
            Layer::Decomposed(_) | Layer::Overcomplete(_) | Layer::Kron { .. } => LayerReport {
                index: idx,
                kind: layer.kind().into(),
                report: None,
                skipped: Some("already decomposed".into()),
            },
            Layer::Norm { .. } | Layer::Relu | Layer::GlobalAvgPool => continue,
        };
        reports.push(entry);
    }
    Ok((out, reports))
}

fn layer_cfg(weight: &Tensor, opts: &DecomposeOptions, idx: usize) -> SparseCodingConfig {
    let seed = opts.seed.wrapping_mul(0x100_0003).wrapping_add(idx as u64);
    let mut cfg = match opts.lambda {
        Some(l) => SparseCodingConfig {
            lambda: l,
            seed,
            ..Default::default()
        },
        None => SparseCodingConfig::scaled_to(weight, seed),
    };
    cfg.max_outer = opts.max_outer;
    cfg.max_ista = opts.max_ista;
    cfg.tol = opts.tol;
    cfg
}

/// Attach zero-init LoRA adapters to every dense conv layer.
pub fn attach_lora(model: &mut Model, r: usize, seed: u64) -> Result<usize> {
    let mut attached = 0;
    for (idx, layer) in model.layers.iter_mut().enumerate() {
        if let Layer::Conv { weight, lora, .. } = layer {
            let (c_out, c_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
            *lora = Some(LoRAAdapter::zero_init(
                c_out * k,
                c_in * k,
                r,
                seed.wrapping_add(idx as u64),
            )?);
            attached += 1;
        }
    }
    if attached == 0 {
        return Err(Error::SchemeMismatch {
            scheme: "lora-baseline".into(),
            missing: "a dense conv layer to adapt".into(),
        });
    }
    Ok(attached)
}
