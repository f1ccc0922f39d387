//! Overcomplete filter atoms: each parent atom is expanded into m_1
//! sub-atoms with combination coefficients beta, adding an intra-channel
//! mixing stage between the spatial-only convolution and the cross-channel
//! mixing.
//!
//! Beta comes in two layouts. The count-faithful default stores one
//! (m, m_1) slab per input channel, shape (c_in, m, m_1), so the tunable
//! count per layer is m*m_1*k^2 + c_in*m*m_1. The compact shared form,
//! shape (m, m_1), reuses one slab across channels.

use crate::atom_conv::{
    channel_mix, spatial_conv, AtomCoefficients, ConvCache, FilterAtoms,
};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward_weight, ConvGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-atom expansion into m_1 sub-atoms plus combination coefficients.
#[derive(Debug, Clone)]
pub struct OvercompleteAtoms {
    /// (m, m_1) shared, or (c_in, m, m_1) when count-faithful.
    pub beta: Tensor,
    /// Sub-atoms grouped per parent: (m * m_1, k, k).
    pub d1: Tensor,
    pub m: usize,
    pub m1: usize,
    /// Count-faithful per-channel beta when true.
    pub per_channel: bool,
}

impl OvercompleteAtoms {
    pub fn kernel_size(&self) -> usize {
        self.d1.shape()[1]
    }

    pub fn tunable_count(&self) -> usize {
        self.d1.len() + self.beta.len()
    }

    fn beta_at(&self, channel: usize, l: usize, j: usize) -> f32 {
        if self.per_channel {
            self.beta.at(&[channel, l, j])
        } else {
            self.beta.at(&[l, j])
        }
    }

    /// Optional symmetry-breaking perturbation of the repeated sub-atoms.
    /// Off by default; it trades exact initialization equivalence for
    /// non-degenerate sub-atom directions.
    pub fn perturb(&mut self, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.d1.data_mut() {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v += (n * std as f64) as f32;
        }
    }
}

/// Expand parent atoms into m_1 repeated sub-atoms each, with every beta
/// element set to 1/m_1, so the layer function is unchanged. Pass the
/// input-channel count to get the count-faithful per-channel beta; `None`
/// gives the compact shared form.
pub fn expand(atoms: &FilterAtoms, m1: usize, per_channel: Option<usize>) -> Result<OvercompleteAtoms> {
    if m1 == 0 {
        return Err(Error::InvalidArgument("m_1 must be >= 1".into()));
    }
    let m = atoms.num_atoms();
    let k = atoms.kernel_size();
    let kk = k * k;
    let mut d1 = Tensor::zeros(&[m * m1, k, k]);
    for l in 0..m {
        let src = &atoms.tensor.data()[l * kk..(l + 1) * kk];
        for j in 0..m1 {
            d1.data_mut()[(l * m1 + j) * kk..(l * m1 + j + 1) * kk].copy_from_slice(src);
        }
    }
    let fill = 1.0 / m1 as f32;
    let beta = match per_channel {
        Some(c_in) => Tensor::new(vec![c_in, m, m1], vec![fill; c_in * m * m1])?,
        None => Tensor::new(vec![m, m1], vec![fill; m * m1])?,
    };
    Ok(OvercompleteAtoms {
        beta,
        d1,
        m,
        m1,
        per_channel: per_channel.is_some(),
    })
}

/// Recombine sub-atoms into parent atoms with a shared (m, m_1) beta:
/// parent l = sum_j beta[l,j] * D1[l*m_1+j].
pub fn combine(beta: &Tensor, d1: &Tensor) -> Result<Tensor> {
    if beta.rank() != 2 {
        return Err(Error::ShapeMismatch("combine expects a (m, m_1) beta".into()));
    }
    let (m, m1) = (beta.shape()[0], beta.shape()[1]);
    if d1.shape()[0] != m * m1 {
        return Err(Error::ShapeMismatch(format!(
            "D1 has {} sub-atoms, beta expects {}",
            d1.shape()[0],
            m * m1
        )));
    }
    let k = d1.shape()[1];
    let kk = k * k;
    let mut out = Tensor::zeros(&[m, k, k]);
    for l in 0..m {
        for j in 0..m1 {
            let b = beta.at(&[l, j]);
            let src = &d1.data()[(l * m1 + j) * kk..(l * m1 + j + 1) * kk];
            let dst = &mut out.data_mut()[l * kk..(l + 1) * kk];
            for p in 0..kk {
                dst[p] += b * src[p];
            }
        }
    }
    Ok(out)
}

impl OvercompleteAtoms {
    /// Effective parent atoms per input channel: (c_in, m, k, k) for the
    /// per-channel layout, or the shared (m, k, k) broadcast.
    pub fn effective_atoms_for_channel(&self, channel: usize) -> Result<Tensor> {
        if self.per_channel {
            let c_in = self.beta.shape()[0];
            if channel >= c_in {
                return Err(Error::ShapeMismatch("channel out of range".into()));
            }
            let slab = Tensor::new(
                vec![self.m, self.m1],
                self.beta.data()[channel * self.m * self.m1..(channel + 1) * self.m * self.m1]
                    .to_vec(),
            )?;
            combine(&slab, &self.d1)
        } else {
            combine(&self.beta, &self.d1)
        }
    }
}

/// Intra-channel mixing: groups of m_1 consecutive channels, each belonging
/// to one (input channel, parent atom) pair, are combined with that pair's
/// beta row. Channels from different input channels never mix.
pub fn intra_channel_mix(over: &OvercompleteAtoms, z1: &Tensor) -> Result<Tensor> {
    let (m, m1) = (over.m, over.m1);
    let total = z1.shape()[0];
    if total % (m * m1) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "intra_channel_mix: {total} channels not divisible by m*m_1 = {}",
            m * m1
        )));
    }
    let c_in = total / (m * m1);
    if over.per_channel && over.beta.shape()[0] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "beta expects {} input channels, features carry {c_in}",
            over.beta.shape()[0]
        )));
    }
    let (h, w) = (z1.shape()[1], z1.shape()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[c_in * m, h, w]);
    for i in 0..c_in {
        for l in 0..m {
            let dst_base = (i * m + l) * hw;
            for j in 0..m1 {
                let b = over.beta_at(i, l, j);
                if b == 0.0 {
                    continue;
                }
                let src_base = (i * m * m1 + l * m1 + j) * hw;
                for p in 0..hw {
                    out.data_mut()[dst_base + p] += b * z1.data()[src_base + p];
                }
            }
        }
    }
    Ok(out)
}

/// A convolutional layer with overcomplete atoms.
#[derive(Debug, Clone)]
pub struct OvercompleteConv2d {
    pub over: OvercompleteAtoms,
    pub coeffs: AtomCoefficients,
    pub geom: ConvGeometry,
    pub bias: Option<Tensor>,
}

impl OvercompleteConv2d {
    pub fn new(
        over: OvercompleteAtoms,
        coeffs: AtomCoefficients,
        geom: ConvGeometry,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        if over.m != coeffs.num_atoms() {
            return Err(Error::ShapeMismatch("m mismatch with coefficients".into()));
        }
        if over.per_channel && over.beta.shape()[0] != coeffs.in_channels() {
            return Err(Error::ShapeMismatch("beta channel count mismatch".into()));
        }
        Ok(OvercompleteConv2d {
            over,
            coeffs,
            geom,
            bias,
        })
    }

    /// Effective dense filters F[j,i] = sum_l alpha[i,j,l] * combined atom.
    pub fn compose_effective(&self) -> Result<Tensor> {
        let (c_in, c_out, m) = (
            self.coeffs.in_channels(),
            self.coeffs.out_channels(),
            self.over.m,
        );
        let k = self.over.kernel_size();
        let kk = k * k;
        let alpha = self.coeffs.alpha().data();
        let mut out = Tensor::zeros(&[c_out, c_in, k, k]);
        for i in 0..c_in {
            let atoms_i = self.over.effective_atoms_for_channel(i)?;
            for j in 0..c_out {
                let base = (j * c_in + i) * kk;
                for l in 0..m {
                    let a = alpha[(i * c_out + j) * m + l];
                    if a == 0.0 {
                        continue;
                    }
                    let src = &atoms_i.data()[l * kk..(l + 1) * kk];
                    for p in 0..kk {
                        out.data_mut()[base + p] += a * src[p];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn tunable_count(&self) -> usize {
        self.over.tunable_count()
    }
}

fn add_bias(y: &mut Tensor, bias: &Option<Tensor>) {
    if let Some(b) = bias {
        let c = y.shape()[0];
        let hw = y.shape()[1] * y.shape()[2];
        for j in 0..c {
            let bv = b.data()[j];
            for v in &mut y.data_mut()[j * hw..(j + 1) * hw] {
                *v += bv;
            }
        }
    }
}

/// Production path: compose the effective filters once and run a single
/// convolution.
pub fn forward3(layer: &OvercompleteConv2d, x: &Tensor) -> Result<(Tensor, ConvCache)> {
    let composed = layer.compose_effective()?;
    let mut y = conv2d(x, &composed, layer.geom)?;
    add_bias(&mut y, &layer.bias);
    let cache = ConvCache {
        input: x.clone(),
        composed,
        geom: layer.geom,
        out_shape: y.shape().to_vec(),
    };
    Ok((y, cache))
}

/// Verification path: spatial-only convolution with D1, intra-channel
/// mixing with beta, cross-channel mixing with alpha.
pub fn forward3_staged(layer: &OvercompleteConv2d, x: &Tensor) -> Result<Tensor> {
    let sub_atoms = FilterAtoms::new(layer.over.d1.clone())?;
    let z1 = spatial_conv(&sub_atoms, x, layer.geom)?;
    let zprime = intra_channel_mix(&layer.over, &z1)?;
    let mut y = channel_mix(&layer.coeffs, &zprime)?;
    add_bias(&mut y, &layer.bias);
    Ok(y)
}

/// Gradients for beta and D1.
///
/// With G_{i,l} = sum_j alpha[i,j,l] * grad_F[j,i] (the parent-atom
/// gradient seen from input channel i):
///   grad_beta[i,l,j] = <G_{i,l}, D1[l*m_1+j]>   (Frobenius inner product)
///   grad_D1[l*m_1+j] = sum_i beta[i,l,j] * G_{i,l}
/// The shared layout sums G over channels first.
pub fn backward_overcomplete(
    layer: &OvercompleteConv2d,
    grad_y: &Tensor,
    cache: &ConvCache,
) -> Result<(Tensor, Tensor)> {
    if grad_y.shape() != cache.out_shape.as_slice() {
        return Err(Error::ShapeMismatch(
            "stale cache: gradient shape does not match forward output".into(),
        ));
    }
    let k = layer.over.kernel_size();
    let kk = k * k;
    let (c_in, c_out, m, m1) = (
        layer.coeffs.in_channels(),
        layer.coeffs.out_channels(),
        layer.over.m,
        layer.over.m1,
    );
    let grad_f = conv2d_backward_weight(&cache.input, grad_y, k, cache.geom)?;
    let alpha = layer.coeffs.alpha().data();
    let gf = grad_f.data();
    let d1 = layer.over.d1.data();

    // per-channel parent-atom gradients G[i][l], f64 accumulated
    let mut g = vec![0.0f64; c_in * m * kk];
    for i in 0..c_in {
        for j in 0..c_out {
            let base = (j * c_in + i) * kk;
            for l in 0..m {
                let a = alpha[(i * c_out + j) * m + l] as f64;
                if a == 0.0 {
                    continue;
                }
                let dst = &mut g[(i * m + l) * kk..(i * m + l + 1) * kk];
                for p in 0..kk {
                    dst[p] += a * gf[base + p] as f64;
                }
            }
        }
    }

    let mut grad_d1 = Tensor::zeros(&[m * m1, k, k]);
    let mut gd1 = vec![0.0f64; m * m1 * kk];
    if layer.over.per_channel {
        let mut grad_beta = Tensor::zeros(&[c_in, m, m1]);
        for i in 0..c_in {
            for l in 0..m {
                let gil = &g[(i * m + l) * kk..(i * m + l + 1) * kk];
                for j in 0..m1 {
                    let sub = &d1[(l * m1 + j) * kk..(l * m1 + j + 1) * kk];
                    let mut dot = 0.0f64;
                    for p in 0..kk {
                        dot += gil[p] * sub[p] as f64;
                    }
                    grad_beta.set(&[i, l, j], dot as f32);
                    let b = layer.over.beta.at(&[i, l, j]) as f64;
                    let dst = &mut gd1[(l * m1 + j) * kk..(l * m1 + j + 1) * kk];
                    for p in 0..kk {
                        dst[p] += b * gil[p];
                    }
                }
            }
        }
        for (o, v) in grad_d1.data_mut().iter_mut().zip(&gd1) {
            *o = *v as f32;
        }
        Ok((grad_beta, grad_d1))
    } else {
        // shared: G_l = sum_i G_{i,l}
        let mut gl = vec![0.0f64; m * kk];
        for i in 0..c_in {
            for l in 0..m {
                for p in 0..kk {
                    gl[l * kk + p] += g[(i * m + l) * kk + p];
                }
            }
        }
        let mut grad_beta = Tensor::zeros(&[m, m1]);
        for l in 0..m {
            let glr = &gl[l * kk..(l + 1) * kk];
            for j in 0..m1 {
                let sub = &d1[(l * m1 + j) * kk..(l * m1 + j + 1) * kk];
                let mut dot = 0.0f64;
                for p in 0..kk {
                    dot += glr[p] * sub[p] as f64;
                }
                grad_beta.set(&[l, j], dot as f32);
                let b = layer.over.beta.at(&[l, j]) as f64;
                let dst = &mut gd1[(l * m1 + j) * kk..(l * m1 + j + 1) * kk];
                for p in 0..kk {
                    dst[p] += b * glr[p];
                }
            }
        }
        for (o, v) in grad_d1.data_mut().iter_mut().zip(&gd1) {
            *o = *v as f32;
        }
        Ok((grad_beta, grad_d1))
    }
}
