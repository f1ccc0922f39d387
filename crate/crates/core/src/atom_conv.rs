//! Convolutional layers factored into spatial filter atoms and frozen
//! cross-channel atom coefficients.
//!
//! A dense filter bank F (c, c', k, k) is represented as
//! F[j,i] = sum_l alpha[i,j,l] * D[l], with alpha spatially invariant.
//! The forward pass composes F and runs one convolution; the explicit
//! two-stage path (spatial-only convolution, then 1x1 channel mixing)
//! exists behind `forward_two_stage` for verification.

use crate::error::{Error, Result};
use crate::sparse::{self, SparseCodingConfig};
use crate::tensor::{conv2d, conv2d_backward_input, conv2d_backward_weight, ConvGeometry, Tensor};

/// The tunable subspace basis: m spatial kernels of size k x k.
#[derive(Debug, Clone)]
pub struct FilterAtoms {
    pub tensor: Tensor, // (m, k, k)
}

impl FilterAtoms {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape()[1] != tensor.shape()[2] {
            return Err(Error::ShapeMismatch(format!(
                "filter atoms must be (m, k, k), got {:?}",
                tensor.shape()
            )));
        }
        Ok(FilterAtoms { tensor })
    }

    pub fn num_atoms(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Frozen channel-mixing weights alpha (c_in, c_out, m). Any write while
/// frozen is a contract violation.
#[derive(Debug, Clone)]
pub struct AtomCoefficients {
    alpha: Tensor, // (c_in, c_out, m)
    frozen: bool,
}

impl AtomCoefficients {
    pub fn new(alpha: Tensor) -> Result<Self> {
        if alpha.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "atom coefficients must be (c_in, c_out, m), got {:?}",
                alpha.shape()
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument("non-finite coefficients".into()));
        }
        Ok(AtomCoefficients {
            alpha,
            frozen: false,
        })
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::FrozenWrite("atom coefficients".into()));
        }
        Ok(&mut self.alpha)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn in_channels(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn num_atoms(&self) -> usize {
        self.alpha.shape()[2]
    }
}

/// A convolutional layer stored in decomposed form.
#[derive(Debug, Clone)]
pub struct DecomposedConv2d {
    pub atoms: FilterAtoms,
    pub coeffs: AtomCoefficients,
    pub geom: ConvGeometry,
    pub bias: Option<Tensor>, // (c_out,)
}

impl DecomposedConv2d {
    pub fn new(
        atoms: FilterAtoms,
        coeffs: AtomCoefficients,
        geom: ConvGeometry,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        if atoms.num_atoms() != coeffs.num_atoms() {
            return Err(Error::ShapeMismatch(format!(
                "atoms carry m = {}, coefficients expect m = {}",
                atoms.num_atoms(),
                coeffs.num_atoms()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [coeffs.out_channels()] {
                return Err(Error::ShapeMismatch("bias length != c_out".into()));
            }
        }
        Ok(DecomposedConv2d {
            atoms,
            coeffs,
            geom,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.coeffs.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.coeffs.out_channels()
    }

    /// Tunable parameters: the atoms only, m * k^2.
    pub fn tunable_count(&self) -> usize {
        self.atoms.num_atoms() * self.atoms.kernel_size().pow(2)
    }
}

/// Cache carried from forward to backward.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    pub composed: Tensor, // (c_out, c_in, k, k)
    pub geom: ConvGeometry,
    pub out_shape: Vec<usize>,
}

/// F[j,i] = sum_l alpha[i,j,l] * D[l]; result (c_out, c_in, k, k).
pub fn compose_filters(coeffs: &AtomCoefficients, atoms: &FilterAtoms) -> Result<Tensor> {
    let m = atoms.num_atoms();
    if coeffs.num_atoms() != m {
        return Err(Error::ShapeMismatch(format!(
            "m mismatch: {} vs {}",
            coeffs.num_atoms(),
            m
        )));
    }
    let (c_in, c_out) = (coeffs.in_channels(), coeffs.out_channels());
    let k = atoms.kernel_size();
    let alpha = coeffs.alpha().data();
    let d = atoms.tensor.data();
    let kk = k * k;
    let mut out = Tensor::zeros(&[c_out, c_in, k, k]);
    let o = out.data_mut();
    for i in 0..c_in {
        for j in 0..c_out {
            let base = (j * c_in + i) * kk;
            let abase = (i * c_out + j) * m;
            for l in 0..m {
                let a = alpha[abase + l];
                if a == 0.0 {
                    continue;
                }
                let dl = &d[l * kk..(l + 1) * kk];
                for p in 0..kk {
                    o[base + p] += a * dl[p];
                }
            }
        }
    }
    Ok(out)
}

/// Spatial-only stage: every input channel convolves with every atom
/// separately; output channel (i*m + l) = x[i] * d[l]. No channel mixing.
pub fn spatial_conv(atoms: &FilterAtoms, x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let m = atoms.num_atoms();
    let k = atoms.kernel_size();
    let c_in = x.shape()[0];
    let (h_in, w_in) = (x.shape()[1], x.shape()[2]);
    let oh = geom.out_extent(h_in, k)?;
    let ow = geom.out_extent(w_in, k)?;
    let mut out = Tensor::zeros(&[c_in * m, oh, ow]);
    // weight for a single channel: (m, 1, k, k)
    let atom_weight = atoms.tensor.reshape(&[m, 1, k, k])?;
    for i in 0..c_in {
        let plane = Tensor::new(
            vec![1, h_in, w_in],
            x.data()[i * h_in * w_in..(i + 1) * h_in * w_in].to_vec(),
        )?;
        let resp = conv2d(&plane, &atom_weight, geom)?; // (m, oh, ow)
        let dst = &mut out.data_mut()[i * m * oh * ow..(i + 1) * m * oh * ow];
        dst.copy_from_slice(resp.data());
    }
    Ok(out)
}

/// Cross-channel mixing stage: z[j] = sum_{i,l} alpha[i,j,l] * zprime[i*m+l],
/// a pointwise (1x1) combination per spatial location.
pub fn channel_mix(coeffs: &AtomCoefficients, zprime: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, m) = (
        coeffs.in_channels(),
        coeffs.out_channels(),
        coeffs.num_atoms(),
    );
    if zprime.shape()[0] != c_in * m {
        return Err(Error::ShapeMismatch(format!(
            "channel_mix expects {} channels, got {}",
            c_in * m,
            zprime.shape()[0]
        )));
    }
    let (h, w) = (zprime.shape()[1], zprime.shape()[2]);
    let hw = h * w;
    // mix[j][(i*m + l)] = alpha[i,j,l]
    let alpha = coeffs.alpha().data();
    let mut mix = vec![0.0f32; c_out * c_in * m];
    for i in 0..c_in {
        for j in 0..c_out {
            for l in 0..m {
                mix[j * c_in * m + i * m + l] = alpha[(i * c_out + j) * m + l];
            }
        }
    }
    let out = crate::tensor::matmul(&mix, zprime.data(), c_out, c_in * m, hw);
    Tensor::new(vec![c_out, h, w], out)
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

/// Production path: compose F once and run a single convolution.
pub fn forward(layer: &DecomposedConv2d, x: &Tensor) -> Result<(Tensor, ConvCache)> {
    let composed = compose_filters(&layer.coeffs, &layer.atoms)?;
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

/// Verification path: spatial-only convolution followed by channel mixing,
/// materializing the intermediate features.
pub fn forward_two_stage(layer: &DecomposedConv2d, x: &Tensor) -> Result<Tensor> {
    let zprime = spatial_conv(&layer.atoms, x, layer.geom)?;
    let mut y = channel_mix(&layer.coeffs, &zprime)?;
    add_bias(&mut y, &layer.bias);
    Ok(y)
}

/// Gradient with respect to the atoms only:
/// grad_D[l] = sum_{i,j} alpha[i,j,l] * grad_F[j,i], where grad_F is the
/// standard convolution weight gradient. No gradient exists for alpha.
pub fn backward_atoms(
    layer: &DecomposedConv2d,
    grad_y: &Tensor,
    cache: &ConvCache,
) -> Result<Tensor> {
    if grad_y.shape() != cache.out_shape.as_slice() {
        return Err(Error::ShapeMismatch(
            "stale cache: gradient shape does not match forward output".into(),
        ));
    }
    let k = layer.atoms.kernel_size();
    let grad_f = conv2d_backward_weight(&cache.input, grad_y, k, cache.geom)?;
    atoms_grad_from_filter_grad(&layer.coeffs, &grad_f, k)
}

/// Chain rule from a composed-filter gradient down to the atoms.
pub fn atoms_grad_from_filter_grad(
    coeffs: &AtomCoefficients,
    grad_f: &Tensor,
    k: usize,
) -> Result<Tensor> {
    let (c_in, c_out, m) = (
        coeffs.in_channels(),
        coeffs.out_channels(),
        coeffs.num_atoms(),
    );
    let kk = k * k;
    let alpha = coeffs.alpha().data();
    let gf = grad_f.data();
    let mut grad_d = Tensor::zeros(&[m, k, k]);
    let mut acc = vec![0.0f64; m * kk];
    for i in 0..c_in {
        for j in 0..c_out {
            let base = (j * c_in + i) * kk;
            let abase = (i * c_out + j) * m;
            for l in 0..m {
                let a = alpha[abase + l] as f64;
                if a == 0.0 {
                    continue;
                }
                for p in 0..kk {
                    acc[l * kk + p] += a * gf[base + p] as f64;
                }
            }
        }
    }
    for (o, v) in grad_d.data_mut().iter_mut().zip(&acc) {
        *o = *v as f32;
    }
    Ok(grad_d)
}

/// Gradient with respect to the layer input, for backpropagation through
/// stacked layers.
pub fn backward_input(cache: &ConvCache, grad_y: &Tensor) -> Result<Tensor> {
    conv2d_backward_input(&cache.composed, grad_y, cache.input.shape(), cache.geom)
}

/// Decompose a dense filter bank (c_out, c_in, k, k) into a
/// `DecomposedConv2d` via sparse coding, freezing the coefficients.
pub fn decompose_conv(
    weight: &Tensor,
    m: usize,
    geom: ConvGeometry,
    bias: Option<Tensor>,
    cfg: &SparseCodingConfig,
) -> Result<(DecomposedConv2d, sparse::DecomposeReport)> {
    if weight.rank() != 4 {
        return Err(Error::ShapeMismatch("expected (c_out, c_in, k, k)".into()));
    }
    let (c_out, c_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let kk = k * k;
    // target row (i*c_out + j) = flattened F[j, i]
    let mut target = Tensor::zeros(&[c_in * c_out, kk]);
    for i in 0..c_in {
        for j in 0..c_out {
            let src = &weight.data()[(j * c_in + i) * kk..(j * c_in + i + 1) * kk];
            target.data_mut()[(i * c_out + j) * kk..(i * c_out + j + 1) * kk]
                .copy_from_slice(src);
        }
    }
    let (coeff_mat, dict, report) = sparse::decompose(&target, m, cfg)?;
    let atoms = FilterAtoms::new(dict.atoms.reshape(&[m, k, k])?)?;
    let alpha = coeff_mat.values.reshape(&[c_in, c_out, m])?;
    let mut coeffs = AtomCoefficients::new(alpha)?;
    coeffs.freeze();
    let layer = DecomposedConv2d::new(atoms, coeffs, geom, bias)?;
    Ok((layer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn delta_kernel(k: usize) -> Tensor {
        let mut d = Tensor::zeros(&[1, k, k]);
        d.set(&[0, k / 2, k / 2], 1.0);
        d
    }

    fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
        let denom = b.frob_norm().max(1e-12);
        let mut num = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            num += ((*x - *y) as f64).powi(2);
        }
        num.sqrt() / denom
    }

    #[test]
    fn compose_delta_atom_all_ones() {
        let atoms = FilterAtoms::new(delta_kernel(3)).unwrap();
        let coeffs = AtomCoefficients::new(Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap()).unwrap();
        let f = compose_filters(&coeffs, &atoms).unwrap();
        assert_eq!(f.shape(), &[2, 2, 3, 3]);
        for j in 0..2 {
            for i in 0..2 {
                for p in 0..3 {
                    for q in 0..3 {
                        let expect = if (p, q) == (1, 1) { 1.0 } else { 0.0 };
                        assert_eq!(f.at(&[j, i, p, q]), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn compose_one_hot_selects_single_atom() {
        let mut rng = StdRng::seed_from_u64(1);
        let atoms = FilterAtoms::new(rand_tensor(&[3, 3, 3], &mut rng)).unwrap();
        // alpha[i,j,l] selects atom (i + j) % 3
        let alpha = Tensor::from_fn(&[2, 2, 3], |ix| {
            if ix[2] == (ix[0] + ix[1]) % 3 {
                1.0
            } else {
                0.0
            }
        });
        let coeffs = AtomCoefficients::new(alpha).unwrap();
        let f = compose_filters(&coeffs, &atoms).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let l = (i + j) % 3;
                for p in 0..3 {
                    for q in 0..3 {
                        assert_eq!(f.at(&[j, i, p, q]), atoms.tensor.at(&[l, p, q]));
                    }
                }
            }
        }
    }

    #[test]
    fn decompose_compose_round_trip() {
        let mut rng = StdRng::seed_from_u64(2);
        let weight = rand_tensor(&[8, 4, 3, 3], &mut rng);
        let cfg = SparseCodingConfig {
            lambda: 0.0,
            max_outer: 50,
            max_ista: 500,
            tol: 1e-12,
            ridge: 1e-9,
            seed: 7,
        };
        let geom = ConvGeometry::new(1, 1).unwrap();
        let (layer, report) = decompose_conv(&weight, 9, geom, None, &cfg).unwrap();
        assert!(report.final_relative_error <= 1e-4);
        let recomposed = compose_filters(&layer.coeffs, &layer.atoms).unwrap();
        assert!(rel_diff(&recomposed, &weight) <= 1e-4);
    }

    #[test]
    fn spatial_conv_delta_atom_is_identity() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let atoms = FilterAtoms::new(delta_kernel(3)).unwrap();
        let z = spatial_conv(&atoms, &x, ConvGeometry::new(1, 1).unwrap()).unwrap();
        assert_eq!(z.shape(), &[2, 5, 5]);
        assert_eq!(z, x);
    }

    #[test]
    fn spatial_conv_delta_and_zero_atoms_alternate() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let mut d = Tensor::zeros(&[2, 3, 3]);
        d.set(&[0, 1, 1], 1.0); // atom 0 = delta, atom 1 = zero
        let atoms = FilterAtoms::new(d).unwrap();
        let z = spatial_conv(&atoms, &x, ConvGeometry::new(1, 1).unwrap()).unwrap();
        assert_eq!(z.shape(), &[4, 4, 4]);
        let hw = 16;
        for i in 0..2 {
            let copy = &z.data()[(i * 2) * hw..(i * 2 + 1) * hw];
            let zero = &z.data()[(i * 2 + 1) * hw..(i * 2 + 2) * hw];
            assert_eq!(copy, &x.data()[i * hw..(i + 1) * hw]);
            assert!(zero.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spatial_conv_matches_block_diagonal_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_tensor(&[3, 6, 6], &mut rng);
        let atoms = FilterAtoms::new(rand_tensor(&[2, 3, 3], &mut rng)).unwrap();
        let geom = ConvGeometry::new(1, 1).unwrap();
        let z = spatial_conv(&atoms, &x, geom).unwrap();
        // oracle: expanded block-diagonal weight (c*m, c, k, k) where
        // output channel i*m+l convolves only input channel i with atom l
        let (c, m, k) = (3, 2, 3);
        let mut big = Tensor::zeros(&[c * m, c, k, k]);
        for i in 0..c {
            for l in 0..m {
                for p in 0..k {
                    for q in 0..k {
                        big.set(&[i * m + l, i, p, q], atoms.tensor.at(&[l, p, q]));
                    }
                }
            }
        }
        let oracle = conv2d(&x, &big, geom).unwrap();
        assert!(rel_diff(&z, &oracle) <= 1e-6);
    }

    #[test]
    fn channel_mix_all_ones_sums_channels() {
        let mut rng = StdRng::seed_from_u64(6);
        let zprime = rand_tensor(&[4, 3, 3], &mut rng); // c_in=2, m=2
        let coeffs = AtomCoefficients::new(Tensor::new(vec![2, 1, 2], vec![1.0; 4]).unwrap()).unwrap();
        let z = channel_mix(&coeffs, &zprime).unwrap();
        assert_eq!(z.shape(), &[1, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                let sum: f32 = (0..4).map(|ch| zprime.at(&[ch, y, x])).sum();
                assert!((z.at(&[0, y, x]) - sum).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn channel_mix_one_hot_selects_channel() {
        let mut rng = StdRng::seed_from_u64(7);
        let zprime = rand_tensor(&[6, 2, 2], &mut rng); // c_in=3, m=2
        // alpha one-hot: output j reads intermediate channel (1, 1) -> index 1*2+1=3
        let alpha = Tensor::from_fn(&[3, 1, 2], |ix| {
            if ix[0] == 1 && ix[2] == 1 {
                1.0
            } else {
                0.0
            }
        });
        let coeffs = AtomCoefficients::new(alpha).unwrap();
        let z = channel_mix(&coeffs, &zprime).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(z.at(&[0, y, x]), zprime.at(&[3, y, x]));
            }
        }
    }

    #[test]
    fn channel_mix_matches_one_by_one_conv_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        let (c_in, c_out, m) = (3, 2, 2);
        let zprime = rand_tensor(&[c_in * m, 4, 4], &mut rng);
        let alpha = rand_tensor(&[c_in, c_out, m], &mut rng);
        let coeffs = AtomCoefficients::new(alpha.clone()).unwrap();
        let z = channel_mix(&coeffs, &zprime).unwrap();
        // oracle: 1x1 conv with weight[j][i*m+l] = alpha[i,j,l]
        let w = Tensor::from_fn(&[c_out, c_in * m, 1, 1], |ix| {
            let (j, ch) = (ix[0], ix[1]);
            alpha.at(&[ch / m, j, ch % m])
        });
        let oracle = conv2d(&zprime, &w, ConvGeometry::new(1, 0).unwrap()).unwrap();
        assert!(rel_diff(&z, &oracle) <= 1e-6);
    }

    #[test]
    fn forward_zero_input_yields_bias() {
        let mut rng = StdRng::seed_from_u64(9);
        let atoms = FilterAtoms::new(rand_tensor(&[2, 3, 3], &mut rng)).unwrap();
        let coeffs = AtomCoefficients::new(rand_tensor(&[2, 3, 2], &mut rng)).unwrap();
        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let layer = DecomposedConv2d::new(
            atoms,
            coeffs,
            ConvGeometry::new(1, 1).unwrap(),
            Some(bias.clone()),
        )
        .unwrap();
        let x = Tensor::zeros(&[2, 4, 4]);
        let (y, _) = forward(&layer, &x).unwrap();
        for j in 0..3 {
            for p in 0..4 {
                for q in 0..4 {
                    assert_eq!(y.at(&[j, p, q]), bias.data()[j]);
                }
            }
        }
    }

    #[test]
    fn two_stage_equals_composed_path() {
        let mut rng = StdRng::seed_from_u64(10);
        for &k in &[1usize, 3, 5] {
            for &stride in &[1usize, 2] {
                for &padding in &[0usize, 1] {
                    if 8 + 2 * padding < k {
                        continue;
                    }
                    let (c_in, c_out, m) = (3, 4, 2);
                    let atoms = FilterAtoms::new(rand_tensor(&[m, k, k], &mut rng)).unwrap();
                    let coeffs =
                        AtomCoefficients::new(rand_tensor(&[c_in, c_out, m], &mut rng)).unwrap();
                    let layer = DecomposedConv2d::new(
                        atoms,
                        coeffs,
                        ConvGeometry::new(stride, padding).unwrap(),
                        None,
                    )
                    .unwrap();
                    let x = rand_tensor(&[c_in, 8, 8], &mut rng);
                    let (composed, _) = forward(&layer, &x).unwrap();
                    let staged = forward_two_stage(&layer, &x).unwrap();
                    assert!(
                        rel_diff(&staged, &composed) <= 1e-5,
                        "k={k} s={stride} p={padding}"
                    );
                }
            }
        }
    }

    #[test]
    fn backward_atoms_zero_grad_is_zero() {
        let mut rng = StdRng::seed_from_u64(11);
        let atoms = FilterAtoms::new(rand_tensor(&[2, 3, 3], &mut rng)).unwrap();
        let coeffs = AtomCoefficients::new(rand_tensor(&[2, 2, 2], &mut rng)).unwrap();
        let layer =
            DecomposedConv2d::new(atoms, coeffs, ConvGeometry::new(1, 1).unwrap(), None).unwrap();
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let (y, cache) = forward(&layer, &x).unwrap();
        let g = Tensor::zeros(y.shape());
        let gd = backward_atoms(&layer, &g, &cache).unwrap();
        assert!(gd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_atoms_collapses_to_weight_grad_sum() {
        // m = 1 and alpha all ones: grad_D = sum over (i,j) of the conv
        // weight gradient
        let mut rng = StdRng::seed_from_u64(12);
        let atoms = FilterAtoms::new(rand_tensor(&[1, 3, 3], &mut rng)).unwrap();
        let coeffs = AtomCoefficients::new(Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap()).unwrap();
        let geom = ConvGeometry::new(1, 1).unwrap();
        let layer = DecomposedConv2d::new(atoms, coeffs, geom, None).unwrap();
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let (y, cache) = forward(&layer, &x).unwrap();
        let gd = backward_atoms(&layer, &y, &cache).unwrap();
        let gf = conv2d_backward_weight(&x, &y, 3, geom).unwrap();
        for p in 0..3 {
            for q in 0..3 {
                let mut sum = 0.0f64;
                for j in 0..2 {
                    for i in 0..2 {
                        sum += gf.at(&[j, i, p, q]) as f64;
                    }
                }
                assert!((gd.at(&[0, p, q]) as f64 - sum).abs() <= 1e-4 * sum.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_atoms_linear_in_grad() {
        let mut rng = StdRng::seed_from_u64(13);
        let atoms = FilterAtoms::new(rand_tensor(&[3, 3, 3], &mut rng)).unwrap();
        let coeffs = AtomCoefficients::new(rand_tensor(&[2, 3, 3], &mut rng)).unwrap();
        let layer =
            DecomposedConv2d::new(atoms, coeffs, ConvGeometry::new(1, 1).unwrap(), None).unwrap();
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let (y, cache) = forward(&layer, &x).unwrap();
        let g1 = rand_tensor(y.shape(), &mut rng);
        let g2 = rand_tensor(y.shape(), &mut rng);
        let mut gsum = g1.clone();
        gsum.add_assign(&g2).unwrap();
        let d1 = backward_atoms(&layer, &g1, &cache).unwrap();
        let d2 = backward_atoms(&layer, &g2, &cache).unwrap();
        let dsum = backward_atoms(&layer, &gsum, &cache).unwrap();
        for ((a, b), s) in d1.data().iter().zip(d2.data()).zip(dsum.data()) {
            assert!((a + b - s).abs() <= 1e-4 * s.abs().max(1.0));
        }
    }

    #[test]
    fn backward_atoms_rejects_stale_cache() {
        let mut rng = StdRng::seed_from_u64(14);
        let atoms = FilterAtoms::new(rand_tensor(&[2, 3, 3], &mut rng)).unwrap();
        let coeffs = AtomCoefficients::new(rand_tensor(&[2, 2, 2], &mut rng)).unwrap();
        let layer =
            DecomposedConv2d::new(atoms, coeffs, ConvGeometry::new(1, 1).unwrap(), None).unwrap();
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let (_, cache) = forward(&layer, &x).unwrap();
        let bad_grad = Tensor::zeros(&[2, 3, 3]);
        assert!(backward_atoms(&layer, &bad_grad, &cache).is_err());
    }

    #[test]
    fn frozen_coefficients_reject_writes() {
        let mut coeffs = AtomCoefficients::new(Tensor::zeros(&[1, 1, 1])).unwrap();
        assert!(coeffs.alpha_mut().is_ok());
        coeffs.freeze();
        assert!(matches!(coeffs.alpha_mut(), Err(Error::FrozenWrite(_))));
    }

    #[test]
    fn tunable_count_is_m_k_squared() {
        let atoms = FilterAtoms::new(Tensor::zeros(&[9, 3, 3])).unwrap();
        let coeffs = AtomCoefficients::new(Tensor::zeros(&[4, 8, 9])).unwrap();
        let layer =
            DecomposedConv2d::new(atoms, coeffs, ConvGeometry::new(1, 1).unwrap(), None).unwrap();
        assert_eq!(layer.tunable_count(), 81);
    }
}
