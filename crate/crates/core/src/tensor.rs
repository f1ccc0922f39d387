//! Dense row-major tensors and the convolution/contraction primitives the
//! rest of the crate builds on.
//!
//! Storage is a flat `Vec<f32>` with an explicit shape; no views or strides.
//! Reductions accumulate in f64 to bound drift.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (ax, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            off = off * self.shape[ax] + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Permute axes; `perm[i]` is the source axis of destination axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape.len());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut out = Tensor::zeros(&out_shape);
        let rank = perm.len();
        // strides of the source tensor
        let mut src_strides = vec![1usize; rank];
        for ax in (0..rank.saturating_sub(1)).rev() {
            src_strides[ax] = src_strides[ax + 1] * self.shape[ax + 1];
        }
        let mut idx = vec![0usize; rank];
        for o in 0..out.data.len() {
            let mut src = 0;
            for ax in 0..rank {
                src += idx[ax] * src_strides[perm[ax]];
            }
            out.data[o] = self.data[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        out
    }
}

/// Stride and symmetric zero-padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidGeometry("stride must be positive".into()));
        }
        Ok(ConvGeometry { stride, padding })
    }

    /// Output spatial extent for an input extent and kernel size.
    pub fn out_extent(&self, input: usize, k: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < k {
            return Err(Error::InvalidGeometry(format!(
                "kernel {k} larger than padded input {padded}"
            )));
        }
        let out = (padded - k) / self.stride + 1;
        if out == 0 {
            return Err(Error::InvalidGeometry("non-positive output extent".into()));
        }
        Ok(out)
    }
}

/// `a` is (m, k), `b` is (k, n); result (m, n). f64 accumulation.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

/// Unfold `input` (c_in, h', w') into a (c_in*k*k, oh*ow) patch matrix.
pub fn im2col(input: &Tensor, k: usize, geom: ConvGeometry) -> Result<(Vec<f32>, usize, usize)> {
    let (c_in, h_in, w_in) = (input.shape[0], input.shape[1], input.shape[2]);
    let oh = geom.out_extent(h_in, k)?;
    let ow = geom.out_extent(w_in, k)?;
    let rows = c_in * k * k;
    let cols = oh * ow;
    let mut out = vec![0.0f32; rows * cols];
    let pad = geom.padding as isize;
    for ci in 0..c_in {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let base = row * cols;
                for oy in 0..oh {
                    let iy = (oy * geom.stride) as isize + kr as isize - pad;
                    if iy < 0 || iy >= h_in as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride) as isize + kc as isize - pad;
                        if ix < 0 || ix >= w_in as isize {
                            continue;
                        }
                        out[base + oy * ow + ox] =
                            input.data[(ci * h_in + iy as usize) * w_in + ix as usize];
                    }
                }
            }
        }
    }
    Ok((out, oh, ow))
}

/// Fold a patch-matrix gradient back onto the input, accumulating overlaps.
fn col2im(
    cols: &[f32],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    k: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
) -> Tensor {
    let mut grad = Tensor::zeros(&[c_in, h_in, w_in]);
    let pad = geom.padding as isize;
    let ncols = oh * ow;
    for ci in 0..c_in {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let base = row * ncols;
                for oy in 0..oh {
                    let iy = (oy * geom.stride) as isize + kr as isize - pad;
                    if iy < 0 || iy >= h_in as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride) as isize + kc as isize - pad;
                        if ix < 0 || ix >= w_in as isize {
                            continue;
                        }
                        grad.data[(ci * h_in + iy as usize) * w_in + ix as usize] +=
                            cols[base + oy * ow + ox];
                    }
                }
            }
        }
    }
    grad
}

/// 2-D cross-correlation of `input` (c_in, h', w') with `weight`
/// (c_out, c_in, k, k), via im2col + matmul.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    if input.rank() != 3 || weight.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects input rank 3 and weight rank 4, got {:?} and {:?}",
            input.shape, weight.shape
        )));
    }
    let (c_out, c_in, k, k2) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if k != k2 {
        return Err(Error::ShapeMismatch("non-square kernel".into()));
    }
    if input.shape[0] != c_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, weight expects {}",
            input.shape[0], c_in
        )));
    }
    let (cols, oh, ow) = im2col(input, k, geom)?;
    let out = matmul(&weight.data, &cols, c_out, c_in * k * k, oh * ow);
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradient of a conv2d output with respect to the weight:
/// grad_w[o,i,p,q] = sum over output positions of grad_out * input patch.
pub fn conv2d_backward_weight(
    input: &Tensor,
    grad_out: &Tensor,
    k: usize,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let c_in = input.shape[0];
    let c_out = grad_out.shape[0];
    let (cols, oh, ow) = im2col(input, k, geom)?;
    if grad_out.shape[1] != oh || grad_out.shape[2] != ow {
        return Err(Error::ShapeMismatch("stale gradient shape".into()));
    }
    // grad_w = grad_out_mat (c_out, L) * cols^T (L, c_in*k*k)
    let l = oh * ow;
    let rows = c_in * k * k;
    let mut cols_t = vec![0.0f32; l * rows];
    for r in 0..rows {
        for c in 0..l {
            cols_t[c * rows + r] = cols[r * l + c];
        }
    }
    let gw = matmul(&grad_out.data, &cols_t, c_out, l, rows);
    Tensor::new(vec![c_out, c_in, k, k], gw)
}

/// Gradient of a conv2d output with respect to the input.
pub fn conv2d_backward_input(
    weight: &Tensor,
    grad_out: &Tensor,
    in_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Tensor> {
    let (c_out, c_in, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    let (oh, ow) = (grad_out.shape[1], grad_out.shape[2]);
    let l = oh * ow;
    let rows = c_in * k * k;
    // cols_grad = W^T (rows, c_out) * grad_out_mat (c_out, L)
    let mut wt = vec![0.0f32; rows * c_out];
    for o in 0..c_out {
        for r in 0..rows {
            wt[r * c_out + o] = weight.data[o * rows + r];
        }
    }
    let cols_grad = matmul(&wt, &grad_out.data, rows, c_out, l);
    Ok(col2im(
        &cols_grad,
        c_in,
        in_shape[1],
        in_shape[2],
        k,
        geom,
        oh,
        ow,
    ))
}

/// Generalized mode contraction: sums products over the paired axes
/// `axes_a` of `a` and `axes_b` of `b`; result shape is the free axes of
/// `a` followed by the free axes of `b`.
pub fn contract(a: &Tensor, b: &Tensor, axes_a: &[usize], axes_b: &[usize]) -> Result<Tensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::ShapeMismatch("axes spec length mismatch".into()));
    }
    for (&aa, &ab) in axes_a.iter().zip(axes_b) {
        if aa >= a.rank() || ab >= b.rank() {
            return Err(Error::ShapeMismatch("contraction axis out of range".into()));
        }
        if a.shape[aa] != b.shape[ab] {
            return Err(Error::ShapeMismatch(format!(
                "contracted extents disagree: {} vs {}",
                a.shape[aa], b.shape[ab]
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|ax| !axes_a.contains(ax)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|ax| !axes_b.contains(ax)).collect();
    // move contracted axes of a last, contracted axes of b first
    let perm_a: Vec<usize> = free_a.iter().chain(axes_a.iter()).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(free_b.iter()).copied().collect();
    let pa = a.permute(&perm_a);
    let pb = b.permute(&perm_b);
    let m: usize = free_a.iter().map(|&ax| a.shape[ax]).product();
    let kk: usize = axes_a.iter().map(|&ax| a.shape[ax]).product();
    let n: usize = free_b.iter().map(|&ax| b.shape[ax]).product();
    let out = matmul(pa.data(), pb.data(), m, kk, n);
    let mut out_shape: Vec<usize> = free_a.iter().map(|&ax| a.shape[ax]).collect();
    out_shape.extend(free_b.iter().map(|&ax| b.shape[ax]));
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Tensor::new(out_shape, out)
}

/// Kronecker product of two rank-2 tensors: block (i,j) equals a[i,j]*b.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch("kron expects rank-2 operands".into()));
    }
    let (p, q) = (a.shape[0], a.shape[1]);
    let (r, s) = (b.shape[0], b.shape[1]);
    let mut out = Tensor::zeros(&[p * r, q * s]);
    for i in 0..p {
        for j in 0..q {
            let aij = a.data[i * q + j];
            for u in 0..r {
                for v in 0..s {
                    out.data[(i * r + u) * (q * s) + j * s + v] = aij * b.data[u * s + v];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Six-nested-loop reference convolution.
    fn conv2d_loops(input: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Tensor {
        let (c_in, h_in, w_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
        let oh = geom.out_extent(h_in, k).unwrap();
        let ow = geom.out_extent(w_in, k).unwrap();
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for i in 0..c_in {
                        for kr in 0..k {
                            for kc in 0..k {
                                let iy = (oy * geom.stride + kr) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kc) as isize - geom.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h_in as isize || ix >= w_in as isize {
                                    continue;
                                }
                                acc += input.at(&[i, iy as usize, ix as usize]) as f64
                                    * weight.at(&[o, i, kr, kc]) as f64;
                            }
                        }
                    }
                    out.set(&[o, oy, ox], acc as f32);
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, ConvGeometry::new(1, 0).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_channel_sum() {
        let x = Tensor::new(vec![2, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]).unwrap();
        let w = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, ConvGeometry::new(1, 0).unwrap()).unwrap();
        assert_eq!(y.data(), &[11., 22., 33., 44.]);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_tensor(&[3, 8, 8], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let geom = ConvGeometry::new(1, 1).unwrap();
        let fast = conv2d(&x, &w, geom).unwrap();
        let slow = conv2d_loops(&x, &w, geom);
        assert!(max_abs_diff(&fast, &slow) <= 1e-6);
    }

    #[test]
    fn conv2d_loop_oracle_various_geometries() {
        let mut rng = StdRng::seed_from_u64(11);
        for &k in &[1usize, 3, 5] {
            for &stride in &[1usize, 2] {
                for &padding in &[0usize, 1] {
                    if 6 + 2 * padding < k {
                        continue;
                    }
                    let x = rand_tensor(&[2, 6, 7], &mut rng);
                    let w = rand_tensor(&[3, 2, k, k], &mut rng);
                    let geom = ConvGeometry::new(stride, padding).unwrap();
                    let fast = conv2d(&x, &w, geom).unwrap();
                    let slow = conv2d_loops(&x, &w, geom);
                    assert!(max_abs_diff(&fast, &slow) <= 1e-6, "k={k} s={stride} p={padding}");
                }
            }
        }
    }

    #[test]
    fn conv2d_linear_in_weight() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let w1 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let w2 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let mut wsum = w1.clone();
        wsum.add_assign(&w2).unwrap();
        let geom = ConvGeometry::new(1, 1).unwrap();
        let lhs = conv2d(&x, &wsum, geom).unwrap();
        let mut rhs = conv2d(&x, &w1, geom).unwrap();
        rhs.add_assign(&conv2d(&x, &w2, geom).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv2d_delta_kernel_reproduces_input() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        let k = 3;
        let mut w = Tensor::zeros(&[1, 1, k, k]);
        w.set(&[0, 0, 1, 1], 1.0); // centered delta
        let y = conv2d(&x, &w, ConvGeometry::new(1, (k - 1) / 2).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 1).unwrap()).is_err());
    }

    #[test]
    fn conv2d_rejects_nonpositive_output() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 0).unwrap()).is_err());
    }

    #[test]
    fn backward_weight_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let mut w = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let geom = ConvGeometry::new(1, 1).unwrap();
        // L = sum(y^2)/2 so grad_out = y
        let y = conv2d(&x, &w, geom).unwrap();
        let gw = conv2d_backward_weight(&x, &y, 3, geom).unwrap();
        let h = 1e-3f32;
        for p in 0..w.len() {
            let orig = w.data()[p];
            w.data_mut()[p] = orig + h;
            let lp: f64 = conv2d(&x, &w, geom)
                .unwrap()
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum();
            w.data_mut()[p] = orig - h;
            let lm: f64 = conv2d(&x, &w, geom)
                .unwrap()
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum();
            w.data_mut()[p] = orig;
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            let g = gw.data()[p];
            assert!((fd - g).abs() <= 1e-2 * g.abs().max(1.0), "fd {fd} vs {g}");
        }
    }

    #[test]
    fn backward_input_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut x = rand_tensor(&[2, 5, 5], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let geom = ConvGeometry::new(2, 1).unwrap();
        let y = conv2d(&x, &w, geom).unwrap();
        let gx = conv2d_backward_input(&w, &y, &[2, 5, 5], geom).unwrap();
        let h = 1e-3f32;
        for p in 0..x.len() {
            let orig = x.data()[p];
            x.data_mut()[p] = orig + h;
            let lp: f64 = conv2d(&x, &w, geom)
                .unwrap()
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum();
            x.data_mut()[p] = orig - h;
            let lm: f64 = conv2d(&x, &w, geom)
                .unwrap()
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum();
            x.data_mut()[p] = orig;
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            let g = gx.data()[p];
            assert!((fd - g).abs() <= 1e-2 * g.abs().max(1.0));
        }
    }

    #[test]
    fn contract_scalar_scale() {
        let a = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let c = contract(&a, &b, &[2], &[0]).unwrap();
        assert_eq!(c.shape(), &[1, 1, 3, 3]);
        assert!(c.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn contract_identity_slab_returns_reshaped_b() {
        // a: (m, m) identity contracted over last axis with b: (m, d)
        let m = 4;
        let a = Tensor::from_fn(&[m, m], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        let mut rng = StdRng::seed_from_u64(2);
        let b = rand_tensor(&[m, 5], &mut rng);
        let c = contract(&a, &b, &[1], &[0]).unwrap();
        assert_eq!(c.shape(), b.shape());
        assert!(max_abs_diff(&c, &b) <= 1e-6);
    }

    #[test]
    fn contract_matches_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[4, 5, 5], &mut rng);
        let c = contract(&a, &b, &[2], &[0]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5, 5]);
        for i in 0..2 {
            for j in 0..3 {
                for u in 0..5 {
                    for v in 0..5 {
                        let mut acc = 0.0f64;
                        for l in 0..4 {
                            acc += a.at(&[i, j, l]) as f64 * b.at(&[l, u, v]) as f64;
                        }
                        assert!((c.at(&[i, j, u, v]) - acc as f32).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn contract_random_small_extents_match_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let p = rng.gen_range(1..=6);
            let q = rng.gen_range(1..=6);
            let r = rng.gen_range(1..=6);
            let s = rng.gen_range(1..=6);
            let a = rand_tensor(&[p, q], &mut rng);
            let b = rand_tensor(&[q, r, s], &mut rng);
            let c = contract(&a, &b, &[1], &[0]).unwrap();
            for i in 0..p {
                for u in 0..r {
                    for v in 0..s {
                        let mut acc = 0.0f64;
                        for l in 0..q {
                            acc += a.at(&[i, l]) as f64 * b.at(&[l, u, v]) as f64;
                        }
                        assert!((c.at(&[i, u, v]) - acc as f32).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn contract_rejects_axis_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(contract(&a, &b, &[1], &[0]).is_err());
    }

    #[test]
    fn kron_identity_is_block_diagonal() {
        let i2 = Tensor::from_fn(&[2, 2], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        let b = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = kron(&i2, &b).unwrap();
        assert_eq!(
            k.data(),
            &[1., 2., 0., 0., 3., 4., 0., 0., 0., 0., 1., 2., 0., 0., 3., 4.]
        );
    }

    #[test]
    fn kron_scalar_scales() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = kron(&a, &b).unwrap();
        assert_eq!(k.data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn kron_definition_expansion() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap();
        let k = kron(&a, &b).unwrap();
        assert_eq!(
            k.data(),
            &[0., 1., 0., 2., 1., 0., 2., 0., 0., 3., 0., 4., 3., 0., 4., 0.]
        );
    }

    #[test]
    fn kron_rejects_higher_rank() {
        let a = Tensor::zeros(&[2, 2, 2]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(kron(&a, &b).is_err());
    }

    #[test]
    fn kron_rearranged_has_vanishing_minors() {
        // rearrange(kron(a,b)) is the rank-1 outer product vec(a) vec(b)^T,
        // so all 2x2 minors must vanish.
        let mut rng = StdRng::seed_from_u64(41);
        let a = rand_tensor(&[3, 2], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        let k = kron(&a, &b).unwrap();
        // rearranged[p*q_extent+q][u*s+v] = k[(p*r+u)][(q*s+v)]
        let (p_e, q_e, r_e, s_e) = (3, 2, 2, 3);
        let mut re = Tensor::zeros(&[p_e * q_e, r_e * s_e]);
        for p in 0..p_e {
            for q in 0..q_e {
                for u in 0..r_e {
                    for v in 0..s_e {
                        re.set(
                            &[p * q_e + q, u * s_e + v],
                            k.at(&[p * r_e + u, q * s_e + v]),
                        );
                    }
                }
            }
        }
        let (rows, cols) = (p_e * q_e, r_e * s_e);
        for r1 in 0..rows {
            for r2 in (r1 + 1)..rows {
                for c1 in 0..cols {
                    for c2 in (c1 + 1)..cols {
                        let minor = re.at(&[r1, c1]) * re.at(&[r2, c2])
                            - re.at(&[r1, c2]) * re.at(&[r2, c1]);
                        assert!(minor.abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = StdRng::seed_from_u64(43);
        let t = rand_tensor(&[2, 3, 4], &mut rng);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }
}
