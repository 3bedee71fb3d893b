//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are contiguous `f64` arrays. The engine is deliberately small:
//! only the operations the document model needs exist, and shape mismatches
//! are programming errors that panic with a message rather than surfacing
//! as `Result`s. In debug builds every produced value is checked for
//! NaN/Inf.

mod check;
mod tape;

pub use check::{grad_check, GradCheckReport, ProbeRecord};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// Uniform random values in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (1-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every value to the nearest `f32`, in place. Checkpoints store
    /// a 32-bit payload; quantizing the live tensors first makes
    /// save -> load -> evaluate bit-identical.
    pub fn quantize_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    pub(crate) fn debug_assert_finite(&self, context: &str) {
        debug_assert!(
            self.is_finite(),
            "non-finite value produced by `{context}` (shape {:?})",
            self.shape
        );
    }
}

/// Serial threshold: below this many multiply-accumulates a matmul is not
/// worth parallelizing.
const PAR_FLOP_THRESHOLD: usize = 32_768;

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ka) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2");
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2");
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, m, ka, n, &mut out);
    Tensor::new(vec![m, n], out)
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(|(i, chunk)| row(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            row(i, chunk);
        }
    }
}

/// `a^T c` where `a: [m, k]`, `c: [m, n]` -> `[k, n]`. Used for the
/// right-hand gradient of a matmul.
pub fn matmul_transpose_a(a: &Tensor, c: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (mc, n) = (c.shape[0], c.shape[1]);
    assert_eq!(m, mc, "matmul_transpose_a rows {m} vs {mc}");
    let mut out = vec![0.0; k * n];
    let row = |kk: usize, out_row: &mut [f64]| {
        for i in 0..m {
            let aik = a.data[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let c_row = &c.data[i * n..(i + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += aik * cv;
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(|(kk, chunk)| row(kk, chunk));
    } else {
        for (kk, chunk) in out.chunks_mut(n).enumerate() {
            row(kk, chunk);
        }
    }
    Tensor::new(vec![k, n], out)
}

/// `c b^T` where `c: [m, n]`, `b: [k, n]` -> `[m, k]`. Used for the
/// left-hand gradient of a matmul.
pub fn matmul_transpose_b(c: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (c.shape[0], c.shape[1]);
    let (k, nb) = (b.shape[0], b.shape[1]);
    assert_eq!(n, nb, "matmul_transpose_b cols {n} vs {nb}");
    let mut out = vec![0.0; m * k];
    let row = |i: usize, out_row: &mut [f64]| {
        let c_row = &c.data[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (cv, bv) in c_row.iter().zip(b_row) {
                acc += cv * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(k).enumerate().for_each(|(i, chunk)| row(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(k).enumerate() {
            row(i, chunk);
        }
    }
    Tensor::new(vec![m, k], out)
}

/// Batched matmul: `[B, m, k] x [B, k, n] -> [B, m, n]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 3, "bmm lhs must be rank 3");
    assert_eq!(b.rank(), 3, "bmm rhs must be rank 3");
    let (batches, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let (bb, kb, n) = (b.shape[0], b.shape[1], b.shape[2]);
    assert_eq!(batches, bb, "bmm batch {batches} vs {bb}");
    assert_eq!(k, kb, "bmm inner dims {k} vs {kb}");
    let mut out = vec![0.0; batches * m * n];
    use rayon::prelude::*;
    out.par_chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| {
        let a_slab = &a.data[bi * m * k..(bi + 1) * m * k];
        let b_slab = &b.data[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let a_row = &a_slab[i * k..(i + 1) * k];
            let out_row = &mut chunk[i * n..(i + 1) * n];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b_slab[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    });
    Tensor::new(vec![batches, m, n], out)
}

/// `[B, m, n] -> [B, n, m]`
pub fn transpose_last2(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 3, "transpose_last2 expects rank 3");
    let (b, m, n) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        let src = &x.data[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Tensor::new(vec![b, n, m], out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let cols = *x.shape.last().expect("softmax on rank-0 tensor");
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization (no affine) over the last axis.
pub fn layer_norm_last(x: &Tensor, eps: f64) -> Tensor {
    let cols = *x.shape.last().expect("layer_norm on rank-0 tensor");
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(m, k, n) in &[(2usize, 3usize, 4usize), (1, 1, 1), (7, 5, 9), (64, 48, 32)] {
            let a = Tensor::uniform(vec![m, k], 1.0, &mut rng);
            let b = Tensor::uniform(vec![k, n], 1.0, &mut rng);
            let got = matmul(&a, &b);
            let want = naive_matmul(&a, &b);
            assert_eq!(got.shape(), &[m, n]);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_matmuls_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(vec![6, 4], 1.0, &mut rng);
        let c = Tensor::uniform(vec![6, 5], 1.0, &mut rng);
        // a^T c
        let got = matmul_transpose_a(&a, &c);
        let mut at = Tensor::zeros(vec![4, 6]);
        for i in 0..6 {
            for j in 0..4 {
                at.data_mut()[j * 6 + i] = a.data()[i * 4 + j];
            }
        }
        let want = naive_matmul(&at, &c);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        // c b^T
        let b = Tensor::uniform(vec![3, 5], 1.0, &mut rng);
        let got = matmul_transpose_b(&c, &b);
        let mut bt = Tensor::zeros(vec![5, 3]);
        for i in 0..3 {
            for j in 0..5 {
                bt.data_mut()[j * 3 + i] = b.data()[i * 5 + j];
            }
        }
        let want = naive_matmul(&c, &bt);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(vec![3, 4, 5], 1.0, &mut rng);
        let b = Tensor::uniform(vec![3, 5, 2], 1.0, &mut rng);
        let got = bmm(&a, &b);
        for bi in 0..3 {
            let a2 = Tensor::new(vec![4, 5], a.data()[bi * 20..(bi + 1) * 20].to_vec());
            let b2 = Tensor::new(vec![5, 2], b.data()[bi * 10..(bi + 1) * 10].to_vec());
            let want = naive_matmul(&a2, &b2);
            for (g, w) in got.data()[bi * 8..(bi + 1) * 8].iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let y = softmax_last(&x);
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(vec![8, 13], 10.0, &mut rng);
        let y = softmax_last(&x);
        for row in y.data().chunks(13) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let x = Tensor::new(vec![1, 5], vec![3.0; 5]);
        let y = layer_norm_last(&x, 1e-6);
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(vec![6, 32], 2.0, &mut rng);
        let y = layer_norm_last(&x, 1e-6);
        for row in y.data().chunks(32) {
            let mean: f64 = row.iter().sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn transpose_last2_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(vec![2, 3, 4], 1.0, &mut rng);
        let y = transpose_last2(&transpose_last2(&x));
        assert_eq!(x, y);
    }
}
