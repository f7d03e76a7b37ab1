//! Numerical substrate shared by every other module.
//!
//! Stored vectors are `f32`; every reduction (dot products, norms, loss
//! sums) accumulates in `f64`. Randomness comes from [`RngStream`], a
//! ChaCha8 generator addressed by `(seed, stream)` so parallel workers can
//! draw independent, reproducible sequences.

use std::fmt::Debug;

use nalgebra::DMatrix;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Name of the generator behind [`RngStream`]; echoed into run configs.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Floating-point element type of the trainable model.
///
/// Training runs in `f32`; gradient checks instantiate the same code in
/// `f64` so finite differences are meaningful.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// GeLU and its derivative at `self`.
    fn gelu_with_grad(self) -> (Self, Self);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $gelu:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(
                    a.len() as isize >= span(m, k, rsa, csa),
                    "gemm: lhs too short"
                );
                assert!(
                    b.len() as isize >= span(k, n, rsb, csb),
                    "gemm: rhs too short"
                );
                assert!(
                    c.len() as isize >= span(m, n, rsc, csc),
                    "gemm: out too short"
                );
                // SAFETY: the asserts above bound every strided access, and all
                // strides are non-negative by construction at call sites.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn gelu_with_grad(self) -> (Self, Self) {
                $gelu(self)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, gelu_with_grad_f32);
impl_real!(f64, matrixmultiply::dgemm, gelu_with_grad_f64);

fn gelu_with_grad_f64(x: f64) -> (f64, f64) {
    (gelu_scalar(x), gelu_grad_scalar(x))
}

/// Single-precision GeLU for the training path. The erf is the rational
/// approximation of Abramowitz and Stegun 7.1.26 (absolute error 1.5e-7,
/// below f32 resolution), sharing one `exp` with the derivative.
fn gelu_with_grad_f32(x: f32) -> (f32, f32) {
    const P: f32 = 0.327_591_1;
    const A: [f32; 5] = [
        0.254_829_6,
        -0.284_496_74,
        1.421_413_8,
        -1.453_152,
        1.061_405_4,
    ];
    let z = x.abs() * std::f32::consts::FRAC_1_SQRT_2;
    let t = 1.0 / (1.0 + P * z);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    let gauss = (-0.5 * x * x).exp();
    let erf_abs = 1.0 - poly * gauss;
    let cdf = 0.5 * (1.0 + erf_abs.copysign(x));
    let pdf = gauss * (0.5 * std::f32::consts::FRAC_2_SQRT_PI * std::f32::consts::FRAC_1_SQRT_2);
    (x * cdf, cdf + x * pdf)
}

/// A vector with Euclidean norm 1 (within 1e-6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f32>);

impl UnitVector {
    /// Wraps data that is already unit norm. Callers own the invariant.
    pub(crate) fn from_normalized(data: Vec<f32>) -> Self {
        UnitVector(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f32]> for UnitVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// `f64`-accumulated dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f32]) -> Result<UnitVector> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitVector(
        v.iter().map(|&x| (x as f64 / n) as f32).collect(),
    ))
}

pub fn normalize_f64(v: &[f64]) -> Result<UnitVector> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|&x| (x / n) as f32).collect()))
}

pub fn cosine_sim(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

/// Dense row-major matrix used for transforms and rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix with {} elements",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(d: usize) -> Self {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Matrix {
            rows: d,
            cols: d,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn neg(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| -x).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut data = vec![0.0; self.rows * other.cols];
        f64::gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            0.0,
            &mut data,
            other.cols as isize,
            1,
        );
        Matrix::new(self.rows, other.cols, data)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Frobenius inner product `<A, B>_F = tr(AᵀB)`.
    pub fn frobenius_inner(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn determinant(&self) -> f64 {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data).determinant()
    }
}

/// Reproducible random source addressed by `(seed, stream)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Child stream for `(purpose, index)`; distinct inputs give distinct ids.
    pub fn derive(&self, purpose: u64, index: u64) -> RngStream {
        let mixed = splitmix64(splitmix64(self.stream ^ splitmix64(purpose)) ^ index);
        RngStream {
            seed: self.seed,
            stream: mixed,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Haar-random rotation: QR of a Gaussian matrix, diagonal of R made
/// positive, then one column negated if the determinant is -1.
pub fn sample_rotation(d: usize, stream: RngStream) -> Result<Matrix> {
    if d < 2 {
        return Err(Error::Config(format!("rotation needs d >= 2, got {d}")));
    }
    let mut rng = stream.rng();
    let g = DMatrix::from_row_slice(d, d, &gaussian_vec(&mut rng, d * d));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(q[(i, j)]);
        }
    }
    Matrix::new(d, d, data)
}

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact-erf GeLU, `x * Φ(x)`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi(x)
}

/// d/dx of [`gelu_scalar`]: `Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi(x) + x * pdf
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

/// Compares an analytic gradient against central finite differences at
/// `samples` random coordinates and returns the worst relative error
/// `|g - g_fd| / max(1e-8, |g| + |g_fd|)`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    epsilon: f64,
    samples: usize,
    stream: RngStream,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon must lie in [1e-5, 1e-3], got {epsilon}"
        )));
    }
    if params.is_empty() {
        return Ok(0.0);
    }
    if !loss(params).is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut rng = stream.rng();
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = rng.random_range(0..params.len());
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = loss(&theta);
        theta[i] = orig - epsilon;
        let minus = loss(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let fd = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_f32_gelu_tracks_exact() {
        for i in -2000..=2000 {
            let x = i as f64 * 0.005;
            let (v, g) = (x as f32).gelu_with_grad();
            assert!((v as f64 - gelu_scalar(x)).abs() < 2e-6, "{x}");
            assert!((g as f64 - gelu_grad_scalar(x)).abs() < 2e-6, "{x}");
        }
    }

    #[test]
    fn normalize_examples() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-7);
        assert_eq!(
            normalize(&[0.0, 0.0, 1.0]).unwrap().as_slice(),
            &[0.0, 0.0, 1.0]
        );
        assert!(matches!(
            normalize(&[0.0, 0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let e1 = normalize(&[1.0, 0.0]).unwrap();
        let e2 = normalize(&[0.0, 1.0]).unwrap();
        let m1 = normalize(&[-1.0, 0.0]).unwrap();
        assert_eq!(cosine_sim(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_sim(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine_sim(&e1, &m1).unwrap(), -1.0);
        let e3 = normalize(&[0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            cosine_sim(&e1, &e3),
            Err(Error::DimMismatch { .. })
        ));
    }

    fn assert_orthogonal(r: &Matrix, tol: f64) {
        let rtr = r.transpose().matmul(r).unwrap();
        let id = Matrix::identity(r.rows());
        for (a, b) in rtr.data().iter().zip(id.data()) {
            assert!((a - b).abs() < tol, "RᵀR entry {a} vs {b}");
        }
    }

    #[test]
    fn rotation_2d_has_rotation_form() {
        for seed in 0..20 {
            let r = sample_rotation(2, RngStream::new(seed, 0)).unwrap();
            assert_orthogonal(&r, 1e-5);
            let (c, s) = (r.get(0, 0), r.get(1, 0));
            assert!((r.get(0, 1) + s).abs() < 1e-12);
            assert!((r.get(1, 1) - c).abs() < 1e-12);
            assert!((c * c + s * s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_is_special_orthogonal() {
        for seed in 0..5 {
            let r = sample_rotation(16, RngStream::new(seed, 3)).unwrap();
            assert_orthogonal(&r, 1e-5);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
        assert!(sample_rotation(1, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn independent_rotations_are_nearly_frobenius_orthogonal() {
        let d = 64;
        for pair in 0..100u64 {
            let a = sample_rotation(d, RngStream::new(2 * pair, 11)).unwrap();
            let b = sample_rotation(d, RngStream::new(2 * pair + 1, 11)).unwrap();
            let c = a.frobenius_inner(&b).unwrap().abs() / d as f64;
            assert!(c < 0.2, "pair {pair}: {c}");
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let r = sample_rotation(32, RngStream::new(9, 1)).unwrap();
        let mut rng = RngStream::new(10, 0).rng();
        for _ in 0..100 {
            let x = gaussian_vec(&mut rng, 32);
            let rx = r.matvec(&x).unwrap();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nrx = rx.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - nrx).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((gelu_scalar(-1.0) + 0.158_655_254).abs() < 1e-8);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-12);
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn grad_check_on_closed_forms() {
        let params: Vec<f64> = (0..20).map(|i| (i as f64 - 7.5) * 0.3).collect();
        let quad_grad: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let err = grad_check(
            |t| t.iter().map(|x| x * x).sum(),
            &quad_grad,
            &params,
            1e-4,
            20,
            RngStream::new(1, 0),
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic: {err}");

        let c: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let err = grad_check(
            |t| t.iter().zip(&c).map(|(x, c)| x * c).sum(),
            &c,
            &params,
            1e-4,
            20,
            RngStream::new(2, 0),
        )
        .unwrap();
        assert!(err < 1e-6, "linear: {err}");
    }

    #[test]
    fn grad_check_rejects_bad_inputs() {
        let p = [1.0, 2.0];
        assert!(matches!(
            grad_check(|_| f64::NAN, &[0.0, 0.0], &p, 1e-4, 4, RngStream::new(0, 0)),
            Err(Error::NonFiniteLoss)
        ));
        assert!(grad_check(|_| 0.0, &[0.0, 0.0], &p, 1e-1, 4, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        let base = RngStream::new(5, 0);
        let a: u64 = base.derive(1, 0).rng().random();
        let b: u64 = base.derive(1, 1).rng().random();
        let c: u64 = base.derive(2, 0).rng().random();
        let a2: u64 = base.derive(1, 0).rng().random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, a2);
    }
}
