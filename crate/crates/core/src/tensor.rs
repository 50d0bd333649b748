//! Dense vectors and matrices, norms, the SignSGD sign convention, and
//! seeded random streams.
//!
//! Storage is generic over [`Element`] (`f32` by default, `f64` for the
//! training-dynamics simulations). Every reduction accumulates in `f64` and
//! runs in index order, so results never depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar storage type for [`Vector`] and [`Matrix`].
pub trait Element: Copy + PartialEq + Default + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
}

fn check_finite<T: Element>(data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.to_f64().is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index].to_f64(),
        }),
        None => Ok(()),
    }
}

/// Dot product of two equal-length slices, accumulated in `f64`.
#[inline]
pub fn dot_f64<T: Element>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x.to_f64() * y.to_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T: Element = f32> {
    data: Vec<T>,
}

impl<T: Element> Vector<T> {
    /// Wraps `data`, rejecting empty or non-finite input.
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidShape("vector must have dim >= 1".into()));
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![T::default(); dim])
    }

    pub fn from_f64_slice(data: &[f64]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                op: "dot",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(dot_f64(&self.data, &other.data))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.to_f64() * c))
                .collect(),
        }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                op: "lin_comb",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| T::from_f64(a * x.to_f64() + b * y.to_f64()))
                .collect(),
        })
    }

    pub fn norm_l2(&self) -> f64 {
        norm_l2(self)
    }

    pub fn norm_l1(&self) -> f64 {
        norm_l1(self)
    }

    pub fn sq_norm(&self) -> f64 {
        dot_f64(&self.data, &self.data)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T: Element = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![T::default(); rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(T::from_f64(f(i, j)));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place optimizer updates. Callers are
    /// responsible for keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.to_f64() * c))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matvec(&self, z: &Vector<T>) -> Result<Vector<T>> {
        matvec(self, z)
    }

    /// `W^T z`.
    pub fn transpose_matvec(&self, z: &Vector<T>) -> Result<Vector<T>> {
        if z.dim() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "transpose_matvec",
                expected: self.rows,
                actual: z.dim(),
            });
        }
        let mut acc = vec![0.0f64; self.cols];
        for (i, &zi) in z.as_slice().iter().enumerate() {
            let zi = zi.to_f64();
            for (a, &w) in acc.iter_mut().zip(self.row(i)) {
                *a += w.to_f64() * zi;
            }
        }
        Ok(Vector {
            data: acc.into_iter().map(T::from_f64).collect(),
        })
    }

    /// Squared norm of `W z` without materializing the product.
    pub fn image_sq_norm(&self, z: &[T]) -> f64 {
        debug_assert_eq!(z.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let v = dot_f64(self.row(i), z);
                v * v
            })
            .sum()
    }

    pub fn frobenius(&self) -> f64 {
        norm_frobenius(self)
    }
}

/// `W z`, accumulated in `f64` and stored back as `T`.
pub fn matvec<T: Element>(w: &Matrix<T>, z: &Vector<T>) -> Result<Vector<T>> {
    if w.cols != z.dim() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            expected: w.cols,
            actual: z.dim(),
        });
    }
    let data = (0..w.rows)
        .map(|i| T::from_f64(dot_f64(w.row(i), z.as_slice())))
        .collect();
    Ok(Vector { data })
}

pub fn norm_l2<T: Element>(z: &Vector<T>) -> f64 {
    z.sq_norm().sqrt()
}

pub fn norm_l1<T: Element>(z: &Vector<T>) -> f64 {
    z.as_slice().iter().map(|v| v.to_f64().abs()).sum()
}

pub fn norm_frobenius<T: Element>(w: &Matrix<T>) -> f64 {
    dot_f64(&w.data, &w.data).sqrt()
}

/// SignSGD sign: `+1` for `x >= 0` (zero included), `-1` otherwise.
pub fn sign(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::NanSign);
    }
    Ok(sign_unchecked(x))
}

#[inline]
pub(crate) fn sign_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Seeded random stream with deterministic, label-addressed substreams.
///
/// Every substream is a ChaCha8 generator keyed by the root seed, an FNV-1a
/// hash of the label and an index, so streams claimed by parallel tasks are
/// fixed by their address and not by the order they are created in.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

const STREAM_DOMAIN: u64 = 0x6e66_6e2d_706c_6f70;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0, 0)
    }

    fn keyed(seed: u64, label_hash: u64, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&label_hash.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        key[24..].copy_from_slice(&STREAM_DOMAIN.to_le_bytes());
        Self {
            seed,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream addressed by `(seed, label)`.
    pub fn substream(&self, label: &str) -> Self {
        Self::keyed(self.seed, fnv1a(label.as_bytes()), u64::MAX)
    }

    /// Independent stream addressed by `(seed, label, index)`.
    pub fn substream_indexed(&self, label: &str, index: u64) -> Self {
        Self::keyed(self.seed, fnv1a(label.as_bytes()), index)
    }

    /// Standard normal draw (ziggurat transform from `rand_distr`).
    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        // 53 random mantissa bits.
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    pub fn coin(&mut self) -> bool {
        self.inner.next_u64() & 1 == 1
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform(0.0, 1.0) * n as f64) as usize % n.max(1)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Vector of `dim` iid standard normal draws.
pub fn gaussian_vector<T: Element>(dim: usize, rng: &mut Rng) -> Result<Vector<T>> {
    if dim == 0 {
        return Err(Error::InvalidShape("gaussian_vector needs dim >= 1".into()));
    }
    Vector::new((0..dim).map(|_| T::from_f64(rng.gaussian())).collect())
}

/// `z * (target / ||z||_2)`.
pub fn rescale_to_norm<T: Element>(z: &Vector<T>, target: f64) -> Result<Vector<T>> {
    if !target.is_finite() || target < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "target norm must be finite and >= 0, got {target}"
        )));
    }
    let norm = z.norm_l2();
    if norm == 0.0 {
        if target == 0.0 {
            return Ok(z.clone());
        }
        return Err(Error::ZeroRescale { target });
    }
    Ok(z.scaled(target / norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, Strategy};

    fn v(data: &[f32]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn matvec_examples() {
        let id = Matrix::<f32>::identity(3).unwrap();
        assert_eq!(
            matvec(&id, &v(&[1.0, 2.0, 3.0])).unwrap(),
            v(&[1.0, 2.0, 3.0])
        );

        let zero = Matrix::<f32>::zeros(2, 3).unwrap();
        assert_eq!(
            matvec(&zero, &v(&[4.0, -1.0, 9.0])).unwrap(),
            v(&[0.0, 0.0])
        );

        let w = Matrix::new(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matvec(&w, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let w = Matrix::<f32>::zeros(2, 3).unwrap();
        let err = matvec(&w, &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                actual: 2,
                ..
            }
        ));
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(Vector::<f32>::new(vec![]).is_err());
        assert!(Vector::new(vec![1.0f32, f32::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0f32; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(norm_l2(&v(&[3.0, 4.0])), 5.0);
        assert_eq!(norm_l1(&v(&[1.0, -1.0, 1.0])), 3.0);
        assert_eq!(norm_frobenius(&Matrix::<f32>::identity(4).unwrap()), 2.0);
        assert_eq!(norm_l2(&Vector::<f32>::zeros(5).unwrap()), 0.0);
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sign(0.0).unwrap(), 1.0);
        assert_eq!(sign(-0.0).unwrap(), 1.0);
        assert_eq!(sign(-0.5).unwrap(), -1.0);
        assert_eq!(sign(3.2).unwrap(), 1.0);
        assert!(matches!(sign(f64::NAN), Err(Error::NanSign)));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(7);
        let g: Vector<f64> = gaussian_vector(100_000, &mut rng).unwrap();
        let n = g.dim() as f64;
        let mean = g.as_slice().iter().sum::<f64>() / n;
        let var = g.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn gaussian_determinism_and_substreams() {
        let a: Vector = gaussian_vector(64, &mut Rng::new(3)).unwrap();
        let b: Vector = gaussian_vector(64, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);

        let root = Rng::new(3);
        let x: Vector = gaussian_vector(64, &mut root.substream("q")).unwrap();
        let y: Vector = gaussian_vector(64, &mut root.substream("k")).unwrap();
        assert_ne!(x, y);
        let z: Vector = gaussian_vector(64, &mut root.substream_indexed("q", 1)).unwrap();
        assert_ne!(x, z);
        assert!(gaussian_vector::<f32>(0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(
            rescale_to_norm(&v(&[3.0, 4.0]), 10.0).unwrap(),
            v(&[6.0, 8.0])
        );
        assert_eq!(
            rescale_to_norm(&v(&[1.0, 0.0, 0.0]), 2.0).unwrap(),
            v(&[2.0, 0.0, 0.0])
        );
        let z = v(&[0.3, -1.7, 2.2]);
        let same = rescale_to_norm(&z, z.norm_l2()).unwrap();
        for (a, b) in same.as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() <= f32::EPSILON * 4.0);
        }
        let zero = Vector::<f32>::zeros(3).unwrap();
        assert!(matches!(
            rescale_to_norm(&zero, 1.0),
            Err(Error::ZeroRescale { .. })
        ));
        assert_eq!(rescale_to_norm(&zero, 0.0).unwrap(), zero);
    }

    fn small_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-10.0f32..10.0, dim)
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            (w, x, y) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
                (small_vec(r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap()),
                 small_vec(c), small_vec(c))
            }),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = Vector::new(x).unwrap();
            let y = Vector::new(y).unwrap();
            let lhs = matvec(&w, &x.lin_comb(a, &y, b).unwrap()).unwrap();
            let rhs = matvec(&w, &x).unwrap().lin_comb(a, &matvec(&w, &y).unwrap(), b).unwrap();
            let scale = rhs.norm_l2().max(1.0);
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!(((l - r) as f64).abs() <= 1e-5 * scale * 10.0);
            }
        }

        #[test]
        fn rescale_hits_target(z in small_vec(16), t in 0.0f64..100.0) {
            let z = Vector::new(z).unwrap();
            prop_assume!(z.norm_l2() > 1e-3);
            let r = rescale_to_norm(&z, t).unwrap();
            prop_assert!((r.norm_l2() - t).abs() <= 1e-6 * t.max(1e-12) + 1e-30);
        }

        #[test]
        fn sign_is_binary(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let s = sign(x).unwrap();
            prop_assert!(s == 1.0 || s == -1.0);
        }

        #[test]
        fn streams_reproducible(seed in any::<u64>(), count in 1usize..64, label in "[a-z_.0-9]{1,12}") {
            let mut a = Rng::new(seed).substream(&label);
            let mut b = Rng::new(seed).substream(&label);
            let xa: Vec<u64> = (0..count).map(|_| a.next_u64()).collect();
            let xb: Vec<u64> = (0..count).map(|_| b.next_u64()).collect();
            prop_assert_eq!(xa, xb);
        }
    }
}
