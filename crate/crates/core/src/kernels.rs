//! Kernel functions, dense Gram assembly and bandwidth selection.
//!
//! The Gaussian kernel is parameterized as `exp(-|w - w'|^2 / (2 l^2))`.
//! Squared distances are always accumulated coordinate-wise from differences
//! so that `k(w, w') == k(w', w)` holds bit-for-bit and Gram matrices over a
//! single point set are exactly symmetric.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Only meaningful for the Gaussian family.
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn gaussian(lengthscale: f64) -> Result<Self> {
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(Error::config(format!(
                "gaussian lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Gaussian,
            lengthscale,
        })
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            lengthscale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            KernelFamily::Gaussian => Self::gaussian(self.lengthscale).map(|_| ()),
            KernelFamily::Linear => Ok(()),
        }
    }

    /// Kernel value on two equal-length slices without input checks.
    #[inline]
    pub fn eval_unchecked(&self, w: &[f64], w2: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => gaussian_from_sqdist(sqdist(w, w2), self.lengthscale),
            KernelFamily::Linear => w.iter().zip(w2).map(|(a, b)| a * b).sum(),
        }
    }

    /// Scalar specialization used for one-dimensional outcomes.
    #[inline]
    pub fn eval_scalar(&self, y: f64, y2: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => gaussian_from_sqdist((y - y2) * (y - y2), self.lengthscale),
            KernelFamily::Linear => y * y2,
        }
    }

    /// `k(w, w)` without evaluating the kernel on a pair.
    #[inline]
    pub fn diag_scalar(&self, y: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 1.0,
            KernelFamily::Linear => y * y,
        }
    }
}

#[inline]
pub(crate) fn sqdist(w: &[f64], w2: &[f64]) -> f64 {
    w.iter()
        .zip(w2)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Clears the upper vector-register halves left dirty by the wide SIMD code
/// in the dense solvers. Without it the scalar kernel loops that follow run
/// an order of magnitude slower on some x86 cores.
#[inline]
pub(crate) fn settle_simd_state() {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was checked at runtime.
        unsafe { std::arch::x86_64::_mm256_zeroupper() }
    }
}

#[inline]
pub(crate) fn gaussian_from_sqdist(d2: f64, lengthscale: f64) -> f64 {
    (-d2 / (2.0 * lengthscale * lengthscale)).exp()
}

/// Checked kernel evaluation.
pub fn eval_kernel(spec: &KernelSpec, w: &[f64], w2: &[f64]) -> Result<f64> {
    if w.len() != w2.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: w2.len(),
        });
    }
    if w.iter().chain(w2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input"));
    }
    spec.validate()?;
    Ok(spec.eval_unchecked(w, w2))
}

/// A set of points stored row-major, `len() x dim()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    data: Vec<f64>,
    dim: usize,
}

impl PointSet {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("point dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    /// One-dimensional points.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            dim: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            dim: self.dim,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("point set"))
        }
    }
}

/// Dense kernel matrix. `symmetric` records that rows and columns index the
/// same point set.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: Mat<f64>,
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

pub fn gram(spec: &KernelSpec, w1: &PointSet, w2: &PointSet) -> Result<GramMatrix> {
    check_pair(w1, w2)?;
    spec.validate()?;
    Ok(GramMatrix {
        values: gram_unchecked(spec, w1, w2),
        symmetric: w1 == w2,
    })
}

/// Symmetric Gram matrix over one set, filling the lower triangle and mirroring.
pub fn gram_self(spec: &KernelSpec, w: &PointSet) -> Result<GramMatrix> {
    if w.is_empty() {
        return Err(Error::config("empty point set"));
    }
    w.check_finite()?;
    spec.validate()?;
    let n = w.len();
    let mut m = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        let wi = w.row(i);
        for j in 0..=i {
            let v = spec.eval_unchecked(wi, w.row(j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        values: m,
        symmetric: true,
    })
}

pub(crate) fn gram_unchecked(spec: &KernelSpec, w1: &PointSet, w2: &PointSet) -> Mat<f64> {
    Mat::from_fn(w1.len(), w2.len(), |i, j| {
        spec.eval_unchecked(w1.row(i), w2.row(j))
    })
}

fn check_pair(w1: &PointSet, w2: &PointSet) -> Result<()> {
    if w1.is_empty() || w2.is_empty() {
        return Err(Error::config("empty point set"));
    }
    if w1.dim() != w2.dim() {
        return Err(Error::DimensionMismatch {
            expected: w1.dim(),
            found: w2.dim(),
        });
    }
    w1.check_finite()?;
    w2.check_finite()
}

/// Hadamard product of the action and covariate Grams:
/// entry `(i, j) = kA(a1_i, a2_j) * kX(x1_i, x2_j)`.
pub fn product_gram(
    ka: &KernelSpec,
    kx: &KernelSpec,
    a1: &PointSet,
    x1: &PointSet,
    a2: &PointSet,
    x2: &PointSet,
) -> Result<GramMatrix> {
    if a1.len() != x1.len() {
        return Err(Error::DimensionMismatch {
            expected: a1.len(),
            found: x1.len(),
        });
    }
    if a2.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: a2.len(),
            found: x2.len(),
        });
    }
    let ga = gram(ka, a1, a2)?;
    let gx = gram(kx, x1, x2)?;
    let values = Mat::from_fn(a1.len(), a2.len(), |i, j| {
        ga.values[(i, j)] * gx.values[(i, j)]
    });
    Ok(GramMatrix {
        values,
        symmetric: ga.symmetric && gx.symmetric,
    })
}

/// Median of the pairwise Euclidean distances over `i < j`.
///
/// With an even number of pairs the two central order statistics are averaged.
pub fn median_heuristic(points: &PointSet) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegeneratePointSet(
            "median heuristic needs at least two points".into(),
        ));
    }
    points.check_finite()?;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let pi = points.row(i);
        for j in i + 1..n {
            dists.push(sqdist(pi, points.row(j)).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if med > 0.0 && med.is_finite() {
        Ok(med)
    } else {
        Err(Error::DegeneratePointSet(
            "median pairwise distance is zero".into(),
        ))
    }
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let len = v.len();
    let mid = len / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_points(n: usize, d: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        PointSet::new(data, d).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(eval_kernel(&g, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let lin = KernelSpec::linear();
        assert_eq!(eval_kernel(&lin, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        // exp(-4 / 2)
        assert_relative_eq!(
            eval_kernel(&g, &[0.0], &[2.0]).unwrap(),
            0.1353352832366127,
            epsilon = 1e-15
        );
    }

    #[test]
    fn kernel_errors() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert!(matches!(
            eval_kernel(&g, &[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            eval_kernel(&g, &[f64::NAN], &[0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
    }

    #[test]
    fn gram_single_point() {
        let g = KernelSpec::gaussian(0.7).unwrap();
        let p = PointSet::from_rows(&[[1.0, 2.0]]).unwrap();
        let m = gram(&g, &p, &p).unwrap();
        assert_eq!(m.values[(0, 0)], 1.0);
        assert!(m.symmetric);
    }

    #[test]
    fn gram_transpose_symmetry() {
        let g = KernelSpec::gaussian(1.3).unwrap();
        let a = random_points(4, 3, 1);
        let b = random_points(6, 3, 2);
        let ab = gram(&g, &a, &b).unwrap();
        let ba = gram(&g, &b, &a).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(ab.values[(i, j)], ba.values[(j, i)]);
            }
        }
    }

    #[test]
    fn gram_psd_on_random_points() {
        let g = KernelSpec::gaussian(0.8).unwrap();
        let p = random_points(5, 2, 3);
        let m = gram(&g, &p, &p).unwrap();
        let eig = m
            .values
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .unwrap();
        assert!(eig.iter().all(|&e| e >= -1e-10), "{eig:?}");
        let s = gram_self(&g, &p).unwrap();
        assert_eq!(s.values, m.values);
    }

    #[test]
    fn product_gram_examples() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        let a = PointSet::from_scalars(&[0.5, 0.5, 0.5]);
        let x = PointSet::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let m = product_gram(&g, &g, &a, &x, &a, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.values[(i, j)], 1.0);
            }
        }

        let a = random_points(4, 1, 9);
        let x = random_points(4, 3, 10);
        let kx = KernelSpec::gaussian(2.0).unwrap();
        let m = product_gram(&g, &kx, &a, &x, &a, &x).unwrap();
        let ga = gram(&g, &a, &a).unwrap();
        let gx = gram(&kx, &x, &x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.values[(i, j)], ga.values[(i, j)] * gx.values[(i, j)]);
            }
        }

        // orthogonal actions under the linear kernel zero out the product
        let a1 = PointSet::from_rows(&[[1.0, 0.0]]).unwrap();
        let a2 = PointSet::from_rows(&[[0.0, 1.0]]).unwrap();
        let x1 = PointSet::from_scalars(&[0.0]);
        let m = product_gram(&KernelSpec::linear(), &g, &a1, &x1, &a2, &x1).unwrap();
        assert_eq!(m.values[(0, 0)], 0.0);

        assert!(product_gram(&g, &g, &a1, &random_points(2, 1, 0), &a2, &x1).is_err());
    }

    #[test]
    fn median_heuristic_examples() {
        assert_eq!(median_heuristic(&PointSet::from_scalars(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(
            median_heuristic(&PointSet::from_scalars(&[0.0, 1.0, 3.0])).unwrap(),
            2.0
        );
        assert!(matches!(
            median_heuristic(&PointSet::from_scalars(&[2.0, 2.0, 2.0])),
            Err(Error::DegeneratePointSet(_))
        ));
        assert!(median_heuristic(&PointSet::from_scalars(&[2.0])).is_err());
    }

    #[test]
    fn median_heuristic_matches_sorted_oracle() {
        let p = random_points(100, 5, 11);
        let mut all = Vec::new();
        for i in 0..100 {
            for j in i + 1..100 {
                let d: f64 = p
                    .row(i)
                    .iter()
                    .zip(p.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                all.push(d);
            }
        }
        assert_eq!(all.len(), 4950);
        all.sort_by(f64::total_cmp);
        let oracle = 0.5 * (all[2474] + all[2475]);
        assert_eq!(median_heuristic(&p).unwrap(), oracle);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gaussian_is_exchangeable_and_bounded(
                w in proptest::collection::vec(-50.0f64..50.0, 3),
                v in proptest::collection::vec(-50.0f64..50.0, 3),
                ls in 0.05f64..10.0,
            ) {
                let g = KernelSpec::gaussian(ls).unwrap();
                let a = eval_kernel(&g, &w, &v).unwrap();
                let b = eval_kernel(&g, &v, &w).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a <= 1.0 && a >= 0.0);
            }

            #[test]
            fn self_gram_is_symmetric_psd(seed in 0u64..500, n in 2usize..12, ls in 0.2f64..3.0) {
                let p = random_points(n, 2, seed);
                let g = KernelSpec::gaussian(ls).unwrap();
                let m = gram(&g, &p, &p).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(m.values[(i, j)], m.values[(j, i)]);
                    }
                }
                let eig = m.values.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
                prop_assert!(eig.iter().all(|&e| e >= -1e-8));
            }
        }
    }
}
