//! Boxes, diagonal Gaussians and the closed-form energies between them.
//!
//! All energy math runs in `f64` and works per dimension in log space, so
//! determinants are never formed explicitly.

use crate::error::{Error, Result};

/// Variances below this are clamped inside energy evaluation.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Axis-aligned box: `center ± offset` with strictly positive offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussBox {
    center: Vec<f64>,
    offset: Vec<f64>,
}

impl GaussBox {
    pub fn new(center: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if center.len() != offset.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                actual: offset.len(),
            });
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("box center must be finite".into()));
        }
        if offset.iter().any(|o| !(o.is_finite() && *o > 0.0)) {
            return Err(Error::InvalidArgument(
                "box offsets must be finite and strictly positive".into(),
            ));
        }
        Ok(GaussBox { center, offset })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn lower(&self) -> impl Iterator<Item = f64> + '_ {
        self.center.iter().zip(&self.offset).map(|(c, o)| c - o)
    }

    pub fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        self.center.iter().zip(&self.offset).map(|(c, o)| c + o)
    }

    /// `Σ ln o_i`.
    pub fn log_volume(&self) -> f64 {
        self.offset.iter().map(|o| o.ln()).sum()
    }

    /// Closed intervals intersect on every axis.
    pub fn overlaps(&self, other: &GaussBox) -> bool {
        (0..self.dim()).all(|i| {
            (self.center[i] - other.center[i]).abs() <= self.offset[i] + other.offset[i]
        })
    }

    /// `other` lies entirely inside `self`.
    pub fn contains(&self, other: &GaussBox) -> bool {
        (0..self.dim()).all(|i| {
            self.center[i] - self.offset[i] <= other.center[i] - other.offset[i]
                && other.center[i] + other.offset[i] <= self.center[i] + self.offset[i]
        })
    }

    /// Mean at the center, variance `o_i²`.
    pub fn to_gaussian(&self) -> DiagGaussian {
        DiagGaussian {
            mean: self.center.clone(),
            variance: self.offset.iter().map(|o| o * o).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: variance.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("gaussian mean must be finite".into()));
        }
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "gaussian variances must be finite and strictly positive".into(),
            ));
        }
        Ok(DiagGaussian { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Standard deviations, i.e. the offsets of the 1σ box.
    pub fn std_dev(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// Number of coordinates whose variance sits below [`VARIANCE_FLOOR`].
    pub fn floor_violations(&self) -> usize {
        self.variance.iter().filter(|v| **v < VARIANCE_FLOOR).count()
    }

    pub fn to_box(&self, level: SigmaLevel) -> GaussBox {
        GaussBox {
            center: self.mean.clone(),
            offset: self.variance.iter().map(|v| level.0 * v.sqrt()).collect(),
        }
    }

    /// `½ Σ ln σ_i²`, the log-volume proxy.
    pub fn log_volume(&self) -> f64 {
        0.5 * self.variance.iter().map(|v| floored(*v).ln()).sum::<f64>()
    }
}

/// Confidence level `k` for rendering a Gaussian as a `kσ` box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaLevel(f64);

impl SigmaLevel {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma level must be positive, got {k}"
            )));
        }
        Ok(SigmaLevel(k))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[inline]
pub(crate) fn floored(v: f64) -> f64 {
    v.max(VARIANCE_FLOOR)
}

pub fn box_to_gaussian(b: &GaussBox) -> DiagGaussian {
    b.to_gaussian()
}

pub fn gaussian_to_box(g: &DiagGaussian, level: SigmaLevel) -> GaussBox {
    g.to_box(level)
}

pub fn log_volume(g: &DiagGaussian) -> f64 {
    g.log_volume()
}

fn check_dims(p: &DiagGaussian, q: &DiagGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: q.dim(),
        });
    }
    Ok(())
}

/// Bhattacharyya distance between diagonal Gaussians.
pub fn bhattacharyya_distance(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dims(p, q)?;
    Ok(bhattacharyya_unchecked(p, q))
}

pub(crate) fn bhattacharyya_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for i in 0..p.dim() {
        let v1 = floored(p.variance[i]);
        let v2 = floored(q.variance[i]);
        let vm = 0.5 * (v1 + v2);
        let dm = p.mean[i] - q.mean[i];
        quad += dm * dm / vm;
        logdet += vm.ln() - 0.5 * (v1.ln() + v2.ln());
    }
    0.125 * quad + 0.5 * logdet
}

/// `exp(-D_B)`, in `(0, 1]`.
pub fn bhattacharyya_coefficient(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok((-bhattacharyya_distance(p, q)?).exp())
}

/// `D_KL(p ‖ q)` for diagonal Gaussians.
pub fn kl_divergence(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dims(p, q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let vp = floored(p.variance[i]);
        let vq = floored(q.variance[i]);
        let dm = q.mean[i] - p.mean[i];
        acc += vp / vq + dm * dm / vq - 1.0 + vq.ln() - vp.ln();
    }
    0.5 * acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mean], vec![var]).unwrap()
    }

    /// Independent 1-D oracles: composite Simpson over a wide grid.
    mod oracle {
        fn pdf(x: f64, m: f64, v: f64) -> f64 {
            (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        }

        fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(a + i as f64 * h);
            }
            s * h / 3.0
        }

        fn bounds(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64) {
            let s = v1.max(v2).sqrt();
            (m1.min(m2) - 14.0 * s, m1.max(m2) + 14.0 * s)
        }

        pub fn bhattacharyya_coefficient(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
            let (a, b) = bounds(m1, v1, m2, v2);
            simpson(|x| (pdf(x, m1, v1) * pdf(x, m2, v2)).sqrt(), a, b, 40_000)
        }

        pub fn kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
            let (a, b) = bounds(m1, v1, m2, v2);
            // log-ratio evaluated analytically from the log-densities so tails
            // do not underflow to 0·ln 0
            simpson(
                |x| {
                    let lp = -(x - m1).powi(2) / (2.0 * v1) - 0.5 * v1.ln();
                    let lq = -(x - m2).powi(2) / (2.0 * v2) - 0.5 * v2.ln();
                    pdf(x, m1, v1) * (lp - lq)
                },
                a,
                b,
                40_000,
            )
        }
    }

    #[test]
    fn box_gaussian_conversions() {
        let b = GaussBox::new(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        let g = box_to_gaussian(&b);
        assert_eq!(g.mean(), &[1.0, -2.0]);
        assert_eq!(g.variance(), &[0.25, 9.0]);
        assert_eq!(gaussian_to_box(&g, SigmaLevel::new(1.0).unwrap()), b);

        let g = DiagGaussian::new(vec![0.0, 0.0], vec![1.0, 4.0]).unwrap();
        let b = gaussian_to_box(&g, SigmaLevel::new(2.0).unwrap());
        assert_eq!(b.offset(), &[2.0, 4.0]);
        let b = gaussian_to_box(&g1(0.0, 0.01), SigmaLevel::new(3.0).unwrap());
        assert_relative_eq!(b.offset()[0], 0.3, epsilon = 1e-15);
        assert!(SigmaLevel::new(0.0).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(GaussBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussBox::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(matches!(
            kl_divergence(&g1(0.0, 1.0), &DiagGaussian::new(vec![0.0; 2], vec![1.0; 2]).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bhattacharyya_examples() {
        let p = g1(0.0, 1.0);
        assert_eq!(bhattacharyya_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(bhattacharyya_coefficient(&p, &p).unwrap(), 1.0);

        let q = g1(2.0, 1.0);
        let bc_oracle = oracle::bhattacharyya_coefficient(0.0, 1.0, 2.0, 1.0);
        assert!((-bc_oracle.ln() - 0.5).abs() < 1e-6);
        assert!((bhattacharyya_distance(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        assert!((bhattacharyya_coefficient(&p, &q).unwrap() - 0.606531).abs() < 1e-6);

        let q = g1(0.0, 4.0);
        let bc_oracle = oracle::bhattacharyya_coefficient(0.0, 1.0, 0.0, 4.0);
        assert!((-bc_oracle.ln() - 0.111572).abs() < 1e-6);
        assert!((bhattacharyya_distance(&p, &q).unwrap() - 0.5 * (2.5f64 / 2.0).ln()).abs() < 1e-15);
        let bc = bhattacharyya_coefficient(&p, &q).unwrap();
        assert!((bc - 0.894427).abs() < 1e-6);
        assert!((bc - (2.0 * 1.0 * 2.0 / 5.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = g1(0.0, 1.0);
        let q = g1(1.0, 4.0);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let pq = kl_divergence(&p, &q).unwrap();
        let qp = kl_divergence(&q, &p).unwrap();
        assert!((oracle::kl(0.0, 1.0, 1.0, 4.0) - 0.443147).abs() < 1e-6);
        assert!((oracle::kl(1.0, 4.0, 0.0, 1.0) - 1.306853).abs() < 1e-6);
        assert!((pq - 0.443147).abs() < 1e-6);
        assert!((qp - 1.306853).abs() < 1e-6);
    }

    #[test]
    fn log_volume_examples() {
        assert_eq!(DiagGaussian::new(vec![0.0; 3], vec![1.0; 3]).unwrap().log_volume(), 0.0);
        let e2 = std::f64::consts::E.powi(2);
        assert_relative_eq!(
            DiagGaussian::new(vec![0.0; 2], vec![e2; 2]).unwrap().log_volume(),
            2.0,
            epsilon = 1e-14
        );
        let g = g1(0.0, 0.25);
        assert!((g.log_volume() + std::f64::consts::LN_2).abs() < 1e-6);
        assert_relative_eq!(g.log_volume(), 0.5 * 0.25f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn overlap_and_containment() {
        let big = GaussBox::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let small = GaussBox::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let far = GaussBox::new(vec![5.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(big.contains(&small) && !small.contains(&big));
        assert!(big.overlaps(&small) && small.overlaps(&big));
        assert!(!big.overlaps(&far));
    }

    #[test]
    fn variance_floor_keeps_energies_finite() {
        let p = DiagGaussian { mean: vec![0.0], variance: vec![1e-300] };
        let q = g1(0.0, 1.0);
        assert_eq!(p.floor_violations(), 1);
        assert!(kl_divergence(&p, &q).unwrap().is_finite());
        assert!(bhattacharyya_distance(&p, &q).unwrap().is_finite());
        assert!(p.log_volume().is_finite());
    }

    fn gauss(d: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(0.01f64..25.0, d),
        )
            .prop_map(|(m, v)| DiagGaussian::new(m, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bhattacharyya_symmetric((p, q) in (1usize..8).prop_flat_map(|d| (gauss(d), gauss(d)))) {
            let a = bhattacharyya_distance(&p, &q).unwrap();
            let b = bhattacharyya_distance(&q, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            let bc = bhattacharyya_coefficient(&p, &q).unwrap();
            prop_assert!(bc > 0.0 && bc <= 1.0);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn kl_nonnegative((p, q) in (1usize..8).prop_flat_map(|d| (gauss(d), gauss(d)))) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(bhattacharyya_coefficient(&p, &p).unwrap(), 1.0);
        }

        #[test]
        fn closed_forms_match_integration(m1 in -5.0f64..5.0, v1 in 0.01f64..25.0, m2 in -5.0f64..5.0, v2 in 0.01f64..25.0) {
            let p = g1(m1, v1);
            let q = g1(m2, v2);
            let bc = bhattacharyya_coefficient(&p, &q).unwrap();
            prop_assert!((bc - oracle::bhattacharyya_coefficient(m1, v1, m2, v2)).abs() < 1e-6);
            prop_assert!((kl_divergence(&p, &q).unwrap() - oracle::kl(m1, v1, m2, v2)).abs() < 1e-6);
        }

        #[test]
        fn round_trip_and_log_volume(
            (c, o) in (1usize..16).prop_flat_map(|d| (
                prop::collection::vec(-10.0f64..10.0, d),
                prop::collection::vec(1e-3f64..10.0, d),
            ))
        ) {
            let b = GaussBox::new(c, o).unwrap();
            let g = box_to_gaussian(&b);
            let back = gaussian_to_box(&g, SigmaLevel::new(1.0).unwrap());
            for (x, y) in back.offset().iter().zip(b.offset()) {
                prop_assert!(((x - y) / y).abs() <= 1e-12);
            }
            prop_assert_eq!(back.center(), b.center());
            prop_assert!((g.log_volume() - b.log_volume()).abs() <= 1e-12);
        }
    }
}
