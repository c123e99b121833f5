//! Fundamental-matrix estimation from noisy correspondences: normalized
//! 8-point, RANSAC with Sampson inliers, and the pseudo-geometry reliability gate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{FundamentalMatrix, GeometryError};
use crate::linalg::{mat3_mul, mat3_transpose, mat3_vec, project_rank2, right_svd, Mat3};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustError {
    #[error("need at least 8 correspondences, got {0}")]
    InsufficientPoints(usize),
    #[error("degenerate point configuration (condition number {0:.3e})")]
    DegenerateConfiguration(f64),
    #[error("both points sit at epipoles; Sampson error undefined")]
    ZeroDenominator,
    #[error("every minimal sample was degenerate")]
    NoModelFound,
    #[error("inlier count {inliers} exceeds match count {matches}")]
    InvalidCounts { matches: usize, inliers: usize },
    #[error("non-finite correspondence at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel correspondences `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondences<T> {
    pub pairs: Vec<[T; 4]>,
}

impl<T: Scalar> Correspondences<T> {
    pub fn new(pairs: Vec<[T; 4]>) -> Result<Self, RobustError> {
        if let Some(i) = pairs.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(RobustError::NonFinite(i));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustEstimate<T> {
    pub f: FundamentalMatrix<T>,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub reliable: bool,
}

/// Similarity taking points to zero mean and RMS distance √2.
fn hartley_transform<T: Scalar>(pts: impl Iterator<Item = [T; 2]> + Clone) -> Mat3<T> {
    let n = T::from_usize_lossy(pts.clone().count());
    let (sx, sy) = pts.clone().fold((T::zero(), T::zero()), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let ms = pts.map(|p| (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy)).sum::<T>() / n;
    let rms = ms.sqrt();
    let k = if rms > T::zero() { T::lit(2.0).sqrt() / rms } else { T::one() };
    let z = T::zero();
    [[k, z, -k * cx], [z, k, -k * cy], [z, z, T::one()]]
}

fn apply<T: Scalar>(t: &Mat3<T>, p: [T; 2]) -> [T; 2] {
    let v = mat3_vec(t, &[p[0], p[1], T::one()]);
    [v[0] / v[2], v[1] / v[2]]
}

/// Linear estimate from all given correspondences (Hartley normalization,
/// SVD null vector, rank-2 projection, denormalization).
pub fn normalized_eight_point<T: Scalar>(c: &Correspondences<T>) -> Result<FundamentalMatrix<T>, RobustError> {
    eight_point_subset(&c.pairs, None)
}

fn eight_point_subset<T: Scalar>(pairs: &[[T; 4]], subset: Option<&[usize]>) -> Result<FundamentalMatrix<T>, RobustError> {
    let idx: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..pairs.len()).collect(),
    };
    let n = idx.len();
    if n < 8 {
        return Err(RobustError::InsufficientPoints(n));
    }
    let t1 = hartley_transform(idx.iter().map(|&i| [pairs[i][0], pairs[i][1]]));
    let t2 = hartley_transform(idx.iter().map(|&i| [pairs[i][2], pairs[i][3]]));
    let mut design = Vec::with_capacity(n * 9);
    for &i in &idx {
        let p = pairs[i];
        let [x, y] = apply(&t1, [p[0], p[1]]);
        let [u, v] = apply(&t2, [p[2], p[3]]);
        design.extend_from_slice(&[u * x, u * y, u, v * x, v * y, v, x, y, T::one()]);
    }
    let svd = right_svd(n, 9, &design);
    let sv = &svd.singular_values;
    let cond = sv[0].as_f64() / sv[7].as_f64();
    if !(cond <= 1e12) {
        return Err(RobustError::DegenerateConfiguration(cond));
    }
    let f = &svd.vectors[8];
    let fn_: Mat3<T> = [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]];
    let fr = project_rank2(&fn_);
    let denorm = mat3_mul(&mat3_mul(&mat3_transpose(&t2), &fr), &t1);
    Ok(FundamentalMatrix::from_projected(denorm)?)
}

/// First-order geometric residual `(x̄ᵀFx)² / (|Fx|²₁₂ + |Fᵀx̄|²₁₂)` in px².
pub fn sampson_error<T: Scalar>(f: &FundamentalMatrix<T>, pair: &[T; 4]) -> Result<T, RobustError> {
    let m = f.matrix();
    let x = [pair[0], pair[1], T::one()];
    let xb = [pair[2], pair[3], T::one()];
    let fx = mat3_vec(m, &x);
    let ftx = mat3_vec(&mat3_transpose(m), &xb);
    let num = xb[0] * fx[0] + xb[1] * fx[1] + fx[2];
    let den = fx[0] * fx[0] + fx[1] * fx[1] + ftx[0] * ftx[0] + ftx[1] * ftx[1];
    if den <= T::zero() {
        return Err(RobustError::ZeroDenominator);
    }
    Ok(num * num / den)
}

/// Reliable iff more than 20 matches and more than 20% of them inliers.
pub fn reliability_gate(n_matches: usize, n_inliers: usize) -> Result<bool, RobustError> {
    if n_inliers > n_matches {
        return Err(RobustError::InvalidCounts { matches: n_matches, inliers: n_inliers });
    }
    Ok(n_matches > 20 && 5 * n_inliers > n_matches)
}

struct Score<T> {
    mask: Vec<bool>,
    count: usize,
    mean: T,
}

fn score<T: Scalar>(f: &FundamentalMatrix<T>, pairs: &[[T; 4]], threshold: T) -> Score<T> {
    let mut mask = vec![false; pairs.len()];
    let (mut count, mut sum) = (0usize, T::zero());
    for (k, p) in pairs.iter().enumerate() {
        if let Ok(e) = sampson_error(f, p) {
            if e <= threshold {
                mask[k] = true;
                count += 1;
                sum = sum + e;
            }
        }
    }
    let mean = if count > 0 { sum / T::from_usize_lossy(count) } else { T::infinity() };
    Score { mask, count, mean }
}

/// RANSAC over 8-point minimal samples, then a refit on the best inlier set.
pub fn ransac_fundamental<T: Scalar>(
    c: &Correspondences<T>,
    iterations: usize,
    threshold_px2: T,
    seed: u64,
) -> Result<RobustEstimate<T>, RobustError> {
    let n = c.len();
    if n < 8 {
        return Err(RobustError::InsufficientPoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(FundamentalMatrix<T>, Score<T>)> = None;
    for _ in 0..iterations.max(1) {
        let picks = sample(&mut rng, n, 8).into_vec();
        let Ok(f) = eight_point_subset(&c.pairs, Some(&picks)) else { continue };
        let s = score(&f, &c.pairs, threshold_px2);
        let better = match &best {
            None => true,
            Some((_, b)) => s.count > b.count || (s.count == b.count && s.mean < b.mean),
        };
        if better {
            best = Some((f, s));
        }
    }
    let (mut f, mut s) = best.ok_or(RobustError::NoModelFound)?;
    if s.count >= 8 {
        let inliers: Vec<usize> = (0..n).filter(|&k| s.mask[k]).collect();
        if let Ok(refit) = eight_point_subset(&c.pairs, Some(&inliers)) {
            let rs = score(&refit, &c.pairs, threshold_px2);
            if rs.count >= s.count {
                f = refit;
                s = rs;
            }
        }
    }
    let reliable = reliability_gate(n, s.count)?;
    Ok(RobustEstimate { f, inlier_count: s.count, inlier_mask: s.mask, reliable })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_boundaries() {
        assert!(!reliability_gate(20, 20).unwrap());
        assert!(!reliability_gate(100, 20).unwrap());
        assert!(reliability_gate(100, 21).unwrap());
        assert!(reliability_gate(21, 21).unwrap());
        assert!(reliability_gate(5, 6).is_err());
    }

    #[test]
    fn sampson_on_rectified_pair() {
        let f = FundamentalMatrix::<f64>::new([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]).unwrap();
        let e1 = sampson_error(&f, &[10.0, 20.0, 40.0, 21.0]).unwrap();
        let e2 = sampson_error(&f, &[10.0, 20.0, 40.0, 22.0]).unwrap();
        assert!((e2 / e1 - 4.0).abs() < 1e-6);
        assert!(sampson_error(&f, &[3.0, 5.0, 9.0, 5.0]).unwrap() < 1e-18);
    }

    #[test]
    fn seven_points_are_rejected() {
        let c = Correspondences::new(vec![[0.0f64; 4]; 7]).unwrap();
        assert_eq!(normalized_eight_point(&c), Err(RobustError::InsufficientPoints(7)));
    }
}
