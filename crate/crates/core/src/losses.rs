//! Epipolar and Max-Epipolar losses on raw (pre-softmax) cross-attention
//! logits, with exact gradients.

use thiserror::Error;

use crate::guides::{BinaryMap, EpipolarGuide};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("logit map {which} has shape {got:?}, guide expects {expected:?}")]
    ShapeMismatch { which: &'static str, got: (usize, usize), expected: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Sum,
    /// Divide by the number of supervised entries (`2·s⁴` for square grids).
    #[default]
    Mean,
}

/// Loss value and its gradients with respect to both logit maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub grad12: Matrix<T>,
    pub grad21: Matrix<T>,
}

/// Components of the Max-Epipolar loss (same reduction as the total).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxEpipolarParts<T> {
    pub zero: T,
    pub max: T,
}

/// Stable `BCE(σ(a), y)` and its derivative `σ(a) − y`.
#[inline]
pub fn bce_with_logit<T: Scalar>(a: T, y: T) -> (T, T) {
    let value = a.max(T::zero()) - a * y + (-a.abs()).exp().ln_1p();
    (value, sigmoid(a) - y)
}

#[inline]
pub fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn check_shapes<T: Scalar>(a12: &Matrix<T>, a21: &Matrix<T>, guide: &EpipolarGuide) -> Result<(), LossError> {
    let expect12 = (guide.g12().rows(), guide.g12().cols());
    let expect21 = (guide.g21().rows(), guide.g21().cols());
    if a12.shape() != expect12 {
        return Err(LossError::ShapeMismatch { which: "a12", got: a12.shape(), expected: expect12 });
    }
    if a21.shape() != expect21 {
        return Err(LossError::ShapeMismatch { which: "a21", got: a21.shape(), expected: expect21 });
    }
    Ok(())
}

fn reduction_factor<T: Scalar>(guide: &EpipolarGuide, reduction: Reduction) -> T {
    match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => {
            let n = guide.g12().rows() * guide.g12().cols() + guide.g21().rows() * guide.g21().cols();
            T::one() / T::from_usize_lossy(n)
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy)]
struct Accumulator<T> {
    sum: T,
    carry: T,
}

impl<T: Scalar> Accumulator<T> {
    fn new() -> Self {
        Self { sum: T::zero(), carry: T::zero() }
    }

    fn add(&mut self, v: T) {
        let t = self.sum + v;
        self.carry = self.carry + if self.sum.abs() >= v.abs() { (self.sum - t) + v } else { (v - t) + self.sum };
        self.sum = t;
    }

    fn total(self) -> T {
        self.sum + self.carry
    }
}

fn epi_direction<T: Scalar>(logits: &Matrix<T>, labels: &BinaryMap, factor: T) -> (T, Matrix<T>) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut value = Accumulator::new();
    for ((&a, &y), g) in logits.as_slice().iter().zip(labels.as_slice()).zip(grad.as_mut_slice()) {
        let (v, d) = bce_with_logit(a, if y == 1 { T::one() } else { T::zero() });
        value.add(v);
        *g = d * factor;
    }
    (value.total(), grad)
}

/// BCE between `σ(A)` and the guide indicator, summed over both directions.
pub fn epipolar_loss<T: Scalar>(
    a12: &Matrix<T>,
    a21: &Matrix<T>,
    guide: &EpipolarGuide,
    reduction: Reduction,
) -> Result<LossResult<T>, LossError> {
    check_shapes(a12, a21, guide)?;
    let factor = reduction_factor::<T>(guide, reduction);
    let (v12, grad12) = epi_direction(a12, guide.g12(), factor);
    let (v21, grad21) = epi_direction(a21, guide.g21(), factor);
    Ok(LossResult { value: (v12 + v21) * factor, grad12, grad21 })
}

fn max_epi_direction<T: Scalar>(logits: &Matrix<T>, labels: &BinaryMap, factor: T) -> (T, T, Matrix<T>) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let (mut zero, mut max) = (Accumulator::new(), Accumulator::new());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lab = labels.row(i);
        let mut best: Option<(usize, T)> = None;
        for (j, (&a, &y)) in row.iter().zip(lab).enumerate() {
            if y == 1 {
                // Strict comparison keeps the lowest column on ties.
                if best.map_or(true, |(_, b)| a > b) {
                    best = Some((j, a));
                }
            } else {
                let (v, d) = bce_with_logit(a, T::zero());
                zero.add(v);
                grad.set(i, j, d * factor);
            }
        }
        if let Some((j, a)) = best {
            let (v, d) = bce_with_logit(a, T::one());
            max.add(v);
            grad.set(i, j, d * factor);
        }
    }
    (zero.total(), max.total(), grad)
}

/// Zero-label BCE off the epipolar lines plus, per row, a positive-label BCE on
/// the largest on-line logit. Rows without support contribute only the first part.
pub fn max_epipolar_loss<T: Scalar>(
    a12: &Matrix<T>,
    a21: &Matrix<T>,
    guide: &EpipolarGuide,
    reduction: Reduction,
) -> Result<LossResult<T>, LossError> {
    max_epipolar_loss_with_parts(a12, a21, guide, reduction).map(|(r, _)| r)
}

pub fn max_epipolar_loss_with_parts<T: Scalar>(
    a12: &Matrix<T>,
    a21: &Matrix<T>,
    guide: &EpipolarGuide,
    reduction: Reduction,
) -> Result<(LossResult<T>, MaxEpipolarParts<T>), LossError> {
    check_shapes(a12, a21, guide)?;
    let factor = reduction_factor::<T>(guide, reduction);
    let (z12, m12, grad12) = max_epi_direction(a12, guide.g12(), factor);
    let (z21, m21, grad21) = max_epi_direction(a21, guide.g21(), factor);
    let parts = MaxEpipolarParts { zero: (z12 + z21) * factor, max: (m12 + m21) * factor };
    Ok((LossResult { value: parts.zero + parts.max, grad12, grad21 }, parts))
}

/// Which attention loss supervises the cross-attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    None,
    Epi,
    MaxEpi,
}

impl LossVariant {
    /// Dispatches to the selected loss; `None` for the unsupervised variant.
    pub fn evaluate<T: Scalar>(
        self,
        a12: &Matrix<T>,
        a21: &Matrix<T>,
        guide: &EpipolarGuide,
        reduction: Reduction,
    ) -> Option<Result<LossResult<T>, LossError>> {
        match self {
            LossVariant::None => None,
            LossVariant::Epi => Some(epipolar_loss(a12, a21, guide, reduction)),
            LossVariant::MaxEpi => Some(max_epipolar_loss(a12, a21, guide, reduction)),
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "epi" => Ok(Self::Epi),
            "max-epi" | "max_epi" => Ok(Self::MaxEpi),
            other => Err(format!("unknown loss variant `{other}` (expected none, epi, max-epi)")),
        }
    }
}
