//! Token assembly: `[CLS, f(x₁) … f(x_{s²}), SEP, f̄(x̄₁) … f̄(x̄_{s²})]` with
//! `f(x) = x + ψ(p) + β` and an optional epipolar-plane encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, RerankerParams};
use crate::geometry::{
    CameraView, EpipolarPencil, FundamentalMatrix, GeometryError, ImageSide, ProjectivePencil,
};
use crate::guides::GridSpec;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Frequency encoding of a point in `[0, 1]²`: per coordinate
/// `[sin(2ᵏπv), cos(2ᵏπv)]` for `k < num_freqs`, zero-padded to `m`.
pub fn frequency_encode<T: Scalar>(p: [T; 2], num_freqs: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m];
    let mut k = 0;
    for &v in &p {
        encode_scalar_into(v, num_freqs, &mut out[k..k + 2 * num_freqs]);
        k += 2 * num_freqs;
    }
    out
}

fn encode_scalar_into<T: Scalar>(v: T, num_freqs: usize, out: &mut [T]) {
    let pi = T::lit(std::f64::consts::PI);
    let mut freq = pi;
    for f in 0..num_freqs {
        let arg = freq * v;
        out[2 * f] = arg.sin();
        out[2 * f + 1] = arg.cos();
        freq = freq + freq;
    }
}

/// Per-cell epipolar-plane coordinates in `[0, 1]` for both images of a pair.
/// `None` marks a cell whose centre is the epipole.
#[derive(Debug, Clone, PartialEq)]
pub struct EpeInput {
    pub plane1: Vec<Option<f64>>,
    pub plane2: Vec<Option<f64>>,
}

fn reference_pixel(grid: &GridSpec, rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.gen::<f64>() * grid.width() as f64, rng.gen::<f64>() * grid.height() as f64]
}

fn cell_values<G: Scalar>(
    grid: &GridSpec,
    mut angle: impl FnMut(&[G; 2]) -> Result<G, GeometryError>,
    to_unit: impl Fn(f64) -> f64,
) -> Vec<Option<f64>> {
    (0..grid.cells()).map(|i| angle(&grid.cell_center(i)).ok().map(|a| to_unit(a.as_f64()))).collect()
}

impl EpeInput {
    /// Metric plane angles from calibrated views; the reference plane passes
    /// through an image-1 pixel drawn from `seed`.
    pub fn from_views<G: Scalar>(
        view1: &CameraView<G>,
        view2: &CameraView<G>,
        grid1: &GridSpec,
        grid2: &GridSpec,
        seed: u64,
    ) -> Result<Self, GeometryError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pencil = loop_reference(&mut rng, grid1, |p| {
            EpipolarPencil::new(view1, view2, &[G::lit(p[0]), G::lit(p[1])])
        })?;
        let pi = std::f64::consts::PI;
        let unit = |a: f64| (a + pi) / (2.0 * pi);
        Ok(Self {
            plane1: cell_values(grid1, |p| pencil.angle(ImageSide::First, p), unit),
            plane2: cell_values(grid2, |p| pencil.angle(ImageSide::Second, p), unit),
        })
    }

    /// Projective plane coordinates from a fundamental matrix alone (used with
    /// estimated or random geometry).
    pub fn from_fundamental<G: Scalar>(
        f: &FundamentalMatrix<G>,
        grid1: &GridSpec,
        grid2: &GridSpec,
        seed: u64,
    ) -> Result<Self, GeometryError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pencil = loop_reference(&mut rng, grid1, |p| ProjectivePencil::new(f, &[G::lit(p[0]), G::lit(p[1])]))?;
        let pi = std::f64::consts::PI;
        let unit = |a: f64| a / pi + 0.5;
        Ok(Self {
            plane1: cell_values(grid1, |p| pencil.angle(ImageSide::First, p), unit),
            plane2: cell_values(grid2, |p| pencil.angle(ImageSide::Second, p), unit),
        })
    }
}

/// Draws reference pixels until one is not the epipole.
fn loop_reference<P>(
    rng: &mut ChaCha8Rng,
    grid: &GridSpec,
    mut build: impl FnMut([f64; 2]) -> Result<P, GeometryError>,
) -> Result<P, GeometryError> {
    let mut last = GeometryError::EpipolePixel;
    for _ in 0..16 {
        match build(reference_pixel(grid, rng)) {
            Ok(p) => return Ok(p),
            Err(GeometryError::EpipolePixel) => continue,
            Err(e) => {
                last = e;
                break;
            }
        }
    }
    Err(last)
}

/// Assembled input sequence of length `2·s² + 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Matrix<T>,
    pub s: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    /// Row index of image-1 cell `i`.
    pub fn first_cell(i: usize) -> usize {
        1 + i
    }

    /// Row index of image-2 cell `j`.
    pub fn second_cell(s: usize, j: usize) -> usize {
        2 + s * s + j
    }
}

/// Builds the token sequence for one image pair.
pub fn assemble_tokens<T: Scalar>(
    features1: &Matrix<T>,
    features2: &Matrix<T>,
    params: &RerankerParams<T>,
    config: &ModelConfig,
    epe: Option<&EpeInput>,
) -> Result<TokenSequence<T>, ModelError> {
    let (s, m) = (config.s, config.m);
    let cells = s * s;
    for (which, f) in [("features1", features1), ("features2", features2)] {
        if f.shape() != (cells, m) {
            return Err(ModelError::ShapeMismatch(format!("{which} is {:?}, expected ({cells}, {m})", f.shape())));
        }
    }
    let epe = match (config.epe_enabled, epe) {
        (true, None) => return Err(ModelError::MissingGeometry),
        (true, Some(e)) => {
            if e.plane1.len() != cells || e.plane2.len() != cells {
                return Err(ModelError::ShapeMismatch("epipolar encoding does not match the grid".into()));
            }
            Some(e)
        }
        (false, _) => None,
    };
    let layout = params.layout();
    let grid = GridSpec::new(s, s as u32, s as u32).expect("s >= 1 validated");
    let pos: Vec<Vec<T>> =
        (0..cells).map(|i| frequency_encode(grid.normalized_center::<T>(i), config.num_freqs, m)).collect();
    let epe_offset = 4 * config.num_freqs;
    let mut tokens = Matrix::zeros(config.seq_len(), m);
    tokens.row_mut(0).copy_from_slice(params.slot(layout.cls));
    tokens.row_mut(1 + cells).copy_from_slice(params.slot(layout.sep));
    for (side, feats, beta, offset) in [
        (0, features1, params.slot(layout.beta1), 1),
        (1, features2, params.slot(layout.beta2), 2 + cells),
    ] {
        for i in 0..cells {
            let row = tokens.row_mut(offset + i);
            for (k, v) in row.iter_mut().enumerate() {
                *v = feats.get(i, k) + pos[i][k] + beta[k];
            }
            if let Some(e) = epe {
                let plane = if side == 0 { e.plane1[i] } else { e.plane2[i] };
                if let Some(u) = plane {
                    let mut enc = vec![T::zero(); 2 * config.num_freqs];
                    encode_scalar_into(T::lit(u), config.num_freqs, &mut enc);
                    for (k, &v) in enc.iter().enumerate() {
                        row[epe_offset + k] = row[epe_offset + k] + v;
                    }
                }
            }
        }
    }
    Ok(TokenSequence { tokens, s })
}

/// Accumulates token gradients into the CLS/SEP/β embedding gradients.
pub(crate) fn embedding_backward<T: Scalar>(dtokens: &Matrix<T>, s: usize, grads: &mut RerankerParams<T>) {
    let cells = s * s;
    let (cls, sep, beta1, beta2) = {
        let l = grads.layout();
        (l.cls, l.sep, l.beta1, l.beta2)
    };
    add_row(grads.slot_mut(cls), dtokens.row(0));
    add_row(grads.slot_mut(sep), dtokens.row(1 + cells));
    for i in 0..cells {
        add_row(grads.slot_mut(beta1), dtokens.row(1 + i));
        add_row(grads.slot_mut(beta2), dtokens.row(2 + cells + i));
    }
}

fn add_row<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
