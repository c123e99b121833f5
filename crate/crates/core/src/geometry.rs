//! Pinhole cameras, fundamental matrices, epipolar lines, crop adjustment
//! and epipolar-plane angles.
//!
//! Conventions: world-to-camera extrinsics with projection `x ~ K (R X + t)`,
//! pixel coordinates throughout, and `x̄ᵀ F x = 0` with `x` in image 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{
    cross, dot, frobenius, mat3_inverse, mat3_mul, mat3_scale, mat3_transpose, mat3_vec, norm,
    project_rank2, right_svd, scale, singular_values3, skew, sub, Mat3, Vec3,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate baseline: relative translation norm {0:e}")]
    DegenerateBaseline(f64),
    #[error("point is the epipole: epipolar line normal vanishes")]
    ZeroLine,
    #[error("pixel back-projects parallel to the baseline")]
    EpipolePixel,
    #[error("invalid crop transform: {0}")]
    InvalidCrop(String),
    #[error("matrix is not rank 2 (sigma3/sigma1 = {0:e})")]
    NotRankTwo(f64),
    #[error("matrix has non-finite or zero entries")]
    InvalidMatrix,
}

/// Intrinsics and world-to-camera pose of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
    intrinsics: Mat3<T>,
    width: u32,
    height: u32,
}

impl<T: Scalar> CameraView<T> {
    pub fn new(
        rotation: Mat3<T>,
        translation: Vec3<T>,
        intrinsics: Mat3<T>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        let all_finite = rotation.iter().flatten().chain(&translation).chain(intrinsics.iter().flatten());
        if !all_finite.into_iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite entry".into()));
        }
        let rtr = mat3_mul(&mat3_transpose(&rotation), &rotation);
        let mut dev = T::zero();
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let e = if i == j { T::one() } else { T::zero() };
                dev = dev + (v - e) * (v - e);
            }
        }
        if dev.sqrt() >= T::tol(1e-9) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not orthonormal (|RᵀR - I| = {:e})",
                dev.sqrt().as_f64()
            )));
        }
        if crate::linalg::mat3_det(&rotation) <= T::zero() {
            return Err(GeometryError::InvalidCamera("rotation has negative determinant".into()));
        }
        let k = &intrinsics;
        if !(k[0][0] > T::zero() && k[1][1] > T::zero()) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if k[2][2] != T::one() || k[1][0] != T::zero() || k[2][0] != T::zero() || k[2][1] != T::zero() {
            return Err(GeometryError::InvalidCamera("intrinsics must be upper triangular with K[2][2] = 1".into()));
        }
        Ok(Self { rotation, translation, intrinsics, width, height })
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    /// The camera's y axis points down in the image.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        intrinsics: Mat3<T>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let fwd = sub(&target, &eye);
        let fn_ = norm(&fwd);
        if fn_ <= T::zero() {
            return Err(GeometryError::InvalidCamera("eye coincides with target".into()));
        }
        let z = scale(&fwd, T::one() / fn_);
        let x_raw = cross(&z, &up);
        let xn = norm(&x_raw);
        if xn <= T::tol(1e-12) {
            return Err(GeometryError::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let x = scale(&x_raw, T::one() / xn);
        let y = cross(&z, &x);
        let rotation = [x, y, z];
        let t = mat3_vec(&rotation, &eye);
        Self::new(rotation, [-t[0], -t[1], -t[2]], intrinsics, width, height)
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3<T> {
        &self.translation
    }

    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.intrinsics
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3<T> {
        let c = mat3_vec(&mat3_transpose(&self.rotation), &self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// Point in camera coordinates.
    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = mat3_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Pixel projection of a world point; `None` behind the camera.
    pub fn project(&self, p: &Vec3<T>) -> Option<[T; 2]> {
        let pc = self.to_camera(p);
        if pc[2] <= T::zero() {
            return None;
        }
        let h = mat3_vec(&self.intrinsics, &pc);
        Some([h[0] / h[2], h[1] / h[2]])
    }

    pub fn in_image(&self, px: &[T; 2]) -> bool {
        px[0] >= T::zero()
            && px[1] >= T::zero()
            && px[0] <= T::from_u32(self.width).unwrap()
            && px[1] <= T::from_u32(self.height).unwrap()
    }

    /// World-frame direction of the viewing ray through `pixel` (not normalized).
    pub fn ray_direction(&self, pixel: &[T; 2]) -> Vec3<T> {
        let kinv = mat3_inverse(&self.intrinsics).expect("validated intrinsics are invertible");
        let d_cam = mat3_vec(&kinv, &[pixel[0], pixel[1], T::one()]);
        mat3_vec(&mat3_transpose(&self.rotation), &d_cam)
    }
}

/// Rank-2 fundamental matrix, stored with unit Frobenius norm and a positive
/// largest-magnitude entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix<T> {
    m: Mat3<T>,
}

/// Unit Frobenius norm with the first largest-magnitude entry positive.
///
/// Idempotent bitwise: an input already within a few ulps of unit norm is not rescaled.
pub fn canonicalize<T: Scalar>(m: &Mat3<T>) -> Option<Mat3<T>> {
    if !m.iter().flatten().all(|v| v.is_finite()) {
        return None;
    }
    let n = frobenius(m);
    if n <= T::zero() || !n.is_finite() {
        return None;
    }
    let mut out = *m;
    if (n - T::one()).abs() > T::epsilon() * T::lit(4.0) {
        out = mat3_scale(&out, T::one() / n);
    }
    let mut best = out[0][0];
    for &v in out.iter().flatten() {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    if best < T::zero() {
        out = mat3_scale(&out, -T::one());
    }
    Some(out)
}

impl<T: Scalar> FundamentalMatrix<T> {
    /// Validates rank 2 and stores the canonical form.
    pub fn new(m: Mat3<T>) -> Result<Self, GeometryError> {
        let c = canonicalize(&m).ok_or(GeometryError::InvalidMatrix)?;
        let sv = singular_values3(&c);
        let ratio = sv[2] / sv[0];
        if !(ratio < T::tol(1e-7)) {
            return Err(GeometryError::NotRankTwo(ratio.as_f64()));
        }
        Ok(Self { m: c })
    }

    /// Projects an arbitrary (full-rank) matrix onto rank 2 before canonicalizing.
    pub fn from_projected(m: Mat3<T>) -> Result<Self, GeometryError> {
        Self::new(project_rank2(&m))
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.m
    }

    /// Reverse-direction matrix: maps image-2 pixels to image-1 lines.
    pub fn transpose(&self) -> Self {
        // Transposing preserves both the norm and the largest entry, so the result is canonical.
        Self { m: mat3_transpose(&self.m) }
    }

    /// `x̄ᵀ F x` with unit homogeneous coordinates.
    pub fn residual(&self, x1: &[T; 2], x2: &[T; 2]) -> T {
        let fx = mat3_vec(&self.m, &[x1[0], x1[1], T::one()]);
        x2[0] * fx[0] + x2[1] * fx[1] + fx[2]
    }

    /// Right null vector (epipole in image 1, homogeneous, unit norm).
    pub fn epipole1(&self) -> Vec3<T> {
        let flat: Vec<T> = self.m.iter().flatten().copied().collect();
        let v = right_svd(3, 3, &flat).vectors[2].clone();
        [v[0], v[1], v[2]]
    }

    pub fn cast<U: Scalar>(&self) -> FundamentalMatrix<U> {
        FundamentalMatrix { m: self.m.map(|r| r.map(|v| U::lit(v.as_f64()))) }
    }
}

/// Fundamental matrix of a calibrated view pair, `K₂⁻ᵀ [t]ₓ R K₁⁻¹`.
pub fn relative_fundamental<T: Scalar>(
    view1: &CameraView<T>,
    view2: &CameraView<T>,
) -> Result<FundamentalMatrix<T>, GeometryError> {
    let r_rel = mat3_mul(view2.rotation(), &mat3_transpose(view1.rotation()));
    let rt1 = mat3_vec(&r_rel, view1.translation());
    let t_rel = sub(view2.translation(), &rt1);
    let t_norm = norm(&t_rel);
    let reference = T::one().max(norm(view1.translation())).max(norm(view2.translation()));
    if !(t_norm > T::tol(1e-9) * reference) {
        return Err(GeometryError::DegenerateBaseline(t_norm.as_f64()));
    }
    let k1_inv = mat3_inverse(view1.intrinsics()).expect("validated intrinsics are invertible");
    let k2_inv = mat3_inverse(view2.intrinsics()).expect("validated intrinsics are invertible");
    let e = mat3_mul(&skew(&t_rel), &r_rel);
    let f = mat3_mul(&mat3_mul(&mat3_transpose(&k2_inv), &e), &k1_inv);
    let m = canonicalize(&f).ok_or(GeometryError::InvalidMatrix)?;
    Ok(FundamentalMatrix { m })
}

/// Line `a x + b y + c = 0` with `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Scalar> EpipolarLine<T> {
    /// Normalizes a homogeneous line; `None` when its normal vanishes.
    pub fn from_homogeneous(l: &Vec3<T>) -> Option<Self> {
        let n = l[0].hypot(l[1]);
        if !(n >= T::tol(1e-12)) || !l[2].is_finite() {
            return None;
        }
        Some(Self { a: l[0] / n, b: l[1] / n, c: l[2] / n })
    }

    #[inline]
    pub fn signed_distance(&self, p: &[T; 2]) -> T {
        self.a * p[0] + self.b * p[1] + self.c
    }

    #[inline]
    pub fn distance(&self, p: &[T; 2]) -> T {
        self.signed_distance(p).abs()
    }
}

/// Epipolar line in image 2 of a pixel in image 1. Use `f.transpose()` for the reverse direction.
pub fn epipolar_line<T: Scalar>(f: &FundamentalMatrix<T>, point: &[T; 2]) -> Result<EpipolarLine<T>, GeometryError> {
    let l = mat3_vec(f.matrix(), &[point[0], point[1], T::one()]);
    EpipolarLine::from_homogeneous(&l).ok_or(GeometryError::ZeroLine)
}

/// Crop-then-resize: `x' = scale · (x − offset)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform<T> {
    pub offset_x: T,
    pub offset_y: T,
    pub scale_x: T,
    pub scale_y: T,
}

impl<T: Scalar> CropTransform<T> {
    pub fn new(offset_x: T, offset_y: T, scale_x: T, scale_y: T) -> Result<Self, GeometryError> {
        if !(offset_x.is_finite() && offset_y.is_finite()) {
            return Err(GeometryError::InvalidCrop("offsets must be finite".into()));
        }
        if !(scale_x > T::zero() && scale_y > T::zero() && scale_x.is_finite() && scale_y.is_finite()) {
            return Err(GeometryError::InvalidCrop("scale factors must be positive".into()));
        }
        Ok(Self { offset_x, offset_y, scale_x, scale_y })
    }

    pub fn identity() -> Self {
        Self { offset_x: T::zero(), offset_y: T::zero(), scale_x: T::one(), scale_y: T::one() }
    }

    pub fn apply(&self, p: &[T; 2]) -> [T; 2] {
        [self.scale_x * (p[0] - self.offset_x), self.scale_y * (p[1] - self.offset_y)]
    }

    /// Transform equivalent to applying `self` first and then `next`.
    pub fn then(&self, next: &Self) -> Self {
        Self {
            offset_x: self.offset_x + next.offset_x / self.scale_x,
            offset_y: self.offset_y + next.offset_y / self.scale_y,
            scale_x: self.scale_x * next.scale_x,
            scale_y: self.scale_y * next.scale_y,
        }
    }

    /// Inverse affine map (cropped pixels back to original pixels).
    fn inverse_matrix(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        [[o / self.scale_x, z, self.offset_x], [z, o / self.scale_y, self.offset_y], [z, z, o]]
    }
}

/// Fundamental matrix between two cropped/resized images: `T₂⁻ᵀ F T₁⁻¹`.
pub fn adjust_fundamental_for_crop<T: Scalar>(
    f: &FundamentalMatrix<T>,
    crop1: &CropTransform<T>,
    crop2: &CropTransform<T>,
) -> FundamentalMatrix<T> {
    let t1_inv = crop1.inverse_matrix();
    let t2_inv_t = mat3_transpose(&crop2.inverse_matrix());
    let m = mat3_mul(&mat3_mul(&t2_inv_t, f.matrix()), &t1_inv);
    FundamentalMatrix { m: canonicalize(&m).expect("crop transforms are invertible") }
}

/// Which image of the pair a pixel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageSide {
    First,
    Second,
}

/// Signed epipolar-plane angles about the baseline of a calibrated pair,
/// measured against the plane through a reference pixel of image 1.
#[derive(Debug, Clone)]
pub struct EpipolarPencil<T> {
    view1: CameraView<T>,
    view2: CameraView<T>,
    axis: Vec3<T>,
    reference: Vec3<T>,
}

impl<T: Scalar> EpipolarPencil<T> {
    pub fn new(view1: &CameraView<T>, view2: &CameraView<T>, ref_pixel: &[T; 2]) -> Result<Self, GeometryError> {
        let baseline = sub(&view2.center(), &view1.center());
        let bn = norm(&baseline);
        let reference_scale = T::one().max(norm(&view1.center())).max(norm(&view2.center()));
        if !(bn > T::tol(1e-9) * reference_scale) {
            return Err(GeometryError::DegenerateBaseline(bn.as_f64()));
        }
        let axis = scale(&baseline, T::one() / bn);
        let mut pencil = Self { view1: view1.clone(), view2: view2.clone(), axis, reference: [T::zero(); 3] };
        pencil.reference = pencil.plane_normal(ImageSide::First, ref_pixel)?;
        Ok(pencil)
    }

    /// Unit normal `b̂ × d̂` of the epipolar plane through `pixel`.
    fn plane_normal(&self, side: ImageSide, pixel: &[T; 2]) -> Result<Vec3<T>, GeometryError> {
        let view = match side {
            ImageSide::First => &self.view1,
            ImageSide::Second => &self.view2,
        };
        let d = view.ray_direction(pixel);
        let dn = norm(&d);
        let n = cross(&self.axis, &scale(&d, T::one() / dn));
        let nn = norm(&n);
        if !(nn > T::tol(1e-12)) {
            return Err(GeometryError::EpipolePixel);
        }
        Ok(scale(&n, T::one() / nn))
    }

    /// Angle in (−π, π] of the plane through `pixel`, right-handed about `C₂ − C₁`.
    pub fn angle(&self, side: ImageSide, pixel: &[T; 2]) -> Result<T, GeometryError> {
        let n = self.plane_normal(side, pixel)?;
        let sin = dot(&cross(&self.reference, &n), &self.axis);
        let cos = dot(&self.reference, &n);
        let a = sin.atan2(cos);
        Ok(if a <= -T::lit(std::f64::consts::PI) { T::lit(std::f64::consts::PI) } else { a })
    }
}

/// Signed angle between the epipolar planes of `pixel` and `ref_pixel` (both in image 1).
pub fn epipolar_plane_angle<T: Scalar>(
    view1: &CameraView<T>,
    view2: &CameraView<T>,
    pixel: &[T; 2],
    ref_pixel: &[T; 2],
) -> Result<T, GeometryError> {
    EpipolarPencil::new(view1, view2, ref_pixel)?.angle(ImageSide::First, pixel)
}

/// Epipolar-plane coordinates recoverable from a fundamental matrix alone.
///
/// Lines through the image-1 epipole form a two-dimensional space spanned by
/// the leading right singular vectors of F; a pixel's plane is the angle of its
/// line in that basis. Without metric calibration lines carry no orientation,
/// so angles are defined modulo π and reported in (−π/2, π/2].
#[derive(Debug, Clone)]
pub struct ProjectivePencil<T> {
    f: FundamentalMatrix<T>,
    epipole: Vec3<T>,
    basis: [Vec3<T>; 2],
    reference: T,
}

impl<T: Scalar> ProjectivePencil<T> {
    pub fn new(f: &FundamentalMatrix<T>, ref_pixel: &[T; 2]) -> Result<Self, GeometryError> {
        let flat: Vec<T> = f.matrix().iter().flatten().copied().collect();
        let svd = right_svd(3, 3, &flat);
        let v = |k: usize| [svd.vectors[k][0], svd.vectors[k][1], svd.vectors[k][2]];
        let mut pencil = Self { f: *f, epipole: v(2), basis: [v(0), v(1)], reference: T::zero() };
        pencil.reference = pencil.raw_angle(ImageSide::First, ref_pixel)?;
        Ok(pencil)
    }

    fn raw_angle(&self, side: ImageSide, pixel: &[T; 2]) -> Result<T, GeometryError> {
        let x = [pixel[0], pixel[1], T::one()];
        let line = match side {
            ImageSide::First => cross(&self.epipole, &x),
            ImageSide::Second => mat3_vec(&mat3_transpose(self.f.matrix()), &x),
        };
        let (p, q) = (dot(&line, &self.basis[0]), dot(&line, &self.basis[1]));
        if !(p.hypot(q) > T::tol(1e-12) * norm(&x)) {
            return Err(GeometryError::EpipolePixel);
        }
        Ok(q.atan2(p))
    }

    pub fn angle(&self, side: ImageSide, pixel: &[T; 2]) -> Result<T, GeometryError> {
        let pi = T::lit(std::f64::consts::PI);
        let half = pi / T::lit(2.0);
        let mut a = self.raw_angle(side, pixel)? - self.reference;
        while a > half {
            a = a - pi;
        }
        while a <= -half {
            a = a + pi;
        }
        Ok(a)
    }
}

/// Deterministic random rank-2 matrix: i.i.d. standard normal entries with the
/// smallest singular value removed, canonicalized.
pub fn random_rank2_matrix<T: Scalar>(seed: u64) -> FundamentalMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = [[T::zero(); 3]; 3];
    for v in m.iter_mut().flatten() {
        let x: f64 = StandardNormal.sample(&mut rng);
        *v = T::lit(x);
    }
    let p = project_rank2(&m);
    FundamentalMatrix { m: canonicalize(&p).expect("gaussian matrix has rank 2 almost surely") }
}
