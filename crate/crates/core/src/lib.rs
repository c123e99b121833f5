//! Epipolar-guided cross-attention supervision for a pairwise reranking
//! transformer, with the geometry, synthetic data and evaluation around it.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod geometry;
pub mod linalg;
pub mod scalar;
pub mod guides;
pub mod losses;
pub mod model;
pub mod robustf;
pub mod dataio;
pub mod synthgen;
pub mod evalkit;
pub mod pipeline;

pub type CameraViewF64 = geometry::CameraView<f64>;
pub type FundamentalMatrixF64 = geometry::FundamentalMatrix<f64>;
pub type FundamentalMatrixF32 = geometry::FundamentalMatrix<f32>;
pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type RerankerParamsF64 = model::RerankerParams<f64>;
pub type RerankerParamsF32 = model::RerankerParams<f32>;
pub type CrossAttentionMapsF32 = model::CrossAttentionMaps<f32>;
pub type CorrespondencesF64 = robustf::Correspondences<f64>;
pub type RetrievalIndexF32 = evalkit::RetrievalIndex<f32>;
