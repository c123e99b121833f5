//! Rasterization of epipolar lines into binary cell-pair indicator maps.
//!
//! Cells are flattened row-major: cell `(r, c)` of an `s × s` grid has index
//! `r·s + c`. Cell `(r, c)` covers the closed pixel rectangle
//! `[c·w/s, (c+1)·w/s] × [r·h/s, (r+1)·h/s]`.

use thiserror::Error;

use crate::geometry::{epipolar_line, EpipolarLine, FundamentalMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuideError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell index {index} out of range for {cells} cells")]
    IndexOutOfRange { index: usize, cells: usize },
}

/// Feature grid laid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    s: usize,
    width: u32,
    height: u32,
}

impl GridSpec {
    pub fn new(s: usize, width: u32, height: u32) -> Result<Self, GuideError> {
        if s == 0 {
            return Err(GuideError::InvalidGrid("s must be at least 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(GuideError::InvalidGrid("image size must be positive".into()));
        }
        Ok(Self { s, width, height })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cells(&self) -> usize {
        self.s * self.s
    }

    pub fn cell_width<T: Scalar>(&self) -> T {
        T::lit(self.width as f64) / T::from_usize_lossy(self.s)
    }

    pub fn cell_height<T: Scalar>(&self) -> T {
        T::lit(self.height as f64) / T::from_usize_lossy(self.s)
    }

    /// Closed rectangle `(x0, y0, x1, y1)` of cell `i`.
    pub fn cell_rect<T: Scalar>(&self, i: usize) -> [T; 4] {
        let (r, c) = (i / self.s, i % self.s);
        let (cw, ch) = (self.cell_width::<T>(), self.cell_height::<T>());
        let (rf, cf) = (T::from_usize_lossy(r), T::from_usize_lossy(c));
        [cf * cw, rf * ch, (cf + T::one()) * cw, (rf + T::one()) * ch]
    }

    pub fn cell_center<T: Scalar>(&self, i: usize) -> [T; 2] {
        let (r, c) = (i / self.s, i % self.s);
        let half = T::lit(0.5);
        [
            (T::from_usize_lossy(c) + half) * self.cell_width::<T>(),
            (T::from_usize_lossy(r) + half) * self.cell_height::<T>(),
        ]
    }

    /// Normalized cell-centre position in `[0, 1]²` as `(x, y)`.
    pub fn normalized_center<T: Scalar>(&self, i: usize) -> [T; 2] {
        let (r, c) = (i / self.s, i % self.s);
        let s = T::from_usize_lossy(self.s);
        let half = T::lit(0.5);
        [(T::from_usize_lossy(c) + half) / s, (T::from_usize_lossy(r) + half) / s]
    }

    /// Cell containing a pixel; the right/bottom image borders belong to the last cell.
    pub fn cell_of<T: Scalar>(&self, p: &[T; 2]) -> Option<usize> {
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        if !(p[0] >= T::zero() && p[1] >= T::zero() && p[0] <= w && p[1] <= h) {
            return None;
        }
        let col = (p[0] / self.cell_width::<T>()).floor().to_usize()?.min(self.s - 1);
        let row = (p[1] / self.cell_height::<T>()).floor().to_usize()?.min(self.s - 1);
        Some(row * self.s + col)
    }
}

/// Dense `rows × cols` map with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    /// Entries other than 0/1 are rejected.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == rows * cols && data.iter().all(|&v| v <= 1)).then_some(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] == 1
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn support(&self, r: usize) -> Vec<usize> {
        self.row(r).iter().enumerate().filter(|(_, &v)| v == 1).map(|(j, _)| j).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Which attention direction a guide row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    OneToTwo,
    TwoToOne,
}

/// Indicator maps for both attention directions of an image pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpipolarGuide {
    g12: BinaryMap,
    g21: BinaryMap,
    grid1: GridSpec,
    grid2: GridSpec,
}

impl EpipolarGuide {
    /// Assembles a guide from precomputed maps, checking shapes against the grids.
    pub fn from_maps(g12: BinaryMap, g21: BinaryMap, grid1: GridSpec, grid2: GridSpec) -> Result<Self, GuideError> {
        if (g12.rows, g12.cols) != (grid1.cells(), grid2.cells()) || (g21.rows, g21.cols) != (grid2.cells(), grid1.cells()) {
            return Err(GuideError::InvalidGrid("map shapes do not match the grids".into()));
        }
        Ok(Self { g12, g21, grid1, grid2 })
    }

    pub fn g12(&self) -> &BinaryMap {
        &self.g12
    }

    pub fn g21(&self) -> &BinaryMap {
        &self.g21
    }

    pub fn grid1(&self) -> &GridSpec {
        &self.grid1
    }

    pub fn grid2(&self) -> &GridSpec {
        &self.grid2
    }

    pub fn map(&self, direction: Direction) -> &BinaryMap {
        match direction {
            Direction::OneToTwo => &self.g12,
            Direction::TwoToOne => &self.g21,
        }
    }

    /// Fraction of positive entries over both maps.
    pub fn positive_fraction(&self) -> f64 {
        let total = self.g12.data.len() + self.g21.data.len();
        (self.g12.count_ones() + self.g21.count_ones()) as f64 / total as f64
    }
}

/// Whether the infinite line meets the closed rectangle: the four corners do
/// not all lie strictly on one side.
pub fn line_meets_rect<T: Scalar>(line: &EpipolarLine<T>, rect: &[T; 4]) -> bool {
    let corners = [[rect[0], rect[1]], [rect[2], rect[1]], [rect[0], rect[3]], [rect[2], rect[3]]];
    let (mut pos, mut neg) = (0, 0);
    for c in &corners {
        let v = line.signed_distance(c);
        if v > T::zero() {
            pos += 1;
        } else if v < T::zero() {
            neg += 1;
        }
    }
    !(pos == 4 || neg == 4)
}

fn rasterize_direction<T: Scalar>(f: &FundamentalMatrix<T>, src: &GridSpec, dst: &GridSpec) -> BinaryMap {
    let mut map = BinaryMap::zeros(src.cells(), dst.cells());
    let rects: Vec<[T; 4]> = (0..dst.cells()).map(|j| dst.cell_rect(j)).collect();
    for i in 0..src.cells() {
        // The epipole cell has no line; its row stays empty.
        let Ok(line) = epipolar_line(f, &src.cell_center(i)) else { continue };
        let row = &mut map.data[i * map.cols..(i + 1) * map.cols];
        for (j, rect) in rects.iter().enumerate() {
            if line_meets_rect(&line, rect) {
                row[j] = 1;
            }
        }
    }
    map
}

/// Rasterizes the epipolar lines of every cell centre in both directions.
pub fn rasterize_guide<T: Scalar>(f: &FundamentalMatrix<T>, grid1: &GridSpec, grid2: &GridSpec) -> EpipolarGuide {
    EpipolarGuide {
        g12: rasterize_direction(f, grid1, grid2),
        g21: rasterize_direction(&f.transpose(), grid2, grid1),
        grid1: *grid1,
        grid2: *grid2,
    }
}

/// Support of row `i` of the chosen map.
pub fn epipolar_sets(guide: &EpipolarGuide, direction: Direction, i: usize) -> Result<Vec<usize>, GuideError> {
    let map = guide.map(direction);
    if i >= map.rows {
        return Err(GuideError::IndexOutOfRange { index: i, cells: map.rows });
    }
    Ok(map.support(i))
}
