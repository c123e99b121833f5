use std::time::Instant;

mod support;

use epiguide::geometry::{random_rank2_matrix, FundamentalMatrix};
use epiguide::guides::{epipolar_sets, rasterize_guide, Direction, GridSpec};
use support::rasterization_mismatch;

#[test]
fn rasterization_matches_supersampling() {
    let start = Instant::now();
    assert_eq!(rasterization_mismatch(3, 200), None);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn rectified_pair_lights_the_matching_row() {
    let f = FundamentalMatrix::<f64>::new([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]).unwrap();
    for s in [3usize, 7, 14] {
        let g = GridSpec::new(s, 224, 224).unwrap();
        let guide = rasterize_guide(&f, &g, &g);
        for i in 0..g.cells() {
            let row = i / s;
            let expected: Vec<usize> = (row * s..(row + 1) * s).collect();
            assert_eq!(epipolar_sets(&guide, Direction::OneToTwo, i).unwrap(), expected);
            assert_eq!(epipolar_sets(&guide, Direction::TwoToOne, i).unwrap(), expected);
        }
        assert!((guide.positive_fraction() - 1.0 / s as f64).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_cell_is_an_error() {
    let f = random_rank2_matrix::<f64>(1);
    let g = GridSpec::new(7, 224, 224).unwrap();
    let guide = rasterize_guide(&f, &g, &g);
    assert!(epipolar_sets(&guide, Direction::OneToTwo, 49).is_err());
    assert!(GridSpec::new(0, 224, 224).is_err());
}
