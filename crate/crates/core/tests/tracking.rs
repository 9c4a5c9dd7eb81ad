mod common;

use common::{brute_force_track, tracking_oracle};
use dragkit::denoiser::FeatureMap;
use dragkit::drag::track_point;
use dragkit::tensor::{Grid, Shape};

#[test]
fn track_point_agrees_with_brute_force() {
    let (agree, total) = tracking_oracle(100, 12, 42);
    assert_eq!(agree, total);
}

#[test]
fn small_windows_also_agree() {
    for r2 in [0, 1, 3, 6] {
        let (agree, total) = tracking_oracle(50, r2, r2 as u64);
        assert_eq!(agree, total, "r2 = {r2}");
    }
}

#[test]
fn constant_field_keeps_the_current_point() {
    let f = FeatureMap::new(Grid::filled(Shape::new(2, 20, 20), 1.0)).unwrap();
    assert_eq!(track_point(&f, &[1.0, 1.0], (7, 9), 12), (7, 9));
    assert_eq!(brute_force_track(&f, &[1.0, 1.0], (7, 9), 12), (7, 9));
}

#[test]
fn equidistant_ties_resolve_row_major() {
    // two exact matches at the same Chebyshev distance from (5, 5)
    let mut g = Grid::zeros(Shape::new(1, 11, 11));
    g.set(0, 3, 7, 1.0);
    g.set(0, 7, 3, 1.0);
    let f = FeatureMap::new(g).unwrap();
    assert_eq!(track_point(&f, &[1.0], (5, 5), 4), (3, 7));
}
