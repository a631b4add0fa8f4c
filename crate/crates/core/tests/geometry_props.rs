mod common;

use common::*;
use proptest::prelude::*;
use rbench_core::geometry::{
    obb_intersects, point_in_polygon, wrap_angle, OrientedBox, Point2, Polyline,
};
use rbench_core::{Obb, Path, Point};

fn obb() -> impl Strategy<Value = Obb> {
    (
        -10.0..10.0f64,
        -10.0..10.0f64,
        0.2..4.0f64,
        0.2..2.0f64,
        -7.0..7.0f64,
    )
        .prop_map(|(x, y, hl, hw, h)| OrientedBox::new(Point2::new(x, y), hl, hw, h).unwrap())
}

fn corners(b: &Obb) -> [P; 4] {
    rect_corners(
        b.center.x,
        b.center.y,
        b.half_length,
        b.half_width,
        b.heading,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn obb_test_agrees_with_independent_sat(a in obb(), b in obb()) {
        prop_assert_eq!(obb_intersects(&a, &b), sat_overlap(&corners(&a), &corners(&b)));
    }

    #[test]
    fn obb_test_is_symmetric(a in obb(), b in obb()) {
        prop_assert_eq!(obb_intersects(&a, &b), obb_intersects(&b, &a));
    }

    #[test]
    fn obb_test_is_invariant_under_rigid_motion(a in obb(), b in obb(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let off = Point2::new(dx, dy);
        let before = obb_intersects(&a, &b);
        let after = obb_intersects(&a.translated(off), &b.translated(off));
        // translation by a large offset can flip verdicts only in the contact band
        if dense_verdict(&a, &b, 1e-6, 0.01).is_some() {
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn box_contains_its_center_and_not_far_points(b in obb(), ang in 0.0..6.3f64) {
        prop_assert!(b.contains(b.center));
        let far = b.center + Point2::from_angle(ang) * (b.bounding_radius() + 0.01);
        prop_assert!(!b.contains(far));
    }

    #[test]
    fn corners_lie_on_the_bounding_circle(b in obb()) {
        for c in b.corners() {
            prop_assert!((c.distance(b.center) - b.bounding_radius()).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_angle_lands_in_half_open_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!((w.sin() - a.sin()).abs() < 1e-9 && (w.cos() - a.cos()).abs() < 1e-9);
    }

    #[test]
    fn point_in_polygon_matches_winding_number(seed in 0u64..10_000, px in -45.0..45.0f64, py in -45.0..45.0f64) {
        let mut r = rng(seed);
        let ring = star_ring(&mut r, 0.0, 0.0, 10.0, 40.0, 9);
        let poly: Vec<Point> = ring.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        prop_assert_eq!(point_in_polygon(Point2::new(px, py), &poly), inside_ring((px, py), &ring));
    }

    #[test]
    fn projection_is_no_farther_than_any_vertex(
        pts in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 2..8),
        px in -30.0..30.0f64,
        py in -30.0..30.0f64,
    ) {
        let points: Vec<Point> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        prop_assume!(points.windows(2).all(|w| w[0].distance(w[1]) > 1e-3));
        let line = Polyline::new(points.clone()).unwrap();
        let p = Point2::new(px, py);
        let proj = line.project(p);
        let best_vertex = points.iter().map(|v| v.distance(p)).fold(f64::INFINITY, f64::min);
        prop_assert!(proj.foot.distance(p) <= best_vertex + 1e-9);
        prop_assert!(proj.lateral.abs() <= proj.foot.distance(p) + 1e-9);
        if (0.0..=line.length()).contains(&proj.arc_length) {
            let (at, _) = line.point_at(proj.arc_length);
            prop_assert!(at.distance(proj.foot) < 1e-6);
        }
    }
}

#[test]
fn polyline_length_of_a_known_path() {
    let line: Path = Polyline::new(vec![
        Point2::new(0.0, 0.0),
        Point2::new(3.0, 4.0),
        Point2::new(3.0, 10.0),
    ])
    .unwrap();
    assert_eq!(line.length(), 11.0);
    let (p, t) = line.point_at(8.0);
    assert!((p.x - 3.0).abs() < 1e-12 && (p.y - 7.0).abs() < 1e-12);
    assert!((t.y - 1.0).abs() < 1e-12);
}

#[test]
fn degenerate_boxes_are_rejected() {
    assert!(Obb::new(Point2::new(0.0, 0.0), 0.0, 1.0, 0.0).is_err());
}
