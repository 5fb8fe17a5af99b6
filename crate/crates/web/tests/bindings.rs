use hvslam_web::{choose_window, weight_curve, Viewer};

#[test]
fn weight_curve_peaks_at_zero_and_is_even() {
    let ys = weight_curve(0.1, 0.125, 0.2, 81);
    assert_eq!(ys.len(), 81);
    assert_eq!(ys[40], 0.25);
    for i in 0..81 {
        assert!((ys[i] - ys[80 - i]).abs() < 1e-15);
        assert!(ys[i] <= 0.25);
    }
    assert!(ys[0] < 1e-6);
}

#[test]
fn window_takes_top_overlaps_locally() {
    let counts = vec![900, 40, 610, 0, 775, 120, 300, 980, 15, 560];
    let w = choose_window(counts, 4, "standard", 3).unwrap();
    assert_eq!(w.local(), vec![7, 0]);
    let hist = w.historical();
    assert_eq!(hist.len(), 2);
    assert!(hist.iter().all(|h| ![7, 0].contains(h)));
}

#[test]
fn window_rejects_bad_input() {
    assert!(choose_window(vec![1, 2, 3], 3, "standard", 0).is_err());
    assert!(choose_window(vec![1, 2, 3], 2, "nearest", 0).is_err());
}

#[test]
fn fused_sphere_renders_at_the_right_depth() {
    let v = Viewer::fused("sphere", 6, 40, 30).unwrap();
    assert!(v.leaves() > 0);
    let px = v.render(30.0, 10.0, 1.5);
    assert_eq!(px.len(), 40 * 30 * 4);
    // Centre pixels look straight at the sphere centre: depth 1.5 - 0.5.
    let centre = 4 * (15 * 40 + 20);
    assert!((px[centre + 3] - 1.0).abs() < 0.03, "depth {}", px[centre + 3]);
    // Flat grey from the zeroed colour head.
    assert!((px[centre] - 0.5).abs() < 1e-6);
    // Corner rays miss the sphere.
    assert_eq!(px[3], 0.0);
}

#[test]
fn unknown_scene_is_an_error() {
    assert!(Viewer::fused("plane", 4, 20, 15).is_err());
    assert!(Viewer::fused("castle", 4, 20, 15).is_err());
    assert!(Viewer::from_model(b"not a model", 0.0, 0.0, 0.0, 20, 15).is_err());
}
