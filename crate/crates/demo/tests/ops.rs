use flowprompt::flow::FlowParams;
use flowprompt_demo::ops::{alphabar_curve, noised_frame, schedule, Scene, N_FRAMES, SIZE};

#[test]
fn scene_renders_every_frame() {
    let s = Scene::new("square", "red", 1.5, -1.0, false, 3).unwrap();
    assert_eq!(s.clip.n_frames(), N_FRAMES);
    assert_eq!(s.truth.len(), N_FRAMES - 1);
    assert!(s.caption.contains("red square"), "{}", s.caption);
    for i in 0..N_FRAMES {
        let px = s.frame_rgba(i).unwrap();
        assert_eq!(px.len(), SIZE * SIZE * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }
    assert!(s.frame_rgba(N_FRAMES).is_err());
}

#[test]
fn fastest_allowed_trajectories_fit() {
    for (vx, vy) in [(2.5, 0.0), (-2.5, 2.5), (0.0, -2.5)] {
        for shape in ["circle", "square", "bar"] {
            Scene::new(shape, "white", vx, vy, true, 0).unwrap();
        }
    }
}

#[test]
fn bad_names_are_rejected() {
    assert!(Scene::new("triangle", "red", 1.0, 0.0, false, 0).is_err());
    assert!(Scene::new("circle", "mauve", 1.0, 0.0, false, 0).is_err());
}

#[test]
fn flow_tracks_translation() {
    let s = Scene::new("square", "yellow", 1.0, 0.0, true, 1).unwrap();
    let r = s.flow(3, &FlowParams::default()).unwrap();
    assert_eq!(r.estimate_rgba.len(), SIZE * SIZE * 4);
    assert_eq!(r.truth_rgba.len(), SIZE * SIZE * 4);
    assert!(r.mean_flow.0 > 0.0, "mean u {}", r.mean_flow.0);
    assert!(r.mean_flow.1.abs() < r.mean_flow.0);
    assert!(r.endpoint_error.is_finite() && r.tv >= 0.0);
    assert!(s.flow(N_FRAMES - 1, &FlowParams::default()).is_err());
    let bad = FlowParams { n_iterations: 0, ..FlowParams::default() };
    assert!(s.flow(0, &bad).is_err());
}

#[test]
fn alphabar_curve_falls_from_one() {
    let sch = schedule(1000, 1e-4, 2e-2).unwrap();
    let c = alphabar_curve(&sch, 50);
    assert_eq!(c.len(), 50);
    assert_eq!(c[0], 1.0);
    assert!((sch.alphabar(1) - (1.0 - 1e-4)).abs() < 1e-15);
    assert!(c.windows(2).all(|w| w[1] < w[0]));
    assert!(c[49] < 1e-3);
    assert!(schedule(1000, 0.5, 0.1).is_err());
}

#[test]
fn noise_grows_with_t() {
    let s = Scene::new("circle", "green", 0.0, 1.0, false, 0).unwrap();
    let sch = schedule(1000, 1e-4, 2e-2).unwrap();
    let clean = s.frame_rgba(2).unwrap();
    let diff = |t| {
        let n = noised_frame(&s, 2, t, &sch, 7).unwrap();
        clean.iter().zip(&n).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>()
    };
    let (d0, d1, d2) = (diff(0), diff(100), diff(900));
    assert_eq!(d0, 0.0);
    assert!(d0 < d1 && d1 < d2, "{d0} {d1} {d2}");
    assert_eq!(noised_frame(&s, 2, 100, &sch, 7).unwrap(), noised_frame(&s, 2, 100, &sch, 7).unwrap());
    assert!(noised_frame(&s, 2, 1001, &sch, 7).is_err());
}
