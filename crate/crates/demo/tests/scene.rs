use earth_adapter_demo::{Scene, SIZE};

const PIXELS: usize = SIZE * SIZE * 4;

#[test]
fn buffers_have_canvas_size() {
    let s = Scene::build(3, 0.75, 0.2, 2).unwrap();
    assert_eq!(s.image_rgba().len(), PIXELS);
    assert_eq!(s.labels_rgba().len(), PIXELS);
    assert_eq!(s.split_rgba(0.3).unwrap().len(), 2 * PIXELS);
    assert_eq!(s.spectrum_rgba(0.3).unwrap().len(), PIXELS);
    assert!(s.image_rgba().chunks(4).all(|p| p[3] == 255));
}

#[test]
fn full_cutoff_keeps_everything_low() {
    let s = Scene::build(1, 0.5, 0.2, 2).unwrap();
    let split = s.split_rgba(1.0).unwrap();
    assert_eq!(&split[..PIXELS], s.image_rgba().as_slice());
    assert!(split[PIXELS..].chunks(4).all(|p| p[..3] == [128, 128, 128]));
    assert_eq!(s.high_share(1.0).unwrap(), 0.0);
}

#[test]
fn stripe_artifact_raises_high_share() {
    let clean = Scene::build(2, 0.75, 0.0, 2).unwrap().high_share(0.3).unwrap();
    let striped = Scene::build(2, 0.75, 0.3, 2).unwrap().high_share(0.3).unwrap();
    assert!((0.0..=1.0).contains(&clean) && (0.0..=1.0).contains(&striped));
    assert!(striped > clean, "{striped} vs {clean}");
}

#[test]
fn rejects_bad_parameters() {
    assert!(Scene::build(0, 1.5, 0.2, 2).is_err());
    assert!(Scene::build(0, 0.5, 0.2, 1).is_err());
}
