use std::sync::{Mutex, OnceLock};

use hedgegrad::Toggles;
use hedgegrad_web::demo::{Scene, SIZE};

fn scene() -> &'static Mutex<Scene> {
    static S: OnceLock<Mutex<Scene>> = OnceLock::new();
    S.get_or_init(|| Mutex::new(Scene::new(7).unwrap()))
}

#[test]
fn heatmap_and_scene_are_rgba() {
    let mut s = scene().lock().unwrap();
    s.next(true).unwrap();
    assert_eq!(s.labels().len(), 2);
    assert_eq!(s.image_rgba().unwrap().len(), SIZE * SIZE * 4);
    let class = s.labels()[0];
    let (px, stats) = s.attribute(class, 1.0, Toggles::ALL).unwrap();
    assert_eq!(px.len(), SIZE * SIZE * 4);
    assert!(px.chunks_exact(4).all(|p| p[3] == 255));
    assert!((0.0..=1.0).contains(&stats.positive_ratio));
    assert!(stats.pointing_hit.is_some());
}

#[test]
fn absent_class_has_no_pointing_result() {
    let mut s = scene().lock().unwrap();
    s.next(false).unwrap();
    let absent = (0..4).find(|c| !s.labels().contains(c)).unwrap();
    let (_, stats) = s.attribute(absent, 1.5, Toggles::ALL).unwrap();
    assert_eq!(stats.pointing_hit, None);
}

#[test]
fn insertion_preview_ends_at_the_original() {
    let mut s = scene().lock().unwrap();
    s.next(false).unwrap();
    let class = s.labels()[0];
    s.attribute(class, 1.0, Toggles::ALL).unwrap();
    let (full, _) = s.morf_preview(100.0).unwrap();
    assert_eq!(full, s.image_rgba().unwrap());
    let (none, _) = s.morf_preview(0.0).unwrap();
    assert_ne!(none, full);
}

#[test]
fn invalid_gamma_is_rejected() {
    let mut s = scene().lock().unwrap();
    assert!(s.attribute(0, 2.5, Toggles::ALL).is_err());
}

#[test]
fn preview_needs_a_map() {
    let mut s = scene().lock().unwrap();
    s.next(false).unwrap();
    assert!(s.morf_preview(10.0).is_err());
}

