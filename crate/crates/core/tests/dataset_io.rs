use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use camloc::harness::{generate_synthetic_scene, load_dataset, Dataset, SceneSpec};
use camloc::pipelines::{estimate_fb, PipelineConfig};

fn small() -> SceneSpec {
    SceneSpec { length: 19.0, width: 96, height: 72, focal: 75.0, ..Default::default() }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn twenty_frame_dataset_round_trips() {
    let scene = generate_synthetic_scene(&small(), 3);
    assert_eq!(scene.dataset.len(), 20);
    let dir = tempfile::tempdir().unwrap();
    scene.dataset.write(dir.path()).unwrap();

    let index = load_dataset(dir.path()).unwrap();
    assert_eq!(index.frames.len(), 20);
    let loaded = index.load().unwrap();
    assert_eq!(loaded.intrinsics, scene.dataset.intrinsics);
    for (a, b) in scene.dataset.frames.iter().zip(&loaded.frames) {
        let (ma, mb) = (a.pose.to_homogeneous(), b.pose.to_homogeneous());
        assert!((ma - mb).abs().max() <= 1e-9);
        assert_eq!(a.image.to_u8(), b.image.to_u8());
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.cloud, b.cloud);
    }
    for i in 0..20 {
        assert_eq!(loaded.position(i), scene.dataset.position(i));
    }
}

#[test]
fn seeded_generation_is_byte_identical_on_disk() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic_scene(&small(), 11).dataset.write(a.path()).unwrap();
    generate_synthetic_scene(&small(), 11).dataset.write(b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 20 * 2 + 3);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    generate_synthetic_scene(&small(), 12).dataset.write(c.path()).unwrap();
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn dataset_without_position_tags_uses_camera_centers() {
    let scene = generate_synthetic_scene(&small(), 3);
    let dir = tempfile::tempdir().unwrap();
    let untagged = Dataset { positions: None, ..scene.dataset.clone() };
    untagged.write(dir.path()).unwrap();
    assert!(!dir.path().join("positions.txt").exists());
    let loaded = Dataset::load(dir.path()).unwrap();
    for i in 0..loaded.len() {
        assert!((loaded.position(i) - scene.dataset.position(i)).norm() < 1e-9);
    }
}

#[test]
fn missing_cloud_is_a_count_mismatch() {
    let scene = generate_synthetic_scene(&SceneSpec { length: 2.0, ..small() }, 3);
    let dir = tempfile::tempdir().unwrap();
    scene.dataset.write(dir.path()).unwrap();
    fs::remove_file(dir.path().join("clouds/000002.bin")).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn every_generated_frame_self_localizes() {
    let scene = generate_synthetic_scene(&small(), 3);
    let cfg = PipelineConfig::default();
    for r in &scene.dataset.frames {
        let est = estimate_fb(&r.image, r, &scene.dataset.intrinsics, &cfg);
        assert!(est.is_success(), "frame {}", r.id);
        let d = (est.pose.camera_center() - r.pose.camera_center()).norm();
        assert!(d <= 1e-3, "frame {}: {d}", r.id);
    }
}
