mod common;

use common::*;
use nalgebra::Vector3;
use panosplat::io::*;
use panosplat::losses::Embedding;
use panosplat::pointinit::{read_pointmap, write_pointmap, PointCloud, PointMap};
use panosplat::scene::CameraPose;
use panosplat::Image;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn png_bit_depths_quantize_as_expected() {
    let img = Image::from_fn(9, 5, 3, |x, y, px| {
        px[0] = x as f64 / 8.0;
        px[1] = y as f64 / 4.0;
        px[2] = 0.123456;
    });
    for (depth, tol) in [(BitDepth::Eight, 0.5 / 255.0), (BitDepth::Sixteen, 0.5 / 65535.0)] {
        let back = decode_png(&encode_png(&img, depth).unwrap()).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (9, 5, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= tol + 1e-12);
        }
    }
}

#[test]
fn scene_ply_round_trip_is_float32_exact() {
    let mut r = rng(1);
    let (scene, _, _) = random_scene(&mut r, 17, 32);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("scene.ply");
    write_scene_ply(&path, &scene.gaussians, &scene.background).unwrap();
    let (gs, bg) = read_scene_ply(&path).unwrap();
    let f32_eq = |a: &Vector3<f64>, b: &Vector3<f64>| a.iter().zip(b.iter()).all(|(x, y)| *x == *y as f32 as f64);
    assert_eq!(bg, scene.background);
    assert_eq!(gs.len(), 17);
    for (a, b) in gs.iter().zip(&scene.gaussians) {
        assert!(f32_eq(&a.position, &b.position));
        assert!(f32_eq(&a.color, &b.color));
        assert!((a.opacity - b.opacity).abs() <= 1e-6 * b.opacity);
        assert!((a.scale - b.scale).norm() <= 1e-6 * b.scale.norm());
        // stored normalized
        assert!((a.rotation.coords - b.rotation.normalize().coords).norm() < 1e-6);
    }
}

#[test]
fn point_cloud_round_trip() {
    let cloud = PointCloud {
        positions: vec![Vector3::new(0.5, -1.0, 2.0), Vector3::new(1e-3, 4.0, -7.25)],
        colors: vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 0.0, 0.5)],
    };
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("points.ply");
    write_point_cloud_ply(&path, &cloud).unwrap();
    let back = read_point_cloud_ply(&path).unwrap();
    for (a, b) in back.positions.iter().zip(&cloud.positions) {
        assert!((a - b).norm() < 1e-6);
    }
    // colors are stored as 8-bit
    for (a, b) in back.colors.iter().zip(&cloud.colors) {
        assert!((a - b).abs().max() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn poses_and_embeddings_round_trip() {
    let mut r = rng(2);
    let poses: Vec<CameraPose> = (0..4)
        .map(|_| CameraPose {
            rotation: random_rotation(&mut r, 3.0).into_inner(),
            translation: Vector3::new(r.gen(), r.gen(), r.gen()),
        })
        .collect();
    let tmp = tempfile::tempdir().unwrap();
    write_poses(tmp.path().join("poses.json"), &poses).unwrap();
    assert_eq!(read_poses(tmp.path().join("poses.json")).unwrap(), poses);

    let emb = Embedding::new(vec![0.5, -0.25, 3.0], "model-x").unwrap();
    write_embedding(tmp.path().join("view_00"), &emb).unwrap();
    let back = read_embedding(tmp.path().join("view_00")).unwrap();
    assert_eq!(back.vector(), emb.vector());
    assert_eq!(back.source_id(), "model-x");

    std::fs::write(tmp.path().join("view_00.bin"), [0u8; 5]).unwrap();
    assert!(read_embedding(tmp.path().join("view_00")).is_err());
}

#[test]
fn non_unit_pose_quaternion_is_rejected_on_read() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("poses.json");
    std::fs::write(&path, r#"[{"rotation":[2.0,0.0,0.0,0.0],"translation":[0,0,0]}]"#).unwrap();
    assert!(read_poses(&path).is_err());
}

#[test]
fn pointmap_round_trip_keeps_invalid_pixels() {
    let points = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 2.0), Vector3::new(0.0, 0.0, 1.0)];
    let mut map = PointMap::new(3, 1, points, vec![1.0, 2.5, 0.7], None).unwrap();
    map.valid[1] = false;
    let tmp = tempfile::tempdir().unwrap();
    write_pointmap(tmp.path().join("m"), &map).unwrap();
    let back = read_pointmap(tmp.path().join("m")).unwrap();
    assert_eq!(back.valid, map.valid);
    for i in [0, 2] {
        assert!((back.points[i] - map.points[i]).norm() < 1e-6);
        assert!((back.confidence[i] - map.confidence[i]).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn pfm_round_trip_is_float32_exact(
        w in 1usize..9, h in 1usize..9, one in any::<bool>(), seed in any::<u64>()
    ) {
        let c = if one { 1 } else { 3 };
        let mut r = rng(seed);
        let img = Image::from_fn(w, h, c, |_, _, px| px.iter_mut().for_each(|v| *v = r.gen_range(-1e3..1e3)));
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        prop_assert_eq!((back.width(), back.height(), back.channels()), (w, h, c));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
    }
}
