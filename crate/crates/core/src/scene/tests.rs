use super::eval::{evaluate_views, PSNR_SENTINEL};
use super::*;
use crate::renderer::pixel_ray;

fn small() -> SceneConfig {
    SceneConfig {
        rig: RigConfig { count: 3, ..RigConfig::default() },
        render: SceneRender { resolution: 12, n_steps: 12, ..SceneRender::default() },
        ..SceneConfig::default()
    }
}

#[test]
fn default_config_is_valid_and_round_trips_through_toml() {
    let cfg = SceneConfig::default();
    cfg.validate().unwrap();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(SceneConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(SceneConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn invalid_configs_name_the_field() {
    let err = |text: &str| SceneConfig::from_toml(text).unwrap_err().to_string();
    assert!(err("[render]\nresolution = 4").contains("render.resolution"));
    assert!(err("[rig]\ncount = 0").contains("rig.count"));
    assert!(err("colour = 1").contains("colour"));
    let bad_joint = SceneConfig { poses: vec![PoseSpec::joints(&[("tail", [0.1, 0.0, 0.0])])], ..small() };
    assert!(bad_joint.build().unwrap_err().to_string().contains("tail"));
    let few_joints = SceneConfig { body: BodySpec { joint_count: 1, ..BodySpec::default() }, ..small() };
    assert!(few_joints.build().unwrap_err().to_string().contains("joint_count"));
}

#[test]
fn pose_specs_resolve() {
    let body = BodySpec::default().build().unwrap();
    let p = PoseSpec::joints(&[("r_elbow", [0.1, 0.2, 0.3])]).resolve(&body).unwrap();
    assert_eq!(p.rotations[11], Vec3::new(0.1, 0.2, 0.3));
    assert_eq!(p.rotations.iter().filter(|r| r.norm() > 0.0).count(), 1);
    let a = PoseSpec::Random { seed: 4, scale: 0.3 }.resolve(&body).unwrap();
    assert_eq!(a, PoseSpec::Random { seed: 4, scale: 0.3 }.resolve(&body).unwrap());
    assert!(a.rotations.iter().all(|r| r.amax() <= 0.3));
    assert!(PoseSpec::Explicit { pose: Pose::identity(3) }.resolve(&body).is_err());
}

#[test]
fn texture_is_bounded_and_lives_in_canonical_space() {
    let tex = TextureConfig::default();
    tex.validate().unwrap();
    for i in 0..200 {
        let x = Vec3::new(i as f64 * 0.013 - 1.0, i as f64 * 0.009, (i % 7) as f64 * 0.05);
        assert!(tex.color(&x).iter().all(|c| (0.0..=1.0).contains(c)));
    }
    let checker = TextureConfig::Checker { colors: [[0.1; 3], [0.9; 3]], period: 0.2, softness: 0.1 };
    checker.validate().unwrap();
    assert!(TextureConfig::Stripes { base: [0.9; 3], amplitude: 0.3, periods: [1.0; 3], axes: [0, 1, 2], phases: [0.0; 3] }
        .validate()
        .is_err());

    // The same canonical point gets the same color in every pose.
    let scene = small().build().unwrap();
    let posed = scene.posed(&scene.poses[1]).unwrap();
    let canon = Vec3::new(0.1, 1.1, 0.05);
    let g = SampleGeometry { skinned: canon, d_o: 0.0 };
    let (c, d) = scene.field.shade(&posed, &[g]).unwrap();
    assert_eq!(c[0], tex.color(&canon));
    assert_eq!(d[0], 0.0);
}

#[test]
fn dataset_has_every_camera_pose_pair_and_is_deterministic() {
    let scene = small().build().unwrap();
    let a = scene.generate().unwrap();
    assert_eq!(a.len(), 3 * 2);
    assert_eq!(a.manifest.views.len(), 6);
    let b = scene.generate().unwrap();
    for (x, y) in a.frames.iter().zip(&b.frames) {
        assert_eq!(x, y);
    }
    assert!(a.frames.iter().all(|f| f.hit_mask().iter().any(|h| *h)));
}

#[test]
fn default_split_holds_out_a_sixth_of_the_rig() {
    let s = SplitConfig::default();
    let held: Vec<usize> = (0..24).filter(|&c| s.held_out(c)).collect();
    assert_eq!(held, vec![3, 9, 15, 21]);
}

#[test]
fn dataset_files_round_trip() {
    let scene = small().build().unwrap();
    let data = scene.generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    // Cameras and poses are bit-exact through the JSON manifest.
    assert_eq!(back.manifest, data.manifest);
    for (a, b) in back.frames.iter().zip(&data.frames) {
        for (x, y) in a.color.iter().zip(&b.color) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    let fit = back.fit_data(scene.body.clone(), scene.shape.clone());
    assert_eq!(fit.views.len(), back.split(false).len());
    assert!(back.manifest.views.iter().all(|v| !v.held_out));
}

/// Nearest positive root of a ray against an infinite cylinder.
fn ray_cylinder(o: &Vec3, d: &Vec3, base: &Vec3, axis: &Vec3, r: f64) -> Option<f64> {
    let w = o - base;
    let dp = d - axis * d.dot(axis);
    let wp = w - axis * w.dot(axis);
    let (a, b, c) = (dp.norm_squared(), 2.0 * dp.dot(&wp), wp.norm_squared() - r * r);
    let disc = b * b - 4.0 * a * c;
    (disc >= 0.0).then(|| (-b - disc.sqrt()) / (2.0 * a)).filter(|t| *t > 0.0)
}

#[test]
fn frontal_center_depth_matches_the_torso_capsule() {
    let cfg = SceneConfig { render: SceneRender { resolution: 9, n_steps: 24, ..SceneRender::default() }, ..SceneConfig::default() };
    let scene = cfg.build().unwrap();
    let pose = Pose::identity(scene.body.joint_count());
    let posed = scene.posed(&pose).unwrap();
    let torso = scene.body.limbs.iter().find(|l| l.name == "torso").unwrap();
    // Frontal camera on +z aimed at the torso middle; with an odd size the
    // center pixel ray is the optical axis.
    let mid = 0.5 * (torso.start + torso.end);
    let cam = Camera::orbit(mid, 3.0, 0.0, 0.0, 0.75, 9, 9).unwrap();
    let frame = scene.render(&pose, &cam).unwrap();
    let center = 4 * 9 + 4;
    let ray = pixel_ray(&posed, &cam, center).unwrap().unwrap();
    let t = ray_cylinder(&ray.origin, &ray.direction, &torso.start, &torso.direction(), torso.radius).unwrap();
    let (_, s) = torso.axis_distance(&ray.at(t));
    assert!(s > 0.0 && s < 1.0);
    let step = (ray.t_far - ray.t_near) / 24.0;
    assert!((frame.depth[center] - t).abs() < 2.0 * step, "{} vs {t} (step {step})", frame.depth[center]);
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    // Neighbouring cameras 15 degrees apart, so little is occluded.
    let cfg = SceneConfig {
        rig: RigConfig::default(),
        poses: vec![PoseSpec::Identity],
        render: SceneRender { resolution: 32, n_steps: 16, ..SceneRender::default() },
        ..small()
    };
    let data = cfg.build().unwrap().generate().unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let r = evaluate_views(&data, &all, |i| Ok(data.frames[i].clone())).unwrap();
    assert_eq!(r.depth_mse, 0.0);
    assert_eq!(r.psnr, PSNR_SENTINEL);
    assert_eq!(r.silhouette_iou, 1.0);
    // Not exactly zero: occlusion edges and bilinear resampling.
    assert!(r.warp_mse < 0.01, "{}", r.warp_mse);
    assert_eq!(r.views.len(), 24);
    assert!(r.to_json().unwrap().contains("\"psnr\": 999.0"));
}
