//! Acceptance criteria 1 to 10. Each prints one PASS/FAIL line. Set
//! `AVATARFIELD_STRICT_ACCEPTANCE=1` to exit nonzero when any fails.

use std::f64::consts::{PI, TAU};
use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use avatarfield::autograd::fit::{fit, fit_with, FitConfig};
use avatarfield::autograd::gradcheck::{gradcheck, GradcheckConfig};
use avatarfield::body::posed::sample_surface;
use avatarfield::body::{forward_lbs, BodySpec, CapsuleLimb, Pose, PosedBody, Shape, SkinnedBody, SkinningOptions};
use avatarfield::field::{checkpoint, FieldConfig, FieldParams, SdfScheme};
use avatarfield::losses::{body_surface_loss, eikonal_loss_with, min_surface_loss, total_loss, LossTerms, LossWeights};
use avatarfield::renderer::{
    deltas_from, integrate_ray, pixel_ray, render_frame, sample_ray, sdf_to_density, RadianceField, RenderedFrame,
    SampleStrategy,
};
use avatarfield::scene::eval::{evaluate_views, EvalReport};
use avatarfield::scene::{unseen_pose, Dataset, PoseSpec, Scene, SceneConfig, SceneRender};
use avatarfield::{Camera, Ray, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Line {
    pass: bool,
    text: String,
}

fn report(id: usize, name: &str, pass: bool, detail: String, elapsed: Duration) -> Line {
    let text = format!(
        "criterion {id:>2} {} {name}: {detail} [{:.1} s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    println!("{text}");
    Line { pass, text }
}

fn failed(id: usize, name: &str, e: avatarfield::Error, start: Instant) -> Line {
    report(id, name, false, format!("error: {e}"), start.elapsed())
}

fn random_pose(body: &SkinnedBody, seed: u64) -> Result<Pose> {
    PoseSpec::Random { seed, scale: 0.4 }.resolve(body)
}

/// Skinning weights at a surface sample: barycentric blend of its face's
/// vertex rows.
fn sample_weights(body: &SkinnedBody, face: usize, bary: &[f64; 3]) -> Vec<f64> {
    let mut w = vec![0.0; body.joint_count()];
    for (c, &v) in body.mesh.faces[face].iter().enumerate() {
        for (o, r) in w.iter_mut().zip(body.weight_row(v as usize)) {
            *o += bary[c] * r;
        }
    }
    w
}

/// Mean canonical error of surface samples pushed through forward
/// skinning and mapped back with `opts`.
fn surface_round_trip(body: &SkinnedBody, opts: &SkinningOptions, poses: &[Pose], samples: usize) -> Result<Vec<f64>> {
    let shape = Shape::neutral();
    let pts = sample_surface(&body.mesh, samples, 7);
    let mut errors = Vec::with_capacity(poses.len() * pts.len());
    for pose in poses {
        let posed = PosedBody::new(body, pose, &shape)?;
        for (x, f, bary) in &pts {
            let y = posed.transforms.skin(&sample_weights(body, *f, bary), x)?;
            errors.push((posed.inverse_skinning(&y, opts)? - x).norm());
        }
    }
    Ok(errors)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_1() -> Result<(bool, String)> {
    let start = Instant::now();
    let body = BodySpec::default().build()?;
    let shape = Shape::neutral();
    let opts = SkinningOptions::default();
    let poses: Vec<Pose> = (0..10).map(|k| random_pose(&body, 100 + k)).collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for pose in &poses {
        let posed = PosedBody::new(&body, pose, &shape)?;
        for (v, rest) in body.mesh.vertices.iter().enumerate() {
            let x = forward_lbs(&body, pose, &shape, rest, body.weight_row(v))?;
            worst = worst.max((posed.inverse_skinning(&x, &opts)? - rest).norm());
        }
    }
    let mut surface = surface_round_trip(&body, &opts, &poses, 1000)?;
    let rel = median(&mut surface) / body.height();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && rel < 0.01 && secs < 10.0;
    Ok((
        pass,
        format!(
            "{} vertices x 10 poses, max vertex error {worst:.2e} (< 1e-9); off-vertex median error {:.3}% of height (< 1%); runtime < 10 s",
            body.vertex_count(),
            100.0 * rel
        ),
    ))
}

/// Distance to the segment minus the radius.
fn capsule_sdf(p: &Vec3, limb: &CapsuleLimb) -> f64 {
    let d = limb.end - limb.start;
    let t = ((p - limb.start).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (p - (limb.start + d * t)).norm() - limb.radius
}

fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let n = (b - a).cross(&(c - a));
    let nn = n.norm_squared();
    // Inside the prism over the triangle: the plane distance.
    let inside = [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (*v - *u).cross(&(p - *u)).dot(&n) >= 0.0);
    if inside {
        return (p - a).dot(&n).abs() / nn.sqrt();
    }
    let seg = |u: &Vec3, v: &Vec3| {
        let d = v - u;
        let t = ((p - u).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (u + d * t)).norm()
    };
    seg(a, b).min(seg(b, c)).min(seg(c, a))
}

/// Generalized winding number: total signed solid angle over 4 pi.
fn winding_number(mesh: &avatarfield::body::TriMesh, p: &Vec3) -> f64 {
    let mut total = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize] - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * PI)
}

fn criterion_2() -> Result<(bool, String)> {
    let start = Instant::now();
    let body = BodySpec::default().build()?;
    let shape = Shape::neutral();
    let posed = PosedBody::new(&body, &random_pose(&body, 200)?, &shape)?;
    let b = posed.render_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let pts: Vec<Vec3> = (0..1000)
        .map(|_| Vec3::new(rng.gen_range(b.min.x..b.max.x), rng.gen_range(b.min.y..b.max.y), rng.gen_range(b.min.z..b.max.z)))
        .collect();
    let brute_worst = pts
        .par_iter()
        .map(|p| {
            let m = &posed.mesh;
            let dist = m
                .faces
                .iter()
                .map(|f| point_triangle_distance(p, &m.vertices[f[0] as usize], &m.vertices[f[1] as usize], &m.vertices[f[2] as usize]))
                .fold(f64::INFINITY, f64::min);
            let signed = if winding_number(m, p) > 0.5 { -dist } else { dist };
            (posed.body_sdf(p) - signed).abs()
        })
        .reduce(|| 0.0, f64::max);

    // Points on facet bisectors in the straight middle of each isolated
    // limb, where the polygonal tube and the capsule agree.
    let rest = PosedBody::new(&body, &Pose::identity(body.joint_count()), &shape)?;
    let mut analytic_worst: f64 = 0.0;
    let mut count = 0;
    let isolated = ["l_arm", "r_arm", "l_leg", "r_leg"];
    for limb in body.limbs.iter().filter(|l| isolated.contains(&l.name.as_str())) {
        let (e1, e2) = limb.ring_basis();
        let sides = 16;
        while count < 250 * (1 + isolated.iter().position(|n| *n == limb.name).expect("listed")) {
            let s = rng.gen_range(0.35..0.65);
            let th = TAU * (rng.gen_range(0..sides) as f64 + 0.5) / sides as f64;
            let r = limb.radius * rng.gen_range(0.3..1.6);
            let p = limb.start + (limb.end - limb.start) * s + (e1 * th.cos() + e2 * th.sin()) * r;
            let own = capsule_sdf(&p, limb);
            let others = body.limbs.iter().filter(|o| o.name != limb.name).map(|o| capsule_sdf(&p, o)).fold(f64::INFINITY, f64::min);
            if others < own.abs() + 0.05 {
                continue;
            }
            analytic_worst = analytic_worst.max((rest.body_sdf(&p) - own).abs());
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = brute_worst <= 1e-9 && analytic_worst <= 1e-6 && secs < 30.0;
    Ok((
        pass,
        format!(
            "1000 points: BVH vs brute-force scan max diff {brute_worst:.2e} (<= 1e-9); {count} isolated-limb points vs analytic capsule max diff {analytic_worst:.2e} (<= 1e-6); runtime < 30 s"
        ),
    ))
}

/// Nearest positive hit of a ray with the capsule oracle of one limb: the
/// finite cylinder, plus a sphere at a free end.
fn limb_hit(ray: &Ray, limb: &CapsuleLimb) -> Option<f64> {
    let (o, d) = (ray.origin, ray.direction);
    let axis = limb.end - limb.start;
    let len = axis.norm();
    let a_hat = axis / len;
    let w = o - limb.start;
    let dp = d - a_hat * d.dot(&a_hat);
    let wp = w - a_hat * w.dot(&a_hat);
    let r = limb.radius;
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (qa, qb, qc) = (dp.norm_squared(), 2.0 * dp.dot(&wp), wp.norm_squared() - r * r);
    let disc = qb * qb - 4.0 * qa * qc;
    if disc >= 0.0 && qa > 0.0 {
        for t in [(-qb - disc.sqrt()) / (2.0 * qa), (-qb + disc.sqrt()) / (2.0 * qa)] {
            let s = (o + d * t - limb.start).dot(&a_hat);
            if (0.0..=len).contains(&s) {
                take(t);
            }
        }
    }
    if limb.end_cap {
        let w = o - limb.end;
        let (b, c) = (w.dot(&d), w.norm_squared() - r * r);
        let disc = b * b - c;
        if disc >= 0.0 {
            take(-b - disc.sqrt());
        }
    }
    best
}

/// Circles where limb tubes meet a hub; the hub solid is their convex hull.
fn hub_circles(body: &SkinnedBody) -> Vec<Vec<(Vec3, Vec3, f64)>> {
    let limb = |n: &str| body.limbs.iter().find(|l| l.name == n).expect("standard limb");
    let at_start = |n: &str| {
        let l = limb(n);
        (l.start, l.direction(), l.radius)
    };
    let at_end = |n: &str| {
        let l = limb(n);
        (l.end, l.direction(), l.radius)
    };
    vec![
        vec![at_start("torso"), at_start("l_leg"), at_start("r_leg")],
        vec![at_end("torso"), at_start("neck"), at_start("l_arm"), at_start("r_arm")],
        vec![at_end("neck"), at_start("head")],
    ]
}

fn circle_points(circles: &[(Vec3, Vec3, f64)]) -> Vec<Vec3> {
    let mut pts = Vec::new();
    for (c, n, r) in circles {
        let reference = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let e1 = reference.cross(n).normalize();
        let e2 = n.cross(&e1);
        for k in 0..256 {
            let th = TAU * k as f64 / 256.0;
            pts.push(c + (e1 * th.cos() + e2 * th.sin()) * *r);
        }
    }
    pts
}

/// Whether the line through a ray meets the convex hull of `pts`: the
/// origin of the plane orthogonal to the ray must lie in the hull of the
/// projected points.
fn line_meets_hull(ray: &Ray, pts: &[Vec3]) -> bool {
    let d = ray.direction;
    let reference = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let u = reference.cross(&d).normalize();
    let v = d.cross(&u);
    let mut q: Vec<(f64, f64)> = pts.iter().map(|p| ((p - ray.origin).dot(&u), (p - ray.origin).dot(&v))).collect();
    q.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    // Andrew's monotone chain, counter-clockwise.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let base = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(q.iter()) } else { Box::new(q.iter().rev()) };
        for &p in iter {
            while hull.len() >= base + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], (0.0, 0.0)) >= 0.0)
}

/// First hit against every triangle, Moller-Trumbore.
fn mesh_first_hit(mesh: &avatarfield::body::TriMesh, ray: &Ray) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let (e1, e2) = (b - a, c - a);
        let p = ray.direction.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = ray.origin - a;
        let u = s.dot(&p) / det;
        let q = s.cross(&e1);
        let v = ray.direction.dot(&q) / det;
        if u < 0.0 || v < 0.0 || u + v > 1.0 {
            continue;
        }
        let t = e2.dot(&q) / det;
        if t > 0.0 && best.is_none_or(|x| t < x) {
            best = Some(t);
        }
    }
    best
}

struct RendererCheck {
    frames: Vec<RenderedFrame>,
    disagreement: f64,
    render_only: usize,
    oracle_only: usize,
    analytic_mae: f64,
    analytic_pixels: usize,
    mesh_mae: f64,
    mesh_pixels: usize,
    mean_step: f64,
}

fn renderer_scene() -> Result<(Scene, Vec<Camera>)> {
    let cfg = SceneConfig {
        render: SceneRender { resolution: 128, n_steps: 48, alpha_fraction: 0.005, ..SceneRender::default() },
        ..SceneConfig::default()
    };
    let scene = cfg.build()?;
    let target = scene.body.mesh.bounds().center();
    let cameras = [(0.0, 0.25), (1.1, -0.125), (2.4, 0.25)]
        .iter()
        .map(|&(az, el)| Camera::orbit(target, 3.0, az, el, 0.75, 128, 128))
        .collect::<Result<_>>()?;
    Ok((scene, cameras))
}

fn render_rest(scene: &Scene, cameras: &[Camera]) -> Result<Vec<RenderedFrame>> {
    let pose = Pose::identity(scene.body.joint_count());
    cameras.iter().map(|c| scene.render(&pose, c)).collect()
}

fn renderer_check() -> Result<RendererCheck> {
    let (scene, cameras) = renderer_scene()?;
    let frames = render_rest(&scene, &cameras)?;
    let posed = scene.posed(&Pose::identity(scene.body.joint_count()))?;
    let hubs: Vec<Vec<Vec3>> = hub_circles(&scene.body).iter().map(|c| circle_points(c)).collect();
    let (mut render_only, mut oracle_only, mut total) = (0usize, 0usize, 0usize);
    let (mut a_err, mut m_err, mut steps) = (Vec::new(), Vec::new(), Vec::new());
    for (cam, frame) in cameras.iter().zip(&frames) {
        let mask = frame.hit_mask();
        let per_pixel: Vec<(bool, Option<f64>, Option<f64>, f64)> = (0..frame.len())
            .into_par_iter()
            .map(|i| {
                let ray = cam.pixel_center_ray(i % cam.width, i / cam.width).expect("pixel inside image");
                let limb = scene.body.limbs.iter().filter_map(|l| limb_hit(&ray, l)).fold(None, |b: Option<f64>, t| Some(b.map_or(t, |b| b.min(t))));
                let on_hub = hubs.iter().any(|h| line_meets_hull(&ray, h));
                let step = pixel_ray(&posed, cam, i).expect("valid").map_or(0.0, |r| (r.t_far - r.t_near) / 48.0);
                let analytic = if on_hub { None } else { limb };
                (limb.is_some() || on_hub, analytic, mesh_first_hit(&posed.mesh, &ray), step)
            })
            .collect();
        for (i, (oracle_hit, analytic, mesh, step)) in per_pixel.into_iter().enumerate() {
            total += 1;
            match (oracle_hit, mask[i]) {
                (true, false) => oracle_only += 1,
                (false, true) => render_only += 1,
                _ => {}
            }
            if !mask[i] {
                continue;
            }
            if let Some(t) = analytic {
                a_err.push((frame.depth[i] - t).abs());
                steps.push(step);
            }
            if let Some(t) = mesh {
                m_err.push((frame.depth[i] - t).abs());
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(RendererCheck {
        disagreement: (render_only + oracle_only) as f64 / total as f64,
        render_only,
        oracle_only,
        analytic_mae: mean(&a_err),
        analytic_pixels: a_err.len(),
        mesh_mae: mean(&m_err),
        mesh_pixels: m_err.len(),
        mean_step: mean(&steps),
        frames,
    })
}

fn criterion_3() -> Result<(bool, String, Vec<RenderedFrame>)> {
    let start = Instant::now();
    let c = renderer_check()?;
    let secs = start.elapsed().as_secs_f64();
    let tol = 2.0 * c.mean_step;
    let pass = c.disagreement <= 0.01 && c.analytic_mae < tol && c.mesh_mae < tol && c.analytic_pixels > 0 && secs < 120.0;
    Ok((
        pass,
        format!(
            "3 views at 128x128, 48 steps: silhouette disagreement {:.3}% (<= 1%; {} px only rendered, {} px only analytic); depth MAE {:.4} vs analytic capsules ({} px), {:.4} vs mesh ray cast ({} px), 2x step = {tol:.4}; runtime < 2 min",
            100.0 * c.disagreement,
            c.render_only,
            c.oracle_only,
            c.analytic_mae,
            c.analytic_pixels,
            c.mesh_mae,
            c.mesh_pixels
        ),
        c.frames,
    ))
}

fn criterion_4() -> Result<(bool, String)> {
    let scene = SceneConfig::default().build()?;
    let pose = scene.poses[1].clone();
    let posed = scene.posed(&pose)?;
    let field = &scene.field;
    let skin = field.skinning();
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut rays: Vec<Ray> = Vec::new();
    while rays.len() < 100 {
        let cam = &scene.cameras[rng.gen_range(0..scene.cameras.len())];
        let px = rng.gen_range(0..cam.width * cam.height);
        if let Some(r) = pixel_ray(&posed, cam, px)? {
            // Only rays that graze or cross the body test the quadrature.
            let t_mid = 0.5 * (r.t_near + r.t_far);
            if posed.body_sdf(&r.at(t_mid)).abs() < 0.1 || posed.body_sdf(&r.at(t_mid)) < 0.0 {
                rays.push(r);
            }
        }
    }
    let integrate = |ray: &Ray, n: usize| -> Result<[f64; 4]> {
        let t = sample_ray(ray, n, SampleStrategy::Uniform)?;
        let geo = t.iter().map(|&ti| posed.sample_geometry(&ray.at(ti), &skin)).collect::<Result<Vec<_>>>()?;
        let (colors, d) = field.shade(&posed, &geo)?;
        let sigma = d.iter().map(|&di| sdf_to_density(di, field.alpha())).collect::<Result<Vec<_>>>()?;
        let r = integrate_ray(&sigma, &deltas_from(ray.t_near, &t), &colors, None);
        Ok([r.color[0], r.color[1], r.color[2], r.opacity])
    };
    let levels = [12, 24, 36, 48];
    let per_ray: Vec<[f64; 4]> = rays
        .par_iter()
        .map(|ray| {
            let oracle = integrate(ray, 4096)?;
            let mut e = [0.0; 4];
            for (k, &n) in levels.iter().enumerate() {
                let v = integrate(ray, n)?;
                e[k] = (0..4).map(|c| (v[c] - oracle[c]).powi(2)).sum::<f64>().sqrt();
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = (0..4).map(|k| per_ray.iter().map(|e| e[k]).sum::<f64>() / per_ray.len() as f64).collect();
    let monotone_rays = per_ray.iter().filter(|e| e.windows(2).all(|w| w[1] <= w[0])).count();
    let pass = means.windows(2).all(|w| w[1] < w[0]);
    Ok((
        pass,
        format!(
            "mean error vs 4096 samples over 100 rays at N = 12/24/36/48: {:.3e} > {:.3e} > {:.3e} > {:.3e} ({monotone_rays} rays individually monotone)",
            means[0], means[1], means[2], means[3]
        ),
    ))
}

fn criterion_5() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let n = Vec3::new(0.3, -0.8, 0.52).normalize();
    let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let eik = eikonal_loss_with(&pts, 1e-3, |q| Ok(q.iter().map(|p| p.dot(&n) - 0.2).collect()))?;
    let ms = min_surface_loss(&[0.0; 32])?;

    let body = BodySpec::default().build()?;
    let params = FieldParams::init(&FieldConfig::default(), &body, 0)?;
    let mut body_surface: f64 = 0.0;
    for k in 0..3 {
        let pose = if k == 0 { Pose::identity(body.joint_count()) } else { random_pose(&body, 500 + k)? };
        let posed = PosedBody::new(&body, &pose, &Shape::neutral())?;
        body_surface = body_surface.max(body_surface_loss(&params, &posed, 4096, k)?);
    }

    let terms = LossTerms { photometric: 0.0137, eikonal: 0.731, min_surface: 2.9e-3, body_surface: 0.0412, ..LossTerms::default() };
    let w = LossWeights { eikonal: 0.1, min_surface: 0.001, body_surface: 1.0, photometric: 1.0 };
    let doubled = LossWeights { eikonal: 0.2, min_surface: 0.002, body_surface: 2.0, photometric: 2.0 };
    let mut linear = total_loss(&terms, &doubled)?.total == 2.0 * total_loss(&terms, &w)?.total;
    let zero = LossWeights { eikonal: 0.0, min_surface: 0.0, body_surface: 0.0, photometric: 0.0 };
    for (k, (weight, term)) in [(0.37, terms.photometric), (0.37, terms.eikonal), (0.37, terms.min_surface), (0.37, terms.body_surface)].iter().enumerate() {
        let mut one = zero;
        match k {
            0 => one.photometric = *weight,
            1 => one.eikonal = *weight,
            2 => one.min_surface = *weight,
            _ => one.body_surface = *weight,
        }
        linear &= total_loss(&terms, &one)?.total == weight * term;
    }
    let pass = eik <= 1e-8 && ms == 1.0 && body_surface < 1e-6 && linear;
    Ok((
        pass,
        format!(
            "plane eikonal {eik:.2e} (<= 1e-8); min-surface at d = 0 is {ms} (= 1); zero-residual body-surface {body_surface:.2e} (< 1e-6); total linear in weights exactly: {linear}"
        ),
    ))
}

fn criterion_6() -> Result<(bool, String)> {
    let start = Instant::now();
    let r = gradcheck(&GradcheckConfig::default())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = r.tensors.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).expect("tensors");
    Ok((
        r.pass && secs < 300.0,
        format!(
            "{} parameters in {} tensors, worst relative error {:.2e} in {} (< 1e-4); runtime < 5 min",
            r.parameter_count,
            r.tensors.len(),
            worst.max_rel,
            worst.name
        ),
    ))
}

/// Fitted-avatar renders of the given dataset views.
fn eval_fit(params: &FieldParams, scene: &Scene, data: &Dataset, views: &[usize]) -> Result<EvalReport> {
    let settings = scene.config.render.settings();
    evaluate_views(data, views, |i| {
        let v = &data.manifest.views[i];
        render_frame(params, &scene.posed(&data.manifest.poses[v.pose])?, &v.camera, &settings)
    })
}

/// Iterations at which held-out PSNR is checked while racing to the
/// target.
const PSNR_SCHEDULE: [usize; 13] = [25, 50, 75, 100, 150, 200, 300, 400, 500, 750, 1000, 1500, 2000];
const TARGET_PSNR: f64 = 25.0;

struct FitRun {
    params: FieldParams,
    report: EvalReport,
    reached_at: Option<usize>,
    elapsed: Duration,
}

/// The standard fit. With `race`, also records the first scheduled
/// iteration at which held-out PSNR reaches the target, and stops there
/// when `stop_at_target` is set.
fn standard_fit(scene: &Scene, data: &Dataset, scheme: SdfScheme, race: bool, stop_at_target: bool) -> Result<FitRun> {
    let start = Instant::now();
    let cfg = FitConfig::default();
    let init = FieldParams::init(&FieldConfig { sdf_scheme: scheme, ..FieldConfig::default() }, &scene.body, cfg.seed)?;
    let held = data.split(true);
    let fit_data = data.fit_data(scene.body.clone(), scene.shape.clone());
    let mut reached_at = None;
    let result = if race {
        fit_with(&cfg, &fit_data, init, |it, p, _| {
            if reached_at.is_none() && PSNR_SCHEDULE.contains(&it) && eval_fit(p, scene, data, &held)?.psnr >= TARGET_PSNR {
                reached_at = Some(it);
                if stop_at_target {
                    return Ok(ControlFlow::Break(()));
                }
            }
            Ok(ControlFlow::Continue(()))
        })?
    } else {
        fit(&cfg, &fit_data, init)?
    };
    let elapsed = start.elapsed();
    let report = eval_fit(&result.params, scene, data, &held)?;
    Ok(FitRun { params: result.params, report, reached_at, elapsed })
}

/// Depth tolerance of the quadrature: the squared mean sample spacing over
/// ground-truth-covered pixels of the given views.
fn quadrature_tolerance(scene: &Scene, data: &Dataset, views: &[usize]) -> Result<f64> {
    let mut steps = Vec::new();
    for &i in views {
        let v = &data.manifest.views[i];
        let posed = scene.posed(&data.manifest.poses[v.pose])?;
        for (px, hit) in data.frames[i].hit_mask().into_iter().enumerate() {
            if hit {
                if let Some(r) = pixel_ray(&posed, &v.camera, px)? {
                    steps.push((r.t_far - r.t_near) / scene.config.render.n_steps as f64);
                }
            }
        }
    }
    let mean = steps.iter().sum::<f64>() / steps.len().max(1) as f64;
    Ok(mean * mean)
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    macro_rules! simple {
        ($id:expr, $name:expr, $f:expr) => {{
            let start = Instant::now();
            lines.push(match $f {
                Ok((pass, detail)) => report($id, $name, pass, detail, start.elapsed()),
                Err(e) => failed($id, $name, e, start),
            });
        }};
    }

    simple!(1, "skinning round trip", criterion_1());
    simple!(2, "body SDF oracle", criterion_2());
    let start = Instant::now();
    let c3_frames = match criterion_3() {
        Ok((pass, detail, frames)) => {
            lines.push(report(3, "renderer oracle", pass, detail, start.elapsed()));
            Some(frames)
        }
        Err(e) => {
            lines.push(failed(3, "renderer oracle", e, start));
            None
        }
    };
    simple!(4, "quadrature convergence", criterion_4());
    simple!(5, "loss sanity", criterion_5());
    simple!(6, "gradient check", criterion_6());

    // Criteria 7 to 10 share the scene, the dataset and the standard fit.
    let start = Instant::now();
    let setup = (|| -> Result<(Scene, Dataset)> {
        let scene = SceneConfig::default().build()?;
        let data = scene.generate()?;
        Ok((scene, data))
    })();
    let (scene, data) = match setup {
        Ok(s) => s,
        Err(e) => {
            for (id, name) in [(7, "toy fit"), (8, "re-pose generalization"), (9, "ablation trends"), (10, "determinism")] {
                lines.push(failed(id, name, avatarfield::Error::Numerical(format!("dataset: {e}")), start));
            }
            return finish(&lines);
        }
    };
    let held = data.split(true);

    let start = Instant::now();
    let c7 = (|| -> Result<(FitRun, f64)> {
        let run = standard_fit(&scene, &data, SdfScheme::Residual, true, false)?;
        Ok((run, quadrature_tolerance(&scene, &data, &held)?))
    })();
    let c7 = match c7 {
        Ok((run, tol)) => {
            let r = &run.report;
            let res = scene.config.render.resolution;
            let layout = data.len() == 48 && data.manifest.poses.len() == 2 && data.frames.iter().all(|f| f.width == 64 && f.height == 64) && res == 64;
            let pass = layout
                && r.psnr >= TARGET_PSNR
                && r.depth_mse <= 4.0 * tol
                && r.warp_mse <= 1e-2
                && run.elapsed < Duration::from_secs(3600);
            lines.push(report(
                7,
                "toy fit",
                pass,
                format!(
                    "24 views x 2 poses at 64x64, 2000 iterations; held-out PSNR {:.2} dB (>= 25), depth MSE {:.3e} (<= 4 x {tol:.3e} = {:.3e}), warp MSE {:.3e} (<= 1e-2); fit {:.0} s (< 1 h)",
                    r.psnr,
                    r.depth_mse,
                    4.0 * tol,
                    r.warp_mse,
                    run.elapsed.as_secs_f64()
                ),
                start.elapsed(),
            ));
            Some(run)
        }
        Err(e) => {
            lines.push(failed(7, "toy fit", e, start));
            None
        }
    };

    let start = Instant::now();
    match &c7 {
        Some(run) => {
            let r8 = (|| -> Result<EvalReport> {
                let mut cfg = scene.config.clone();
                cfg.poses = vec![unseen_pose()];
                let unseen_scene = cfg.build()?;
                let unseen = unseen_scene.generate()?;
                eval_fit(&run.params, &unseen_scene, &unseen, &unseen.split(true))
            })();
            lines.push(match r8 {
                Ok(r) => {
                    let limit = 2.5 * run.report.depth_mse;
                    report(
                        8,
                        "re-pose generalization",
                        r.depth_mse <= limit && r.silhouette_iou >= 0.9,
                        format!(
                            "unseen pose, held-out cameras: depth MSE {:.3e} (<= 2.5 x {:.3e} = {limit:.3e}), silhouette IoU {:.4} (>= 0.9)",
                            r.depth_mse, run.report.depth_mse, r.silhouette_iou
                        ),
                        start.elapsed(),
                    )
                }
                Err(e) => failed(8, "re-pose generalization", e, start),
            });
        }
        None => lines.push(report(8, "re-pose generalization", false, "no fit from criterion 7".into(), start.elapsed())),
    }

    let start = Instant::now();
    let c9 = (|| -> Result<(bool, String)> {
        let body = &scene.body;
        let poses: Vec<Pose> = (0..10).map(|k| random_pose(body, 900 + k)).collect::<Result<_>>()?;
        let knn = |k: usize| -> Result<f64> {
            let e = surface_round_trip(body, &SkinningOptions { knn: k, ..SkinningOptions::default() }, &poses, 1000)?;
            Ok(e.iter().sum::<f64>() / e.len() as f64)
        };
        let (k1, k4) = (knn(1)?, knn(4)?);
        let residual = c7.as_ref().and_then(|r| r.reached_at);
        let raw = standard_fit(&scene, &data, SdfScheme::Raw, true, true)?.reached_at;
        let iters = |r: Option<usize>| r.map_or("not within 2000".to_string(), |i| format!("{i}"));
        // A scheme that never reaches the target ranks last.
        let rank = |r: Option<usize>| r.unwrap_or(usize::MAX);
        let pass = k1 < k4 && residual.is_some() && rank(residual) < rank(raw);
        Ok((
            pass,
            format!(
                "mean surface round-trip error k=1 {:.3e} < k=4 {:.3e}; iterations to {TARGET_PSNR} dB held-out PSNR: residual {}, raw {}",
                k1,
                k4,
                iters(residual),
                iters(raw)
            ),
        ))
    })();
    lines.push(match c9 {
        Ok((pass, detail)) => report(9, "ablation trends", pass, detail, start.elapsed()),
        Err(e) => failed(9, "ablation trends", e, start),
    });

    let start = Instant::now();
    let c10 = (|| -> Result<(bool, String)> {
        let renders_same = match &c3_frames {
            Some(first) => {
                let (scene3, cameras) = renderer_scene()?;
                let again = render_rest(&scene3, &cameras)?;
                frames_identical(first, &again)
            }
            None => false,
        };
        let fit_same = match &c7 {
            Some(run) => {
                let again = standard_fit(&scene, &data, SdfScheme::Residual, false, false)?;
                checkpoint::to_bytes(&again.params)? == checkpoint::to_bytes(&run.params)? && again.report == run.report
            }
            None => false,
        };
        Ok((
            renders_same && fit_same,
            format!(
                "criterion 3 renders bit-identical: {renders_same}; criterion 7 parameters and metrics bit-identical: {fit_same} ({} threads)",
                rayon::current_num_threads()
            ),
        ))
    })();
    lines.push(match c10 {
        Ok((pass, detail)) => report(10, "determinism", pass, detail, start.elapsed()),
        Err(e) => failed(10, "determinism", e, start),
    });

    finish(&lines)
}

fn frames_identical(a: &[RenderedFrame], b: &[RenderedFrame]) -> bool {
    let bits = |f: &RenderedFrame| -> Vec<u64> {
        f.color.iter().flatten().chain(&f.depth).chain(&f.transmittance).map(|v| v.to_bits()).collect()
    };
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits(x) == bits(y))
}

fn finish(lines: &[Line]) -> ExitCode {
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    for l in &failed {
        eprintln!("failed: {}", l.text);
    }
    // Failures are reported, not fatal, unless strict mode is requested.
    let strict = std::env::var_os("AVATARFIELD_STRICT_ACCEPTANCE").is_some_and(|v| v != "0");
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
