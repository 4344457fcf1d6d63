//! Acceptance suite: one PASS/FAIL line per criterion, all tolerances pinned here.
//! Runs as a plain binary (`harness = false`) so the lines appear in order.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::path::Path;
use std::time::{Duration, Instant};

use headsplat::align::{icp, IcpOptions, RigidTransform};
use headsplat::avatar::RenderSettings;
use headsplat::blend::{blend_maps, composite, composite_premultiplied, occlusion_mask};
use headsplat::geometry::subdivide4;
use headsplat::imaging::{ColorImage, MaskImage, ScalarImage};
use headsplat::micronet::{Activation, Mlp};
use headsplat::optim::{
    evaluate_face, evaluate_frames, evaluate_hair, train_face, train_hair, train_joint,
    FrameRecord, HairMaskMaps, HairObjective, LossWeights, TrainConfig,
};
use headsplat::splat::{
    logit, project_gaussian, render_splats, splat_backward, CloudGrads, DepthMode, GaussianCloud,
    SplatOptions, TRANSMITTANCE_FLOOR,
};
use headsplat::synthetic::{blank_avatar, generate, head_model, SyntheticConfig, SyntheticScene};
use headsplat::texture::LatentGrid;
use headsplat::{Camera, Vec3};
use nalgebra::{Matrix2, Matrix3, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const FD_REL_TOL: f64 = 1e-3;
const FD_BUDGET: Duration = Duration::from_secs(120);
const DENSE_TOL: f64 = 1e-6;
const ICP_ROT_TOL: f64 = 1e-6;
const ICP_T_TOL: f64 = 1e-6;
const ICP_SCALE_TOL: f64 = 1e-4;
const FACE_PSNR_MIN: f64 = 32.0;
const FACE_DEPTH_MAE_MAX: f64 = 1e-3;
const HAIR_PSNR_MIN: f64 = 30.0;
const JOINT_GAIN_MIN: f64 = 0.5;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const HELD_OUT_FRAME: usize = 7;
const ABLATION_HAIR_ITERS: usize = 800;
const ABLATION_FACE_ITERS: usize = 600;
const OVERLAP_LONG_HAIR: usize = 150;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- oracles

fn test_camera(size: usize) -> Camera {
    Camera::look_at(
        Vec3::zeros(),
        Vec3::z(),
        -Vec3::y(),
        size as f64 * 1.25,
        size,
        size,
    )
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, degree: usize, cam: &Camera) -> GaussianCloud {
    let mut c = GaussianCloud::new(degree);
    let stride = c.sh_stride();
    for _ in 0..n {
        let z = rng.random_range(1.5..2.5);
        let x = rng.random_range(0.15..0.85) * cam.width as f64;
        let y = rng.random_range(0.15..0.85) * cam.height as f64;
        let pos = cam.rotation.transpose() * (cam.ray_camera(x, y) * z - cam.translation);
        let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let ls = Vec3::from_fn(|_, _| rng.random_range(-2.8..-1.8));
        let o = logit(rng.random_range(0.15..0.7));
        let sh: Vec<f64> = (0..stride).map(|_| rng.random_range(-0.25..0.25)).collect();
        c.push(pos, q, ls, o, &sh);
    }
    c
}

/// Real SH colour up to degree 1, offset by 0.5 and clamped to `[0, 1]`.
fn sh_color(degree: usize, k: &[f64], d: &Vec3) -> [f64; 3] {
    const C0: f64 = 0.282_094_791_773_878_1;
    const C1: f64 = 0.488_602_511_902_919_9;
    let basis = [C0, -C1 * d.y, C1 * d.z, -C1 * d.x];
    let n = (degree + 1) * (degree + 1);
    [0, 1, 2].map(|c| (0.5 + (0..n).map(|j| basis[j] * k[j * 3 + c]).sum::<f64>()).clamp(0.0, 1.0))
}

/// Dense front-to-back compositing over every Gaussian at every pixel, with an
/// independent EWA projection. Returns premultiplied colour and alpha.
fn dense_reference(cloud: &GaussianCloud, cam: &Camera, cutoff: f64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut gs = Vec::new();
    for i in 0..cloud.len() {
        let t = cam.rotation * cloud.positions[i] + cam.translation;
        if t.z <= cam.near {
            continue;
        }
        let q = cloud.rotations[i];
        let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let rm = r.to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&cloud.log_scales[i].map(|v| (2.0 * v).exp()));
        let j = nalgebra::Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov =
            j * cam.rotation * rm * s * rm.transpose() * cam.rotation.transpose() * j.transpose()
                + Matrix2::identity() * 0.3;
        let dir = (cloud.positions[i] - cam.center()).normalize();
        let o = 1.0 / (1.0 + (-cloud.opacity_logits[i]).exp());
        let mean = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
        gs.push((
            t.z,
            i,
            mean,
            cov.try_inverse().expect("invertible"),
            o,
            sh_color(cloud.sh_degree, cloud.sh_of(i), &dir),
        ));
    }
    gs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = cam.width * cam.height;
    let (mut color, mut alpha) = (vec![[0.0; 3]; n], vec![0.0; n]);
    for p in 0..n {
        let (px, py) = ((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5);
        let (mut t, mut c) = (1.0, [0.0; 3]);
        for (_, _, mean, inv, o, col) in &gs {
            let d = nalgebra::Vector2::new(px - mean[0], py - mean[1]);
            let a = o * (-0.5 * (d.transpose() * inv * d)[0]).exp();
            if a < cutoff {
                continue;
            }
            for k in 0..3 {
                c[k] += col[k] * a * t;
            }
            t *= 1.0 - a;
            if t < TRANSMITTANCE_FLOOR {
                break;
            }
        }
        color[p] = c;
        alpha[p] = 1.0 - t;
    }
    (color, alpha)
}

fn n_params(c: &GaussianCloud) -> usize {
    11 + c.sh_stride()
}

fn param_mut(c: &mut GaussianCloud, i: usize, slot: usize) -> &mut f64 {
    let s = c.sh_stride();
    match slot {
        0..=2 => &mut c.positions[i][slot],
        3..=6 => &mut c.rotations[i][slot - 3],
        7..=9 => &mut c.log_scales[i][slot - 7],
        10 => &mut c.opacity_logits[i],
        _ => &mut c.sh[i * s + slot - 11],
    }
}

fn grad_of(g: &CloudGrads, stride: usize, i: usize, slot: usize) -> f64 {
    match slot {
        0..=2 => g.positions[i][slot],
        3..=6 => g.rotations[i][slot - 3],
        7..=9 => g.log_scales[i][slot - 7],
        10 => g.opacity_logits[i],
        _ => g.sh[i * stride + slot - 11],
    }
}

/// Worst `|fd - an| / max(|fd|, |an|, 1e-3 max|an|)` over all entries.
fn worst_rel(pairs: &[(f64, f64)]) -> f64 {
    let gmax = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * gmax).max(1e-300);
    pairs
        .iter()
        .map(|(fd, an)| (fd - an).abs() / fd.abs().max(an.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Smallest distance of any per-pixel Gaussian alpha to the given thresholds; FD
/// checks need every evaluated alpha away from the cutoff discontinuities.
fn alpha_margin(cloud: &GaussianCloud, cam: &Camera, cutoff: f64, thresholds: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..cloud.len() {
        let Some(p) = project_gaussian(cloud, i, cam, 1e-12) else {
            continue;
        };
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (dx, dy) = (x as f64 + 0.5 - p.mean[0], y as f64 + 0.5 - p.mean[1]);
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                let a = p.opacity * (-0.5 * q).exp();
                for t in std::iter::once(&cutoff).chain(thresholds) {
                    m = m.min((a - t).abs());
                }
            }
        }
    }
    m
}

// ---------------------------------------------------------------- criterion 1

fn splat_fd(seed: u64, degree: usize) -> f64 {
    let size = 32;
    let cam = test_camera(size);
    let opts = SplatOptions {
        early_stop: false,
        ..Default::default()
    };
    let mut seed = seed;
    let (cloud, mut rng) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_cloud(&mut rng, 10, degree, &cam);
        if alpha_margin(&c, &cam, opts.alpha_cutoff, &[]) > 1e-6 {
            break (c, rng);
        }
        seed += 1000;
    };
    let np = size * size;
    let wc: Vec<[f64; 3]> = (0..np)
        .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let wa: Vec<f64> = (0..np).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |c: &GaussianCloud| {
        let b = render_splats(c, &cam, &opts).unwrap().buffers;
        (0..np)
            .map(|i| {
                (0..3).map(|k| b.color.data[i][k] * wc[i][k]).sum::<f64>() + b.alpha.data[i] * wa[i]
            })
            .sum::<f64>()
    };
    let fwd = render_splats(&cloud, &cam, &opts).unwrap();
    let g = splat_backward(&cloud, &cam, &opts, &fwd, &wc, &wa).unwrap();
    let h = 1e-6;
    let mut pairs = Vec::new();
    for i in 0..cloud.len() {
        for slot in 0..n_params(&cloud) {
            let (mut cp, mut cm) = (cloud.clone(), cloud.clone());
            *param_mut(&mut cp, i, slot) += h;
            *param_mut(&mut cm, i, slot) -= h;
            pairs.push((
                (loss(&cp) - loss(&cm)) / (2.0 * h),
                grad_of(&g, cloud.sh_stride(), i, slot),
            ));
        }
    }
    worst_rel(&pairs)
}

fn mlp_fd(seed: u64) -> f64 {
    let mlp = Mlp::init(
        &[6, 16, 16, 3],
        &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
        seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    let batch = 7;
    let x: Vec<f64> = (0..batch * 6)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let wo: Vec<f64> = (0..batch * 3)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = |m: &Mlp, x: &[f64]| {
        m.forward(x, batch)
            .unwrap()
            .0
            .iter()
            .zip(&wo)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let (_, trace) = mlp.forward(&x, batch).unwrap();
    let (gp, gx) = mlp.backward(&trace, &wo).unwrap();
    let h = 1e-6;
    let p = mlp.params();
    let mut pairs = Vec::new();
    for k in 0..p.len() {
        let (mut a, mut b) = (mlp.clone(), mlp.clone());
        let (mut pa, mut pb) = (p.clone(), p.clone());
        pa[k] += h;
        pb[k] -= h;
        a.set_params(&pa);
        b.set_params(&pb);
        pairs.push(((loss(&a, &x) - loss(&b, &x)) / (2.0 * h), gp[k]));
    }
    for k in 0..x.len() {
        let (mut xa, mut xb) = (x.clone(), x.clone());
        xa[k] += h;
        xb[k] -= h;
        pairs.push(((loss(&mlp, &xa) - loss(&mlp, &xb)) / (2.0 * h), gx[k]));
    }
    worst_rel(&pairs)
}

fn sample_uv_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, c) = (9, 7, 4);
    let grid = LatentGrid {
        width: w,
        height: h,
        channels: c,
        data: (0..w * h * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let mut pairs = Vec::new();
    for _ in 0..20 {
        let uv = [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)];
        let wts: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |g: &LatentGrid| {
            g.sample_uv(uv)
                .iter()
                .zip(&wts)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut an = vec![0.0; grid.data.len()];
        grid.scatter(&grid.taps(uv), &wts, &mut an);
        let step = 1e-6;
        for k in 0..grid.data.len() {
            let (mut a, mut b) = (grid.clone(), grid.clone());
            a.data[k] += step;
            b.data[k] -= step;
            pairs.push(((f(&a) - f(&b)) / (2.0 * step), an[k]));
        }
    }
    worst_rel(&pairs)
}

fn hair_objective_fd(seed: u64) -> f64 {
    let size = 32;
    let cam = test_camera(size);
    let settings = RenderSettings {
        splat: SplatOptions {
            early_stop: false,
            ..Default::default()
        },
        blur_sigma: 1.0,
    };
    let opts = settings.splat;
    let mut s = seed;
    let (cloud, mut rng) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let c = random_cloud(&mut rng, 10, 1, &cam);
        if alpha_margin(&c, &cam, opts.alpha_cutoff, &[opts.nearz_threshold]) > 1e-6 {
            break (c, rng);
        }
        s += 1000;
    };
    let np = size * size;
    let rnd_img = |rng: &mut ChaCha8Rng| ColorImage {
        width: size,
        height: size,
        data: (0..np)
            .map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0)))
            .collect(),
    };
    let target = rnd_img(&mut rng);
    let head = rnd_img(&mut rng);
    // Left half: mesh in front of all hair; right half: mesh behind it.
    let mesh_depth = ScalarImage {
        width: size,
        height: size,
        data: (0..np)
            .map(|i| if i % size < size / 2 { 1.0 } else { 3.0 })
            .collect(),
    };
    let mask = MaskImage {
        width: size,
        height: size,
        data: (0..np)
            .map(|i| {
                ((i % size) as f64 - 18.0).powi(2) + ((i / size) as f64 - 15.0).powi(2) < 100.0
            })
            .collect(),
    };
    let obj = HairObjective {
        camera: cam,
        target,
        masks: HairMaskMaps::new(&mask),
        head,
        mesh_depth,
    };
    let w = LossWeights::default();
    let (_, g) = obj.eval(&cloud, &settings, &w, true).unwrap();
    let g = g.unwrap();
    let loss = |c: &GaussianCloud| obj.eval(c, &settings, &w, false).unwrap().0.total;
    let h = 1e-6;
    let mut pairs = Vec::new();
    for i in 0..cloud.len() {
        for slot in 0..n_params(&cloud) {
            let (mut cp, mut cm) = (cloud.clone(), cloud.clone());
            *param_mut(&mut cp, i, slot) += h;
            *param_mut(&mut cm, i, slot) -= h;
            pairs.push((
                (loss(&cp) - loss(&cm)) / (2.0 * h),
                grad_of(&g, cloud.sh_stride(), i, slot),
            ));
        }
    }
    worst_rel(&pairs)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let splat = [(1, 0), (2, 1), (3, 3)]
        .iter()
        .map(|&(s, d)| splat_fd(s, d))
        .fold(0.0, f64::max);
    let mlp = (0..3).map(mlp_fd).fold(0.0, f64::max);
    let uv = (0..3).map(sample_uv_fd).fold(0.0, f64::max);
    let stage2 = [11, 12]
        .iter()
        .map(|&s| hair_objective_fd(s))
        .fold(0.0, f64::max);
    let el = t.elapsed();
    let worst = splat.max(mlp).max(uv).max(stage2);
    outcome(
        worst < FD_REL_TOL && el < FD_BUDGET,
        format!(
            "worst rel err splat {splat:.2e}, mlp {mlp:.2e}, sample_uv {uv:.2e}, stage-2 {stage2:.2e} (tol {FD_REL_TOL:.0e}); {:.1}s (budget {}s)",
            el.as_secs_f64(),
            FD_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let opts = SplatOptions {
        early_stop: false,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for scene in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + scene);
        let size = rng.random_range(16..40);
        let cam = test_camera(size);
        let n = rng.random_range(1..=20);
        let cloud = random_cloud(&mut rng, n, (scene % 2) as usize, &cam);
        let b = render_splats(&cloud, &cam, &opts).unwrap().buffers;
        let (rc, ra) = dense_reference(&cloud, &cam, opts.alpha_cutoff);
        for i in 0..size * size {
            for k in 0..3 {
                worst = worst.max((b.color.data[i][k] - rc[i][k]).abs());
            }
            worst = worst.max((b.alpha.data[i] - ra[i]).abs());
        }
    }
    outcome(
        worst <= DENSE_TOL,
        format!("50 scenes, max abs diff {worst:.2e} (tol {DENSE_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let (w, h) = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = |rng: &mut ChaCha8Rng| ColorImage {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0)))
            .collect(),
    };
    let (hair, head) = (img(&mut rng), img(&mut rng));
    let zeros = ScalarImage::filled(w, h, 0.0);
    let ones = ScalarImage::filled(w, h, 1.0);
    let soft: ScalarImage = ScalarImage {
        width: w,
        height: h,
        data: (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let black = ColorImage::new(w, h);
    let at0 = composite(&hair, &head, &zeros, &soft).unwrap() == head
        && composite(&hair, &head, &soft, &zeros).unwrap() == head
        && composite_premultiplied(&black, &head, &zeros, &soft).unwrap() == head;
    let at1 = composite(&hair, &head, &ones, &ones).unwrap() == hair
        && composite_premultiplied(&hair, &head, &ones, &ones).unwrap() == hair;

    // Strict occlusion test, including equal depths and empty pixels.
    let inf = f64::INFINITY;
    let s = |v: Vec<f64>| ScalarImage {
        width: v.len(),
        height: 1,
        data: v,
    };
    let nz = s(vec![0.5, 1.0, 1.0 - 1e-12, 1.0 + 1e-12, inf, 0.3, inf]);
    let md = s(vec![1.0, 1.0, 1.0, 1.0, 1.0, inf, inf]);
    let strict = occlusion_mask(&nz, &md).unwrap().data
        == vec![true, false, true, false, false, true, false];

    // Near-z threshold: a faint (below 0.05) front Gaussian is skipped, one just
    // above it is taken.
    let cam = test_camera(9);
    let centre =
        |z: f64| cam.rotation.transpose() * (cam.ray_camera(4.5, 4.5) * z - cam.translation);
    let scene = |front_opacity: f64| {
        let mut c = GaussianCloud::new(0);
        c.push(
            centre(1.0),
            [1.0, 0.0, 0.0, 0.0],
            Vec3::repeat(0.02f64.ln()),
            logit(front_opacity),
            &[0.0; 3],
        );
        c.push(
            centre(2.0),
            [1.0, 0.0, 0.0, 0.0],
            Vec3::repeat(0.02f64.ln()),
            logit(0.9),
            &[0.0; 3],
        );
        c
    };
    let opts = SplatOptions::default();
    let nz_at = |o: f64| {
        render_splats(&scene(o), &cam, &opts)
            .unwrap()
            .buffers
            .nearz
            .get(4, 4)
    };
    let (below, above) = (nz_at(0.049), nz_at(0.051));
    let threshold =
        opts.nearz_threshold == 0.05 && (below - 2.0).abs() < 1e-12 && (above - 1.0).abs() < 1e-12;
    // The faint layer in front of a mesh at depth 1.5 does not occlude; the solid one does.
    let mesh = ScalarImage::filled(9, 9, 1.5);
    let faint = render_splats(&scene(0.049), &cam, &opts).unwrap().buffers;
    let maps = blend_maps(&faint.nearz, &mesh, &faint.alpha, 0.0).unwrap();
    let faint_hidden = !maps.occlusion.get(4, 4);
    let solid = render_splats(&scene(0.051), &cam, &opts).unwrap().buffers;
    let solid_shown = blend_maps(&solid.nearz, &mesh, &solid.alpha, 0.0)
        .unwrap()
        .occlusion
        .get(4, 4);
    outcome(
        at0 && at1 && strict && threshold && faint_hidden && solid_shown,
        format!(
            "A=0 head exact {at0}, A=1 hair exact {at1}, strict M_o {strict}, near-z 0.05 threshold {threshold} (0.049 -> z {below}, 0.051 -> z {above}), faint layer hidden {faint_hidden}, solid layer shown {solid_shown}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn anisotropic_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0) * 3.0,
                rng.random_range(-1.0..1.0) * 2.0,
                rng.random_range(-1.0..1.0),
            ) + Vec3::new(0.3, -0.2, 0.1)
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let a = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if a.norm() > 0.1 && a.norm() <= 1.0 {
            break nalgebra::Unit::new_normalize(a);
        }
    };
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..max_angle)).into_inner()
}

fn criterion_4() -> Outcome {
    let max_angle = 60f64.to_radians();
    let (mut rot_err, mut t_err, mut scale_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
        let src = anisotropic_points(&mut rng, 150);
        let r = random_rotation(&mut rng, max_angle);
        let t = Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let truth = RigidTransform {
            rotation: r,
            translation: t,
            scale: 1.0,
        };
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        match icp(&src, &dst, &IcpOptions::default()) {
            Ok(res) => {
                rot_err = rot_err.max((res.transform.rotation - r).norm());
                t_err = t_err.max((res.transform.translation - t).norm());
            }
            Err(_) => ok = false,
        }
        let s = (rng.random_range(0.5f64.ln()..2f64.ln())).exp();
        let sim = RigidTransform {
            rotation: r,
            translation: t,
            scale: s,
        };
        let dst: Vec<Vec3> = src.iter().map(|p| sim.apply(p)).collect();
        match icp(
            &src,
            &dst,
            &IcpOptions {
                with_scale: true,
                ..Default::default()
            },
        ) {
            Ok(res) => scale_err = scale_err.max((res.transform.scale - s).abs()),
            Err(_) => ok = false,
        }
    }
    outcome(
        ok && rot_err < ICP_ROT_TOL && t_err < ICP_T_TOL && scale_err < ICP_SCALE_TOL,
        format!(
            "100 rigid trials (<= 60 deg): max |R err|_F {rot_err:.2e} (tol {ICP_ROT_TOL:.0e}), max |t err| {t_err:.2e} (tol {ICP_T_TOL:.0e}); 100 similarity trials, scale in [0.5, 2]: max scale err {scale_err:.2e} (tol {ICP_SCALE_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn refs(records: &[FrameRecord]) -> Vec<&FrameRecord> {
    records.iter().collect()
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let cfg = SyntheticConfig::default();
    let scene = generate(&cfg).expect("fixture");
    let all = refs(&scene.records);
    let mut tc = TrainConfig::default();
    tc.joint.held_out = Some(HELD_OUT_FRAME);
    let mut avatar = blank_avatar(&scene.avatar, &cfg.texture, tc.seed).unwrap();

    train_face(&mut avatar, &all, &tc).unwrap();
    let rig = avatar.rig().unwrap();
    let face = evaluate_face(&avatar, &rig, &all).unwrap();

    let canonical: Vec<&FrameRecord> = all
        .iter()
        .copied()
        .filter(|r| r.frame == tc.hair.frame)
        .collect();
    train_hair(&mut avatar, &all, &tc).unwrap();
    let hair = evaluate_hair(&avatar, &canonical).unwrap();

    let held: Vec<&FrameRecord> = all
        .iter()
        .copied()
        .filter(|r| r.frame == HELD_OUT_FRAME)
        .collect();
    let rigid_only = evaluate_frames(&avatar, &held).unwrap();
    train_joint(&mut avatar, &all, &tc).unwrap();
    let joint = evaluate_frames(&avatar, &held).unwrap();
    let el = t.elapsed();
    let pass = face.psnr >= FACE_PSNR_MIN
        && face.depth_mae <= FACE_DEPTH_MAE_MAX
        && hair >= HAIR_PSNR_MIN
        && joint - rigid_only >= JOINT_GAIN_MIN
        && el < PIPELINE_BUDGET;
    outcome(
        pass,
        format!(
            "face psnr {:.2} dB (min {FACE_PSNR_MIN}), depth MAE {:.2e} (max {FACE_DEPTH_MAE_MAX:.0e}); hair masked psnr {hair:.2} dB (min {HAIR_PSNR_MIN}); held-out frame {HELD_OUT_FRAME}: rigid-only {rigid_only:.2} dB -> joint {joint:.2} dB (gain {:+.2}, min {JOINT_GAIN_MIN}); {:.0}s (budget {}s)",
            face.psnr,
            face.depth_mae,
            joint - rigid_only,
            el.as_secs_f64(),
            PIPELINE_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn hair_ablation(scene: &SyntheticScene, mode: DepthMode, early_stop: bool) -> f64 {
    let mut a = scene.avatar.clone();
    a.settings.splat.depth_mode = mode;
    a.settings.splat.early_stop = early_stop;
    a.hair = None;
    a.field = None;
    let mut tc = TrainConfig::default();
    tc.hair.iters = ABLATION_HAIR_ITERS;
    let recs = refs(&scene.records);
    train_hair(&mut a, &recs, &tc).unwrap();
    evaluate_frames(&a, &recs).unwrap()
}

fn criterion_6() -> Outcome {
    let cfg = SyntheticConfig {
        n_frames: 1,
        n_long_hair: OVERLAP_LONG_HAIR,
        exact_occlusion: true,
        ..Default::default()
    };
    let overlap = generate(&cfg).expect("overlap fixture");
    let nearz = hair_ablation(&overlap, DepthMode::NearZ, true);
    let accum = hair_ablation(&overlap, DepthMode::Accumulated, true);
    let no_stop = hair_ablation(&overlap, DepthMode::NearZ, false);

    let base = SyntheticConfig {
        n_frames: 4,
        ..Default::default()
    };
    let scene = generate(&base).expect("fixture");
    let recs = refs(&scene.records);
    let mut tc = TrainConfig::default();
    tc.face.iters = ABLATION_FACE_ITERS;
    let mut mae = [0.0; 2];
    for (k, enabled) in [true, false].into_iter().enumerate() {
        let mut a = blank_avatar(&scene.avatar, &base.texture, tc.seed).unwrap();
        a.displacement.enabled = enabled;
        train_face(&mut a, &recs, &tc).unwrap();
        mae[k] = evaluate_face(&a, &a.rig().unwrap(), &recs)
            .unwrap()
            .depth_mae;
    }
    outcome(
        nearz > accum && nearz >= no_stop && mae[0] < mae[1],
        format!(
            "overlap scene ({OVERLAP_LONG_HAIR} long-hair Gaussians, {ABLATION_HAIR_ITERS} iters): near-z {nearz:.3} dB > accumulated {accum:.3} dB; early-stop on {nearz:.3} dB >= off {no_stop:.3} dB; depth MAE with displacement {:.2e} < without {:.2e}",
            mae[0], mae[1]
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn small_config() -> SyntheticConfig {
    SyntheticConfig {
        resolution: 48,
        focal: 94.0,
        n_views: 3,
        n_frames: 3,
        n_hair: 60,
        ..Default::default()
    }
}

/// Generates a small fixture, runs all three stages and saves the avatar.
fn small_run(dir: &Path) -> (headsplat::avatar::Avatar, SyntheticScene) {
    let cfg = small_config();
    let scene = generate(&cfg).unwrap();
    let recs = refs(&scene.records);
    let mut tc = TrainConfig::default();
    tc.face.iters = 15;
    tc.hair.iters = 15;
    tc.hair.n_gaussians = 40;
    tc.hair.prune_every = 5;
    tc.joint.iters = 10;
    let mut a = blank_avatar(&scene.avatar, &cfg.texture, tc.seed).unwrap();
    train_face(&mut a, &recs, &tc).unwrap();
    train_hair(&mut a, &recs, &tc).unwrap();
    train_joint(&mut a, &recs, &tc).unwrap();
    a.save(dir, Some(&tc.to_toml())).unwrap();
    (a, scene)
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2, d3) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    let (trained, scene) = small_run(&d1);
    small_run(&d2);
    let (b1, b2) = (dir_bytes(&d1), dir_bytes(&d2));
    let reproducible = b1 == b2;
    let fixture = generate(&small_config()).unwrap().records == scene.records;

    let loaded = headsplat::avatar::Avatar::load(&d1).unwrap();
    let (r1, r2) = (trained.rig().unwrap(), loaded.rig().unwrap());
    let mut same = true;
    for r in &scene.records {
        same &= trained
            .render_frame(&r1, &r.params, &r.camera)
            .unwrap()
            .image
            == loaded
                .render_frame(&r2, &r.params, &r.camera)
                .unwrap()
                .image;
    }
    let cfg_text = std::fs::read_to_string(d1.join("config.toml")).unwrap();
    loaded.save(&d3, Some(&cfg_text)).unwrap();
    let resave = dir_bytes(&d3) == b1;
    outcome(
        reproducible && fixture && same && resave,
        format!(
            "seeded three-stage runs byte-identical {reproducible} ({} files), fixture reproducible {fixture}, trained vs saved+loaded renders bit-identical {same} ({} views), save-load-save bytes identical {resave}",
            b1.len(),
            scene.records.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut checked = 0;
    let mut ok = true;
    for (lat, lon) in [(3, 3), (4, 6), (6, 12), (12, 24), (9, 17)] {
        let model = head_model(lat, lon).unwrap();
        let mut mesh = model.template_mesh();
        for _ in 0..3 {
            let (v, f, e) = (mesh.vertices.len(), mesh.faces.len(), mesh.edges().len());
            let next = subdivide4(&mesh).unwrap();
            ok &= next.faces.len() == 4 * f && next.vertices.len() == v + e;
            checked += 1;
            mesh = next;
        }
    }
    outcome(
        ok,
        format!("{checked} subdivisions over 5 fixture heads: F' = 4F and V' = V + E all hold"),
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target has no sub-tests to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", criterion_1),
        ("brute-force splatting equivalence", criterion_2),
        ("blend identities", criterion_3),
        ("ICP recovery", criterion_4),
        ("synthetic pipeline recovery", criterion_5),
        ("ablation directionality", criterion_6),
        ("determinism and round-trip", criterion_7),
        ("subdivision formulas", criterion_8),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} ({name}): {} [{}] ({:.1}s)",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
