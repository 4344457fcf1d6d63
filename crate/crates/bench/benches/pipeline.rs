use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use headsplat::optim::{train_face, train_hair, train_joint, TrainConfig};
use headsplat::raster::rasterize;
use headsplat::splat::{render_splats, splat_backward};
use headsplat_bench::bench_scene;

fn render(c: &mut Criterion) {
    let s = bench_scene(128);
    let a = &s.avatar;
    let rig = a.rig().unwrap();
    let r = &s.records[0];
    let head = a.render_head(&rig, &r.params, &r.camera, false).unwrap();
    let cloud = a.pose_hair(&rig, &r.params).unwrap().unwrap().cloud;
    let opts = a.settings.splat;

    c.bench_function("rasterize", |b| {
        b.iter(|| rasterize(&head.mesh, &r.camera).unwrap())
    });
    c.bench_function("decode_face", |b| {
        let dirs = headsplat::avatar::view_dirs(&r.camera);
        b.iter(|| {
            a.textures
                .decode_face(&head.raster, &dirs, &r.params.psi, &a.decoder, false)
                .unwrap()
        })
    });
    c.bench_function("render_splats", |b| {
        b.iter(|| render_splats(&cloud, &r.camera, &opts).unwrap())
    });
    c.bench_function("splat_backward", |b| {
        let fwd = render_splats(&cloud, &r.camera, &opts).unwrap();
        let n = r.camera.width * r.camera.height;
        let gc = vec![[1.0, 0.5, 0.25]; n];
        let ga = vec![0.1; n];
        b.iter(|| splat_backward(&cloud, &r.camera, &opts, &fwd, &gc, &ga).unwrap())
    });
    c.bench_function("render_frame", |b| {
        b.iter(|| a.render_frame(&rig, &r.params, &r.camera).unwrap())
    });
}

fn stages(c: &mut Criterion) {
    let s = bench_scene(64);
    let refs: Vec<_> = s.records.iter().collect();
    let mut cfg = TrainConfig::default();
    cfg.face.iters = 5;
    cfg.hair.iters = 5;
    cfg.joint.iters = 5;
    let mut g = c.benchmark_group("stage_5_iters");
    g.sample_size(10);
    g.bench_function("face", |b| {
        b.iter_batched(
            || s.avatar.clone(),
            |mut a| train_face(&mut a, &refs, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("hair", |b| {
        b.iter_batched(
            || s.avatar.clone(),
            |mut a| train_hair(&mut a, &refs, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.bench_function("joint", |b| {
        b.iter_batched(
            || s.avatar.clone(),
            |mut a| train_joint(&mut a, &refs, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, render, stages);
criterion_main!(benches);
