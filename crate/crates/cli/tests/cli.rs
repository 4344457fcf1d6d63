use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use headsplat::avatar::Avatar;
use headsplat::dataset::load_records;
use headsplat::io::{quantize_u8, read_pfm, read_png_gray};

const FIXTURE: &str = "resolution = 32\nn_views = 2\nn_frames = 2\nn_hair = 40\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headsplat"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn fixture() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("syn.toml"), FIXTURE).unwrap();
    ok(
        t.path(),
        &["gen-synthetic", "--config", "syn.toml", "--out", "data"],
    );
    t
}

fn mean_row(csv_path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let last = rows.last().unwrap();
    assert_eq!(&last[0], "mean");
    last.iter().map(str::to_string).collect()
}

#[test]
fn render_of_ground_truth_matches_frames() {
    let t = fixture();
    let d = t.path();
    ok(
        d,
        &[
            "render",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--out",
            "r",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--renders",
            "r",
            "--data",
            "data/frames",
            "--out",
            "e.csv",
        ],
    );
    let m = mean_row(&d.join("e.csv"));
    assert_eq!(m[2].parse::<f64>().unwrap(), 99.0);
    assert!((m[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn eval_of_identical_renders_reports_unit_ssim() {
    let t = fixture();
    let d = t.path();
    ok(
        d,
        &[
            "eval",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--out",
            "e.csv",
        ],
    );
    let m = mean_row(&d.join("e.csv"));
    assert!(m[2].parse::<f64>().unwrap() > 40.0);
    // Compare the stored frames with themselves by pointing the render dir at copies.
    let r = d.join("copies");
    fs::create_dir(&r).unwrap();
    for e in fs::read_dir(d.join("data/frames")).unwrap() {
        let p = e.unwrap().path();
        let n = p.file_name().unwrap().to_str().unwrap().to_string();
        if let Some(s) = n.strip_suffix("_image.png") {
            fs::copy(&p, r.join(format!("{s}.png"))).unwrap();
        }
    }
    ok(
        d,
        &[
            "eval",
            "--renders",
            "copies",
            "--data",
            "data/frames",
            "--out",
            "same.csv",
        ],
    );
    let m = mean_row(&d.join("same.csv"));
    assert_eq!(m[2].parse::<f64>().unwrap(), 99.0);
    assert!((m[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn blend_map_dump_matches_in_memory_buffers() {
    let t = fixture();
    let d = t.path();
    ok(
        d,
        &[
            "dump-blend-maps",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--frame",
            "1",
            "--view",
            "0",
            "--out",
            "m",
        ],
    );
    let a = Avatar::load(&d.join("data/gt")).unwrap();
    let recs = load_records(&d.join("data/frames")).unwrap();
    let r = recs.iter().find(|r| r.frame == 1 && r.view == 0).unwrap();
    let maps = a
        .render_frame(&a.rig().unwrap(), &r.params, &r.camera)
        .unwrap()
        .hair
        .unwrap()
        .maps;
    let m = d.join("m");

    let occ = read_png_gray(&m.join("occlusion.png")).unwrap();
    assert!(occ
        .data
        .iter()
        .zip(&maps.occlusion.data)
        .all(|(p, &o)| *p == if o { 1.0 } else { 0.0 }));
    for (name, img) in [
        ("occlusion_blurred", &maps.soft),
        ("hair_alpha", &maps.hair_alpha),
    ] {
        let png = read_png_gray(&m.join(format!("{name}.png"))).unwrap();
        assert!(
            png.data
                .iter()
                .zip(&img.data)
                .all(|(p, &v)| (p * 255.0).round() as u8 == quantize_u8(v)),
            "{name}"
        );
        let pfm = read_pfm(&m.join(format!("{name}.pfm"))).unwrap();
        assert_eq!(pfm.dims(), img.dims());
        assert!(
            pfm.data
                .iter()
                .zip(&img.data)
                .all(|(p, &v)| *p == v as f32 as f64),
            "{name}"
        );
    }
    assert!(maps.hair_alpha.data.iter().any(|&v| v > 0.0));

    ok(
        d,
        &[
            "dump-blend-maps",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--frame",
            "1",
            "--view",
            "0",
            "--out",
            "again",
        ],
    );
    for f in [
        "occlusion.png",
        "occlusion_blurred.png",
        "occlusion_blurred.pfm",
        "hair_alpha.png",
        "hair_alpha.pfm",
    ] {
        assert_eq!(
            fs::read(m.join(f)).unwrap(),
            fs::read(d.join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ablation_flags_change_the_blend() {
    let t = fixture();
    let d = t.path();
    let dump = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "dump-blend-maps",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--frame",
            "0",
            "--view",
            "1",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        ok(d, &args);
        fs::read(d.join(out).join("hair_alpha.pfm")).unwrap()
    };
    let base = dump("base", &[]);
    assert_eq!(
        base,
        dump("explicit", &["--blend-mode", "nearz", "--early-stop", "on"])
    );
    assert_ne!(base, dump("all", &["--early-stop", "off"]));
}

#[test]
fn training_stages_chain_and_log() {
    let t = fixture();
    let d = t.path();
    ok(
        d,
        &[
            "train-face",
            "--avatar",
            "data/init",
            "--data",
            "data/frames",
            "--out",
            "face",
            "--iters",
            "3",
            "--seed",
            "5",
        ],
    );
    ok(
        d,
        &[
            "train-hair",
            "--avatar",
            "face",
            "--data",
            "data/frames",
            "--out",
            "hair",
            "--iters",
            "3",
            "--early-stop",
            "off",
        ],
    );
    ok(
        d,
        &[
            "train-joint",
            "--avatar",
            "hair",
            "--data",
            "data/frames",
            "--out",
            "joint",
            "--iters",
            "2",
            "--views",
            "1",
        ],
    );
    for s in ["face", "hair", "joint"] {
        let mut r = csv::Reader::from_path(d.join(s).join("log.csv")).unwrap();
        assert!(r.headers().unwrap().iter().any(|h| h == "total"), "{s}");
        assert!(r.records().count() >= 2, "{s}");
    }
    let cfg = fs::read_to_string(d.join("face/config.toml")).unwrap();
    assert!(cfg.contains("seed = 5"));
}

#[test]
fn swap_and_edit_write_avatars() {
    let t = fixture();
    let d = t.path();
    ok(
        d,
        &[
            "swap-hair",
            "--face",
            "data/init",
            "--donor",
            "data/gt",
            "--out",
            "sw",
        ],
    );
    assert!(d.join("sw/manifest.toml").exists());
    ok(
        d,
        &[
            "edit-texture",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--painted",
            "data/frames/f0000_v00_image.png",
            "--mask",
            "data/frames/f0000_v00_coverage.png",
            "--frame",
            "0",
            "--view",
            "0",
            "--iters",
            "2",
            "--out",
            "ed",
        ],
    );
    assert!(d.join("ed/log.csv").exists());
}

#[test]
fn bad_input_fails_without_leaving_output() {
    let t = fixture();
    let d = t.path();
    let o = run(
        d,
        &[
            "render",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--out",
            "r",
            "--bogus",
        ],
    );
    assert!(!o.status.success());
    let o = run(
        d,
        &[
            "render",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--out",
            "r",
            "--views",
            "9",
        ],
    );
    assert!(!o.status.success());
    assert!(!d.join("r").exists());
    let o = run(
        d,
        &[
            "dump-blend-maps",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--frame",
            "7",
            "--view",
            "0",
            "--out",
            "m",
        ],
    );
    assert!(!o.status.success());
    assert!(!d.join("m").exists());
    let o = run(
        d,
        &[
            "render",
            "--avatar",
            "data/gt",
            "--data",
            "data/frames",
            "--out",
            "r",
            "--blend-mode",
            "other",
        ],
    );
    assert!(!o.status.success());
}
