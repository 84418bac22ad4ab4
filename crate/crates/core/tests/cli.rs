//! End-to-end exercises of the command-line binary: synth determinism and
//! overwrite refusal, the train → infer → eval → report chain, the
//! zero-iteration ablation oracle, and hard errors on unknown config keys.

use std::path::Path;
use std::process::{Command, Output};

use demosaicformer::codec::{write_png, write_raw_bin};
use demosaicformer::image::{extend_to_rgb, mosaic, RgbImage};
use demosaicformer::metrics::psnr;
use demosaicformer::pattern::PatternSpec;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_demosaicformer");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("failed to launch binary")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn smooth_gt(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let grid = Array3::from_shape_fn((3, cells + 1, cells + 1), |_| rng.gen_range(0.0f32..1.0));
    let step = size as f32 / cells as f32;
    let data = Array3::from_shape_fn((3, size, size), |(ch, r, c)| {
        let (y, x) = (r as f32 / step, c as f32 / step);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let (y1, x1) = ((y0 + 1).min(cells), (x0 + 1).min(cells));
        grid[[ch, y0, x0]] * (1.0 - fy) * (1.0 - fx)
            + grid[[ch, y0, x1]] * (1.0 - fy) * fx
            + grid[[ch, y1, x0]] * fy * (1.0 - fx)
            + grid[[ch, y1, x1]] * fy * fx
    });
    RgbImage::new(data).unwrap()
}

fn write_gt_set(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let gt = smooth_gt(size, size / 8, &mut rng);
        write_png(&gt, &dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

/// Writes mosaiced raw inputs plus paired ground truth for validation.
fn write_val_set(raw_dir: &Path, gt_dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(raw_dir).unwrap();
    std::fs::create_dir_all(gt_dir).unwrap();
    let pattern = PatternSpec::default_hybridevs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let gt = smooth_gt(size, size / 8, &mut rng);
        let raw = mosaic(&gt, &pattern).unwrap();
        write_raw_bin(&raw, &raw_dir.join(format!("val{i:02}.bin"))).unwrap();
        write_png(&gt, &gt_dir.join(format!("val{i:02}.png"))).unwrap();
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    entries.sort();
    entries
}

const TINY_MODEL: &str = "\
[model]
coarse.channels = 4
coarse.n_rrg = 1
coarse.n_dab = 1
coarse.ca_reduction = 2
coarse.sa_kernel = 3
correction.base_dim = 4
correction.blocks = 1,1,1,1
correction.heads = 1,2,2,4
correction.refinement_blocks = 1
correction.ffn_expansion = 2.0
";

#[test]
fn synth_is_deterministic_and_refuses_to_clobber() {
    let root = tempfile::tempdir().unwrap();
    let gt = root.path().join("clean");
    write_gt_set(&gt, 4, 32, 10);
    let out_a = root.path().join("a");
    let out_b = root.path().join("b");

    for out in [&out_a, &out_b] {
        let o = run(&[
            "synth",
            "--seed",
            "7",
            "--set",
            &format!("synth.gt_dir={}", gt.display()),
            "--set",
            &format!("synth.out_dir={}", out.display()),
        ]);
        assert_ok(&o, "synth");
    }

    // byte-identical reruns under the same seed
    for sub in ["raw", "gt", "defects"] {
        assert_eq!(
            dir_bytes(&out_a.join(sub)),
            dir_bytes(&out_b.join(sub)),
            "{sub} differs between identically seeded runs"
        );
    }
    let manifest = std::fs::read_to_string(out_a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4, "manifest rows");
    assert_eq!(
        std::fs::read(out_a.join("manifest.tsv")).unwrap(),
        std::fs::read(out_b.join("manifest.tsv")).unwrap()
    );

    // refuses to clobber a non-empty output without --overwrite
    let o = run(&[
        "synth",
        "--seed",
        "7",
        "--set",
        &format!("synth.gt_dir={}", gt.display()),
        "--set",
        &format!("synth.out_dir={}", out_a.display()),
    ]);
    assert!(!o.status.success(), "expected overwrite refusal");
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("--overwrite"),
        "stderr should point at --overwrite"
    );

    // --overwrite allows the rerun
    let o = run(&[
        "synth",
        "--seed",
        "7",
        "--overwrite",
        "--set",
        &format!("synth.gt_dir={}", gt.display()),
        "--set",
        &format!("synth.out_dir={}", out_a.display()),
    ]);
    assert_ok(&o, "synth --overwrite");
}

#[test]
fn synth_rejects_images_with_odd_dimensions_per_file() {
    let root = tempfile::tempdir().unwrap();
    let gt = root.path().join("clean");
    write_gt_set(&gt, 2, 32, 11);
    // one image whose dimensions are not multiples of 4
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let odd = smooth_gt(30, 5, &mut rng);
    write_png(&odd, &gt.join("odd.png")).unwrap();

    let out = root.path().join("out");
    let o = run(&[
        "synth",
        "--set",
        &format!("synth.gt_dir={}", gt.display()),
        "--set",
        &format!("synth.out_dir={}", out.display()),
    ]);
    assert!(!o.status.success(), "per-file failure must yield nonzero exit");
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("dims not multiple of 4"),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    // the good files still went through
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
}

#[test]
fn train_infer_eval_report_chain() {
    let root = tempfile::tempdir().unwrap();
    let train_gt = root.path().join("train_gt");
    write_gt_set(&train_gt, 4, 32, 20);
    let (val_raw, val_gt) = (root.path().join("val_raw"), root.path().join("val_gt"));
    write_val_set(&val_raw, &val_gt, 2, 32, 21);
    let run_dir = root.path().join("run");

    let conf = root.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "{TINY_MODEL}\
[schedule]
stages = 16:2:20
base_lr = 1e-3
final_lr = 1e-5
flat_first_stage = false
[train]
val_interval = 10
checkpoint_interval = 0
augment = false
[data]
gt_dir = {train_gt}
val_raw_dir = {val_raw}
val_gt_dir = {val_gt}
[out]
dir = {run_dir}
",
            train_gt = train_gt.display(),
            val_raw = val_raw.display(),
            val_gt = val_gt.display(),
            run_dir = run_dir.display(),
        ),
    )
    .unwrap();

    let o = run(&["train", "--config", conf.to_str().unwrap(), "--seed", "3"]);
    assert_ok(&o, "train");
    assert!(run_dir.join("last.ckpt").exists());
    assert!(run_dir.join("best.ckpt").exists());
    assert!(run_dir.join("metrics.log").exists());

    // inference over the validation raws, with a config scoped to infer keys
    let pred_dir = root.path().join("pred");
    let slim = root.path().join("infer.conf");
    std::fs::write(&slim, TINY_MODEL).unwrap();
    let o = run(&[
        "infer",
        "--config",
        slim.to_str().unwrap(),
        "--set",
        &format!("infer.checkpoint={}", run_dir.join("best.ckpt").display()),
        "--set",
        &format!("infer.raw_dir={}", val_raw.display()),
        "--set",
        &format!("infer.out_dir={}", pred_dir.display()),
    ]);
    assert_ok(&o, "infer");
    assert!(pred_dir.join("val00.png").exists());
    assert!(pred_dir.join("val01.png").exists());

    // evaluation prints a table with one row per pair
    let o = run(&[
        "eval",
        "--set",
        &format!("eval.pred_dir={}", pred_dir.display()),
        "--set",
        &format!("eval.gt_dir={}", val_gt.display()),
    ]);
    assert_ok(&o, "eval");
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("val00") && table.contains("val01"), "table: {table}");

    // report writes the same table plus a summary to a file
    let report_path = root.path().join("report.txt");
    let o = run(&[
        "report",
        "--set",
        &format!("eval.pred_dir={}", pred_dir.display()),
        "--set",
        &format!("eval.gt_dir={}", val_gt.display()),
        "--set",
        &format!("report.out={}", report_path.display()),
    ]);
    assert_ok(&o, "report");
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(report.contains("mean PSNR"), "report: {report}");
}

#[test]
fn ablate_zero_iterations_matches_extend_only_oracle() {
    let root = tempfile::tempdir().unwrap();
    let train_gt = root.path().join("train_gt");
    write_gt_set(&train_gt, 2, 32, 30);
    let (val_raw, val_gt) = (root.path().join("val_raw"), root.path().join("val_gt"));
    write_val_set(&val_raw, &val_gt, 2, 32, 31);

    // oracle: untrained models are the identity, so their prediction is the
    // sparse channel extension of the raw input
    let pattern = PatternSpec::default_hybridevs();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut expect = 0.0f64;
    for _ in 0..2 {
        let gt = smooth_gt(32, 4, &mut rng);
        let raw = mosaic(&gt, &pattern).unwrap();
        // compare against the quantized PNG on disk, exactly as eval sees it
        let gt_png = RgbImage::from_quantized8(&gt.quantize8()).unwrap();
        expect += psnr(&extend_to_rgb(&raw), &gt_png).unwrap();
    }
    expect /= 2.0;

    let conf = root.path().join("ablate.conf");
    std::fs::write(
        &conf,
        format!(
            "{TINY_MODEL}\
[data]
gt_dir = {train_gt}
val_raw_dir = {val_raw}
val_gt_dir = {val_gt}
[ablate]
variants = coarse_first+msgm, coarse_first+simple_concat
iterations = 0
",
            train_gt = train_gt.display(),
            val_raw = val_raw.display(),
            val_gt = val_gt.display(),
        ),
    )
    .unwrap();

    let o = run(&["ablate", "--config", conf.to_str().unwrap()]);
    assert_ok(&o, "ablate");
    let table = String::from_utf8_lossy(&o.stdout);
    let mut variant_rows = 0;
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0].starts_with("coarse_first") {
            variant_rows += 1;
            let got: f64 = cols[1].parse().unwrap();
            assert!(
                (got - expect).abs() < 1e-3,
                "untrained {} PSNR {got} differs from extend-only oracle {expect}"
            , cols[0]);
        }
    }
    assert_eq!(variant_rows, 2, "table: {table}");
    assert!(table.lines().any(|l| l.starts_with("baseline\t")), "baseline anchor row missing");
}

#[test]
fn unknown_config_keys_are_hard_errors() {
    let root = tempfile::tempdir().unwrap();
    // a valid self-paired evaluation, so the only problem is the typo key
    let imgs = root.path().join("imgs");
    write_gt_set(&imgs, 1, 16, 40);
    let conf = root.path().join("bad.conf");
    std::fs::write(&conf, "[model]\nchannles = 64\n").unwrap();
    let o = run(&[
        "eval",
        "--config",
        conf.to_str().unwrap(),
        "--set",
        &format!("eval.pred_dir={}", imgs.display()),
        "--set",
        &format!("eval.gt_dir={}", imgs.display()),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.channles"), "stderr: {err}");
}

#[test]
fn rejects_non_cpu_device() {
    let o = run(&["eval", "--device", "cuda:0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("cpu"));
}
