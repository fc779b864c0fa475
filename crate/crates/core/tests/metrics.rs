use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styleflow::data::{load_image, save_png};
use styleflow::error::Error;
use styleflow::losses::aligned_style_loss;
use styleflow::metrics::{evaluate_run, ssim, style_distance};
use styleflow::perceptual::PerceptualEncoder;
use styleflow::tensor::Tensor;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ssim")
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- ssim ------------------------------------------------------------------

#[test]
fn ssim_matches_the_reference_implementation() {
    let text = fs::read_to_string(fixtures().join("expected.json")).unwrap();
    let expected: BTreeMap<String, f64> = serde_json::from_str(&text).unwrap();
    assert_eq!(expected.len(), 10);
    for (name, want) in expected {
        let a = load_image::<f64>(&fixtures().join(format!("{name}_a.png")), None, None).unwrap();
        let b = load_image::<f64>(&fixtures().join(format!("{name}_b.png")), None, None).unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-4, "{name}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let a = image(20, 24, 1);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_black_against_white_is_near_zero() {
    // Constant images: (2 * 0 * 1 + C1) / (0 + 1 + C1) * (0 + C2) / (0 + C2) = C1 / (1 + C1).
    let black = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
    let white = Tensor::<f64>::full(&[1, 3, 16, 16], 1.0);
    let s = ssim(&black, &white).unwrap();
    assert!(s < 0.01);
    assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9, "{s}");
}

#[test]
fn ssim_is_symmetric() {
    for seed in 0..5 {
        let (a, b) = (image(17, 23, seed), image(17, 23, seed + 50));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn ssim_rejects_bad_shapes() {
    assert!(matches!(ssim(&image(16, 16, 1), &image(16, 17, 2)), Err(Error::Dimension(_))));
    assert!(matches!(ssim(&image(8, 8, 1), &image(8, 8, 2)), Err(Error::Dimension(_))));
}

// ---- style distance --------------------------------------------------------

#[test]
fn style_distance_is_the_full_aligned_style_loss() {
    let enc = PerceptualEncoder::<f64>::stub(0);
    let (a, b) = (image(16, 16, 3), image(16, 16, 4));
    assert_eq!(style_distance(&a, &a, &enc).unwrap(), 0.0);
    let full = aligned_style_loss(&a, &b, &enc, 1.0).unwrap();
    assert_eq!(style_distance(&a, &b, &enc).unwrap(), full);
}

// ---- evaluate_run ----------------------------------------------------------

struct RunDirs {
    _root: tempfile::TempDir,
    out: PathBuf,
    src: PathBuf,
    reference: PathBuf,
}

fn run_dirs(names: &[&str]) -> RunDirs {
    let root = tempfile::tempdir().unwrap();
    let [out, src, reference] = ["out", "src", "ref"].map(|d| root.path().join(d));
    for d in [&out, &src, &reference] {
        fs::create_dir_all(d).unwrap();
    }
    for (i, name) in names.iter().enumerate() {
        save_png(&image(16, 16, i as u64), &src.join(name)).unwrap();
        save_png(&image(16, 16, 100 + i as u64), &reference.join(name)).unwrap();
    }
    RunDirs {
        _root: root,
        out,
        src,
        reference,
    }
}

#[test]
fn copied_sources_score_ssim_one() {
    let dirs = run_dirs(&["a.png", "b.png"]);
    for name in ["a.png", "b.png"] {
        fs::copy(dirs.src.join(name), dirs.out.join(name)).unwrap();
    }
    let enc = PerceptualEncoder::<f64>::stub(0);
    let report = evaluate_run(&dirs.out, &dirs.src, &dirs.reference, &enc).unwrap();
    assert_eq!(report.summary.count, 2);
    assert!((report.summary.mean_ssim - 1.0).abs() < 1e-12);
}

#[test]
fn summary_means_recompute_from_records_and_skip_missing_counterparts() {
    let dirs = run_dirs(&["b.png", "a.png", "c.png"]);
    for (i, name) in ["c.png", "a.png", "b.png", "orphan.png"].iter().enumerate() {
        save_png(&image(16, 16, 200 + i as u64), &dirs.out.join(name)).unwrap();
    }
    let enc = PerceptualEncoder::<f64>::stub(0);
    let report = evaluate_run(&dirs.out, &dirs.src, &dirs.reference, &enc).unwrap();
    let names: Vec<&str> = report.records.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    assert_eq!(report.summary.missing, ["orphan.png"]);
    let n = report.records.len() as f64;
    let ssim_mean = report.records.iter().map(|r| r.ssim).sum::<f64>() / n;
    let style_mean = report.records.iter().map(|r| r.style_distance).sum::<f64>() / n;
    assert!((report.summary.mean_ssim - ssim_mean).abs() < 1e-12);
    assert!((report.summary.mean_style_distance - style_mean).abs() < 1e-12);

    // Each record equals a direct evaluation of its files.
    let first = &report.records[0];
    let load = |d: &Path| load_image::<f64>(&d.join("a.png"), None, None).unwrap();
    assert_eq!(first.ssim, ssim(&load(&dirs.out), &load(&dirs.src)).unwrap());
    assert_eq!(
        first.style_distance,
        style_distance(&load(&dirs.out), &load(&dirs.reference), &enc).unwrap()
    );

    let again = evaluate_run(&dirs.out, &dirs.src, &dirs.reference, &enc).unwrap();
    assert_eq!(again, report);
}

#[test]
fn empty_output_directory_is_an_error() {
    let dirs = run_dirs(&["a.png"]);
    let enc = PerceptualEncoder::<f64>::stub(0);
    assert!(evaluate_run(&dirs.out, &dirs.src, &dirs.reference, &enc).is_err());
}

#[test]
fn report_files_hold_records_summary_and_scatter() {
    let dirs = run_dirs(&["a.png", "b.png"]);
    for name in ["a.png", "b.png"] {
        fs::copy(dirs.reference.join(name), dirs.out.join(name)).unwrap();
    }
    let enc = PerceptualEncoder::<f64>::stub(0);
    let report = evaluate_run(&dirs.out, &dirs.src, &dirs.reference, &enc).unwrap();
    let path = dirs.out.parent().unwrap().join("report.jsonl");
    let scatter = report.write(&path).unwrap();

    let lines: Vec<serde_json::Value> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["name"], "a.png");
    assert_eq!(lines[0]["style_distance"], 0.0);
    assert_eq!(lines[2]["summary"]["count"], 2);

    let rows: Vec<Vec<f64>> = fs::read_to_string(scatter)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows, report.records.iter().map(|r| vec![r.ssim, r.style_distance]).collect::<Vec<_>>());
}
