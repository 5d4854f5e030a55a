//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Every tolerance is pinned below.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pct_core::cloud::{read_labels, read_point_bin};
use pct_core::fusion::{fuse, transfer_labels};
use pct_core::metrics::{emd_exact, emd_exact_f64, emd_sinkhorn, ConfusionMatrix};
use pct_core::neural::gradcheck::run_gradcheck;
use pct_core::neural::{atm_train_from, atm_translate, nets, stm_train, stm_translate, GanTrainConfig, NetParams};
use pct_core::projection::{backproject, project, BeamModel, RangeImage};
use pct_core::sampling::{cap_points, upsample};
use pct_core::simulator::{build_scene, degrade, parse_trajectory, raycast_scan, DegradeSpec, TOY_SCENE, TOY_TRAJECTORY};
use pct_core::{LabeledCloud, PointCloud, SemanticClassMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIOU_TOL: f64 = 0.1;
const EMD_ORACLE_TOL: f64 = 1e-9;
const EMD_TRANSLATION_REL_TOL: f64 = 1e-9;
const SINKHORN_REL_TOL: f64 = 0.05;
const ROUND_TRIP_TOL_M: f64 = 1e-5;
const GRADCHECK_INSTANCES: usize = 50;
const ATM_RATIO: f64 = 0.1;
const STM_MIN_PEARSON: f64 = 0.9;
const STM_FRACTION_REL_TOL: f64 = 0.1;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [0; 3].map(|_| rng.random_range(-scale..scale)))
        .collect()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Minimum over every bijection, by Heap's permutation algorithm.
fn brute_force_emd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| dist(&a[i], &b[j])).sum::<f64>();
    let mut best = cost(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            let swap = if i % 2 == 0 { 0 } else { c[i] };
            perm.swap(swap, i);
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn toy_scans(beam: &BeamModel) -> Vec<LabeledCloud> {
    let scene = build_scene(TOY_SCENE, &SemanticClassMap::default()).unwrap();
    parse_trajectory(TOY_TRAJECTORY)
        .unwrap()
        .iter()
        .map(|pose| raycast_scan(&scene, pose, beam).unwrap())
        .collect()
}

fn miou_aggregation() -> Verdict {
    // Per-class IoU rows (percent) with their printed means.
    let rows: [(&[f64], f64); 2] = [
        (
            &[
                95.7, 25.0, 57.0, 62.1, 46.4, 63.4, 77.3, 0.0, 93.0, 47.9, 80.5, 2.2, 89.7, 58.6, 89.5, 66.5, 78.0,
                64.6, 50.1,
            ],
            60.3,
        ),
        (
            &[55.6, 45.1, 66.9, 44.4, 73.9, 45.4, 41.6, 14.5, 76.1, 7.9, 57.0, 54.1, 75.3],
            50.6,
        ),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (iou, printed) in rows {
        // Class c+1 gets tp = 10·IoU and the rest of 1000 points predicted
        // as the ignore class, so its IoU is exactly the row value.
        let mut cm = ConfusionMatrix::new(iou.len() + 1, 0);
        for (c, &v) in iou.iter().enumerate() {
            let tp = (v * 10.0).round() as u64;
            cm.add(c as u32 + 1, c as u32 + 1, tp).unwrap();
            cm.add(c as u32 + 1, 0, 1000 - tp).unwrap();
        }
        let mean = 100.0 * cm.miou().unwrap().mean;
        ok &= (mean - printed).abs() <= MIOU_TOL;
        details.push(format!("{mean:.3} vs printed {printed}"));
    }
    check(ok, format!("{} (tol {MIOU_TOL})", details.join(", ")))
}

fn emd_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let a = random_points(&mut rng, n, 5.0);
        let b = random_points(&mut rng, n, 5.0);
        let exact = emd_exact_f64(&a, &b).unwrap().total_cost;
        worst = worst.max((exact - brute_force_emd(&a, &b)).abs());
    }
    check(worst <= EMD_ORACLE_TOL, format!("100 pairs, max |diff| {worst:.2e} (tol {EMD_ORACLE_TOL:e})"))
}

fn emd_translation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_points(&mut rng, 64, 10.0);
        let t = [0; 3].map(|_| rng.random_range(-3.0..3.0));
        let moved: Vec<[f64; 3]> = x.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        let expected = 64.0 * dist(&t, &[0.0; 3]);
        let got = emd_exact_f64(&x, &moved).unwrap().total_cost;
        worst = worst.max((got - expected).abs() / expected);
    }
    check(
        worst <= EMD_TRANSLATION_REL_TOL,
        format!("20 clouds N=64, max rel err {worst:.2e} (tol {EMD_TRANSLATION_REL_TOL:e})"),
    )
}

fn sinkhorn_approximation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cloud = |rng: &mut ChaCha8Rng| {
            PointCloud::from_f64(&random_points(rng, 32, 1.0), None).unwrap()
        };
        let (a, b) = (cloud(&mut rng), cloud(&mut rng));
        let exact = emd_exact(&a, &b).unwrap().total_cost;
        let approx = emd_sinkhorn(&a, &b, 0.01, 1000).unwrap().cost;
        worst = worst.max((approx - exact).abs() / exact);
    }
    check(
        worst <= SINKHORN_REL_TOL,
        format!("20 pairs N=32, eps 0.01, max rel err {:.3}% (tol {}%)", 100.0 * worst, 100.0 * SINKHORN_REL_TOL),
    )
}

fn projection_round_trip() -> Verdict {
    let beam = BeamModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut points = 0;
    for _ in 0..10 {
        let depth = (0..beam.rows * beam.cols)
            .map(|_| if rng.random_bool(0.6) { rng.random_range(1.0..80.0) } else { 0.0 })
            .collect();
        let image = RangeImage::from_depth(beam.rows, beam.cols, depth).unwrap();
        let cloud = backproject(&image, &beam).unwrap();
        let again = backproject(&project(&cloud, &beam).unwrap(), &beam).unwrap();
        if again.len() != cloud.len() {
            return Err(format!("{} points became {}", cloud.len(), again.len()));
        }
        for i in 0..cloud.len() {
            worst = worst.max(dist(&cloud.point(i), &again.point(i)));
        }
        points += cloud.len();
    }
    check(
        worst <= ROUND_TRIP_TOL_M,
        format!("10 images, {points} points, max error {worst:.2e} m (tol {ROUND_TRIP_TOL_M:e})"),
    )
}

fn gradient_checks() -> Verdict {
    let reports = run_gradcheck(GRADCHECK_INSTANCES, 6).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.kind).collect();
    check(
        failed.is_empty(),
        format!(
            "{} kinds x {GRADCHECK_INSTANCES} instances, max rel err {worst:.2e} (tol 1e-4){}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn atm_regression() -> Verdict {
    let scan = &toy_scans(&BeamModel {
        rows: 32,
        cols: 128,
        max_range: 60.0,
        ..Default::default()
    })[0];
    let capped = cap_points(scan, 128, 1).unwrap().cloud;
    let mut g = nets::generator_a(0, 60.0, nets::DEFAULT_MAX_OFFSET).unwrap();
    let head = format!("l{}.weight", g.last_param_layer().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in g.params.get_mut(&head).unwrap().values_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    let d = nets::discriminator_a(1, 60.0).unwrap();
    let config = GanTrainConfig {
        lambda_adv_a: 0.0,
        steps: 200,
        batch_size: 1,
        ..Default::default()
    };
    let up = upsample(&capped, 2, config.upsample_neighbors).unwrap();
    let emd = |g: &NetParams| emd_exact(&up, &atm_translate(g, &capped, 2).unwrap()).unwrap().total_cost;
    let before = emd(&g);
    let out = atm_train_from(g, d, std::slice::from_ref(&capped), std::slice::from_ref(&capped), &config).map_err(|e| e.to_string())?;
    let after = emd(&out.generator);
    check(
        after <= ATM_RATIO * before,
        format!("EMD {before:.4} -> {after:.4} over 200 steps, ratio {:.4} (limit {ATM_RATIO})", after / before),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mean_profile(images: &[RangeImage]) -> Vec<f64> {
    let mut acc = vec![0.0; images[0].rows()];
    for img in images {
        for (a, v) in acc.iter_mut().zip(img.row_profile()) {
            *a += v / images.len() as f64;
        }
    }
    acc
}

fn mean_fraction(images: &[RangeImage]) -> f64 {
    images.iter().map(RangeImage::occupied_fraction).sum::<f64>() / images.len() as f64
}

fn stm_gap_recovery() -> Verdict {
    let beam = BeamModel {
        rows: 32,
        cols: 128,
        max_range: 60.0,
        ..Default::default()
    };
    let source: Vec<RangeImage> = toy_scans(&beam).iter().map(|s| project(&s.cloud, &beam).unwrap()).collect();
    let target: Vec<RangeImage> = source
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let spec = DegradeSpec {
                keep_row_stride: 2,
                pixel_dropout_p: 0.3,
                max_range: beam.max_range,
                seed: 100 + i as u64,
                ..Default::default()
            };
            degrade(img, &spec).unwrap()
        })
        .collect();
    let steps = 1600;
    // A faster discriminator and a decaying second half keep the kept
    // fraction from oscillating around the target.
    let config = GanTrainConfig {
        steps,
        batch_size: 4,
        seed: 8,
        lr_scale_d: 4.0,
        lr_decay_start: 0.5,
        ..Default::default()
    };
    let out = stm_train(&source, &target, &config).map_err(|e| e.to_string())?;
    let translated: Vec<RangeImage> = source.iter().map(|s| stm_translate(&out.generator, s).unwrap()).collect();
    let r = pearson(&mean_profile(&translated), &mean_profile(&target));
    let (got, want) = (mean_fraction(&translated), mean_fraction(&target));
    let rel = (got - want).abs() / want;
    check(
        r > STM_MIN_PEARSON && rel <= STM_FRACTION_REL_TOL,
        format!(
            "{steps} steps, row-profile pearson {r:.4} (min {STM_MIN_PEARSON}), kept fraction {got:.4} vs {want:.4}, rel {:.2}% (tol {}%)",
            100.0 * rel,
            100.0 * STM_FRACTION_REL_TOL
        ),
    )
}

fn fusion_invariants() -> Verdict {
    let beam = BeamModel {
        rows: 16,
        cols: 64,
        max_range: 50.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut labelled = 0;
    for instance in 0..50 {
        let n = rng.random_range(1..=200);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let (yaw, pitch, r): (f64, f64, f64) =
                    (rng.random_range(-PI..PI), rng.random_range(-0.45..0.06), rng.random_range(1.0..55.0));
                [r * pitch.cos() * yaw.cos(), r * pitch.cos() * yaw.sin(), r * pitch.sin()]
            })
            .collect();
        let cloud = PointCloud::from_f64(&pts, None).unwrap();
        let cells = beam.rows * beam.cols;
        let mask: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
        let wider: Vec<bool> = mask.iter().map(|&m| m || rng.random_bool(0.3)).collect();
        let guide = |m: &[bool]| {
            RangeImage::from_depth(beam.rows, beam.cols, m.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())
                .unwrap()
        };
        let narrow = fuse(&cloud, &guide(&mask), &beam).unwrap();
        let wide = fuse(&cloud, &guide(&wider), &beam).unwrap();
        let mut j = 0;
        for (k, p) in narrow.cloud.points().iter().enumerate() {
            while j < cloud.len() && cloud.points()[j] != *p {
                j += 1;
            }
            if j == cloud.len() || narrow.kept[k] != j {
                return Err(format!("instance {instance}: output is not an ordered subsequence"));
            }
            j += 1;
        }
        if !narrow.kept.iter().all(|i| wide.kept.contains(i)) {
            return Err(format!("instance {instance}: enlarging the guide removed points"));
        }

        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(1..20)).collect();
        let original = LabeledCloud::new(cloud.clone(), labels.clone()).unwrap();
        let queries: Vec<[f64; 3]> = (0..50)
            .map(|q| if q % 5 == 0 { pts[rng.random_range(0..n)] } else { random_points(&mut rng, 1, 40.0)[0] })
            .collect();
        let queries = PointCloud::from_f64(&queries, None).unwrap();
        let got = transfer_labels(&original, &queries).unwrap();
        let stored = cloud.to_f64();
        for (q, &label) in queries.to_f64().iter().zip(got.labels()) {
            let mut best = (f64::INFINITY, 0);
            for (i, p) in stored.iter().enumerate() {
                let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
                if d < best.0 {
                    best = (d, i);
                }
            }
            if labels[best.1] != label {
                return Err(format!("instance {instance}: label differs from exhaustive nearest neighbor"));
            }
        }
        labelled += queries.len();
    }
    Ok(format!("50 instances: subsequence, monotone guide, {labelled} labels match exhaustive search"))
}

fn pct(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pct"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`pct {}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline_smoke() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let beam = ["--beam.rows", "32", "--beam.cols", "128", "--beam.max_range", "60"];
    let run = |args: &[&str]| pct(d, &[args, &beam[..]].concat());
    run(&["simulate", "--output", "sim"])?;
    run(&["degrade", "--input", "sim", "--output", "real", "--degrade.keep_row_stride", "2", "--degrade.pixel_dropout_p", "0.3"])?;
    let train = ["--input", "sim", "--target", "real", "--steps", "20", "--batch_size", "2"];
    run(&[&["train-atm", "--output", "atm", "--train_points", "128"][..], &train].concat())?;
    run(&[&["train-stm", "--output", "stm"][..], &train].concat())?;

    let started = Instant::now();
    let translate = |out: &str| {
        run(&[
            "translate",
            "--seed",
            "11",
            "--input",
            "sim/scan_000.bin",
            "--generator_a",
            "atm/atm_generator.ckpt",
            "--generator_s",
            "stm/stm_generator.ckpt",
            "--output",
            out,
        ])
    };
    translate("first")?;
    translate("second")?;
    let elapsed = started.elapsed().as_secs_f64();

    let read = |p: &str| std::fs::read(d.join(p)).map_err(|e| format!("{p}: {e}"));
    let input = read_point_bin(&read("sim/scan_000.bin")?).map_err(|e| e.to_string())?;
    let bin = read("first/scan_000.bin")?;
    let label = read("first/scan_000.label")?;
    let cloud = read_point_bin(&bin).map_err(|e| e.to_string())?;
    let labels = read_labels(&label, &SemanticClassMap::default(), cloud.len()).map_err(|e| e.to_string())?;
    let lossless = pct_core::cloud::write_point_bin(&cloud) == bin && pct_core::cloud::write_labels(&labels) == label;
    let bounded = cloud.len() <= 2 * input.len();
    let identical = bin == read("second/scan_000.bin")? && label == read("second/scan_000.label")?;
    check(
        lossless && bounded && identical && elapsed < 60.0,
        format!(
            "exit 0, {} -> {} points (bound {}), lossless re-read {lossless}, byte-identical reruns {identical}, {elapsed:.1} s",
            input.len(),
            cloud.len(),
            2 * input.len()
        ),
    )
}

fn main() {
    // Runtime budgets in seconds. The end-to-end criterion times its
    // translate runs itself, since training is excluded from its budget.
    let criteria: [(&str, fn() -> Verdict, Option<f64>); 10] = [
        ("mIoU aggregation", miou_aggregation, Some(1.0)),
        ("exact EMD vs enumeration", emd_oracle, Some(10.0)),
        ("EMD translation identity", emd_translation, Some(5.0)),
        ("entropic EMD approximation", sinkhorn_approximation, Some(30.0)),
        ("projection round trip", projection_round_trip, Some(5.0)),
        ("gradient checks", gradient_checks, Some(60.0)),
        ("ATM reduced objective", atm_regression, Some(120.0)),
        ("STM controlled-gap recovery", stm_gap_recovery, Some(600.0)),
        ("fusion invariants", fusion_invariants, Some(10.0)),
        ("end-to-end translate", pipeline_smoke, None),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let mut verdict = run();
        let secs = started.elapsed().as_secs_f64();
        if let Some(limit) = budget.filter(|&limit| secs >= limit) {
            verdict = Err(format!("{} (over the {limit} s budget)", verdict.unwrap_or_else(|e| e)));
        }
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += verdict.is_err() as usize;
        println!("acceptance {:>2} {tag} {name}: {detail} [{secs:.1} s]", i + 1);
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
