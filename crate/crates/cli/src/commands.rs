use std::path::{Path, PathBuf};

use pct_core::cloud::{export_ply as ply_text, read_labels, read_point_bin, write_labels, write_point_bin};
use pct_core::metrics::ConfusionMatrix;
use pct_core::neural::checkpoint::{read_checkpoint, write_checkpoint};
use pct_core::neural::gradcheck::run_gradcheck;
use pct_core::neural::{atm_train, history_csv, stm_train, NetParams, NetRole, TrainOutcome};
use pct_core::pipeline::{translate_scan, TranslateOptions};
use pct_core::projection::{backproject, project, read_range_image, write_range_image};
use pct_core::sampling::{cap_points, voxel_downsample};
use pct_core::simulator::{
    build_scene, degrade as degrade_image, parse_trajectory, raycast_scan_with, DegradeSpec, TOY_SCENE,
    TOY_TRAJECTORY,
};
use pct_core::{LabeledCloud, PctError, PointCloud, RangeImage, SemanticClassMap};

use crate::config::{PipelineConfig, CONFIG_COPY_NAME};
use crate::CliError;

const SCAN_EXT: &str = "bin";
const LABEL_EXT: &str = "label";
const RANGE_EXT: &str = "range";

fn core(context: impl Into<String>) -> impl FnOnce(PctError) -> CliError {
    let context = context.into();
    move |source| CliError::Core { context, source }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Config {
        key: key.to_string(),
        reason: "required by this command".into(),
    })
}

/// Creates the output directory and writes the resolved configuration into it.
pub(crate) fn prepare_output(config: &PipelineConfig) -> Result<(), CliError> {
    let out = &config.paths.output;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join(CONFIG_COPY_NAME), config.to_toml())
}

fn class_map(config: &PipelineConfig) -> Result<SemanticClassMap, CliError> {
    match &config.paths.class_map {
        Some(path) => SemanticClassMap::parse(&read_text(path)?).map_err(core(path.display().to_string())),
        None => Ok(SemanticClassMap::default()),
    }
}

/// A single file, or every file with one of `exts` in a directory, sorted.
fn input_files(path: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Failed(format!(
            "{}: no .{} files found",
            path.display(),
            exts.join(" or .")
        )));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scan".into(), |s| s.to_string_lossy().into_owned())
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    read_point_bin(&read(path)?).map_err(core(path.display().to_string()))
}

/// Reads a scan and its labels. An explicit label path only applies when
/// `explicit` is set; otherwise the `.label` sibling is used if present.
fn read_labeled(
    path: &Path,
    explicit: Option<&Path>,
    map: &SemanticClassMap,
    labels_required: bool,
) -> Result<LabeledCloud, CliError> {
    let cloud = read_cloud(path)?;
    let label_path = explicit.map_or_else(|| path.with_extension(LABEL_EXT), Path::to_path_buf);
    let labels = if label_path.exists() {
        read_labels(&read(&label_path)?, map, cloud.len()).map_err(core(label_path.display().to_string()))?
    } else if labels_required {
        return Err(CliError::Failed(format!("{}: label file not found", label_path.display())));
    } else {
        vec![map.ignore_id(); cloud.len()]
    };
    LabeledCloud::new(cloud, labels).map_err(core(path.display().to_string()))
}

fn read_labeled_inputs(config: &PipelineConfig, labels_required: bool) -> Result<Vec<(PathBuf, LabeledCloud)>, CliError> {
    let map = class_map(config)?;
    let files = input_files(required(&config.paths.input, "paths.input")?, &[SCAN_EXT])?;
    let explicit = if files.len() == 1 { config.paths.labels.as_deref() } else { None };
    files
        .into_iter()
        .map(|f| {
            let c = read_labeled(&f, explicit, &map, labels_required)?;
            Ok((f, c))
        })
        .collect()
}

fn write_labeled(out: &Path, name: &str, cloud: &LabeledCloud) -> Result<(), CliError> {
    write(&out.join(format!("{name}.{SCAN_EXT}")), write_point_bin(&cloud.cloud))?;
    write(&out.join(format!("{name}.{LABEL_EXT}")), write_labels(cloud.labels()))
}

/// Voxel reduction then a seeded cap, as applied to every pipeline input.
fn preprocess(cloud: &LabeledCloud, config: &PipelineConfig, index: usize) -> Result<LabeledCloud, CliError> {
    let reduced = voxel_downsample(cloud, config.voxel_size).map_err(core("voxel downsampling"))?;
    cap_points(&reduced, config.max_points, config.train.seed.wrapping_add(index as u64)).map_err(core("capping"))
}

pub(crate) fn simulate(config: &PipelineConfig) -> Result<(), CliError> {
    let map = class_map(config)?;
    let scene_text = match &config.paths.scene {
        Some(p) => read_text(p)?,
        None => TOY_SCENE.to_string(),
    };
    let trajectory_text = match &config.paths.trajectory {
        Some(p) => read_text(p)?,
        None => TOY_TRAJECTORY.to_string(),
    };
    let scene = build_scene(&scene_text, &map).map_err(core("scene"))?;
    let poses = parse_trajectory(&trajectory_text).map_err(core("trajectory"))?;
    let out = &config.paths.output;
    for (i, pose) in poses.iter().enumerate() {
        let scan = raycast_scan_with(&scene, pose, &config.beam, &config.intensity).map_err(core(format!("pose {i}")))?;
        write_labeled(out, &format!("scan_{i:03}"), &scan)?;
    }
    println!("simulate: {} scans written to {}", poses.len(), out.display());
    Ok(())
}

fn read_image(path: &Path, config: &PipelineConfig) -> Result<RangeImage, CliError> {
    if path.extension().is_some_and(|e| e == RANGE_EXT) {
        let (img, _) = read_range_image(&read(path)?).map_err(core(path.display().to_string()))?;
        Ok(img)
    } else {
        project(&read_cloud(path)?, &config.beam).map_err(core(path.display().to_string()))
    }
}

pub(crate) fn project_scans(config: &PipelineConfig) -> Result<(), CliError> {
    let files = input_files(required(&config.paths.input, "paths.input")?, &[SCAN_EXT])?;
    for f in &files {
        let img = read_image(f, config)?;
        let name = format!("{}.{RANGE_EXT}", stem(f));
        write(&config.paths.output.join(name), write_range_image(&img, &config.beam))?;
    }
    println!("project: {} images written", files.len());
    Ok(())
}

pub(crate) fn degrade(config: &PipelineConfig) -> Result<(), CliError> {
    let map = class_map(config)?;
    let files = input_files(required(&config.paths.input, "paths.input")?, &[SCAN_EXT])?;
    let out = &config.paths.output;
    for (i, f) in files.iter().enumerate() {
        let scan = read_labeled(f, None, &map, false)?;
        let img = project(&scan.cloud, &config.beam).map_err(core(f.display().to_string()))?;
        let spec = DegradeSpec {
            max_range: config.beam.max_range,
            seed: config.train.seed.wrapping_add(i as u64),
            ..config.degrade
        };
        let degraded = degrade_image(&img, &spec).map_err(core(f.display().to_string()))?;
        let points = backproject(&degraded, &config.beam).map_err(core("backprojection"))?;
        // Surviving pixels keep the index of the point that filled them.
        let labels = degraded
            .index_map()
            .iter()
            .zip(degraded.occupancy())
            .filter(|(_, &o)| o)
            .map(|(idx, _)| idx.map_or(map.ignore_id(), |k| scan.labels()[k as usize]))
            .collect();
        let cloud = LabeledCloud::new(points, labels).map_err(core("degraded labels"))?;
        let name = stem(f);
        write_labeled(out, &name, &cloud)?;
        write(&out.join(format!("{name}.{RANGE_EXT}")), write_range_image(&degraded, &config.beam))?;
    }
    println!("degrade: {} scans written to {}", files.len(), out.display());
    Ok(())
}

fn write_outcome(config: &PipelineConfig, prefix: &str, outcome: &TrainOutcome) -> Result<(), CliError> {
    let out = &config.paths.output;
    write(&out.join(format!("{prefix}_generator.ckpt")), write_checkpoint(&outcome.generator, &config.train))?;
    write(
        &out.join(format!("{prefix}_discriminator.ckpt")),
        write_checkpoint(&outcome.discriminator, &config.train),
    )?;
    write(&out.join(format!("{prefix}_history.csv")), history_csv(&outcome.history))
}

pub(crate) fn train_atm(config: &PipelineConfig) -> Result<(), CliError> {
    let source = read_labeled_inputs(config, false)?
        .iter()
        .enumerate()
        .map(|(i, (_, c))| preprocess(c, config, i))
        .collect::<Result<Vec<_>, _>>()?;
    let map = class_map(config)?;
    let target = input_files(required(&config.paths.target, "paths.target")?, &[SCAN_EXT])?
        .iter()
        .enumerate()
        .map(|(i, f)| Ok(preprocess(&read_labeled(f, None, &map, false)?, config, source.len() + i)?.cloud))
        .collect::<Result<Vec<_>, CliError>>()?;
    let outcome = atm_train(&source, &target, &config.beam, &config.train).map_err(core("appearance training"))?;
    write_outcome(config, "atm", &outcome)?;
    println!("train-atm: {} steps on {} source / {} target scans", config.train.steps, source.len(), target.len());
    Ok(())
}

pub(crate) fn train_stm(config: &PipelineConfig) -> Result<(), CliError> {
    let images = |key: &str, path: &Option<PathBuf>| -> Result<Vec<RangeImage>, CliError> {
        input_files(required(path, key)?, &[SCAN_EXT, RANGE_EXT])?
            .iter()
            .map(|f| read_image(f, config))
            .collect()
    };
    let source = images("paths.input", &config.paths.input)?;
    let target = images("paths.target", &config.paths.target)?;
    let outcome = stm_train(&source, &target, &config.train).map_err(core("sparsity training"))?;
    write_outcome(config, "stm", &outcome)?;
    println!("train-stm: {} steps on {} source / {} target images", config.train.steps, source.len(), target.len());
    Ok(())
}

fn load_generator(path: &Path, role: NetRole) -> Result<NetParams, CliError> {
    let (net, _) = read_checkpoint(&read(path)?).map_err(core(path.display().to_string()))?;
    net.expect_role(role).map_err(core(path.display().to_string()))?;
    Ok(net)
}

pub(crate) fn translate(config: &PipelineConfig) -> Result<(), CliError> {
    let g_a = load_generator(required(&config.paths.generator_a, "paths.generator_a")?, NetRole::GA)?;
    let g_s = load_generator(required(&config.paths.generator_s, "paths.generator_s")?, NetRole::GS)?;
    let options = TranslateOptions {
        upsample_factor: config.train.upsample_factor,
        label_neighbors: config.label_neighbors,
    };
    let out = &config.paths.output;
    for (i, (f, scan)) in read_labeled_inputs(config, true)?.iter().enumerate() {
        let input = preprocess(scan, config, i)?;
        let t = translate_scan(&input, &g_a, &g_s, &config.beam, &options).map_err(core(f.display().to_string()))?;
        if t.degenerate_guide {
            eprintln!("warning: {}: sparsity guide is empty, output has no points", f.display());
        }
        write_labeled(out, &stem(f), &t.cloud)?;
        println!("translate: {} -> {} of {} points", f.display(), t.cloud.len(), scan.len());
    }
    Ok(())
}

pub(crate) fn eval(config: &PipelineConfig) -> Result<(), CliError> {
    let map = class_map(config)?;
    let truth_path = required(&config.paths.ground_truth, "paths.ground_truth")?;
    let pred_path = required(&config.paths.prediction, "paths.prediction")?;
    let truth_bytes = read(truth_path)?;
    let n = truth_bytes.len() / 4;
    let truth = read_labels(&truth_bytes, &map, n).map_err(core(truth_path.display().to_string()))?;
    let pred = read_labels(&read(pred_path)?, &map, n).map_err(core(pred_path.display().to_string()))?;
    let mut cm = ConfusionMatrix::for_map(&map);
    cm.accumulate(&truth, &pred).map_err(core("confusion matrix"))?;
    let report = cm.report(&map).map_err(core("evaluation"))?;
    write(&config.paths.output.join("eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub(crate) fn export_ply(config: &PipelineConfig) -> Result<(), CliError> {
    let map = class_map(config)?;
    let inputs = read_labeled_inputs(config, false)?;
    for (f, cloud) in &inputs {
        write(&config.paths.output.join(format!("{}.ply", stem(f))), ply_text(cloud, &map))?;
    }
    println!("export-ply: {} files written", inputs.len());
    Ok(())
}

pub(crate) fn gradcheck(config: &PipelineConfig) -> Result<(), CliError> {
    let reports = run_gradcheck(config.gradcheck_instances, config.train.seed).map_err(core("gradcheck"))?;
    let mut csv = String::from("kind,instances,max_relative_error,passed\n");
    for r in &reports {
        csv.push_str(&format!("{},{},{:e},{}\n", r.kind, r.instances, r.max_relative_error, r.passed));
        println!(
            "{:<18} {} instances  max rel err {:.3e}  {}",
            r.kind,
            r.instances,
            r.max_relative_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    write(&config.paths.output.join("gradcheck.csv"), csv)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.kind).collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
