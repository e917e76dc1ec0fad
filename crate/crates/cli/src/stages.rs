//! Implementations of the pipeline subcommands. Each stage reads the
//! previous stage's documented artifacts, verifies their hashes, writes its
//! own outputs plus a provenance record and the effective configuration.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;

use driverid_core::dcrnn::{ArchitectureConfig, Dcrnn};
use driverid_core::encoding::{
    encode_trajectory, read_segments, write_segments, BasicFeature, SegmentRecord,
};
use driverid_core::error::{Error, Result};
use driverid_core::resolution::{latent_trajectory, resolution_experiment};
use driverid_core::sampling::{
    manifest_stats, random_sample, stratified_sample, threshold_sample, DatasetManifest,
    SamplingParams, Split, Strategy,
};
use driverid_core::seeding::derive_seed;
use driverid_core::similarity::{
    matrices_by_driver, read_matrix_csv, write_matrix_csv, MatchThreshold, SimilarityMatrix,
    SimilarityStats,
};
use driverid_core::synth::{generate_dataset, SynthConfig};
use driverid_core::telemetry::{
    parse_trajectories, preprocess, write_trajectories, PreprocessConfig, Trajectory,
};
use driverid_core::train::{
    assemble_dataset, evaluate_split, feature_subset_experiment, split_manifest, train,
};

use crate::config::RunConfig;
use crate::provenance::{verify_input, write_provenance, FileRecord};

pub struct StageContext {
    pub out_dir: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
}

impl StageContext {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    /// Every stage records the exact configuration and root seed it ran
    /// with.
    fn write_run_config(&self) -> Result<PathBuf> {
        let path = self.out_dir.join("run_config.toml");
        let mut cfg = self.config.clone();
        cfg.seed = self.seed;
        fs::write(&path, cfg.to_toml()?)?;
        Ok(path)
    }

    fn finish(
        &self,
        stage: &str,
        stage_config: serde_json::Value,
        inputs: Vec<FileRecord>,
        outputs: &[PathBuf],
    ) -> Result<()> {
        let mut all_outputs = outputs.to_vec();
        all_outputs.push(self.write_run_config()?);
        write_provenance(
            &self.out_dir,
            stage,
            self.seed,
            stage_config,
            inputs,
            &all_outputs,
        )
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::validation(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::validation(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path)
        .map_err(|e| Error::validation(format!("cannot open {}: {e}", path.display())))?;
    parse_trajectories(BufReader::new(file))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_json(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn run_synth(ctx: &StageContext) -> Result<()> {
    ctx.prepare()?;
    let s = &ctx.config.synth;
    let cfg = SynthConfig {
        n_drivers: s.drivers,
        n_trajectories: s.trajectories,
        duration_range: (s.duration_min, s.duration_max),
        separation: s.separation,
        seed: derive_seed(ctx.seed, "synth"),
        start_time: s.start_time,
    };
    let (trajectories, profiles) = generate_dataset(&cfg)?;
    let csv_path = ctx.out_dir.join("telemetry.csv");
    write_trajectories(BufWriter::new(File::create(&csv_path)?), &trajectories)?;
    let profiles_path = ctx.out_dir.join("profiles.json");
    write_json(&profiles_path, &profiles)?;
    println!(
        "synth: {} drivers x {} trajectories -> {}",
        s.drivers,
        s.trajectories,
        csv_path.display()
    );
    ctx.finish("synth", to_json(s)?, vec![], &[csv_path, profiles_path])
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct IngestReport {
    drivers: usize,
    trajectories: usize,
    points: usize,
}

pub fn run_ingest(ctx: &StageContext, input: &Path) -> Result<()> {
    ctx.prepare()?;
    let input_record = verify_input(input)?;
    let trajectories = read_trajectories_file(input)?;
    let drivers: std::collections::BTreeSet<&str> =
        trajectories.iter().map(|t| t.driver_id.as_str()).collect();
    let report = IngestReport {
        drivers: drivers.len(),
        trajectories: trajectories.len(),
        points: trajectories.iter().map(|t| t.len()).sum(),
    };
    let csv_path = ctx.out_dir.join("trajectories.csv");
    write_trajectories(BufWriter::new(File::create(&csv_path)?), &trajectories)?;
    let report_path = ctx.out_dir.join("ingest_report.json");
    write_json(&report_path, &report)?;
    println!(
        "ingest: {} trajectories from {} drivers ({} points)",
        report.trajectories, report.drivers, report.points
    );
    ctx.finish(
        "ingest",
        serde_json::json!({}),
        vec![input_record],
        &[csv_path, report_path],
    )
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PreprocessReport {
    input_trajectories: usize,
    kept: usize,
    dropped: usize,
}

pub fn run_preprocess(ctx: &StageContext, input: &Path) -> Result<()> {
    ctx.prepare()?;
    let input_record = verify_input(input)?;
    let p = &ctx.config.preprocess;
    let cfg = PreprocessConfig {
        trim_seconds: p.trim_seconds,
        min_duration: p.min_duration,
        max_duration: p.max_duration,
        drop_missing: p.drop_missing,
    };
    cfg.validate()?;
    let trajectories = read_trajectories_file(input)?;
    let kept: Vec<Trajectory> = trajectories
        .iter()
        .filter_map(|t| preprocess(t, &cfg))
        .collect();
    let report = PreprocessReport {
        input_trajectories: trajectories.len(),
        kept: kept.len(),
        dropped: trajectories.len() - kept.len(),
    };
    let csv_path = ctx.out_dir.join("preprocessed.csv");
    write_trajectories(BufWriter::new(File::create(&csv_path)?), &kept)?;
    let report_path = ctx.out_dir.join("preprocess_report.json");
    write_json(&report_path, &report)?;
    println!(
        "preprocess: kept {} of {} trajectories",
        report.kept, report.input_trajectories
    );
    ctx.finish(
        "preprocess",
        to_json(p)?,
        vec![input_record],
        &[csv_path, report_path],
    )
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimilaritySummary {
    tau: f64,
    per_driver: BTreeMap<String, SimilarityStats>,
    overall: SimilarityStats,
}

pub fn run_similarity(ctx: &StageContext, input: &Path) -> Result<()> {
    ctx.prepare()?;
    let input_record = verify_input(input)?;
    let thr = MatchThreshold::new(ctx.config.similarity.tau)?;
    let trajectories = read_trajectories_file(input)?;
    let matrices = matrices_by_driver(&trajectories, &thr)?;
    if matrices.is_empty() {
        return Err(Error::validation(
            "no driver has at least two trajectories to compare",
        ));
    }
    let mut outputs = Vec::new();
    let mut per_driver = BTreeMap::new();
    let mut all_scores = Vec::new();
    for (driver, matrix) in &matrices {
        let path = ctx.out_dir.join(format!("similarity_{driver}.csv"));
        write_matrix_csv(BufWriter::new(File::create(&path)?), matrix)?;
        outputs.push(path);
        per_driver.insert(driver.clone(), matrix.stats()?);
        all_scores.extend(matrix.pair_scores());
    }
    let summary = SimilaritySummary {
        tau: thr.tau,
        per_driver,
        overall: SimilarityStats::from_scores(&all_scores)?,
    };
    let summary_path = ctx.out_dir.join("similarity_summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    println!(
        "similarity: {} drivers, overall P50 {:.3} P90 {:.3} max {:.3}",
        matrices.len(),
        summary.overall.p50,
        summary.overall.p90,
        summary.overall.max
    );
    ctx.finish(
        "similarity",
        to_json(&ctx.config.similarity)?,
        vec![input_record],
        &outputs,
    )
}

/// Load every per-driver matrix CSV a similarity stage wrote into `dir`.
pub fn load_matrices(dir: &Path) -> Result<BTreeMap<String, SimilarityMatrix>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)?.flatten() {
        let path = entry.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(driver) = name
            .strip_prefix("similarity_")
            .and_then(|s| s.strip_suffix(".csv"))
        {
            verify_input(&path)?;
            let file = File::open(&path)?;
            out.insert(driver.to_string(), read_matrix_csv(BufReader::new(file))?);
        }
    }
    if out.is_empty() {
        return Err(Error::validation(format!(
            "no similarity matrices found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn run_sample(
    ctx: &StageContext,
    similarity_dir: Option<&Path>,
    input: Option<&Path>,
) -> Result<()> {
    ctx.prepare()?;
    let s = &ctx.config.sample;
    let strategy = Strategy::parse(&s.strategy)?;
    let params = SamplingParams {
        nu: s.nu,
        thresholds: s.thresholds.clone(),
        n_trajectories: s.n_trajectories,
        n_drivers: s.n_drivers,
        seed: derive_seed(ctx.seed, "sample"),
    };
    let mut inputs = Vec::new();
    let manifest = match strategy {
        Strategy::Threshold | Strategy::Stratified => {
            let dir = similarity_dir.ok_or_else(|| {
                Error::validation("threshold/stratified sampling needs --similarity-dir")
            })?;
            let matrices = load_matrices(dir)?;
            inputs.push(FileRecord {
                path: dir.display().to_string(),
                sha256: String::new(),
            });
            match strategy {
                Strategy::Threshold => threshold_sample(&matrices, &params)?,
                _ => stratified_sample(&matrices, &params)?,
            }
        }
        Strategy::Random => {
            let input = input
                .ok_or_else(|| Error::validation("random sampling needs --input trajectories"))?;
            inputs.push(verify_input(input)?);
            let trajectories = read_trajectories_file(input)?;
            let mut by_driver: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for t in &trajectories {
                by_driver
                    .entry(t.driver_id.clone())
                    .or_default()
                    .push(t.trajectory_id.clone());
            }
            let mut manifest = random_sample(&by_driver, &params)?;
            if let Some(dir) = similarity_dir {
                let matrices = load_matrices(dir)?;
                manifest.stats = manifest_stats(&manifest, &matrices)?;
            }
            manifest
        }
    };
    let path = ctx.out_dir.join("manifest.json");
    fs::write(&path, manifest.to_json()?)?;
    println!(
        "sample: {} ({} drivers, {} entries, max intra-driver similarity {:.3})",
        manifest.name,
        manifest.drivers().len(),
        manifest.entries.len(),
        manifest.stats.max
    );
    ctx.finish("sample", to_json(s)?, inputs, &[path])
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EncodeReport {
    trajectories: usize,
    segments: usize,
    rows: usize,
    cols: usize,
}

pub fn run_encode(ctx: &StageContext, input: &Path, manifest: Option<&Path>) -> Result<()> {
    ctx.prepare()?;
    let mut inputs = vec![verify_input(input)?];
    let enc = ctx.config.encode.to_core()?;
    let trajectories = read_trajectories_file(input)?;
    let keep: Option<std::collections::BTreeSet<String>> = match manifest {
        Some(m) => {
            inputs.push(verify_input(m)?);
            let manifest = load_manifest(m)?;
            Some(
                manifest
                    .entries
                    .iter()
                    .map(|e| e.trajectory_id.clone())
                    .collect(),
            )
        }
        None => None,
    };
    // labels travel through the manifest keyed by trajectory id alone, so
    // ids must identify a single driver
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for t in &trajectories {
        if let Some(prev) = owner.insert(&t.trajectory_id, &t.driver_id) {
            if prev != t.driver_id {
                return Err(Error::validation(format!(
                    "trajectory id {} belongs to both {} and {}",
                    t.trajectory_id, prev, t.driver_id
                )));
            }
        }
    }
    let mut records = Vec::new();
    let mut encoded_trajectories = 0usize;
    for traj in &trajectories {
        if let Some(keep) = &keep {
            if !keep.contains(&traj.trajectory_id) {
                continue;
            }
        }
        let maps = encode_trajectory(traj, &enc)?;
        if !maps.is_empty() {
            encoded_trajectories += 1;
        }
        for (i, map) in maps.into_iter().enumerate() {
            records.push(SegmentRecord {
                trajectory_id: traj.trajectory_id.clone(),
                segment_index: i as u32,
                map,
            });
        }
    }
    let report = EncodeReport {
        trajectories: encoded_trajectories,
        segments: records.len(),
        rows: enc.aggregate_rows(),
        cols: enc.time_len(),
    };
    let dpfm_path = ctx.out_dir.join("features.dpfm");
    write_segments(BufWriter::new(File::create(&dpfm_path)?), &enc, &records)?;
    let report_path = ctx.out_dir.join("encode_report.json");
    write_json(&report_path, &report)?;
    println!(
        "encode: {} segments from {} trajectories ({}x{} maps)",
        report.segments, report.trajectories, report.rows, report.cols
    );
    ctx.finish(
        "encode",
        to_json(&ctx.config.encode)?,
        inputs,
        &[dpfm_path, report_path],
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Sidecar making a checkpoint self-describing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelSidecar {
    pub architecture: ArchitectureConfig,
    pub features: Vec<BasicFeature>,
    pub drivers: Vec<String>,
}

fn load_model(checkpoint: &Path) -> Result<(Dcrnn, ModelSidecar)> {
    let sidecar_path = checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("model.json");
    let sidecar: ModelSidecar = serde_json::from_slice(&fs::read(&sidecar_path).map_err(|e| {
        Error::validation(format!(
            "cannot read model sidecar {}: {e}",
            sidecar_path.display()
        ))
    })?)
    .map_err(|e| Error::validation(format!("bad model sidecar: {e}")))?;
    let model = Dcrnn::load(sidecar.architecture.clone(), BufReader::new(File::open(checkpoint)?))?;
    Ok((model, sidecar))
}

pub fn run_train(ctx: &StageContext, features_file: &Path, manifest_path: &Path) -> Result<()> {
    ctx.prepare()?;
    let inputs = vec![verify_input(features_file)?, verify_input(manifest_path)?];
    let t = &ctx.config.train;
    let cfg = t.to_core(derive_seed(ctx.seed, "train"))?;
    let (header, records) = read_segments(BufReader::new(File::open(features_file)?))?;
    let manifest = load_manifest(manifest_path)?;
    let split = split_manifest(&manifest, cfg.train_fraction, derive_seed(ctx.seed, "split"))?;
    let dataset = assemble_dataset(&records, &split)?;
    let mut arch = ArchitectureConfig::new(
        header.features.len(),
        header.cols,
        dataset.drivers.len(),
    );
    arch.ablation_no_bn_residual = t.ablation;
    let mut model = Dcrnn::build(arch.clone(), derive_seed(ctx.seed, "model-init"))?;
    println!(
        "train: {} train / {} test segments, {} drivers, {} trainable parameters",
        dataset.train.len(),
        dataset.test.len(),
        dataset.drivers.len(),
        model.num_trainable()
    );
    let history = train(&mut model, &dataset, &cfg)?;
    for h in &history {
        match (h.seg_accuracy, h.traj_accuracy) {
            (Some(seg), Some(traj)) => println!(
                "  epoch {:>3}  loss {:.4}  seg_acc {:.3}  traj_acc {:.3}",
                h.epoch, h.loss, seg, traj
            ),
            _ => println!("  epoch {:>3}  loss {:.4}", h.epoch, h.loss),
        }
    }

    let checkpoint_path = ctx.out_dir.join("checkpoint.dpnn");
    model.save(BufWriter::new(File::create(&checkpoint_path)?))?;
    let sidecar = ModelSidecar {
        architecture: arch,
        features: header.features.clone(),
        drivers: dataset.drivers.clone(),
    };
    let sidecar_path = ctx.out_dir.join("model.json");
    write_json(&sidecar_path, &sidecar)?;
    let split_path = ctx.out_dir.join("split_manifest.json");
    fs::write(&split_path, split.to_json()?)?;
    let history_path = ctx.out_dir.join("history.json");
    write_json(&history_path, &history)?;
    ctx.finish(
        "train",
        to_json(t)?,
        inputs,
        &[checkpoint_path, sidecar_path, split_path, history_path],
    )
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalReport {
    seg_accuracy: f64,
    traj_accuracy: f64,
    test_segments: usize,
    test_trajectories: usize,
}

pub fn run_eval(
    ctx: &StageContext,
    checkpoint: &Path,
    features_file: &Path,
    manifest_path: &Path,
) -> Result<()> {
    ctx.prepare()?;
    let inputs = vec![
        verify_input(checkpoint)?,
        verify_input(features_file)?,
        verify_input(manifest_path)?,
    ];
    let (mut model, _sidecar) = load_model(checkpoint)?;
    let (_, records) = read_segments(BufReader::new(File::open(features_file)?))?;
    let manifest = load_manifest(manifest_path)?;
    let dataset = assemble_dataset(&records, &manifest)?;
    if dataset.test.is_empty() {
        return Err(Error::validation(
            "manifest has no test split; run train (or split) first",
        ));
    }
    let (seg, traj) = evaluate_split(&mut model, &dataset.test, ctx.config.train.batch_size)?;
    let test_trajectories: std::collections::BTreeSet<&str> = dataset
        .test
        .iter()
        .map(|s| s.trajectory_id.as_str())
        .collect();
    let report = EvalReport {
        seg_accuracy: seg,
        traj_accuracy: traj,
        test_segments: dataset.test.len(),
        test_trajectories: test_trajectories.len(),
    };
    let path = ctx.out_dir.join("eval_report.json");
    write_json(&path, &report)?;
    println!(
        "eval: segment accuracy {:.4}, trajectory accuracy {:.4} over {} trajectories",
        seg, traj, report.test_trajectories
    );
    ctx.finish("eval", serde_json::json!({}), inputs, &[path])
}

// ---------------------------------------------------------------------------
// feature-grid
// ---------------------------------------------------------------------------

pub fn run_feature_grid(
    ctx: &StageContext,
    input: &Path,
    manifest_path: &Path,
    subsets_arg: &str,
) -> Result<()> {
    ctx.prepare()?;
    let inputs = vec![verify_input(input)?, verify_input(manifest_path)?];
    let subsets: Vec<Vec<BasicFeature>> = subsets_arg
        .split(';')
        .map(|group| {
            group
                .split(',')
                .map(|name| BasicFeature::parse(name.trim()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if subsets.is_empty() {
        return Err(Error::validation("no feature subsets given"));
    }
    let trajectories = read_trajectories_file(input)?;
    let by_id: BTreeMap<String, Trajectory> = trajectories
        .into_iter()
        .map(|t| (t.trajectory_id.clone(), t))
        .collect();
    let manifest = load_manifest(manifest_path)?;
    let base_enc = ctx.config.encode.to_core()?;
    let cfg = ctx
        .config
        .train
        .to_core(derive_seed(ctx.seed, "feature-grid"))?;
    let results = feature_subset_experiment(&by_id, &manifest, &subsets, &base_enc, &cfg)?;

    let csv_path = ctx.out_dir.join("feature_grid.csv");
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(&csv_path)?));
    wtr.write_record(["features", "seg_accuracy", "traj_accuracy"])?;
    for r in &results {
        wtr.write_record([
            r.features.as_str(),
            &r.seg_accuracy.to_string(),
            &r.traj_accuracy.to_string(),
        ])?;
        println!(
            "feature-grid: {:<40} seg {:.4} traj {:.4}",
            r.features, r.seg_accuracy, r.traj_accuracy
        );
    }
    wtr.flush()?;
    drop(wtr);
    ctx.finish(
        "feature-grid",
        serde_json::json!({ "subsets": subsets_arg }),
        inputs,
        &[csv_path],
    )
}

// ---------------------------------------------------------------------------
// latents + resolve
// ---------------------------------------------------------------------------

/// Trajectory-level latents for every manifest trajectory in a split.
fn trajectory_latents(
    model: &mut Dcrnn,
    records: &[SegmentRecord],
    manifest: &DatasetManifest,
    split: Option<Split>,
) -> Result<BTreeMap<String, Vec<(String, Vec<f64>)>>> {
    let mut maps_by_traj: BTreeMap<&str, Vec<&SegmentRecord>> = BTreeMap::new();
    for r in records {
        maps_by_traj.entry(r.trajectory_id.as_str()).or_default().push(r);
    }
    let mut out: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for entry in &manifest.entries {
        if let Some(s) = split {
            if entry.split != s {
                continue;
            }
        }
        let recs = maps_by_traj
            .get(entry.trajectory_id.as_str())
            .ok_or_else(|| {
                Error::validation(format!(
                    "no encoded segments for trajectory {}",
                    entry.trajectory_id
                ))
            })?;
        let maps: Vec<_> = recs.iter().map(|r| r.map.clone()).collect();
        let latent = latent_trajectory(model, &maps)?;
        out.entry(entry.driver_id.clone())
            .or_default()
            .push((entry.trajectory_id.clone(), latent));
    }
    Ok(out)
}

pub fn run_export_latents(
    ctx: &StageContext,
    checkpoint: &Path,
    features_file: &Path,
    manifest_path: &Path,
) -> Result<()> {
    ctx.prepare()?;
    let inputs = vec![
        verify_input(checkpoint)?,
        verify_input(features_file)?,
        verify_input(manifest_path)?,
    ];
    let (mut model, sidecar) = load_model(checkpoint)?;
    let (_, records) = read_segments(BufReader::new(File::open(features_file)?))?;
    let manifest = load_manifest(manifest_path)?;
    let latents = trajectory_latents(&mut model, &records, &manifest, None)?;

    let dim = sidecar.architecture.fc1_units;
    let path = ctx.out_dir.join("latents.csv");
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    let mut header = vec!["trajectory_id".to_string(), "driver_id".to_string()];
    header.extend((0..dim).map(|i| format!("z{i:02}")));
    wtr.write_record(&header)?;
    let mut count = 0usize;
    for (driver, trajs) in &latents {
        for (traj, latent) in trajs {
            let mut row = vec![traj.clone(), driver.clone()];
            row.extend(latent.iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
            count += 1;
        }
    }
    wtr.flush()?;
    drop(wtr);
    println!("export-latents: wrote {count} {dim}-dimensional vectors");
    ctx.finish("export-latents", serde_json::json!({}), inputs, &[path])
}

pub fn run_resolve(
    ctx: &StageContext,
    checkpoint: &Path,
    features_file: &Path,
    manifest_path: &Path,
) -> Result<()> {
    ctx.prepare()?;
    let inputs = vec![
        verify_input(checkpoint)?,
        verify_input(features_file)?,
        verify_input(manifest_path)?,
    ];
    let r = &ctx.config.resolve;
    let ap = r.ap_config()?;
    let (mut model, _) = load_model(checkpoint)?;
    let (_, records) = read_segments(BufReader::new(File::open(features_file)?))?;
    let manifest = load_manifest(manifest_path)?;
    // resolution runs on held-out trajectories
    let latents = trajectory_latents(&mut model, &records, &manifest, Some(Split::Test))?;
    let report = resolution_experiment(
        &latents,
        r.subsets,
        r.drivers_per_subset,
        derive_seed(ctx.seed, "resolve"),
        &ap,
    )?;
    let path = ctx.out_dir.join("resolution_report.json");
    write_json(&path, &report)?;
    println!(
        "resolve: average AMI {:.3} (std {:.3}), average EE {:.2} (std {:.2}) over {} subsets",
        report.average_ami, report.std_ami, report.average_ee, report.std_ee, report.subsets
    );
    ctx.finish("resolve", to_json(r)?, inputs, &[path])
}
