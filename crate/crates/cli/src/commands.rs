use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use gcnn_core::experiments::{
    bonferroni_pairwise, cross_validate, evaluate, one_way_anova, stratified_split, summarize, train,
    transfer_experiment, CrossValidation, RunRecord, Samples, Summary, TrainConfig,
};
use gcnn_core::icosphere::IcosphereHierarchy;
use gcnn_core::model::{build_gcnn, build_pcnn, load_checkpoint, save_checkpoint, Arch, GcnnConfig, Model, PcnnConfig};
use gcnn_core::surfdata::{
    demean, load_images, load_node_maps, project_equirectangular, rotate_map, save_images, save_node_maps,
    synthesize_dataset, Axis, ImageMap, NodeMap, Rotation, SynthSpec,
};
use gcnn_core::verify::{run_suites, Suite};
use gcnn_core::{Error, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{io_context, RunManifest};
use crate::{ArchArg, CommonArgs, RunArgs, SuiteArg};

pub const RECORDS: &str = "records.json";
pub const CURVES: &str = "curves.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const NODE_DATA: &str = "data.gsrf";
pub const IMAGE_DATA: &str = "images.gimg";

pub struct Context {
    pub argv: Vec<String>,
    pub threads: Option<usize>,
}

impl Context {
    fn manifest(&self, command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest::new(command, self.argv.clone(), config, self.threads)
    }
}

/// Everything a training command can be configured with.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the split, the shuffles and the initialization (plus the fold
    /// index in cross-validation).
    pub seed: u64,
    pub folds: usize,
    pub test_fraction: f64,
    /// Remove each node map's mean before training.
    pub demean: bool,
    pub train: TrainConfig,
    pub gcnn: GcnnConfig,
    pub pcnn: PcnnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 10,
            test_fraction: 0.1,
            demean: true,
            train: TrainConfig::default(),
            gcnn: GcnnConfig::default(),
            pcnn: PcnnConfig::default(),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.folds {
        cfg.folds = v;
    }
    if let Some(v) = common.test_fraction {
        cfg.test_fraction = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = common.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = common.max_epochs {
        t.max_epochs = v;
        t.extended_epochs = t.extended_epochs.max(v);
    }
    if let Some(v) = common.extended_epochs {
        t.extended_epochs = v;
    }
    if let Some(v) = common.lr {
        t.lr_initial = v;
    }
    if let Some(v) = common.lr_fine {
        t.lr_fine = v;
    }
    t.seed = cfg.seed;
    t.validate()?;
    Ok(cfg)
}

/// Creates `out` and makes sure writing there cannot touch any input.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_context(e, out))?;
    let out_dir = out.canonicalize().map_err(|e| io_context(e, out))?;
    for input in inputs {
        let parent = input.canonicalize().map_err(|e| io_context(e, input))?;
        if parent.parent() == Some(out_dir.as_path()) {
            return Err(Error::Config(format!(
                "output directory {} holds the input {}; choose another --out",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

enum Dataset {
    Maps(Vec<NodeMap>),
    Images(Vec<ImageMap>),
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    if bytes.len() >= 4 {
        magic.copy_from_slice(&bytes[..4]);
    }
    match &magic {
        b"GSRF" => Ok(Dataset::Maps(load_node_maps(path, None)?)),
        b"GIMG" => Ok(Dataset::Images(load_images(path)?)),
        _ => Err(Error::format(0, format!("{}: neither a node-map nor an image dataset", path.display()))),
    }
}

fn load_maps(path: &Path) -> Result<Vec<NodeMap>> {
    match load_dataset(path)? {
        Dataset::Maps(m) => Ok(m),
        Dataset::Images(_) => Err(Error::Config(format!("{} holds images, not node maps", path.display()))),
    }
}

fn demean_all(maps: Vec<NodeMap>, on: bool) -> Result<Vec<NodeMap>> {
    if on {
        maps.par_iter().map(demean).collect()
    } else {
        Ok(maps)
    }
}

fn samples_for(data: Dataset, arch: Option<Arch>, demean_maps: bool) -> Result<Samples> {
    match (data, arch) {
        (Dataset::Maps(m), None | Some(Arch::Gcnn)) => Samples::from_node_maps(&demean_all(m, demean_maps)?),
        (Dataset::Images(i), None | Some(Arch::Pcnn)) => Samples::from_images(&i),
        (Dataset::Maps(_), Some(Arch::Pcnn)) => Err(Error::Config(
            "the image network needs a projected dataset (see `gcnn project`)".into(),
        )),
        (Dataset::Images(_), Some(Arch::Gcnn)) => Err(Error::Config("the mesh network needs a node-map dataset".into())),
    }
}

pub fn print_layers(model: &Model) {
    let shapes = model.shapes();
    println!("{:>3}  {:<8} {:<11} output", "row", "name", "type");
    for (i, row) in model.spec().rows.iter().enumerate() {
        println!("{:>3}  {:<8} {:<11} {}", i + 1, row.name, row.layer.kind(), shapes[i + 1]);
    }
}

#[derive(Serialize, Deserialize)]
pub struct RecordsFile {
    pub experiment: String,
    pub arch: Arch,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

#[derive(Serialize)]
struct CurveRow {
    fold: usize,
    epoch: usize,
    train_err: f64,
    val_err: f64,
    learning_rate: f64,
    mean_loss: f64,
}

fn write_results(out: &Path, experiment: &str, arch: Arch, records: &[RunRecord], summary: &Summary) -> Result<()> {
    let file = RecordsFile {
        experiment: experiment.to_string(),
        arch,
        records: records.to_vec(),
        summary: summary.clone(),
    };
    let path = out.join(RECORDS);
    fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| io_context(e, &path))?;
    let path = out.join(CURVES);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        for e in &r.epochs {
            w.serialize(CurveRow {
                fold: r.fold.unwrap_or(0),
                epoch: e.epoch,
                train_err: e.train_error,
                val_err: e.val_error,
                learning_rate: e.learning_rate,
                mean_loss: e.mean_loss,
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn print_records(records: &[RunRecord], summary: &Summary) {
    for r in records {
        let acc = r.test_accuracy.map_or("-".to_string(), |a| format!("{:.4}", a));
        println!(
            "fold {}: epochs {}, chosen {}, best val error {:.4}, test accuracy {acc}",
            r.fold.unwrap_or(0),
            r.epochs.len(),
            r.chosen_epoch,
            r.best_val_error()
        );
    }
    if summary.folds > 0 {
        println!(
            "mean test accuracy {:.4} (std {:.4}, {} folds)",
            summary.mean_accuracy, summary.std_accuracy, summary.folds
        );
    }
}

pub fn mesh_info(level: usize, export: Option<&Path>) -> Result<ExitCode> {
    let h = IcosphereHierarchy::build(level)?;
    println!("{:>5} {:>8} {:>8} {:>8}  mean edge", "level", "nodes", "faces", "edges");
    for m in h.levels() {
        println!(
            "{:>5} {:>8} {:>8} {:>8}  {:.6}",
            m.level(),
            m.len(),
            m.faces().len(),
            m.edge_count(),
            m.mean_edge_length()
        );
    }
    let m = h.level(level)?;
    let hist = m.degree_histogram();
    println!("level: {level}");
    println!("nodes: {}", m.len());
    println!("faces: {}", m.faces().len());
    println!("edges: {}", m.edge_count());
    println!(
        "pentagon nodes: {}, hexagon nodes: {}",
        hist.get(5).copied().unwrap_or(0),
        hist.get(6).copied().unwrap_or(0)
    );
    let degrees: Vec<String> = hist
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(d, c)| format!("{d}:{c}"))
        .collect();
    println!("degree histogram: {}", degrees.join(" "));
    println!("mean edge length: {:.6}", m.mean_edge_length());
    if let Some(path) = export {
        let f = fs::File::create(path).map_err(|e| io_context(e, path))?;
        m.write_obj(std::io::BufWriter::new(f))?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(ctx: &Context, level: usize, samples: usize, seed: u64, config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let spec: SynthSpec = match config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    prepare_out(out, &[])?;
    let h = IcosphereHierarchy::build(level)?;
    let maps = synthesize_dataset(&h, level, samples, &spec, seed)?;
    save_node_maps(&out.join(NODE_DATA), level, spec.channels, &maps)?;
    let mut counts = vec![0usize; spec.classes.len()];
    maps.iter().filter_map(|m| m.label).for_each(|l| counts[l] += 1);
    println!("wrote {samples} maps at level {level} ({} nodes), class counts {counts:?}", h.level(level)?.len());
    let mut manifest = ctx.manifest("synth", json!({ "level": level, "samples": samples, "seed": seed, "synth": spec }));
    if let Some(p) = config {
        manifest.input(p)?;
    }
    manifest.write(out, &[NODE_DATA])?;
    Ok(ExitCode::SUCCESS)
}

pub fn train_or_crossval(ctx: &Context, args: &RunArgs, all_folds: bool) -> Result<ExitCode> {
    let mut cfg = resolve(&args.common)?;
    let arch = match args.arch {
        ArchArg::Gcnn => Arch::Gcnn,
        ArchArg::Pcnn => Arch::Pcnn,
    };
    let samples = samples_for(load_dataset(&args.data)?, Some(arch), cfg.demean)?;
    let classes = samples.classes().max(2);
    let prototype = match (arch, samples.shape) {
        (Arch::Gcnn, gcnn_core::model::Shape::Mesh { level, channels }) => {
            let g = &mut cfg.gcnn;
            g.input_level = level;
            g.channels = channels;
            g.classes = classes;
            g.seed = cfg.seed;
            g.blocks = args.blocks.unwrap_or(g.blocks);
            g.filters = args.filters.unwrap_or(g.filters);
            g.hidden = args.hidden.unwrap_or(g.hidden);
            build_gcnn(None, g)?
        }
        (Arch::Pcnn, gcnn_core::model::Shape::Image { height, width, channels }) => {
            let p = &mut cfg.pcnn;
            (p.height, p.width, p.channels, p.classes, p.seed) = (height, width, channels, classes, cfg.seed);
            p.filters = args.filters.unwrap_or(p.filters);
            p.hidden = args.hidden.unwrap_or(p.hidden);
            build_pcnn(p)?
        }
        _ => unreachable!("samples_for matched the dataset to the architecture"),
    };
    let experiment = if all_folds { "crossval" } else { "train" };
    prepare_out(&args.common.out, &[&args.data])?;
    println!("{arch} network, {} samples of {}", samples.len(), samples.shape);
    print_layers(&prototype);
    let plan = stratified_split(&samples.labels, cfg.folds, cfg.test_fraction, cfg.seed)?;
    let mut best: Option<(f64, Model)> = None;
    let (records, summary) = if all_folds {
        let cv: CrossValidation = cross_validate(
            |seed| {
                let mut m = prototype.clone();
                m.reinitialize(seed);
                Ok(m)
            },
            &samples,
            &plan,
            &cfg.train,
            |_, model, record| {
                if best.as_ref().map_or(true, |(v, _)| record.best_val_error() < *v) {
                    best = Some((record.best_val_error(), model.clone()));
                }
                Ok(())
            },
        )?;
        (cv.records, cv.summary)
    } else {
        let mut model = prototype;
        let (train_idx, val_idx) = plan.fold(0);
        let mut record = train(&mut model, &samples, &train_idx, &val_idx, &cfg.train)?;
        record.fold = Some(0);
        if !plan.test.is_empty() {
            let eval = evaluate(&model, &samples, &plan.test)?;
            record.test_accuracy = Some(eval.accuracy());
            record.confusion = Some(eval.confusion);
        }
        let summary = summarize(&record.test_accuracy.into_iter().collect::<Vec<_>>());
        best = Some((record.best_val_error(), model));
        (vec![record], summary)
    };
    let out = &args.common.out;
    print_records(&records, &summary);
    write_results(out, experiment, arch, &records, &summary)?;
    let (_, model) = best.expect("at least one fold");
    save_checkpoint(&model, &out.join(CHECKPOINT))?;
    let mut manifest = ctx.manifest(experiment, json!({ "arch": arch, "experiment": cfg, "plan": plan }));
    manifest.input(&args.data)?;
    if let Some(p) = &args.common.config {
        manifest.input(p)?;
    }
    manifest.write(out, &[RECORDS, CURVES, CHECKPOINT])?;
    Ok(ExitCode::SUCCESS)
}

pub fn rotate(ctx: &Context, data: &Path, axis: Axis, degrees: f64, out: &Path) -> Result<ExitCode> {
    if !degrees.is_finite() {
        return Err(Error::Config(format!("rotation angle {degrees} is not finite")));
    }
    let maps = load_maps(data)?;
    prepare_out(out, &[data])?;
    let (level, channels) = maps.first().map_or((0, 0), |m| (m.level, m.channels));
    let h = IcosphereHierarchy::build(level)?;
    let q = Rotation::about(axis, degrees);
    let turned: Vec<NodeMap> = maps.par_iter().map(|m| rotate_map(m, &q, &h)).collect::<Result<_>>()?;
    save_node_maps(&out.join(NODE_DATA), level, channels, &turned)?;
    println!("rotated {} maps by {degrees} degrees about {axis:?}", turned.len());
    let mut manifest = ctx.manifest("rotate", json!({ "axis": axis, "degrees": degrees, "matrix": q.matrix() }));
    manifest.input(data)?;
    manifest.write(out, &[NODE_DATA])?;
    Ok(ExitCode::SUCCESS)
}

pub fn project(ctx: &Context, data: &Path, width: usize, height: usize, pad: usize, raw: bool, out: &Path) -> Result<ExitCode> {
    let maps = demean_all(load_maps(data)?, !raw)?;
    prepare_out(out, &[data])?;
    let level = maps.first().map_or(0, |m| m.level);
    let h = IcosphereHierarchy::build(level)?;
    let images: Vec<ImageMap> = maps
        .par_iter()
        .map(|m| project_equirectangular(m, &h, width, height, pad))
        .collect::<Result<_>>()?;
    save_images(&out.join(IMAGE_DATA), &images)?;
    println!(
        "projected {} maps to {}x{} images ({width}x{height} plus {pad} padding pixels per side)",
        images.len(),
        height + 2 * pad,
        width + 2 * pad
    );
    let config = json!({ "width": width, "height": height, "pad": pad, "demean": !raw });
    let mut manifest = ctx.manifest("project", config);
    manifest.input(data)?;
    manifest.write(out, &[IMAGE_DATA])?;
    Ok(ExitCode::SUCCESS)
}

pub fn transfer(ctx: &Context, checkpoint: &Path, data: &Path, freeze: Option<usize>, common: &CommonArgs) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let base = load_checkpoint(checkpoint, None::<Arc<IcosphereHierarchy>>)?;
    let samples = samples_for(load_dataset(data)?, Some(base.arch()), cfg.demean)?;
    let freeze = freeze.unwrap_or_else(|| base.default_freeze());
    prepare_out(&common.out, &[checkpoint, data])?;
    let rows = &base.spec().rows;
    if freeze > rows.len() {
        return Err(Error::Config(format!("cannot freeze {freeze} of {} rows", rows.len())));
    }
    match freeze {
        0 => println!("retraining all {} rows from a fresh initialization", rows.len()),
        f => println!(
            "reusing rows 1-{f} ({} .. {}), retraining rows {}-{}",
            rows[0].name,
            rows[f - 1].name,
            f + 1,
            rows.len()
        ),
    }
    let plan = stratified_split(&samples.labels, cfg.folds, cfg.test_fraction, cfg.seed)?;
    let cv = transfer_experiment(&base, &samples, freeze, &plan, &cfg.train)?;
    print_records(&cv.records, &cv.summary);
    write_results(&common.out, "transfer", base.arch(), &cv.records, &cv.summary)?;
    let mut manifest = ctx.manifest("transfer", json!({ "freeze": freeze, "experiment": cfg, "plan": plan }));
    manifest.input(checkpoint)?;
    manifest.input(data)?;
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.write(&common.out, &[RECORDS, CURVES])?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PairRow {
    first: String,
    second: String,
    t: f64,
    df: usize,
    p_raw: f64,
    p_corrected: f64,
}

pub fn stats(ctx: &Context, files: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    let mut groups = Vec::new();
    let mut names = Vec::new();
    for f in files {
        let rec: RecordsFile = read_json(f).map_err(|e| match e {
            Error::Config(m) => Error::Data(m),
            other => other,
        })?;
        let acc: Vec<f64> = rec.records.iter().filter_map(|r| r.test_accuracy).collect();
        let name = f.display().to_string();
        println!("{name}: {} folds, mean accuracy {:.4}", acc.len(), summarize(&acc).mean_accuracy);
        groups.push(acc);
        names.push(name);
    }
    if groups.iter().any(|g| g.len() != groups[0].len()) {
        eprintln!("warning: groups have different fold counts; running an unbalanced ANOVA");
    }
    let anova = one_way_anova(&groups)?;
    println!("F({},{}) = {:.3}, p = {:.4}", anova.df_between, anova.df_within, anova.f, anova.p);
    let pairs = bonferroni_pairwise(&groups)?;
    println!("{:<6} {:>9} {:>4} {:>9} {:>12}", "pair", "t", "df", "p", "p (Bonf.)");
    let rows: Vec<PairRow> = pairs
        .iter()
        .map(|p| {
            println!(
                "{:<6} {:>9.4} {:>4} {:>9.4} {:>12.4}",
                format!("{}-{}", p.first + 1, p.second + 1),
                p.t,
                p.df,
                p.p_raw,
                p.p_corrected
            );
            PairRow {
                first: names[p.first].clone(),
                second: names[p.second].clone(),
                t: p.t,
                df: p.df,
                p_raw: p.p_raw,
                p_corrected: p.p_corrected,
            }
        })
        .collect();
    if let Some(out) = out {
        prepare_out(out, &[])?;
        let path = out.join("stats.json");
        let body = json!({ "groups": names, "accuracies": groups, "anova": anova, "pairs": pairs });
        fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| io_context(e, &path))?;
        let path = out.join("stats.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        let mut manifest = ctx.manifest("stats", json!({ "records": files }));
        for f in files {
            manifest.input(f)?;
        }
        manifest.write(out, &["stats.json", "stats.csv"])?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify(suite: SuiteArg) -> Result<ExitCode> {
    let suites: Vec<Suite> = match suite {
        SuiteArg::Geometry => vec![Suite::Geometry],
        SuiteArg::Gradients => vec![Suite::Gradients],
        SuiteArg::Params => vec![Suite::Params],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let checks = run_suites(&suites)?;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:<9}  {:<40}  {}", c.suite, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// The recorded arguments with `--out` pointed at `out`, after checking
/// that the recorded inputs are unchanged.
pub fn replay_argv(manifest: &Path, out: &Path) -> Result<Vec<String>> {
    let m = RunManifest::load(manifest)?;
    m.verify_inputs()?;
    let mut argv = m.argv.clone();
    let out = out.display().to_string();
    match argv.iter().position(|a| a == "--out") {
        Some(i) if i + 1 < argv.len() => argv[i + 1] = out,
        _ => match argv.iter().position(|a| a.starts_with("--out=")) {
            Some(i) => argv[i] = format!("--out={out}"),
            None => return Err(Error::Config(format!("{} records no --out to redirect", manifest.display()))),
        },
    }
    Ok(argv)
}
