use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use tufa::data::annotations::{export_canonical, SampleRecord};
use tufa::data::imageio::save_png;
use tufa::data::synth::{synth_generate, Scheme, SchemeKind};
use tufa::data::{DatasetDescriptor, Sample};
use tufa::eval::export::{
    read_ced_csv, read_points_csv, read_report, write_attention, write_ced_csv, write_points_csv, write_report,
    AttentionExport,
};
use tufa::eval::plot::{write_ced_svg, write_overlay};
use tufa::eval::{evaluate_dataset, score_predictions, zero_shot_predict, MetricReport};
use tufa::geometry::{generate_scratch_shape, Point, Region};
use tufa::model::{Model, Prediction, PromptSource};
use tufa::train::{fewshot_finetune, train as run_training, with_mean_shape, EpochLog, TrainSet};
use tufa::{Result, TufaError};

use crate::config::{Overrides, RunConfig, ANNOTATION_FILE, DESCRIPTOR_FILE, RESOLVED_CONFIG};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TufaError + '_ {
    move |e| TufaError::io(path, e)
}

/// Creates `out`; refuses a non-empty directory unless `force`. A resolved
/// config left by a failed run does not count.
fn ensure_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(io_err(out))?;
        let occupied = entries.any(|e| e.map_or(true, |e| e.file_name() != RESOLVED_CONFIG));
        if occupied && !force {
            return Err(TufaError::InvalidArgument(format!(
                "output directory {} is not empty (use --force)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))
}

/// Output directory, resolved config (written before any work) and datasets.
pub fn prepare(out: &Path, config: Option<&Path>, overrides: &Overrides, force: bool) -> Result<RunConfig> {
    let cfg = RunConfig::load(config)?.resolve(overrides)?;
    if cfg.datasets.is_empty() {
        return Err(TufaError::InvalidArgument("no dataset given (use --dataset or [[datasets]])".into()));
    }
    ensure_out_dir(out, force)?;
    cfg.write_resolved(out)?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io_err(path))
}

pub fn synth(scheme: SchemeKind, count: usize, seed: u64, size: usize, out: &Path, force: bool) -> Result<()> {
    if size == 0 {
        return Err(TufaError::InvalidArgument("image size must be positive".into()));
    }
    let scheme = Scheme::new(scheme);
    let set = synth_generate(&scheme, count, seed, size)?;
    ensure_out_dir(out, force)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let px = size as f64;
    let mut records = Vec::with_capacity(count);
    for (k, s) in set.samples.iter().enumerate() {
        let image_path = images.join(format!("{k:05}.png"));
        save_png(&image_path, &s.image)?;
        records.push(SampleRecord {
            image_path,
            dataset_id: scheme.name.clone(),
            bbox: [0.0, 0.0, px, px],
            landmarks: s.landmarks.transformed(&tufa::geometry::AffineTransform::scaling(px, px)),
        });
    }
    export_canonical(&out.join(ANNOTATION_FILE), &records)?;
    write_json(&out.join(DESCRIPTOR_FILE), &scheme.descriptor())
}

fn load_datasets(cfg: &RunConfig, size: (usize, usize)) -> Result<Vec<(DatasetDescriptor, Vec<Sample>)>> {
    let loaded = cfg.datasets.iter().map(|e| e.load(size)).collect::<Result<Vec<_>>>()?;
    for (k, (d, _)) in loaded.iter().enumerate() {
        if loaded[..k].iter().any(|(o, _)| o.id == d.id) {
            return Err(TufaError::InvalidArgument(format!("dataset id `{}` given twice", d.id)));
        }
    }
    Ok(loaded)
}

struct EpochWriter {
    file: BufWriter<File>,
    path: PathBuf,
}

impl EpochWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        Ok(EpochWriter { file, path })
    }

    fn write(&mut self, log: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(log)?;
        writeln!(self.file, "{line}").and_then(|_| self.file.flush()).map_err(io_err(&self.path))
    }
}

fn save_outputs(model: &Model, out: &Path) -> Result<()> {
    model.save(&out.join("checkpoint.json"))?;
    for d in model.registry.iter() {
        write_points_csv(&out.join(format!("plane-{}.csv", d.id)), &model.plane_points(&d.id)?)?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_datasets(cfg, cfg.model.image_size)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    for (d, samples) in &data {
        model.register_dataset(with_mean_shape(d.clone(), samples)?)?;
    }
    let sets: Vec<TrainSet> = data
        .iter()
        .map(|(d, samples)| TrainSet { dataset_id: &d.id, samples })
        .collect();
    let mut log = EpochWriter::create(out.join("epochs.jsonl"))?;
    run_training(&mut model, &sets, &cfg.train, |entry, m| {
        log.write(entry)?;
        let e = entry.epoch + 1;
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.train.epochs {
            m.save(&out.join(format!("checkpoint-epoch{e:04}.json")))?;
        }
        Ok(())
    })?;
    save_outputs(&model, out)
}

pub fn fewshot(cfg: &RunConfig, out: &Path, checkpoint: &Path, shots: usize) -> Result<()> {
    let base = Model::load(checkpoint)?;
    let (d, samples) = cfg.datasets[0].load(base.config.image_size)?;
    if shots == 0 || shots > samples.len() {
        return Err(TufaError::InvalidArgument(format!(
            "--shots {shots} needs 1..={} (samples in the dataset)",
            samples.len()
        )));
    }
    let (model, logs) = fewshot_finetune(&base, d, &samples[..shots], &cfg.train)?;
    let mut log = EpochWriter::create(out.join("epochs.jsonl"))?;
    for l in &logs {
        log.write(l)?;
    }
    save_outputs(&model, out)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    source: &'a str,
    points: &'a [Point],
}

fn write_predictions(out: &Path, samples: &[Sample], predictions: &[Vec<Point>]) -> Result<()> {
    let path = out.join("predictions.jsonl");
    let mut text = String::new();
    for (s, p) in samples.iter().zip(predictions) {
        text += &serde_json::to_string(&PredictionLine { source: &s.source, points: p })?;
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))
}

/// Overlays and attention maps for the first `count` samples.
fn write_visuals(
    model: &Model,
    out: &Path,
    samples: &[Sample],
    source: PromptSource,
    labeled: bool,
    count: usize,
) -> Result<()> {
    let count = count.min(samples.len());
    if count == 0 {
        return Ok(());
    }
    let dir = out.join("overlays");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let grid = (
        model.config.image_size.0 / model.config.patch_size.0,
        model.config.image_size.1 / model.config.patch_size.1,
    );
    let mut exports = Vec::with_capacity(count);
    for (k, s) in samples[..count].iter().enumerate() {
        let Prediction { points, attention } = model.predict(&s.image, source)?;
        let labels = labeled.then(|| s.landmarks.coords());
        write_overlay(&dir.join(format!("{k:03}.png")), &s.image, &points, labels, 8)?;
        exports.push(AttentionExport::new(&s.source, grid, &attention));
    }
    write_attention(&out.join("attention.json"), &exports)
}

fn write_metrics(out: &Path, report: &MetricReport) -> Result<()> {
    write_report(&out.join("report.json"), report)?;
    write_ced_csv(&out.join("ced.csv"), &report.ced()?)
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let (d, samples) = cfg.datasets[0].load(model.config.image_size)?;
    let registered = model.registry.get(&d.id)?;
    if registered.n_landmarks != d.n_landmarks {
        return Err(TufaError::CountMismatch {
            expected: registered.n_landmarks,
            found: d.n_landmarks,
            context: format!("landmarks of `{}` in the checkpoint", d.id),
        });
    }
    let ev = evaluate_dataset(&model, &samples, &d, None, cfg.norm, &cfg.alphas)?;
    write_metrics(out, &ev.report)?;
    write_predictions(out, &samples, &ev.predictions)?;
    write_visuals(&model, out, &samples, PromptSource::dataset(&d.id), true, cfg.overlays)
}

pub enum Query {
    File(PathBuf),
    Scratch(usize),
}

pub fn zeroshot(cfg: &RunConfig, out: &Path, checkpoint: &Path, query: Query) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let points = match query {
        Query::File(p) => read_points_csv(&p)?,
        Query::Scratch(n) => generate_scratch_shape(n, Region::FULL_PLANE, cfg.seed)?,
    };
    write_points_csv(&out.join("query-points.csv"), &points)?;
    let (d, samples) = cfg.datasets[0].load(model.config.image_size)?;
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let predictions: Vec<Vec<Point>> = zero_shot_predict(&model, &points, &images)?
        .into_iter()
        .map(|p| p.points)
        .collect();
    write_predictions(out, &samples, &predictions)?;
    // labels are scored only when they correspond to the queried points
    let labeled = d.n_landmarks == points.len();
    if labeled {
        let report = score_predictions(&predictions, &samples, &d, cfg.norm, &cfg.alphas)?;
        write_metrics(out, &report)?;
    }
    write_visuals(&model, out, &samples, PromptSource::Points(&points), labeled, cfg.overlays)
}

pub fn plot(inputs: &[PathBuf], out: &Path, x_max: f64) -> Result<()> {
    let mut curves = Vec::with_capacity(inputs.len());
    for p in inputs {
        let is_csv = p.extension().is_some_and(|e| e == "csv");
        let points = if is_csv {
            read_ced_csv(p)?
        } else {
            read_report(p)?.ced()?.breakpoints()
        };
        curves.push((curve_label(p), points));
    }
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_ced_svg(out, &curves, x_max)
}

/// File stem, or the parent directory name for generic stems.
fn curve_label(p: &Path) -> String {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "report" || stem == "ced" {
        if let Some(dir) = p.parent().and_then(|d| d.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}
