//! Pipeline stages. Each reads the previous stage's artifacts under the
//! output root and writes its own under `<output_root>/<stage>/`.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use glioseg::autodiff::{ParamStore, Real, Tensor};
use glioseg::classifier::{self, extract_seg_features, radiomics_vector, Classifier, ClassifierRow};
use glioseg::metrics::{build_report, evaluate_case};
use glioseg::network;
use glioseg::nifti::read_nifti;
use glioseg::phantom::{brain_case, write_case_dir, BrainPhantom, TumorKind};
use glioseg::preprocess::{preprocess_case, CaseReport, PreprocessConfig};
use glioseg::radiomics::{self, FeatureRow};
use glioseg::training::{self, argmax_labels, epoch_csv, Sample};
use glioseg::vxl::{read_vxl, write_vxl, VxlArray};
use glioseg::{Error, LabelVolume, MultiChannelVolume, RegionId, Volume3D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{PipelineConfig, Precision};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::from(Error::io(dir, e)))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{what} ({})", path.display())))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())).into())
}

fn pool(cfg: &PipelineConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

/// Writes `n` phantom cases whose tumors cycle through full, non-enhancing
/// and edema-only compositions.
pub fn make_phantoms(dir: &Path, n: usize, seed: u64) -> Result<Vec<String>> {
    let kinds = [TumorKind::Full, TumorKind::NoEnhancing, TumorKind::EdemaOnly];
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let spec = BrainPhantom {
            tumor: kinds[i % kinds.len()],
            ..BrainPhantom::small()
        };
        let id = format!("case{:03}", i + 1);
        write_case_dir(dir, &id, &brain_case(&spec, seed.wrapping_add(i as u64)))?;
        ids.push(id);
    }
    Ok(ids)
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub target_dims: [usize; 3],
    pub cases: Vec<CaseReport>,
    pub skipped: Vec<Skipped>,
}

const CHANNELS: [&str; 3] = MultiChannelVolume::CANONICAL;

fn find_file(dir: &Path, id: &str, name: &str) -> Option<PathBuf> {
    ["vxl", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}_{name}.{ext}")))
        .find(|p| p.exists())
}

fn read_scalar(path: &Path) -> glioseg::Result<Volume3D> {
    if path.extension().is_some_and(|e| e == "nii") {
        read_nifti(path)
    } else {
        read_vxl(path)?.into_volume()
    }
}

fn read_labels(path: &Path) -> glioseg::Result<LabelVolume> {
    if path.extension().is_some_and(|e| e == "nii") {
        LabelVolume::from_volume(&read_nifti(path)?)
    } else {
        read_vxl(path)?.into_labels()
    }
}

enum Loaded {
    Case(MultiChannelVolume, LabelVolume),
    Skip(String),
}

fn load_raw_case(dir: &Path, id: &str) -> glioseg::Result<Loaded> {
    let mut vols = Vec::with_capacity(3);
    for name in CHANNELS {
        match find_file(dir, id, name) {
            Some(p) => vols.push(read_scalar(&p)?),
            None => return Ok(Loaded::Skip(format!("missing channel {name}"))),
        }
    }
    let Some(seg) = find_file(dir, id, "seg") else {
        return Ok(Loaded::Skip("missing channel seg".into()));
    };
    Ok(Loaded::Case(MultiChannelVolume::new(vols)?, read_labels(&seg)?))
}

pub fn discover_cases(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(CliError::config(format!("dataset root {} is not a directory", root.display())));
    }
    let entries = fs::read_dir(root).map_err(|e| CliError::dataset(format!("dataset root {}: {e}", root.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn preprocess(cfg: &PipelineConfig) -> Result<Manifest> {
    let ids = discover_cases(&cfg.dataset_root)?;
    let out = cfg.stage_dir("preprocess");
    let results: Vec<(String, std::result::Result<CaseReport, String>)> = pool(cfg)?.install(|| {
        ids.par_iter()
            .map(|id| {
                let dir = cfg.dataset_root.join(id);
                let r = (|| -> glioseg::Result<std::result::Result<CaseReport, String>> {
                    let (channels, labels) = match load_raw_case(&dir, id)? {
                        Loaded::Case(c, l) => (c, l),
                        Loaded::Skip(reason) => return Ok(Err(reason)),
                    };
                    let case = preprocess_case(id, &channels, &labels, &cfg.preprocess)?;
                    let case_dir = out.join(id);
                    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
                    write_vxl(case_dir.join("image.vxl"), &VxlArray::from(&case.channels))?;
                    write_vxl(case_dir.join("labels.vxl"), &VxlArray::from(&case.labels))?;
                    // Slice selection reads the ground truth, so inference
                    // stages get the whole cropped depth instead.
                    let full = if cfg.preprocess.slice_select {
                        let all_slices = PreprocessConfig {
                            slice_select: false,
                            ..cfg.preprocess.clone()
                        };
                        preprocess_case(id, &channels, &labels, &all_slices)?
                    } else {
                        case.clone()
                    };
                    write_vxl(case_dir.join("infer_image.vxl"), &VxlArray::from(&full.channels))?;
                    write_vxl(case_dir.join("infer_labels.vxl"), &VxlArray::from(&full.labels))?;
                    Ok(Ok(case.report))
                })();
                (id.clone(), r.unwrap_or_else(|e| Err(e.to_string())))
            })
            .collect()
    });
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rep) => cases.push(rep),
            Err(reason) => {
                eprintln!("skipping {id}: {reason}");
                skipped.push(Skipped { case_id: id, reason });
            }
        }
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        target_dims: cfg.preprocess.target_dims,
        cases,
        skipped,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    if manifest.cases.is_empty() {
        return Err(CliError::dataset(format!("no usable cases under {}", cfg.dataset_root.display())));
    }
    Ok(manifest)
}

struct Case {
    id: String,
    channels: MultiChannelVolume,
    labels: LabelVolume,
}

/// Which copy of the preprocessed cases to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    /// Depth restricted to the labelled slices.
    Train,
    /// Whole cropped depth.
    Infer,
}

fn load_preprocessed(cfg: &PipelineConfig, split: Split) -> Result<Vec<Case>> {
    let (image, labels) = match split {
        Split::Train => ("image.vxl", "labels.vxl"),
        Split::Infer => ("infer_image.vxl", "infer_labels.vxl"),
    };
    let dir = cfg.stage_dir("preprocess");
    let manifest: Manifest = read_json(&dir.join("manifest.json"), "preprocess manifest")?;
    if manifest.cases.is_empty() {
        return Err(CliError::dataset("preprocessed dataset is empty"));
    }
    manifest
        .cases
        .iter()
        .map(|r| {
            let case_dir = dir.join(&r.case_id);
            require(&case_dir.join(image), "preprocessed image")?;
            Ok(Case {
                id: r.case_id.clone(),
                channels: read_vxl(case_dir.join(image))?.into_channels()?,
                labels: read_vxl(case_dir.join(labels))?.into_labels()?,
            })
        })
        .collect()
}

// --------------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub run: training::TrainRun,
}

fn split(cases: &[Case], fraction: f64) -> usize {
    if cases.len() < 2 {
        return 0;
    }
    ((cases.len() as f64 * fraction).ceil() as usize).min(cases.len() - 1)
}

fn train_as<T: Real>(cfg: &PipelineConfig, cases: &[Case]) -> Result<TrainSummary> {
    let samples = cases
        .iter()
        .map(|c| Sample::<T>::new(&c.id, &c.channels, &c.labels))
        .collect::<glioseg::Result<Vec<_>>>()?;
    let n_val = split(cases, cfg.val_fraction);
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    let params = network::init_params::<T>(&cfg.network, cfg.seed)?;
    let out = training::train(&cfg.network, params, train_set, val_set, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  acc {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss.map(|v| format!("  val {v:.5}")).unwrap_or_default()
        );
        ControlFlow::Continue(())
    })?;
    let dir = cfg.stage_dir("train");
    let meta = json!({"config_hash": cfg.hash(), "seed": cfg.seed, "network": cfg.network, "best_epoch": out.run.best_epoch});
    fs::create_dir_all(&dir).map_err(|e| CliError::from(Error::io(&dir, e)))?;
    out.best.save(dir.join("model.ckpt"), meta.clone())?;
    out.last.save(dir.join("last.ckpt"), meta)?;
    write(
        &dir.join("epochs.csv"),
        cfg.csv_banner() + &epoch_csv(&out.run.records, !cfg.log_wall_time),
    )?;
    let mut run = out.run;
    if !cfg.log_wall_time {
        run.records.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        train_cases: train_set.iter().map(|s| s.id.clone()).collect(),
        val_cases: val_set.iter().map(|s| s.id.clone()).collect(),
        run,
    };
    write_json(&dir.join("run.json"), &summary)?;
    Ok(summary)
}

pub fn train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let cases = load_preprocessed(cfg, Split::Train)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, &cases),
        Precision::F64 => train_as::<f64>(cfg, &cases),
    }
}

fn load_model<T: Real>(cfg: &PipelineConfig) -> Result<ParamStore<T>> {
    let path = cfg.stage_dir("train").join("model.ckpt");
    require(&path, "model checkpoint")?;
    let (params, _) = ParamStore::<f32>::load(&path)?;
    let params = params.cast::<T>();
    network::check_params(&cfg.network, &params).map_err(|e| CliError::config(e.to_string()))?;
    Ok(params)
}

fn forward<T: Real>(cfg: &PipelineConfig, params: &ParamStore<T>, c: &Case) -> Result<(LabelVolume, Vec<Tensor<T>>)> {
    let img = training::image_tensor::<T>(&c.channels)?;
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    let (probs, heads) = network::predict(&cfg.network, params, img.reshape(shape)?)?;
    let labels = argmax_labels(probs.data(), c.channels.dims(), c.channels.spacing())?;
    Ok((labels, heads))
}

// ------------------------------------------------------------------- segment

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub config_hash: String,
    pub seed: u64,
    /// Voxels per label value `[0, 1, 2, 4]` for every case.
    pub cases: Vec<(String, [usize; 4])>,
}

fn segment_as<T: Real>(cfg: &PipelineConfig, cases: &[Case]) -> Result<SegmentSummary> {
    let params = load_model::<T>(cfg)?;
    let dir = cfg.stage_dir("segment");
    fs::create_dir_all(&dir).map_err(|e| CliError::from(Error::io(&dir, e)))?;
    let counts = pool(cfg)?.install(|| {
        cases
            .par_iter()
            .map(|c| {
                let (pred, _) = forward(cfg, &params, c)?;
                write_vxl(dir.join(format!("{}_pred.vxl", c.id)), &VxlArray::from(&pred))?;
                let mut n = [0usize; 4];
                for &l in pred.labels() {
                    n[training::class_of(l).expect("argmax emits known labels")] += 1;
                }
                Ok((c.id.clone(), n))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = SegmentSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cases: counts,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn segment(cfg: &PipelineConfig) -> Result<SegmentSummary> {
    let cases = load_preprocessed(cfg, Split::Infer)?;
    match cfg.precision {
        Precision::F32 => segment_as::<f32>(cfg, &cases),
        Precision::F64 => segment_as::<f64>(cfg, &cases),
    }
}

fn load_prediction(cfg: &PipelineConfig, id: &str) -> Result<LabelVolume> {
    let path = cfg.stage_dir("segment").join(format!("{id}_pred.vxl"));
    require(&path, "segmentation")?;
    Ok(read_vxl(path)?.into_labels()?)
}

// ------------------------------------------------------------------ evaluate

pub fn evaluate(cfg: &PipelineConfig) -> Result<glioseg::metrics::Report> {
    let cases = load_preprocessed(cfg, Split::Infer)?;
    let scores = cases
        .iter()
        .map(|c| Ok(evaluate_case(&c.id, &load_prediction(cfg, &c.id)?, &c.labels)?))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&cfg.dataset_name, &[("all".to_string(), scores)])?;
    let dir = cfg.stage_dir("evaluate");
    write(&dir.join("report.csv"), cfg.csv_banner() + &report.to_csv())?;
    let mut per_case = cfg.csv_banner() + "case_id,region,dsc,jcs,acc,prec,sen,spe,flags\n";
    for c in &report.cases {
        for r in &c.regions {
            let v = r.values();
            let flags: Vec<String> = r.flags().iter().map(|(m, f)| format!("{m}:{f:?}")).collect();
            per_case.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                c.case_id,
                r.region,
                v[0],
                v[1],
                v[2],
                v[3],
                v[4],
                v[5],
                flags.join(";")
            ));
        }
    }
    write(&dir.join("cases.csv"), per_case)?;
    write_json(
        &dir.join("report.json"),
        &json!({"config_hash": cfg.hash(), "seed": cfg.seed, "dataset": cfg.dataset_name, "rows": report.rows, "cases": report.cases}),
    )?;
    Ok(report)
}

// ----------------------------------------------------------------- radiomics

pub fn radiomics(cfg: &PipelineConfig) -> Result<Vec<FeatureRow>> {
    let cases = load_preprocessed(cfg, Split::Infer)?;
    let rows = pool(cfg)?.install(|| {
        cases
            .par_iter()
            .map(|c| Ok(radiomics::case_rows(&c.id, &load_prediction(cfg, &c.id)?)?))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<FeatureRow> = rows.into_iter().flatten().collect();
    write(
        &cfg.stage_dir("radiomics").join("features.csv"),
        cfg.csv_banner() + &radiomics::rows_to_csv(&rows),
    )?;
    Ok(rows)
}

fn strip_banner(text: &str) -> &str {
    match text.strip_prefix('#') {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

// ------------------------------------------------------------------ classify

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub config_hash: String,
    pub seed: u64,
    pub report: classifier::ClassificationReport,
}

fn classify_as<T: Real>(cfg: &PipelineConfig, cases: &[Case], rad: &[FeatureRow]) -> Result<ClassifySummary> {
    let params = load_model::<T>(cfg)?;
    let per_case = pool(cfg)?.install(|| {
        cases
            .par_iter()
            .map(|c| {
                let pred = load_prediction(cfg, &c.id)?;
                let (_, heads) = forward(cfg, &params, c)?;
                let truth = [RegionId::WT, RegionId::ET, RegionId::TC].map(|r| !c.labels.region_mask(r).is_empty());
                RegionId::ALL
                    .iter()
                    .map(|&region| {
                        let seg = extract_seg_features(&heads, &pred.region_mask(region))?;
                        let features = rad
                            .iter()
                            .find(|r| r.case_id == c.id && r.region == region)
                            .ok_or_else(|| CliError::missing(format!("radiomics row for {} {region}", c.id)))?;
                        Ok(ClassifierRow {
                            case_id: c.id.clone(),
                            region,
                            seg: seg.values,
                            rad: radiomics_vector(features.features.as_ref()),
                            labels: truth,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<ClassifierRow> = per_case.into_iter().flatten().collect();
    let clf = Classifier::train(&rows, &cfg.classifier)?;
    let report = clf.evaluate(&rows)?;
    let dir = cfg.stage_dir("classify");
    write(&dir.join("features.csv"), cfg.csv_banner() + &classifier::rows_to_csv(&rows))?;
    clf.save(dir.join("model.ckpt"))?;
    let mut csv = cfg.csv_banner() + "region,tp,fp,tn,fn,acc,prec,sen,spe,degenerate\n";
    for r in &report.regions {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.region, r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_, r.acc.value, r.prec.value, r.sen.value, r.spe.value, r.degenerate
        ));
    }
    let a = report.average;
    csv.push_str(&format!("average,,,,,{:.6},{:.6},{:.6},{:.6},\n", a[0], a[1], a[2], a[3]));
    write(&dir.join("report.csv"), csv)?;
    let summary = ClassifySummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        report,
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

pub fn classify(cfg: &PipelineConfig) -> Result<ClassifySummary> {
    let cases = load_preprocessed(cfg, Split::Infer)?;
    let path = cfg.stage_dir("radiomics").join("features.csv");
    require(&path, "radiomics features")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::from(Error::io(&path, e)))?;
    let rad = radiomics::rows_from_csv(strip_banner(&text))?;
    match cfg.precision {
        Precision::F32 => classify_as::<f32>(cfg, &cases, &rad),
        Precision::F64 => classify_as::<f64>(cfg, &cases, &rad),
    }
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    preprocess(cfg)?;
    train(cfg)?;
    segment(cfg)?;
    evaluate(cfg)?;
    radiomics(cfg)?;
    classify(cfg)?;
    Ok(())
}
