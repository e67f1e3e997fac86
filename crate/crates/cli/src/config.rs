//! Pipeline configuration: preset defaults, a JSON file and `--set`
//! overrides merged into one value, hashed into every output.

use std::path::{Path, PathBuf};

use glioseg::classifier::ClassifierConfig;
use glioseg::network::NetworkConfig;
use glioseg::preprocess::PreprocessConfig;
use glioseg::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    pub dataset_name: String,
    pub preset: Preset,
    pub seed: u64,
    pub precision: Precision,
    /// Case-level worker threads, 0 for one per core.
    pub jobs: usize,
    /// Trailing fraction of cases held out for validation during training.
    pub val_fraction: f64,
    /// Write measured epoch times into the epoch CSV (otherwise 0, keeping
    /// logs of identical runs byte-identical).
    pub log_wall_time: bool,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self {
                dataset_root: PathBuf::from("data"),
                output_root: PathBuf::from("out"),
                dataset_name: "phantom".into(),
                preset,
                seed: 0,
                precision: Precision::F64,
                jobs: 0,
                val_fraction: 0.25,
                log_wall_time: false,
                preprocess: PreprocessConfig {
                    target_dims: [32, 32, 32],
                    ..PreprocessConfig::default()
                },
                network: NetworkConfig::toy(),
                train: TrainConfig {
                    epochs: 25,
                    batch_size: 2,
                    max_steps: Some(50),
                    ..TrainConfig::default()
                },
                classifier: ClassifierConfig::default(),
            },
            Preset::Paper => Self {
                preset,
                precision: Precision::F32,
                preprocess: PreprocessConfig::default(),
                network: NetworkConfig::paper(),
                train: TrainConfig::paper(),
                val_fraction: 0.2,
                ..Self::preset(Preset::Toy)
            },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: glioseg::Error| CliError::config(e.to_string());
        self.network.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if self.network.input_dims != self.preprocess.target_dims {
            return Err(CliError::config(format!(
                "network input dims {:?} differ from preprocess target dims {:?}",
                self.network.input_dims, self.preprocess.target_dims
            )));
        }
        if self.network.in_channels != 3 || self.network.classes != 4 {
            return Err(CliError::config("the pipeline uses 3 input channels and 4 classes"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::config("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the substantive settings; paths and worker count are
    /// excluded so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for k in ["dataset_root", "output_root", "jobs"] {
            v.as_object_mut().expect("object").remove(k);
        }
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_root.join(stage)
    }

    /// `# config_hash=… seed=…` line heading every CSV output.
    pub fn csv_banner(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash(), self.seed)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::config(format!("--set {key}: unknown key {part:?}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::config(format!("--set {key}: unknown key {part:?}")))?;
    }
    Ok(())
}

/// Command-line sources of configuration, lowest precedence first after
/// the preset: file, `--set`, then the dedicated flags.
#[derive(Debug, Clone, Default)]
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub sets: &'a [String],
    pub dataset_root: Option<&'a Path>,
    pub output_root: Option<&'a Path>,
}

pub fn load(src: &Sources) -> Result<PipelineConfig, CliError> {
    let file: Option<Value> = match src.file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?)
        }
        None => None,
    };
    let preset = match (src.preset, file.as_ref().and_then(|f| f.get("preset"))) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| CliError::config(format!("preset: {e}")))?,
        (None, None) => Preset::Toy,
    };
    let mut value = serde_json::to_value(PipelineConfig::preset(preset)).expect("preset serializes");
    if let Some(f) = file {
        if !f.is_object() {
            return Err(CliError::config("config file must hold a JSON object"));
        }
        merge(&mut value, f);
    }
    value["preset"] = serde_json::to_value(preset).expect("preset serializes");
    for s in src.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_path(&mut value, k.trim(), v.trim())?;
    }
    let mut cfg: PipelineConfig =
        serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
    if let Some(s) = src.seed {
        cfg.seed = s;
    }
    if let Some(j) = src.jobs {
        cfg.jobs = j;
    }
    if let Some(p) = src.dataset_root {
        cfg.dataset_root = p.to_path_buf();
    }
    if let Some(p) = src.output_root {
        cfg.output_root = p.to_path_buf();
    }
    cfg.train.seed = cfg.seed;
    cfg.classifier.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_total_and_roundtrip() {
        for p in [Preset::Toy, Preset::Paper] {
            let c = PipelineConfig::preset(p);
            c.validate().unwrap();
            let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        let paper = PipelineConfig::preset(Preset::Paper);
        assert_eq!(paper.preprocess.target_dims, [128; 3]);
        assert_eq!(paper.train.optimizer.lr, 1e-4);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = vec!["train.epochs=7".to_string(), "classifier.alpha=0.25".into(), "dataset_name=x".into()];
        let cfg = load(&Sources {
            sets: &sets,
            seed: Some(9),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.classifier.alpha, 0.25);
        assert_eq!(cfg.dataset_name, "x");
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        let typo = vec!["train.epoch=7".to_string()];
        let err = load(&Sources { sets: &typo, ..Default::default() }).unwrap_err();
        assert_eq!(err.code, 4);
    }

    #[test]
    fn hash_ignores_paths() {
        let a = PipelineConfig::preset(Preset::Toy);
        let mut b = a.clone();
        b.output_root = "elsewhere".into();
        b.jobs = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
