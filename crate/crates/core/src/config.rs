//! Flat `key = value` run configuration with command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Lists use commas.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Arch, Readout};
use crate::norm::NormKind;

/// Synthetic graph family used when no dataset directory is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synthetic {
    /// Two Erdős–Rényi edge densities.
    Er,
    /// Two regular degrees.
    Regular,
    /// Erdős–Rényi graphs of widely varying size (5–50 nodes).
    Mixed,
}

impl FromStr for Synthetic {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "er" => Ok(Synthetic::Er),
            "regular" => Ok(Synthetic::Regular),
            "mixed" => Ok(Synthetic::Mixed),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub dataset: String,
    pub output_dir: PathBuf,
    pub jobs: Option<usize>,

    pub arch: Arch,
    pub norm: NormKind,
    /// Norm kinds for a comparison sweep; empty means only `norm`.
    pub compare: Vec<NormKind>,
    pub layers: usize,
    pub hidden_dim: usize,
    pub mlp_depth: usize,
    pub readout: Readout,
    pub xi_learnable: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Cross-validation folds; below 2 trains on the whole set.
    pub folds: usize,

    pub synthetic: Synthetic,
    pub synthetic_graphs: usize,
    /// Graphs per aggregator in the spectrum survey (0 = all).
    pub spectrum_samples: usize,

    pub testbed_n: usize,
    pub testbed_m: usize,
    pub delta1: f64,
    pub trials: usize,
    pub steps: usize,

    pub probe_layer: usize,
    pub probe_dims: Vec<usize>,
    pub probe_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            dataset: "MUTAG".into(),
            output_dir: PathBuf::from("out"),
            jobs: None,
            arch: Arch::Gin,
            norm: NormKind::Graph,
            compare: Vec::new(),
            layers: 5,
            hidden_dim: 64,
            mlp_depth: 2,
            readout: Readout::Sum,
            xi_learnable: true,
            batch_size: 128,
            epochs: 100,
            lr: 1e-2,
            folds: 10,
            synthetic: Synthetic::Er,
            synthetic_graphs: 128,
            spectrum_samples: 0,
            testbed_n: 8,
            testbed_m: 2000,
            delta1: 0.05,
            trials: 20,
            steps: 200,
            probe_layer: 0,
            probe_dims: vec![0],
            probe_batch_size: 8,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "dataset",
    "output_dir",
    "jobs",
    "arch",
    "norm",
    "compare",
    "layers",
    "hidden_dim",
    "mlp_depth",
    "readout",
    "xi_learnable",
    "batch_size",
    "epochs",
    "lr",
    "folds",
    "synthetic",
    "synthetic_graphs",
    "spectrum_samples",
    "testbed_n",
    "testbed_m",
    "delta1",
    "trials",
    "steps",
    "probe_layer",
    "probe_dims",
    "probe_batch_size",
];

const NORMS: &str = "none, batch, layer, instance, graph";

fn bad(key: &str, value: &str, allowed: &str) -> Error {
    Error::BadValue {
        key: key.into(),
        value: value.into(),
        allowed: allowed.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str, allowed: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, allowed))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    match value.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(bad(key, value, "a positive integer")),
    }
}

fn list<T: FromStr>(key: &str, value: &str, allowed: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(key, value, allowed)))
        .collect()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value, "an unsigned 64-bit integer")?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dataset" => self.dataset = value.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "jobs" => self.jobs = Some(positive(key, value)?),
            "arch" => self.arch = parse(key, value, "gin, gcn")?,
            "norm" => self.norm = parse(key, value, NORMS)?,
            "compare" => self.compare = list(key, value, NORMS)?,
            "layers" => self.layers = positive(key, value)?,
            "hidden_dim" => self.hidden_dim = positive(key, value)?,
            "mlp_depth" => self.mlp_depth = positive(key, value)?,
            "readout" => self.readout = parse(key, value, "sum, mean")?,
            "xi_learnable" => self.xi_learnable = parse(key, value, "true, false")?,
            "batch_size" => self.batch_size = positive(key, value)?,
            "epochs" => self.epochs = positive(key, value)?,
            "lr" => {
                self.lr = match value.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => v,
                    _ => return Err(bad(key, value, "a positive number")),
                }
            }
            "folds" => self.folds = parse(key, value, "a non-negative integer")?,
            "synthetic" => self.synthetic = parse(key, value, "er, regular, mixed")?,
            "synthetic_graphs" => self.synthetic_graphs = positive(key, value)?,
            "spectrum_samples" => self.spectrum_samples = parse(key, value, "a non-negative integer")?,
            "testbed_n" => self.testbed_n = positive(key, value)?,
            "testbed_m" => self.testbed_m = positive(key, value)?,
            "delta1" => {
                self.delta1 = match value.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.is_finite() => v,
                    _ => return Err(bad(key, value, "a non-negative number")),
                }
            }
            "trials" => self.trials = positive(key, value)?,
            "steps" => self.steps = positive(key, value)?,
            "probe_layer" => self.probe_layer = parse(key, value, "a non-negative integer")?,
            "probe_dims" => self.probe_dims = list(key, value, "comma-separated non-negative integers")?,
            "probe_batch_size" => self.probe_batch_size = positive(key, value)?,
            other => {
                return Err(Error::UnknownKey {
                    key: other.into(),
                    allowed: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: source.into(),
                line: idx + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| bad("--set", assignment, "key=value"))?;
        self.set(key, value)
    }

    /// Norm kinds to train: the comparison list, or just `norm`.
    pub fn norm_kinds(&self) -> Vec<NormKind> {
        if self.compare.is_empty() {
            vec![self.norm]
        } else {
            self.compare.clone()
        }
    }
}
