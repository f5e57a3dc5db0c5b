//! JSON dataset manifests.
//!
//! ```json
//! {
//!   "task": "voc07",
//!   "banks": [{"name": "vgg", "path": "vgg.fbnk"}, {"name": "alex", "path": "alex.csv"}],
//!   "labels": "labels.lbls",
//!   "mode": "multi_label",
//!   "measure": "map",
//!   "split": {"train": [0, 1, 2], "test": [3, 4]}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Bank files ending
//! in `.csv` are read as CSV, everything else as `FBNK`. `split` is optional;
//! without it every sample is used for both training and evaluation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{binary, text};
use crate::error::{Error, Result};
use crate::metrics::Measure;
use crate::spectral::{FeatureBank, LabelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: String,
    pub banks: Vec<BankEntry>,
    pub labels: PathBuf,
    pub mode: TaskMode,
    pub measure: Measure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl DatasetManifest {
    /// Parses the manifest and checks everything that does not need the data files' contents.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_paths(base);
        manifest.validate()?;
        Ok(manifest)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for bank in &mut self.banks {
            if bank.path.is_relative() {
                bank.path = base.join(&bank.path);
            }
        }
        if self.labels.is_relative() {
            self.labels = base.join(&self.labels);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.banks.is_empty() {
            return Err(Error::Manifest("manifest lists no feature banks".into()));
        }
        let mut names = HashSet::new();
        for bank in &self.banks {
            if bank.name.is_empty() || bank.name.contains('+') {
                return Err(Error::Manifest(format!(
                    "bank name '{}' must be non-empty and must not contain '+'",
                    bank.name
                )));
            }
            if !names.insert(bank.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate bank name '{}'", bank.name)));
            }
            if !bank.path.is_file() {
                return Err(Error::Manifest(format!(
                    "bank '{}': file {} does not exist",
                    bank.name,
                    bank.path.display()
                )));
            }
        }
        if !self.labels.is_file() {
            return Err(Error::Manifest(format!(
                "label file {} does not exist",
                self.labels.display()
            )));
        }
        if let Some(split) = &self.split {
            let train: HashSet<usize> = split.train.iter().copied().collect();
            if train.len() != split.train.len() {
                return Err(Error::Manifest("train split has repeated indices".into()));
            }
            let mut test = HashSet::new();
            for &i in &split.test {
                if train.contains(&i) {
                    return Err(Error::Manifest(format!("sample {i} is in both train and test splits")));
                }
                if !test.insert(i) {
                    return Err(Error::Manifest("test split has repeated indices".into()));
                }
            }
            if split.train.is_empty() {
                return Err(Error::Manifest("train split is empty".into()));
            }
        }
        Ok(())
    }
}

fn read_bank_file(entry: &BankEntry) -> Result<FeatureBank> {
    let is_csv = entry
        .path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        text::read_bank_csv(&entry.path, &entry.name)
    } else {
        binary::read_bank(&entry.path, &entry.name)
    }
}

/// A manifest with all referenced data loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub banks: Vec<FeatureBank>,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let labels = binary::read_labels(&manifest.labels)?;
        let banks = manifest
            .banks
            .iter()
            .map(read_bank_file)
            .collect::<Result<Vec<_>>>()?;
        let dataset = Self { manifest, banks, labels };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.n();
        for bank in &self.banks {
            if bank.n() != n {
                return Err(Error::Manifest(format!(
                    "bank '{}' has {} samples, labels have {n}",
                    bank.name(),
                    bank.n()
                )));
            }
        }
        if let Some(split) = &self.manifest.split {
            if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= n) {
                return Err(Error::Manifest(format!(
                    "split index {bad} out of range for {n} samples"
                )));
            }
        }
        if self.manifest.mode == TaskMode::SingleLabel && !self.labels.is_one_hot() {
            return Err(Error::Manifest(
                "single_label task but some label rows are not one-hot".into(),
            ));
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        match &self.manifest.split {
            Some(split) => split.train.clone(),
            None => (0..self.labels.n()).collect(),
        }
    }

    pub fn test_indices(&self) -> Vec<usize> {
        match &self.manifest.split {
            Some(split) if !split.test.is_empty() => split.test.clone(),
            _ => (0..self.labels.n()).collect(),
        }
    }

    pub fn bank(&self, name: &str) -> Result<&FeatureBank> {
        self.banks
            .iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown bank '{name}'")))
    }
}
