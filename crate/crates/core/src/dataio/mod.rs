//! File formats, manifests, normalization and synthetic data.

pub mod binary;
pub mod manifest;
pub mod synth;
pub mod text;

pub use binary::{
    read_bank, read_labels, read_model, write_bank, write_labels, write_model,
};
pub use manifest::{BankEntry, Dataset, DatasetManifest, Split, TaskMode};
pub use synth::{generate_labels, generate_synthetic, split_indices, synthesize_bank, synthesize_partial_bank, SynthSpec, SyntheticData};
pub use text::{read_bank_csv, read_scores_csv, write_bank_csv, write_scores_csv};

use crate::error::{Error, Result};
use crate::spectral::FeatureBank;

/// Scales every sample column to unit Euclidean norm. Also returns the number
/// of negative entries, which break the nonnegativity the existence guarantee
/// for a fixed point relies on.
pub fn l2_normalize_columns(bank: &FeatureBank) -> Result<(FeatureBank, usize)> {
    let mut data = bank.data().clone();
    let mut negatives = 0;
    for (i, mut col) in data.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "bank '{}': sample column {i} is all zero and cannot be normalized",
                bank.name()
            )));
        }
        negatives += col.iter().filter(|&&v| v < 0.0).count();
        col /= norm;
    }
    if negatives > 0 {
        log::warn!("bank '{}': {negatives} negative feature values", bank.name());
    }
    Ok((FeatureBank::new(bank.name(), data)?, negatives))
}
