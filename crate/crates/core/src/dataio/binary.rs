//! `FBNK`, `LBLS` and `BMDL` little-endian binary formats.
//!
//! ```text
//! FBNK  magic "FBNK" | version u32 | D u64 | N u64 | D·N f64, row-major
//! LBLS  magic "LBLS" | version u32 | N u64 | K u64 | N·K u8 ∈ {0,1}, row-major
//! BMDL  magic "BMDL" | version u32 | D u64 | K u64 | K f64 lambdas
//!       | D·K f64 weights, column-major by class | overall evidence f64
//!       | signature length u64 | signature UTF-8 bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lssvm::ClassifierModel;
use crate::spectral::{FeatureBank, LabelMatrix};

pub const FORMAT_VERSION: u32 = 1;
pub const BANK_MAGIC: &[u8; 4] = b"FBNK";
pub const LABELS_MAGIC: &[u8; 4] = b"LBLS";
pub const MODEL_MAGIC: &[u8; 4] = b"BMDL";

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, offset: 0 }
    }

    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(out)
            }
            None => Err(self.error(
                self.offset,
                format!(
                    "truncated while reading {what}: need {len} bytes, {} available",
                    self.bytes.len() - self.offset
                ),
            )),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.error(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        let start = self.offset;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.error(start, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let start = self.offset;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.error(start, format!("{what} {v} does not fit in memory")))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes_len = count
            .checked_mul(8)
            .ok_or_else(|| self.error(self.offset, format!("{what} length overflows")))?;
        let start = self.offset;
        let raw = self.take(bytes_len, what)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.error(start + 8 * i, format!("non-finite value in {what}")));
        }
        Ok(values)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.error(
                self.offset,
                format!("{} trailing bytes", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(capacity + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_bank(bank: &FeatureBank) -> Vec<u8> {
    let mut out = header(BANK_MAGIC, 16 + 8 * bank.d() * bank.n());
    out.extend_from_slice(&(bank.d() as u64).to_le_bytes());
    out.extend_from_slice(&(bank.n() as u64).to_le_bytes());
    put_f64s(&mut out, bank.to_row_major());
    out
}

pub fn decode_bank(bytes: &[u8], name: &str, path: &Path) -> Result<FeatureBank> {
    let mut r = Reader::new(path, bytes);
    r.magic(BANK_MAGIC)?;
    let d = r.len("D")?;
    let n = r.len("N")?;
    let count = d
        .checked_mul(n)
        .ok_or_else(|| r.error(8, "D·N overflows"))?;
    let values = r.f64s(count, "feature values")?;
    r.finish()?;
    FeatureBank::from_row_major(name, d, n, &values).map_err(|e| r.error(8, e.to_string()))
}

pub fn encode_labels(labels: &LabelMatrix) -> Vec<u8> {
    let mut out = header(LABELS_MAGIC, 16 + labels.as_bytes().len());
    out.extend_from_slice(&(labels.n() as u64).to_le_bytes());
    out.extend_from_slice(&(labels.k() as u64).to_le_bytes());
    out.extend_from_slice(labels.as_bytes());
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelMatrix> {
    let mut r = Reader::new(path, bytes);
    r.magic(LABELS_MAGIC)?;
    let n = r.len("N")?;
    let k = r.len("K")?;
    let count = n.checked_mul(k).ok_or_else(|| r.error(8, "N·K overflows"))?;
    let start = r.offset;
    let data = r.take(count, "label bytes")?.to_vec();
    r.finish()?;
    if let Some(i) = data.iter().position(|&b| b > 1) {
        return Err(r.error(
            start + i,
            format!("label at (row {}, col {}) is {}, expected 0 or 1", i / k, i % k, data[i]),
        ));
    }
    LabelMatrix::from_row_major(n, k, data).map_err(|e| r.error(8, e.to_string()))
}

pub fn encode_model(model: &ClassifierModel) -> Vec<u8> {
    let (d, k) = (model.d(), model.k());
    let sig = model.bank_signature.as_bytes();
    let mut out = header(MODEL_MAGIC, 16 + 8 * (k + d * k + 2) + sig.len());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(k as u64).to_le_bytes());
    put_f64s(&mut out, model.lambdas.iter().copied());
    // nalgebra storage is column-major, which is the on-disk order
    put_f64s(&mut out, model.weights.iter().copied());
    put_f64s(&mut out, [model.overall_evidence]);
    out.extend_from_slice(&(sig.len() as u64).to_le_bytes());
    out.extend_from_slice(sig);
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<ClassifierModel> {
    let mut r = Reader::new(path, bytes);
    r.magic(MODEL_MAGIC)?;
    let d = r.len("D")?;
    let k = r.len("K")?;
    let lambdas = r.f64s(k, "lambdas")?;
    if let Some(i) = lambdas.iter().position(|&l| l <= 0.0) {
        return Err(r.error(24 + 8 * i, "lambda must be positive"));
    }
    let count = d.checked_mul(k).ok_or_else(|| r.error(8, "D·K overflows"))?;
    let weights = r.f64s(count, "weights")?;
    let overall_evidence = r.f64s(1, "overall evidence")?[0];
    let sig_len = r.len("signature length")?;
    let start = r.offset;
    let sig = r.take(sig_len, "signature")?;
    let bank_signature = String::from_utf8(sig.to_vec())
        .map_err(|e| r.error(start + e.utf8_error().valid_up_to(), "signature is not valid UTF-8"))?;
    r.finish()?;
    Ok(ClassifierModel {
        weights: DMatrix::from_column_slice(d, k, &weights),
        lambdas,
        per_class: Vec::new(),
        overall_evidence,
        bank_signature,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bank name used when none is given: the file stem.
pub fn default_bank_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(path).display().to_string())
}

pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    write_all(path, &encode_bank(bank))
}

pub fn read_bank(path: &Path, name: &str) -> Result<FeatureBank> {
    decode_bank(&read_all(path)?, name, path)
}

pub fn write_labels(path: &Path, labels: &LabelMatrix) -> Result<()> {
    write_all(path, &encode_labels(labels))
}

pub fn read_labels(path: &Path) -> Result<LabelMatrix> {
    decode_labels(&read_all(path)?, path)
}

pub fn write_model(path: &Path, model: &ClassifierModel) -> Result<()> {
    write_all(path, &encode_model(model))
}

pub fn read_model(path: &Path) -> Result<ClassifierModel> {
    decode_model(&read_all(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn bank_layout_is_exact() {
        let bank = FeatureBank::from_row_major("b", 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_bank(&bank);
        assert_eq!(&bytes[..4], b"FBNK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &2.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 48);
        assert_eq!(decode_bank(&bytes, "b", p()).unwrap(), bank);
    }

    #[test]
    fn truncated_bank_names_offset() {
        let bank = FeatureBank::from_row_major("b", 2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_bank(&bank);
        match decode_bank(&bytes[..50], "b", p()) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 24);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_bank(b"XXXX", "b", p()), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn non_finite_bank_value_rejected() {
        let bank = FeatureBank::from_row_major("b", 1, 2, &[1.0, 2.0]).unwrap();
        let mut bytes = encode_bank(&bank);
        bytes[32..40].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_bank(&bytes, "b", p()), Err(Error::Format { offset: 32, .. })));
    }

    #[test]
    fn bad_label_byte_reports_position() {
        let labels = LabelMatrix::from_row_major(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut bytes = encode_labels(&labels);
        bytes[24 + 3] = 2;
        match decode_labels(&bytes, p()) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 27);
                assert!(message.contains("row 1, col 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_layout_is_column_major_by_class() {
        let model = ClassifierModel {
            weights: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            lambdas: vec![0.5, 2.0],
            per_class: Vec::new(),
            overall_evidence: -12.5,
            bank_signature: "a+b".into(),
        };
        let bytes = encode_model(&model);
        let f = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        assert_eq!((f(24), f(32)), (0.5, 2.0));
        assert_eq!((f(40), f(48), f(56), f(64)), (1.0, 3.0, 2.0, 4.0));
        assert_eq!(f(72), -12.5);
        assert_eq!(&bytes[80..88], &3u64.to_le_bytes());
        assert_eq!(&bytes[88..], b"a+b");
        assert_eq!(decode_model(&bytes, p()).unwrap(), model);
    }

    proptest! {
        #[test]
        fn bank_round_trip_is_byte_identical(d in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let bank = FeatureBank::from_row_major("p", d, n, &values).unwrap();
            let bytes = encode_bank(&bank);
            let back = decode_bank(&bytes, "p", p()).unwrap();
            prop_assert_eq!(encode_bank(&back), bytes);
        }

        #[test]
        fn labels_round_trip(n in 1usize..8, k in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..n * k).map(|_| rng.random_range(0..2)).collect();
            let labels = LabelMatrix::from_row_major(n, k, data).unwrap();
            let bytes = encode_labels(&labels);
            prop_assert_eq!(decode_labels(&bytes, p()).unwrap(), labels);
        }
    }
}
