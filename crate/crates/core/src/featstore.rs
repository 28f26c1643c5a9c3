//! Labeled feature banks and the FBNK interchange format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      4 bytes  "FBNK"
//! version    u32      1
//! dim        u32
//! n_records  u64
//! n_classes  u32
//! n_records x { class_id u32, dim x f32 }
//! ```
//!
//! The split manifest lives next to the binary file as `<stem>.manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FBANK_MAGIC: [u8; 4] = *b"FBNK";
pub const FBANK_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub class_id: u32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
}

/// Assignment of every class to exactly one split. Keys are the dense class ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub provenance: String,
    pub classes: BTreeMap<u32, ClassEntry>,
}

impl SplitManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_of(&self, class_id: u32) -> Option<Split> {
        self.classes.get(&class_id).map(|e| e.split)
    }

    pub fn classes_in(&self, split: Split) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|(_, e)| e.split == split)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Class ids must be exactly `0..n_classes`.
    pub fn validate(&self) -> Result<()> {
        for (expected, &id) in self.classes.keys().enumerate() {
            if id as usize != expected {
                return Err(Error::Manifest(format!(
                    "class ids must be dense 0..{}; found {id} at position {expected}",
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
    pub manifest: SplitManifest,
}

impl FeatureBank {
    pub fn new(dim: usize, records: Vec<FeatureRecord>, manifest: SplitManifest) -> Result<Self> {
        let bank = FeatureBank {
            dim,
            records,
            manifest,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidBank("dim must be positive".into()));
        }
        self.manifest.validate()?;
        let n_classes = self.n_classes() as u32;
        for (i, rec) in self.records.iter().enumerate() {
            if rec.vector.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: rec.vector.len(),
                });
            }
            if rec.class_id >= n_classes {
                return Err(Error::InvalidBank(format!(
                    "record {i} has class_id {} but bank has {n_classes} classes",
                    rec.class_id
                )));
            }
            if let Some(c) = rec.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    record: i,
                    component: c,
                });
            }
        }
        Ok(())
    }
}

pub fn manifest_path(bank_path: &Path) -> PathBuf {
    bank_path.with_extension("manifest.json")
}

pub fn encode_bank(bank: &FeatureBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let dim = u32::try_from(bank.dim).map_err(|_| Error::InvalidBank("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + bank.records.len() * (4 + 4 * bank.dim));
    out.extend_from_slice(&FBANK_MAGIC);
    out.extend_from_slice(&FBANK_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(bank.records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(bank.n_classes() as u32).to_le_bytes());
    for rec in &bank.records {
        out.extend_from_slice(&rec.class_id.to_le_bytes());
        for v in &rec.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes the binary part of a bank. The manifest must declare the same class count as the header.
pub fn decode_bank(bytes: &[u8], manifest: SplitManifest) -> Result<FeatureBank> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader("magic"));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != FBANK_MAGIC {
        return Err(Error::BadMagic {
            expected: FBANK_MAGIC,
            found,
        });
    }
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader("version"));
    }
    let version = read_u32(bytes, 4);
    if version != FBANK_VERSION {
        return Err(Error::VersionMismatch {
            expected: FBANK_VERSION,
            found: version,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader("header"));
    }
    let dim = read_u32(bytes, 8) as usize;
    let n_records = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n_classes = read_u32(bytes, 20) as usize;
    if dim == 0 {
        return Err(Error::InvalidBank("dim must be positive".into()));
    }
    if n_classes != manifest.n_classes() {
        return Err(Error::Manifest(format!(
            "header declares {n_classes} classes, manifest lists {}",
            manifest.n_classes()
        )));
    }

    let rec_len = 4 + 4 * dim as u64;
    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = n_records.checked_mul(rec_len).ok_or_else(|| {
        Error::InvalidBank(format!("record count {n_records} overflows file size"))
    })?;
    if payload < expected {
        return Err(Error::TruncatedRecord {
            index: payload / rec_len,
        });
    }
    if payload > expected {
        return Err(Error::LengthMismatch {
            declared: n_records,
            expected_bytes: expected,
            actual_bytes: payload,
        });
    }

    let mut records = Vec::with_capacity(n_records as usize);
    for chunk in bytes[HEADER_LEN..].chunks_exact(rec_len as usize) {
        let class_id = read_u32(chunk, 0);
        let vector = chunk[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(FeatureRecord { class_id, vector });
    }
    FeatureBank::new(dim, records, manifest)
}

pub fn save_bank(bank: &FeatureBank, path: &Path) -> Result<()> {
    let bytes = encode_bank(bank)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json =
        serde_json::to_string_pretty(&bank.manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(mpath, e))
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SplitManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_bank(path: &Path) -> Result<FeatureBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = load_manifest(&manifest_path(path))?;
    decode_bank(&bytes, manifest)
}

/// Records of one split, borrowed from the bank.
#[derive(Debug, Clone)]
pub struct BankView<'a> {
    bank: &'a FeatureBank,
    split: Split,
    classes: Vec<u32>,
    indices: Vec<usize>,
}

pub fn view_split(bank: &FeatureBank, split: Split) -> BankView<'_> {
    let classes = bank.manifest.classes_in(split);
    let indices = bank
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| bank.manifest.split_of(r.class_id) == Some(split))
        .map(|(i, _)| i)
        .collect();
    BankView {
        bank,
        split,
        classes,
        indices,
    }
}

impl<'a> BankView<'a> {
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.bank.dim
    }

    /// Class ids assigned to this split, including ones without records.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Indices into the parent bank's record list.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &'a FeatureRecord> + '_ {
        self.indices.iter().map(move |&i| &self.bank.records[i])
    }

    pub fn to_labeled(&self) -> LabeledSet {
        LabeledSet {
            dim: self.bank.dim,
            vectors: self
                .records()
                .map(|r| r.vector.iter().map(|&v| v as f64).collect())
                .collect(),
            labels: self.records().map(|r| r.class_id).collect(),
        }
    }
}

/// Dense working copy of labeled vectors in f64, in stable record order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl LabeledSet {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if vectors.len() != labels.len() {
            return Err(Error::InvalidBank(format!(
                "{} vectors but {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(LabeledSet {
            dim,
            vectors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.by_class().into_keys().collect()
    }

    /// Row indices grouped by label, each group in ascending row order.
    pub fn by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.labels.iter().enumerate() {
            groups.entry(c).or_default().push(i);
        }
        groups
    }

    /// Applies `f` to every vector, keeping labels and order.
    pub fn map_vectors<F>(&self, out_dim: usize, f: F) -> LabeledSet
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        LabeledSet {
            dim: out_dim,
            vectors: self.vectors.iter().map(|v| f(v)).collect(),
            labels: self.labels.clone(),
        }
    }
}
