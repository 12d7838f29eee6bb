use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_image, load_mask, validate_sample, ClassTable, Mask, Origin, Sample, Split, CLEAN};
use crate::error::{Error, Result};

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub class_id: usize,
    pub origin: Origin,
    #[serde(default)]
    pub split: Option<Split>,
    /// Blend factor used when the sample was synthesized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    /// Optional object description for the prompt's `[cls]` slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

/// Content-addressed id: first 16 hex digits of SHA-256 over the image path.
pub fn sample_id_for(image_path: &str) -> String {
    let digest = Sha256::digest(image_path.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub class_table: ClassTable,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory records, checking only record-level
    /// invariants (unique ids, known classes, mask presence).
    pub fn from_records(
        root: impl Into<PathBuf>,
        records: Vec<SampleRecord>,
        class_table: ClassTable,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidSample {
                    id: r.id.clone(),
                    reason: "duplicate sample id".into(),
                });
            }
            if r.class_id >= class_table.len() {
                return Err(Error::InvalidSample {
                    id: r.id.clone(),
                    reason: format!("class id {} is not in the class table", r.class_id),
                });
            }
            if r.class_id != CLEAN && r.mask_path.is_none() {
                return Err(Error::InvalidSample {
                    id: r.id.clone(),
                    reason: "artifact sample without mask_path".into(),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            records,
            class_table,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Reads pixels for one record. Clean records without a mask get an
    /// all-zero mask of the image size.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample> {
        let image = load_image(self.resolve(&record.image_path))?;
        let mask = match &record.mask_path {
            Some(p) => load_mask(self.resolve(p))?,
            None => Mask::empty(image.height(), image.width()),
        };
        Ok(Sample {
            id: record.id.clone(),
            image,
            mask,
            class_id: record.class_id,
            origin: record.origin,
            image_path: record.image_path.clone(),
            mask_path: record.mask_path.clone(),
            object: record.object.clone(),
        })
    }

    /// Loads and validates every sample in `split` (all records if `None`),
    /// preserving manifest order.
    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.records
            .par_iter()
            .filter(|r| split.is_none() || r.split == split)
            .map(|r| {
                let s = self.load_sample(r)?;
                validate_sample(&s, &self.class_table).into_result(&s.id)?;
                Ok(s)
            })
            .collect()
    }

    pub fn class_histogram(&self) -> BTreeMap<String, usize> {
        let mut hist: BTreeMap<String, usize> = self
            .class_table
            .iter()
            .map(|c| (c.name.clone(), 0))
            .collect();
        for r in &self.records {
            let name = self.class_table.name(r.class_id).unwrap_or("?");
            *hist.entry(name.to_string()).or_default() += 1;
        }
        hist
    }

    pub fn split_assignments(&self) -> BTreeMap<String, Split> {
        self.records
            .iter()
            .filter_map(|r| r.split.map(|s| (r.id.clone(), s)))
            .collect()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }
}

/// Reads a line-delimited manifest and validates every referenced sample.
///
/// Errors name the offending line or sample id.
pub fn load_manifest(path: impl AsRef<Path>, class_table: &ClassTable) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                location: format!("{}:{}", path.display(), lineno + 1),
                reason: e.to_string(),
            })?;
        if record.id.is_empty() {
            record.id = sample_id_for(&record.image_path);
        }
        records.push(record);
    }

    let manifest = DatasetManifest::from_records(root, records, class_table.clone())?;
    manifest
        .records
        .par_iter()
        .try_for_each(|r| -> Result<()> {
            let s = manifest.load_sample(r)?;
            validate_sample(&s, &manifest.class_table).into_result(&s.id)
        })?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
