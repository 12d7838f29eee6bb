//! Samples, masks, class tables and dataset manifests.

mod io;
mod manifest;
mod split;

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use io::{load_image, load_mask, save_gray, save_image, save_mask};
pub use manifest::{load_manifest, sample_id_for, write_manifest, DatasetManifest, SampleRecord};
pub use split::{split_dataset, Split, SplitRatios};

use crate::error::{Error, Result};

/// Class id 0 is reserved for clean images.
pub const CLEAN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactClass {
    pub id: usize,
    pub name: String,
}

/// Ordered class table, index == class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    classes: Vec<ArtifactClass>,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self::new(["ghosting", "lens_flare", "moire"]).expect("default class table")
    }
}

impl ClassTable {
    /// Builds `clean` plus one class per artifact name, in order.
    pub fn new<S: AsRef<str>>(artifact_names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut classes = vec![ArtifactClass {
            id: CLEAN,
            name: "clean".into(),
        }];
        for name in artifact_names {
            let name = name.as_ref().trim().to_string();
            if name.is_empty() {
                return Err(Error::arg("artifact_names", "empty class name"));
            }
            if classes.iter().any(|c| c.name == name) {
                return Err(Error::arg("artifact_names", format!("duplicate class `{name}`")));
            }
            classes.push(ArtifactClass {
                id: classes.len(),
                name,
            });
        }
        if classes.len() < 2 {
            return Err(Error::arg("artifact_names", "need at least one artifact class"));
        }
        Ok(Self { classes })
    }

    /// Number of artifact classes, `K`.
    pub fn artifact_count(&self) -> usize {
        self.classes.len() - 1
    }

    /// `K + 1`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArtifactClass> {
        self.classes.iter()
    }

    pub fn artifact_ids(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.artifact_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
    Clean,
}

/// `H×W×3` RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(pub Array3<f64>);

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array3::zeros((height, width, 3)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self(Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Rec. 709 luma.
    pub fn luminance(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.dims(), |(y, x)| {
            0.2126 * self.0[[y, x, 0]] + 0.7152 * self.0[[y, x, 1]] + 0.0722 * self.0[[y, x, 2]]
        })
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let plan = crate::autograd::BilinearPlan::new(self.dims(), (height, width));
        let flat = self
            .0
            .to_shape((self.height() * self.width(), 3))
            .expect("contiguous image")
            .to_owned();
        let out = plan.apply(&flat);
        Image(out.into_shape_with_order((height, width, 3)).expect("resize shape"))
    }
}

/// Binary `H×W` mask stored as 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(pub Array2<u8>);

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Array2::from_shape_fn((height, width), |(y, x)| u8::from(f(y, x))))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[[y, x]] != 0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        let (h, w) = self.dims();
        if (h, w) == (height, width) {
            return self.clone();
        }
        Mask(Array2::from_shape_fn((height, width), |(y, x)| {
            let sy = (((y as f64 + 0.5) * h as f64 / height as f64) as usize).min(h - 1);
            let sx = (((x as f64 + 0.5) * w as f64 / width as f64) as usize).min(w - 1);
            self.0[[sy, sx]]
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub class_id: usize,
    pub origin: Origin,
    pub image_path: String,
    pub mask_path: Option<String>,
    /// Object-level description used for the `[cls]` prompt words.
    pub object: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ArtifactWithEmptyMask,
    CleanWithNonEmptyMask,
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    UnknownClass(usize),
    PixelOutOfRange,
    EmptyImage,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ArtifactWithEmptyMask => write!(f, "artifact sample with empty mask"),
            Self::CleanWithNonEmptyMask => write!(f, "clean sample with nonzero mask"),
            Self::ShapeMismatch { image, mask } => write!(
                f,
                "mask/image shape mismatch: image {}x{}, mask {}x{}",
                image.0, image.1, mask.0, mask.1
            ),
            Self::UnknownClass(id) => write!(f, "class id {id} is not in the class table"),
            Self::PixelOutOfRange => write!(f, "image values outside [0, 1]"),
            Self::EmptyImage => write!(f, "image has zero area"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self, id: &str) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let reason = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidSample {
            id: id.to_string(),
            reason,
        })
    }
}

/// Reports every violated sample invariant. Never fails.
pub fn validate_sample(sample: &Sample, classes: &ClassTable) -> ValidationReport {
    let mut violations = Vec::new();
    let image_dims = sample.image.dims();
    if image_dims.0 == 0 || image_dims.1 == 0 {
        violations.push(Violation::EmptyImage);
    }
    if sample.mask.dims() != image_dims {
        violations.push(Violation::ShapeMismatch {
            image: image_dims,
            mask: sample.mask.dims(),
        });
    }
    if sample.class_id >= classes.len() {
        violations.push(Violation::UnknownClass(sample.class_id));
    }
    let empty = sample.mask.is_empty();
    if sample.class_id == CLEAN && !empty {
        violations.push(Violation::CleanWithNonEmptyMask);
    }
    if sample.class_id != CLEAN && empty {
        violations.push(Violation::ArtifactWithEmptyMask);
    }
    if sample.image.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        violations.push(Violation::PixelOutOfRange);
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(class_id: usize, image: (usize, usize), mask: Mask) -> Sample {
        Sample {
            id: "s".into(),
            image: Image::from_fn(image.0, image.1, |_, _, _| 0.5),
            mask,
            class_id,
            origin: Origin::Real,
            image_path: "s.png".into(),
            mask_path: None,
            object: None,
        }
    }

    #[test]
    fn clean_sample_with_empty_mask_is_ok() {
        let s = sample(0, (8, 8), Mask::empty(8, 8));
        assert!(validate_sample(&s, &ClassTable::default()).is_ok());
    }

    #[test]
    fn moire_with_empty_mask_is_flagged() {
        let s = sample(3, (8, 8), Mask::empty(8, 8));
        let report = validate_sample(&s, &ClassTable::default());
        assert_eq!(report.violations, vec![Violation::ArtifactWithEmptyMask]);
        assert_eq!(
            report.violations[0].to_string(),
            "artifact sample with empty mask"
        );
    }

    #[test]
    fn shape_mismatch_is_flagged() {
        let s = sample(1, (64, 64), Mask::from_fn(32, 32, |y, _| y < 4));
        let report = validate_sample(&s, &ClassTable::default());
        assert!(report.violations[0]
            .to_string()
            .starts_with("mask/image shape mismatch"));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut s = sample(0, (4, 4), Mask::from_fn(2, 2, |_, _| true));
        s.image.0[[0, 0, 0]] = 1.5;
        let report = validate_sample(&s, &ClassTable::default());
        assert_eq!(report.violations.len(), 3);
        let err = report.into_result("abc").unwrap_err();
        assert!(err.to_string().contains("abc"));
    }

    #[test]
    fn class_table_orders_clean_first() {
        let t = ClassTable::default();
        assert_eq!(t.artifact_count(), 3);
        assert_eq!(t.name(0), Some("clean"));
        assert_eq!(t.id_of("moire"), Some(3));
        assert!(ClassTable::new(["a", "a"]).is_err());
    }

    #[test]
    fn image_resize_keeps_constant_images() {
        let img = Image::from_fn(5, 7, |_, _, c| c as f64 / 4.0);
        let r = img.resize(9, 3);
        assert_eq!(r.dims(), (9, 3));
        assert!(r.0.indexed_iter().all(|((_, _, c), v)| (v - c as f64 / 4.0).abs() < 1e-12));
    }
}
