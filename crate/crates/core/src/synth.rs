//! Whole datasets: synthetic artifact sets from clean images and a pattern
//! bank, plus a small procedural set for experiments on the toy backbone.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compositor::{composite, place_pattern, synthesize_sample, CompositeSpec, PatternBank, PlacementOptions, SynthesizedSample};
use crate::data::{
    load_image, load_mask, save_image, save_mask, split_dataset, write_manifest, ClassTable, DatasetManifest, Image,
    Mask, Origin, Sample, SampleRecord, SplitRatios, CLEAN,
};
use crate::error::{Error, Result};

fn stream_rng(seed: u64, class_id: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class_id as u64) << 32) | index as u64);
    rng
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Clean images from `clean_dir`, each paired with `anchors_dir/<stem>.png`.
pub fn load_clean_dir(clean_dir: impl AsRef<Path>, anchors_dir: impl AsRef<Path>) -> Result<Vec<(Sample, Mask)>> {
    let anchors_dir = anchors_dir.as_ref();
    image_files(clean_dir.as_ref())?
        .par_iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let image = load_image(p)?;
            let anchor_path = anchors_dir.join(format!("{stem}.png"));
            if !anchor_path.exists() {
                return Err(Error::InvalidSample {
                    id: stem,
                    reason: format!("no anchor mask at {}", anchor_path.display()),
                });
            }
            let anchor = load_mask(&anchor_path)?;
            let (h, w) = image.dims();
            let sample = Sample {
                id: stem,
                mask: Mask::empty(h, w),
                image,
                class_id: CLEAN,
                origin: Origin::Clean,
                image_path: p.to_string_lossy().into_owned(),
                mask_path: None,
                object: None,
            };
            Ok((sample, anchor))
        })
        .collect()
}

/// `per_class_count` samples for every artifact class the bank has patterns
/// for, cycling through the clean images. Sample `i` of class `k` depends only
/// on `(seed, k, i)`.
pub fn synthesize_dataset(
    clean: &[(Sample, Mask)],
    bank: &PatternBank,
    per_class_count: usize,
    seed: u64,
) -> Result<Vec<SynthesizedSample>> {
    if clean.is_empty() {
        return Err(Error::arg("clean", "no clean images"));
    }
    let mut classes: Vec<usize> = bank.patterns.iter().map(|p| p.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let jobs: Vec<(usize, usize)> = classes
        .iter()
        .flat_map(|&k| (0..per_class_count).map(move |i| (k, i)))
        .collect();
    jobs.par_iter()
        .map(|&(k, i)| {
            let (src, anchor) = &clean[i % clean.len()];
            let mut out = synthesize_sample(src, bank, k, anchor, &mut stream_rng(seed, k, i))?;
            out.sample.id = format!("{}-k{k}-{i}", src.id);
            Ok(out)
        })
        .collect()
}

/// Writes images and masks under the manifest's directory, assigns splits
/// and writes the manifest.
pub fn write_dataset(
    manifest_path: impl AsRef<Path>,
    classes: &ClassTable,
    samples: &[(Sample, Option<f64>)],
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records: Vec<SampleRecord> = samples
        .par_iter()
        .map(|(s, phi)| {
            let image_path = format!("images/{}.png", s.id);
            save_image(&s.image, root.join(&image_path))?;
            let mask_path = if s.class_id == CLEAN {
                None
            } else {
                let p = format!("masks/{}.png", s.id);
                save_mask(&s.mask, root.join(&p))?;
                Some(p)
            };
            Ok(SampleRecord {
                id: s.id.clone(),
                image_path,
                mask_path,
                class_id: s.class_id,
                origin: s.origin,
                split: None,
                phi: *phi,
                object: s.object.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::from_records(root, records, classes.clone())?;
    let manifest = split_dataset(&manifest, ratios, seed)?;
    write_manifest(&manifest, manifest_path)?;
    Ok(manifest)
}

fn toy_clean<R: Rng>(size: usize, rng: &mut R) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.55));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let obj: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.2));
    let side = size / 4;
    let oy = rng.gen_range(0..size - side);
    let ox = rng.gen_range(0..size - side);
    let s = size as f64;
    Image::from_fn(size, size, |y, x, c| {
        if (oy..oy + side).contains(&y) && (ox..ox + side).contains(&x) {
            obj[c]
        } else {
            (base[c] + 0.15 * ((y as f64 / s - 0.5) * dy + (x as f64 / s - 0.5) * dx)).clamp(0.0, 1.0)
        }
    })
}

fn random_box<R: Rng>(size: usize, min: usize, max: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    let h = rng.gen_range(min..=max);
    let w = rng.gen_range(min..=max);
    (rng.gen_range(0..=size - h), rng.gen_range(0..=size - w), h, w)
}

fn box_mask(size: usize, (y0, x0, h, w): (usize, usize, usize, usize)) -> Mask {
    Mask::from_fn(size, size, |y, x| (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x))
}

/// Tinted copy of `clean` displaced by a few pixels inside a box.
fn toy_ghosting<R: Rng>(clean: &Image, rng: &mut R) -> Result<(Image, Mask, f64)> {
    let size = clean.height();
    let region = random_box(size, size / 3, size / 2, rng);
    let shift = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let pattern = Image::from_fn(size, size, |y, x, c| {
        let v = clean.0[[y.saturating_sub(shift.0), x.saturating_sub(shift.1), c]];
        0.5 * v + 0.5 * [0.1, 0.85, 0.35][c]
    });
    let mask = box_mask(size, region);
    let phi = rng.gen_range(0.55..0.75);
    Ok((composite(&CompositeSpec { clean, pattern: &pattern, mask: &mask, phi })?, mask, phi))
}

/// Radial glare placed on a small "sun" anchor.
fn toy_flare<R: Rng>(clean: &Image, rng: &mut R) -> Result<(Image, Mask, f64)> {
    let size = clean.height();
    let r = size as f64 / 5.0;
    let side = (2.0 * r) as usize + 1;
    let c = r;
    let pattern = Image::from_fn(side, side, |y, x, ch| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() / r;
        let v = (3.0 * (1.0 - d)).clamp(0.0, 1.0);
        v * [1.0, 0.95, 0.7][ch]
    });
    let anchor = box_mask(size, random_box(size, 2, 4, rng));
    let opts = PlacementOptions {
        jitter: 0.0,
        ..PlacementOptions::default()
    };
    let (placed, mask) = place_pattern(&pattern, &anchor, (size, size), &opts, rng)?;
    let phi = rng.gen_range(0.6..0.95);
    Ok((composite(&CompositeSpec { clean, pattern: &placed, mask: &mask, phi })?, mask, phi))
}

/// Fine diagonal stripes clipped to a "screen" box.
fn toy_moire<R: Rng>(clean: &Image, rng: &mut R) -> Result<(Image, Mask, f64)> {
    let size = clean.height();
    let period = rng.gen_range(2.5..3.5);
    let tilt = rng.gen_range(0.3..1.0);
    let pattern = Image::from_fn(size, size, |y, x, c| {
        let t = (std::f64::consts::TAU * (x as f64 + tilt * y as f64) / period).sin();
        (0.6 + 0.35 * t) * [0.95, 0.3, 0.9][c]
    });
    let mask = box_mask(size, random_box(size, size / 3, size / 2, rng));
    let phi = rng.gen_range(0.5..0.8);
    Ok((composite(&CompositeSpec { clean, pattern: &pattern, mask: &mask, phi })?, mask, phi))
}

/// `per_class` procedurally generated `size`×`size` samples per class
/// (clean included), ordered class by class.
///
/// Artifact classes beyond the third reuse the three toy styles in turn.
pub fn toy_dataset(classes: &ClassTable, per_class: usize, size: usize, seed: u64) -> Result<Vec<(Sample, Option<f64>)>> {
    if size < 16 {
        return Err(Error::arg("size", "toy images need at least 16 pixels per side"));
    }
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|k| (0..per_class).map(move |i| (k, i)))
        .collect();
    jobs.par_iter()
        .map(|&(k, i)| {
            let mut rng = stream_rng(seed, k, i);
            let clean = toy_clean(size, &mut rng);
            let (image, mask, phi) = match k {
                CLEAN => (clean, Mask::empty(size, size), None),
                _ => {
                    let (img, m, phi) = match (k - 1) % 3 {
                        0 => toy_ghosting(&clean, &mut rng)?,
                        1 => toy_flare(&clean, &mut rng)?,
                        _ => toy_moire(&clean, &mut rng)?,
                    };
                    (img, m, Some(phi))
                }
            };
            let name = classes.name(k).unwrap_or("class");
            Ok((
                Sample {
                    id: format!("toy-{name}-{i}"),
                    image,
                    mask,
                    class_id: k,
                    origin: if k == CLEAN { Origin::Clean } else { Origin::Synthetic },
                    image_path: String::new(),
                    mask_path: None,
                    object: None,
                },
                phi,
            ))
        })
        .collect()
}
