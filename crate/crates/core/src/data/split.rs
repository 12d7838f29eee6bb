use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Origin};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" | "valid" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::arg("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.check()?;
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn check(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("ratios", "ratios must be non-negative"));
        }
        if (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg("ratios", "ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items, then at least one item for
/// every split with a positive ratio.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Stratified, seeded train/val/test assignment.
///
/// Within each class the samples are shuffled per origin and laid out origin
/// by origin, then dealt to splits so every prefix of the sequence tracks the
/// target counts. Each origin block therefore lands in every split in
/// proportion.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ratios.check()?;
    let weights = ratios.as_array();
    let active = weights.iter().filter(|w| **w > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: BTreeMap<usize, BTreeMap<Origin, Vec<usize>>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class
            .entry(r.class_id)
            .or_default()
            .entry(r.origin)
            .or_default()
            .push(i);
    }

    let mut out = manifest.clone();
    for (class_id, origins) in by_class {
        let n: usize = origins.values().map(Vec::len).sum();
        if n < active {
            let name = manifest.class_table.name(class_id).unwrap_or("?");
            return Err(Error::arg(
                "manifest",
                format!("class `{name}` has {n} samples, fewer than {active} splits"),
            ));
        }
        let order: Vec<usize> = origins
            .into_values()
            .flat_map(|mut v| {
                v.shuffle(&mut rng);
                v
            })
            .collect();

        let target = allocate(n, weights);
        let mut assigned = [0usize; 3];
        for (pos, idx) in order.into_iter().enumerate() {
            let progress = (pos + 1) as f64 / n as f64;
            let pick = (0..3)
                .filter(|&s| assigned[s] < target[s])
                .max_by(|&a, &b| {
                    let da = target[a] as f64 * progress - assigned[a] as f64;
                    let db = target[b] as f64 * progress - assigned[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("targets sum to n");
            assigned[pick] += 1;
            out.records[idx].split = Some(Split::ALL[pick]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_id_for, ClassTable, SampleRecord};
    use proptest::prelude::*;

    fn manifest(per_class: &[(usize, Origin, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for &(class_id, origin, n) in per_class {
            for _ in 0..n {
                let image_path = format!("{}.png", records.len());
                records.push(SampleRecord {
                    id: sample_id_for(&image_path),
                    mask_path: (class_id != 0).then(|| "m.png".to_string()),
                    image_path,
                    class_id,
                    origin,
                    split: None,
                    phi: None,
                    object: None,
                });
            }
        }
        DatasetManifest::from_records(".", records, ClassTable::default()).unwrap()
    }

    fn counts(m: &DatasetManifest, class_id: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for r in m.records.iter().filter(|r| r.class_id == class_id) {
            c[Split::ALL.iter().position(|s| Some(*s) == r.split).unwrap()] += 1;
        }
        c
    }

    #[test]
    fn ten_per_class_gives_eight_one_one_deterministically() {
        let m = manifest(&[
            (0, Origin::Clean, 10),
            (1, Origin::Real, 10),
            (2, Origin::Synthetic, 10),
            (3, Origin::Real, 10),
        ]);
        let a = split_dataset(&m, SplitRatios::default(), 7).unwrap();
        let b = split_dataset(&m, SplitRatios::default(), 7).unwrap();
        assert_eq!(a, b);
        for k in 0..4 {
            assert_eq!(counts(&a, k), [8, 1, 1]);
        }
    }

    #[test]
    fn all_train() {
        let m = manifest(&[(0, Origin::Clean, 3), (1, Origin::Real, 2)]);
        let s = split_dataset(&m, SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 1).unwrap();
        assert!(s.records.iter().all(|r| r.split == Some(Split::Train)));
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let err = SplitRatios::new(0.5, 0.5, 0.5).unwrap_err();
        assert!(err.to_string().contains("ratios must sum to 1"));
    }

    #[test]
    fn too_small_class_is_an_error() {
        let m = manifest(&[(0, Origin::Clean, 10), (1, Origin::Real, 2)]);
        assert!(split_dataset(&m, SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn origins_are_spread_across_splits() {
        let m = manifest(&[(1, Origin::Real, 20), (1, Origin::Synthetic, 20), (0, Origin::Clean, 10)]);
        let s = split_dataset(&m, SplitRatios::new(0.5, 0.0, 0.5).unwrap(), 3).unwrap();
        for origin in [Origin::Real, Origin::Synthetic] {
            let train = s
                .records
                .iter()
                .filter(|r| r.origin == origin && r.split == Some(Split::Train))
                .count();
            assert!((9..=11).contains(&train), "{origin:?}: {train}");
        }
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(
            sizes in proptest::collection::vec(10usize..60, 4),
            train in 10u32..80,
            val in 10u32..40,
            seed in any::<u64>(),
        ) {
            let val = val.min(90 - train.min(80));
            let ratios = SplitRatios::new(
                train as f64 / 100.0,
                val as f64 / 100.0,
                (100 - train - val) as f64 / 100.0,
            ).unwrap();
            let spec: Vec<_> = sizes.iter().enumerate().map(|(k, &n)| {
                (k, if k == 0 { Origin::Clean } else { Origin::Real }, n)
            }).collect();
            let m = manifest(&spec);
            let s = split_dataset(&m, ratios, seed).unwrap();
            prop_assert_eq!(s.len(), m.len());
            prop_assert!(s.records.iter().all(|r| r.split.is_some()));
            prop_assert_eq!(s.split_assignments().len(), m.len());
            let w = [ratios.train, ratios.val, ratios.test];
            for (k, &n) in sizes.iter().enumerate() {
                let c = counts(&s, k);
                prop_assert_eq!(c.iter().sum::<usize>(), n);
                for j in 0..3 {
                    if w[j] * n as f64 >= 1.0 {
                        prop_assert!((c[j] as f64 - w[j] * n as f64).abs() <= 1.0, "{:?} {:?}", c, w);
                    }
                }
            }
        }
    }
}
