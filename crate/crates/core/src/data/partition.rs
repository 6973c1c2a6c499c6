use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{generate_phantom, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Label composition of every client and of the server test set.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<(Label, usize)>>,
    pub server_test: Vec<(Label, usize)>,
    /// Multiplier applied to every count.
    pub scale: f64,
    pub seed: u64,
}

impl PartitionPlan {
    /// Three label-skewed clients and a mixed server test set:
    /// 400 benign + 50 normal; 200 malignant + 50 normal;
    /// 110 benign + 53 malignant; test 97 benign + 23 malignant + 34 normal.
    pub fn reference(scale: f64, seed: u64) -> Self {
        PartitionPlan {
            clients: vec![
                vec![(Label::Benign, 400), (Label::Normal, 50)],
                vec![(Label::Malignant, 200), (Label::Normal, 50)],
                vec![(Label::Benign, 110), (Label::Malignant, 53)],
            ],
            server_test: vec![(Label::Benign, 97), (Label::Malignant, 23), (Label::Normal, 34)],
            scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config("data.scale", "must be a positive number"));
        }
        if self.clients.is_empty() {
            return Err(Error::config("data.clients", "at least one client is required"));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.iter().all(|&(_, n)| n == 0) {
                return Err(Error::config(format!("data.clients[{i}]"), "client has no samples"));
            }
        }
        if self.server_test.iter().all(|&(_, n)| n == 0) {
            return Err(Error::config("data.server_test", "server test set is empty"));
        }
        Ok(())
    }

    fn scaled(&self, composition: &[(Label, usize)]) -> Vec<(Label, usize)> {
        let mut out: Vec<(Label, usize)> = composition
            .iter()
            .map(|&(l, n)| (l, scaled_count(n, self.scale)))
            .collect();
        out.sort_by_key(|&(l, _)| l);
        out
    }

    /// Scaled compositions in label order: clients first, then the server
    /// test set. Listing order in the plan does not affect the samples.
    pub fn scaled_compositions(&self) -> Vec<Vec<(Label, usize)>> {
        self.clients
            .iter()
            .chain(std::iter::once(&self.server_test))
            .map(|c| self.scaled(c))
            .collect()
    }
}

/// `count · scale` rounded to nearest, but never below 1 for a non-zero count.
pub fn scaled_count(count: usize, scale: f64) -> usize {
    if count == 0 {
        0
    } else {
        ((count as f64 * scale).round() as usize).max(1)
    }
}

pub enum SampleSource<'a> {
    /// Fresh phantoms of the given edge length.
    Synthetic { size: usize },
    /// Draw without replacement from an existing dataset.
    Pool(&'a Dataset),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clients: Vec<Dataset>,
    pub server_test: Dataset,
}

/// Materializes `plan`. Every sample lands in exactly one partition.
pub fn build_partition(plan: &PartitionPlan, source: &SampleSource<'_>) -> Result<Partition> {
    plan.validate()?;
    let compositions = plan.scaled_compositions();
    let mut datasets: Vec<Dataset> = match source {
        SampleSource::Synthetic { size } => {
            if *size == 0 {
                return Err(Error::config("data.image_size", "must be positive"));
            }
            let mut next_id = 0u64;
            compositions
                .iter()
                .enumerate()
                .map(|(p, comp)| {
                    let mut samples = Vec::new();
                    for &(label, n) in comp {
                        for k in 0..n {
                            let mut r = rng::stream(
                                plan.seed,
                                &[tag::PHANTOM, p as u64, label.index() as u64, k as u64],
                            );
                            let mut s = generate_phantom(label, *size, &mut r);
                            s.id = next_id;
                            next_id += 1;
                            samples.push(s);
                        }
                    }
                    Dataset::new(samples)
                })
                .collect()
        }
        SampleSource::Pool(pool) => {
            let mut by_label: BTreeMap<Label, Vec<&Sample>> = BTreeMap::new();
            for s in pool.iter() {
                by_label.entry(s.label).or_default().push(s);
            }
            for (label, list) in by_label.iter_mut() {
                list.shuffle(&mut rng::stream(plan.seed, &[tag::POOL, label.index() as u64]));
            }
            let mut cursor: BTreeMap<Label, usize> = BTreeMap::new();
            let mut out = Vec::new();
            for comp in &compositions {
                let mut samples = Vec::new();
                for &(label, n) in comp {
                    let list = by_label.get(&label).map(Vec::as_slice).unwrap_or(&[]);
                    let start = *cursor.get(&label).unwrap_or(&0);
                    if start + n > list.len() {
                        return Err(Error::config(
                            "data.scale",
                            format!(
                                "plan needs at least {} {label} samples, source has {}",
                                start + n,
                                list.len()
                            ),
                        ));
                    }
                    samples.extend(list[start..start + n].iter().map(|&s| s.clone()));
                    cursor.insert(label, start + n);
                }
                out.push(Dataset::new(samples));
            }
            out
        }
    };
    let server_test = datasets.pop().expect("server composition present");
    Ok(Partition {
        clients: datasets,
        server_test,
    })
}

/// Label-stratified split. Each present label contributes
/// `max(1, round(fraction · n_label))` samples to the test side.
/// Both sides keep the dataset's original order.
pub fn train_test_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.len() < 5 {
        return Err(Error::config(
            "split",
            format!("need at least 5 samples to split, got {}", dataset.len()),
        ));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("split.fraction", "must be in [0, 1)"));
    }
    let mut is_test = vec![false; dataset.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        let n_test = ((idx.len() as f64 * fraction).round() as usize).max(1);
        idx.shuffle(&mut rng::stream(seed, &[tag::SPLIT, label.index() as u64]));
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in dataset.samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((Dataset::new(train), Dataset::new(test)))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn counts(d: &Dataset) -> Vec<(Label, usize)> {
        Label::ALL.into_iter().map(|l| (l, d.count(l))).filter(|&(_, n)| n > 0).collect()
    }

    #[test]
    fn scaled_counts() {
        assert_eq!(scaled_count(400, 0.2), 80);
        assert_eq!(scaled_count(53, 0.2), 11);
        assert_eq!(scaled_count(3, 0.01), 1);
        assert_eq!(scaled_count(0, 5.0), 0);
    }

    #[test]
    fn reference_plan_at_small_scale() {
        let p = build_partition(&PartitionPlan::reference(0.2, 1), &SampleSource::Synthetic { size: 8 }).unwrap();
        assert_eq!(counts(&p.clients[0]), [(Label::Normal, 10), (Label::Benign, 80)]);
        assert_eq!(p.clients[0].len(), 90);
        assert_eq!(p.server_test.label_counts(), [7, 19, 5]);
    }

    #[test]
    fn partitions_are_disjoint_and_deterministic() {
        let plan = PartitionPlan::reference(0.05, 3);
        let a = build_partition(&plan, &SampleSource::Synthetic { size: 8 }).unwrap();
        let mut seen = HashSet::new();
        for d in a.clients.iter().chain([&a.server_test]) {
            for s in d.iter() {
                assert!(seen.insert(s.id), "duplicate id {}", s.id);
            }
        }
        let b = build_partition(&plan, &SampleSource::Synthetic { size: 8 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_source_draws_without_replacement() {
        let pool = build_partition(&PartitionPlan::reference(0.1, 4), &SampleSource::Synthetic { size: 8 }).unwrap();
        let all = Dataset::new(pool.clients.iter().chain([&pool.server_test]).flat_map(|d| d.samples.clone()).collect());
        let plan = PartitionPlan::reference(0.05, 5);
        let p = build_partition(&plan, &SampleSource::Pool(&all)).unwrap();
        let mut seen = HashSet::new();
        for d in p.clients.iter().chain([&p.server_test]) {
            for s in d.iter() {
                assert!(seen.insert(s.id));
            }
        }
        assert_eq!(p.clients[1].label_counts(), [3, 0, 10]);
        let too_big = PartitionPlan::reference(1.0, 5);
        assert!(build_partition(&too_big, &SampleSource::Pool(&all)).is_err());
    }

    fn mixed(n_normal: usize, n_benign: usize) -> Dataset {
        let mut samples = Vec::new();
        for (i, label) in std::iter::repeat_n(Label::Normal, n_normal)
            .chain(std::iter::repeat_n(Label::Benign, n_benign))
            .enumerate()
        {
            samples.push(Sample {
                id: i as u64,
                label,
                height: 1,
                width: 1,
                image: vec![0.5],
                mask: vec![label.has_lesion() as u8],
            });
        }
        Dataset::new(samples)
    }

    #[test]
    fn split_sizes_and_stratification() {
        let d = mixed(0, 100);
        let (train, test) = train_test_split(&d, 0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));

        let d = mixed(13, 37);
        let (train, test) = train_test_split(&d, 0.2, 2).unwrap();
        for (label, n) in [(Label::Normal, 13.0), (Label::Benign, 37.0)] {
            let t = test.count(label) as f64;
            assert!((t - 0.2 * n).abs() <= 1.0, "{label}: {t}");
        }
        let ids = |d: &Dataset| d.iter().map(|s| s.id).collect::<HashSet<_>>();
        assert!(ids(&train).is_disjoint(&ids(&test)));
        assert_eq!(train.len() + test.len(), 50);

        let again = train_test_split(&d, 0.2, 2).unwrap();
        assert_eq!(ids(&again.1), ids(&test));
    }

    #[test]
    fn split_needs_five_samples() {
        assert!(train_test_split(&mixed(2, 2), 0.2, 0).is_err());
    }
}
