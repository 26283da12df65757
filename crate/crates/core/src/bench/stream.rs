//! Synthetic data and the split of a labelled dataset into a stream of
//! semi-supervised tasks with disjoint class sets.

use serde::{Deserialize, Serialize};

use super::data::{unit_to_byte, Dataset, ImageShape, LabelledSet, UnlabelledSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One task: labelled and unlabelled training items, validation and test sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiTask {
    pub classes: Vec<usize>,
    pub train_labelled: LabelledSet,
    pub train_unlabelled: UnlabelledSet,
    pub val_labelled: LabelledSet,
    pub val_unlabelled: UnlabelledSet,
    pub test: LabelledSet,
}

/// Per-task item counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub labelled: usize,
    pub unlabelled: usize,
    pub val_labelled: usize,
    pub val_unlabelled: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub tasks: Vec<SemiTask>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn shape(&self) -> Option<ImageShape> {
        self.tasks.first().map(|t| t.test.shape)
    }
}

/// Split `total` as evenly as possible over `parts`, earlier parts taking the remainder.
fn balanced(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    (0..parts).map(move |i| total / parts + usize::from(i < total % parts))
}

pub fn build_semi_split(dataset: &Dataset, dataset_id: &str, spec: SplitSpec, seed: u64) -> Result<TaskStream> {
    let needed_classes = spec.num_tasks * spec.classes_per_task;
    if spec.num_tasks == 0 || spec.classes_per_task == 0 {
        return Err(Error::Config("a stream needs at least one task with one class".into()));
    }
    if needed_classes > dataset.num_classes {
        return Err(Error::Data(format!(
            "{} tasks of {} classes need {needed_classes} classes, dataset has {}",
            spec.num_tasks, spec.classes_per_task, dataset.num_classes
        )));
    }
    let root = RngStream::new(seed).derive_str("semi-split");
    let class_order = root.derive_str("class-order").permutation(dataset.num_classes);
    let groups = dataset.by_class();
    let shape = dataset.shape();
    let items = &dataset.items;

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for k in 0..spec.num_tasks {
        let mut classes = class_order[k * spec.classes_per_task..(k + 1) * spec.classes_per_task].to_vec();
        classes.sort_unstable();
        let mut task = SemiTask {
            classes: classes.clone(),
            train_labelled: LabelledSet::empty(shape),
            train_unlabelled: UnlabelledSet::empty(shape),
            val_labelled: LabelledSet::empty(shape),
            val_unlabelled: UnlabelledSet::empty(shape),
            test: LabelledSet::empty(shape),
        };
        let quotas = [spec.labelled, spec.unlabelled, spec.val_labelled, spec.val_unlabelled, spec.test]
            .map(|n| balanced(n, classes.len()).collect::<Vec<_>>());
        for (ci, &c) in classes.iter().enumerate() {
            let mut pool = groups[c].clone();
            root.child("class-items", c as u64).shuffle(&mut pool);
            let want: usize = quotas.iter().map(|q| q[ci]).sum();
            if pool.len() < want {
                return Err(Error::Data(format!(
                    "class {c} has {} items, the split needs {want}",
                    pool.len()
                )));
            }
            let mut it = pool.into_iter();
            let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
            task.train_labelled.extend(&items.select(&take(quotas[0][ci])));
            task.train_unlabelled.extend(&items.select(&take(quotas[1][ci])).strip_labels());
            task.val_labelled.extend(&items.select(&take(quotas[2][ci])));
            task.val_unlabelled.extend(&items.select(&take(quotas[3][ci])).strip_labels());
            task.test.extend(&items.select(&take(quotas[4][ci])));
        }
        tasks.push(task);
    }
    Ok(TaskStream {
        tasks,
        num_classes: dataset.num_classes,
        provenance: Provenance {
            dataset: dataset_id.to_string(),
            seed,
            split: spec,
        },
    })
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise_level: f64,
}

/// Class template: a dark background with two soft bright spots at
/// seed-determined positions.
fn blob_template(size: usize, rng: &mut RngStream) -> Vec<f64> {
    let width = size as f64 * 0.15;
    let centers: Vec<(f64, f64)> = (0..2)
        .map(|_| {
            let lo = 0.5;
            let hi = size as f64 - 1.5;
            (rng.uniform_range(lo, hi), rng.uniform_range(lo, hi))
        })
        .collect();
    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let bump: f64 = centers
                .iter()
                .map(|&(cr, cc)| {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    (-d2 / (2.0 * width * width)).exp()
                })
                .sum();
            img.push((-0.7 + 1.5 * bump).clamp(-0.9, 0.9));
        }
    }
    img
}

/// Single-channel square images: class template plus Gaussian pixel noise,
/// quantized to bytes. Items are ordered class by class.
pub fn gen_synth_blobs(spec: BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::Config("blob parameters must be positive".into()));
    }
    if !(spec.noise_level.is_finite() && spec.noise_level >= 0.0) {
        return Err(Error::Config(format!("noise level {} must be finite and >= 0", spec.noise_level)));
    }
    let shape = ImageShape::new(1, spec.image_size, spec.image_size);
    let root = RngStream::new(seed).derive_str("blobs");
    let mut items = LabelledSet::empty(shape);
    let mut id = 0u32;
    let mut buf = vec![0u8; shape.pixels()];
    for c in 0..spec.num_classes {
        let template = blob_template(spec.image_size, &mut root.child("template", c as u64));
        let mut noise = root.child("noise", c as u64);
        for _ in 0..spec.per_class {
            for (b, &t) in buf.iter_mut().zip(&template) {
                *b = unit_to_byte(t + spec.noise_level * noise.normal());
            }
            items.push(id, &buf, c);
            id += 1;
        }
    }
    Dataset::new(spec.num_classes, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SplitSpec {
        SplitSpec {
            num_tasks: 2,
            classes_per_task: 2,
            labelled: 4,
            unlabelled: 6,
            val_labelled: 2,
            val_unlabelled: 2,
            test: 4,
        }
    }

    fn blobs(noise: f64) -> Dataset {
        gen_synth_blobs(
            BlobSpec {
                num_classes: 4,
                per_class: 10,
                image_size: 8,
                noise_level: noise,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_blobs_are_class_constant() {
        let d = blobs(0.0);
        for group in d.by_class() {
            let first = d.items.image(group[0]);
            assert!(group.iter().all(|&i| d.items.image(i) == first));
        }
    }

    #[test]
    fn split_counts_match_spec() {
        let s = build_semi_split(&blobs(0.3), "b", small_spec(), 1).unwrap();
        assert_eq!(s.len(), 2);
        for t in &s.tasks {
            assert_eq!(t.classes.len(), 2);
            assert_eq!(t.train_labelled.len(), 4);
            assert_eq!(t.train_unlabelled.len(), 6);
            assert_eq!(t.test.len(), 4);
        }
    }

    #[test]
    fn insufficient_items_is_a_data_error() {
        let mut spec = small_spec();
        spec.unlabelled = 100;
        assert!(matches!(build_semi_split(&blobs(0.3), "b", spec, 1), Err(Error::Data(_))));
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let mut spec = small_spec();
        spec.num_tasks = 3;
        assert!(build_semi_split(&blobs(0.3), "b", spec, 1).is_err());
    }
}
