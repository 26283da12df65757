//! Per-task exemplar memory used for inference-time fine-tuning.

use crate::bench::data::{ImageShape, LabelledSet, UnlabelledSet};
use crate::bench::stream::SemiTask;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferSlice {
    pub classes: Vec<usize>,
    pub labelled: LabelledSet,
    pub unlabelled: UnlabelledSet,
}

impl BufferSlice {
    pub fn len(&self) -> usize {
        self.labelled.len() + self.unlabelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored image, labelled ones first, without labels.
    pub fn images(&self) -> Result<Tensor> {
        let mut all = self.labelled.strip_labels();
        all.extend(&self.unlabelled);
        all.batch(&(0..all.len()).collect::<Vec<_>>())
    }
}

/// One slice per task, in task order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExemplarBuffer {
    shape: ImageShape,
    slices: Vec<BufferSlice>,
}

impl ExemplarBuffer {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            shape,
            slices: Vec::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_tasks(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, task: usize) -> Option<&BufferSlice> {
        self.slices.get(task)
    }

    pub fn slices(&self) -> &[BufferSlice] {
        &self.slices
    }

    pub(crate) fn push_slice(&mut self, slice: BufferSlice) {
        self.slices.push(slice);
    }

    /// All slices merged into one set.
    pub fn joint(&self) -> BufferSlice {
        let mut out = BufferSlice {
            classes: Vec::new(),
            labelled: LabelledSet::empty(self.shape),
            unlabelled: UnlabelledSet::empty(self.shape),
        };
        for s in &self.slices {
            out.classes.extend(&s.classes);
            out.labelled.extend(&s.labelled);
            out.unlabelled.extend(&s.unlabelled);
        }
        out.classes.sort_unstable();
        out.classes.dedup();
        out
    }
}

/// Append task `task_id`'s exemplars: up to `m_buf` labelled items taken
/// round-robin over the task's classes (so class counts differ by at most
/// one while every class still has items) and up to `n_buf` unlabelled items
/// drawn uniformly.
pub fn update_buffer(
    buffer: &mut ExemplarBuffer,
    task_id: usize,
    task: &SemiTask,
    m_buf: usize,
    n_buf: usize,
    rng: &RngStream,
) -> Result<()> {
    if task_id != buffer.num_tasks() {
        return Err(Error::Contract(format!(
            "buffer holds {} tasks, cannot add task {task_id}",
            buffer.num_tasks()
        )));
    }
    let mut pools: Vec<Vec<usize>> = task
        .classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut idx: Vec<usize> = (0..task.train_labelled.len()).filter(|&k| task.train_labelled.labels[k] == c).collect();
            rng.child("labelled", i as u64).shuffle(&mut idx);
            idx.reverse();
            idx
        })
        .collect();
    let mut chosen = Vec::with_capacity(m_buf);
    while chosen.len() < m_buf && pools.iter().any(|p| !p.is_empty()) {
        for p in pools.iter_mut() {
            if chosen.len() == m_buf {
                break;
            }
            if let Some(i) = p.pop() {
                chosen.push(i);
            }
        }
    }
    chosen.sort_unstable();
    let mut unl = rng.derive_str("unlabelled").permutation(task.train_unlabelled.len());
    unl.truncate(n_buf);
    unl.sort_unstable();
    buffer.push_slice(BufferSlice {
        classes: task.classes.clone(),
        labelled: task.train_labelled.select(&chosen),
        unlabelled: task.train_unlabelled.select(&unl),
    });
    Ok(())
}
