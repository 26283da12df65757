//! In-memory image sets. Pixels are kept as bytes and mapped linearly to
//! `[-1, 1]` when a batch is materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

/// Nearest byte for a value in `[-1, 1]` (values outside are clamped).
pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn gather_tensor(shape: ImageShape, pixels: &[u8], indices: &[usize]) -> Result<Tensor> {
    let p = shape.pixels();
    let mut data = Vec::with_capacity(indices.len() * p);
    for &i in indices {
        data.extend(pixels[i * p..(i + 1) * p].iter().map(|&b| byte_to_unit(b)));
    }
    Tensor::new(
        vec![indices.len(), shape.channels, shape.height, shape.width],
        data,
    )
}

/// Labelled images; `ids` are stable item identifiers from the source dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledSet {
    pub shape: ImageShape,
    pub ids: Vec<u32>,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

/// Images without labels. There is no label field to leak.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabelledSet {
    pub shape: ImageShape,
    pub ids: Vec<u32>,
    pub pixels: Vec<u8>,
}

impl LabelledSet {
    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            ids: Vec::new(),
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.shape.pixels();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn push(&mut self, id: u32, image: &[u8], label: usize) {
        debug_assert_eq!(image.len(), self.shape.pixels());
        self.ids.push(id);
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape);
        for &i in indices {
            out.push(self.ids[i], self.image(i), self.labels[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &LabelledSet) {
        for i in 0..other.len() {
            self.push(other.ids[i], other.image(i), other.labels[i]);
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        gather_tensor(self.shape, &self.pixels, indices)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Drop the labels.
    pub fn strip_labels(&self) -> UnlabelledSet {
        UnlabelledSet {
            shape: self.shape,
            ids: self.ids.clone(),
            pixels: self.pixels.clone(),
        }
    }
}

impl UnlabelledSet {
    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            ids: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.shape.pixels();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn push(&mut self, id: u32, image: &[u8]) {
        debug_assert_eq!(image.len(), self.shape.pixels());
        self.ids.push(id);
        self.pixels.extend_from_slice(image);
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape);
        for &i in indices {
            out.push(self.ids[i], self.image(i));
        }
        out
    }

    pub fn extend(&mut self, other: &UnlabelledSet) {
        for i in 0..other.len() {
            self.push(other.ids[i], other.image(i));
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        gather_tensor(self.shape, &self.pixels, indices)
    }
}

/// A fully labelled source dataset with a declared class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub num_classes: usize,
    pub items: LabelledSet,
}

impl Dataset {
    pub fn new(num_classes: usize, items: LabelledSet) -> Result<Self> {
        if let Some(bad) = items.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { num_classes, items })
    }

    pub fn shape(&self) -> ImageShape {
        self.items.shape
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.items.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_spans_unit_interval() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn batch_tensor_layout() {
        let shape = ImageShape::new(1, 2, 2);
        let mut set = LabelledSet::empty(shape);
        set.push(10, &[0, 255, 0, 255], 1);
        set.push(11, &[255, 255, 255, 255], 0);
        let t = set.batch(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0; 4]);
        assert_eq!(set.classes(), vec![0, 1]);
        assert_eq!(set.strip_labels().ids, vec![10, 11]);
    }
}
