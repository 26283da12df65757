//! `SSDS` image container.
//!
//! Layout (little-endian): magic `SSDS`, `u16` version, `u32` item count,
//! `u16` height, width, channels, `u16` class count, then per item an `i16`
//! label (`-1` marks an unlabelled item) followed by `C·H·W` pixel bytes in
//! channel-major order.

use std::path::Path;

use super::data::{Dataset, ImageShape, LabelledSet, UnlabelledSet};
use crate::error::{Error, FormatError, Result};
use crate::wire::Reader;

pub const MAGIC: [u8; 4] = *b"SSDS";
pub const VERSION: u16 = 1;
pub const UNLABELLED: i16 = -1;

/// Decoded container contents before the labelled/unlabelled distinction is enforced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SsdsFile {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub labels: Vec<Option<usize>>,
    pub pixels: Vec<u8>,
}

fn header(out: &mut Vec<u8>, shape: ImageShape, num_classes: usize, count: usize) -> Result<()> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit the container header")))
    };
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(count).map_err(|_| Error::Data(format!("{count} items exceed the container limit")))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (v, what) in [
        (shape.height, "height"),
        (shape.width, "width"),
        (shape.channels, "channels"),
        (num_classes, "class count"),
    ] {
        out.extend_from_slice(&narrow(v, what)?.to_le_bytes());
    }
    Ok(())
}

fn encode_label(label: usize, num_classes: usize) -> Result<i16> {
    if label >= num_classes {
        return Err(Error::Data(format!("label {label} out of range for {num_classes} classes")));
    }
    i16::try_from(label).map_err(|_| Error::Data(format!("label {label} does not fit an i16")))
}

pub fn encode_labelled(set: &LabelledSet, num_classes: usize) -> Result<Vec<u8>> {
    let p = set.shape.pixels();
    let mut out = Vec::with_capacity(18 + set.len() * (p + 2));
    header(&mut out, set.shape, num_classes, set.len())?;
    for i in 0..set.len() {
        out.extend_from_slice(&encode_label(set.labels[i], num_classes)?.to_le_bytes());
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

/// Unlabelled items are written with the sentinel only.
pub fn encode_unlabelled(set: &UnlabelledSet, num_classes: usize) -> Result<Vec<u8>> {
    let p = set.shape.pixels();
    let mut out = Vec::with_capacity(18 + set.len() * (p + 2));
    header(&mut out, set.shape, num_classes, set.len())?;
    for i in 0..set.len() {
        out.extend_from_slice(&UNLABELLED.to_le_bytes());
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SsdsFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    let shape = ImageShape::new(channels, height, width);
    let p = shape.pixels();
    let record = p + 2;
    let needed = count.saturating_mul(record);
    if needed > r.remaining() {
        return Err(FormatError::Truncated {
            offset: bytes.len() - r.remaining(),
            needed: needed - r.remaining(),
        });
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * p);
    for index in 0..count {
        let label = r.i16()?;
        labels.push(match label {
            UNLABELLED => None,
            l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
            l => {
                return Err(FormatError::LabelOutOfRange {
                    index,
                    label: i32::from(l),
                    num_classes,
                })
            }
        });
        pixels.extend_from_slice(r.take(p)?);
    }
    r.finish()?;
    Ok(SsdsFile {
        shape,
        num_classes,
        labels,
        pixels,
    })
}

impl SsdsFile {
    /// Every item must carry a label. Item ids are positions in the file.
    pub fn into_labelled(self) -> Result<Dataset, FormatError> {
        let mut labels = Vec::with_capacity(self.labels.len());
        for (i, l) in self.labels.iter().enumerate() {
            labels.push(l.ok_or(FormatError::UnexpectedUnlabelled(i))?);
        }
        let ids = (0..labels.len() as u32).collect();
        Ok(Dataset {
            num_classes: self.num_classes,
            items: LabelledSet {
                shape: self.shape,
                ids,
                pixels: self.pixels,
                labels,
            },
        })
    }

    /// Every item must carry the sentinel.
    pub fn into_unlabelled(self) -> Result<UnlabelledSet, FormatError> {
        if let Some((index, l)) = self.labels.iter().enumerate().find_map(|(i, l)| l.map(|l| (i, l))) {
            return Err(FormatError::LabelOutOfRange {
                index,
                label: l as i32,
                num_classes: 0,
            });
        }
        Ok(UnlabelledSet {
            shape: self.shape,
            ids: (0..self.labels.len() as u32).collect(),
            pixels: self.pixels,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a fully labelled container; images map to `[-1, 1]` on use.
pub fn ingest_images(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = read_file(path.as_ref())?;
    Ok(decode(&bytes)?.into_labelled()?)
}

pub fn read_unlabelled(path: impl AsRef<Path>) -> Result<UnlabelledSet> {
    let bytes = read_file(path.as_ref())?;
    Ok(decode(&bytes)?.into_unlabelled()?)
}

pub fn write_labelled(path: impl AsRef<Path>, set: &LabelledSet, num_classes: usize) -> Result<()> {
    write_file(path.as_ref(), &encode_labelled(set, num_classes)?)
}

pub fn write_unlabelled(path: impl AsRef<Path>, set: &UnlabelledSet, num_classes: usize) -> Result<()> {
    write_file(path.as_ref(), &encode_unlabelled(set, num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabelledSet {
        let mut s = LabelledSet::empty(ImageShape::new(1, 2, 2));
        s.push(0, &[0, 64, 128, 255], 1);
        s.push(1, &[9, 8, 7, 6], 0);
        s
    }

    #[test]
    fn labelled_round_trip() {
        let bytes = encode_labelled(&tiny(), 3).unwrap();
        assert_eq!(bytes.len(), 18 + 2 * 6);
        let d = decode(&bytes).unwrap().into_labelled().unwrap();
        assert_eq!(d.items, tiny());
        assert_eq!(d.num_classes, 3);
    }

    #[test]
    fn sentinel_in_labelled_container_is_rejected() {
        let bytes = encode_unlabelled(&tiny().strip_labels(), 3).unwrap();
        let err = decode(&bytes).unwrap().into_labelled().unwrap_err();
        assert_eq!(err, FormatError::UnexpectedUnlabelled(0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut bytes = encode_labelled(&tiny(), 3).unwrap();
        bytes[18..20].copy_from_slice(&7i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(FormatError::LabelOutOfRange { index: 0, label: 7, .. })));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_labelled(&tiny(), 3).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert_eq!(decode(&long), Err(FormatError::TrailingBytes(1)));
    }
}
