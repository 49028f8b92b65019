use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Images of one class, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub id: String,
    pixels: Vec<f32>,
    count: usize,
}

impl ClassImages {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// Class-indexed image store for one split. Immutable once built; shared
/// read-only between samplers.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    image_shape: [usize; 3],
    classes: Vec<ClassImages>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, image_shape: [usize; 3]) -> Self {
        Self { name, image_shape, classes: Vec::new() }
    }

    /// `[channels, height, width]`
    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn push_class(&mut self, id: impl Into<String>, pixels: Vec<f32>) -> Result<()> {
        let len = self.image_len();
        if pixels.is_empty() || pixels.len() % len != 0 {
            return Err(Error::Shape(format!(
                "class blob of {} values is not a positive multiple of image size {len}",
                pixels.len()
            )));
        }
        let count = pixels.len() / len;
        self.classes.push(ClassImages { id: id.into(), pixels, count });
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassImages] {
        &self.classes
    }

    pub fn image_count(&self, class: usize) -> usize {
        self.classes[class].count
    }

    pub fn image(&self, class: usize, index: usize) -> &[f32] {
        let len = self.image_len();
        &self.classes[class].pixels[index * len..(index + 1) * len]
    }

    /// Moves the classes at `indices` into a new split called `name`.
    pub fn split_off(&mut self, indices: &[usize], name: SplitName) -> DatasetSplit {
        let mut taken = vec![false; self.classes.len()];
        for &i in indices {
            taken[i] = true;
        }
        let mut out = DatasetSplit::new(name, self.image_shape);
        let mut keep = Vec::with_capacity(self.classes.len());
        for (c, flag) in std::mem::take(&mut self.classes).into_iter().zip(taken) {
            if flag {
                out.classes.push(c);
            } else {
                keep.push(c);
            }
        }
        self.classes = keep;
        out
    }
}

/// Rotates one `[c, s, s]` image by 90° clockwise.
pub fn rotate90(image: &[f32], channels: usize, side: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    let plane = side * side;
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[c * plane + y * side + x] = image[c * plane + (side - 1 - x) * side + y];
            }
        }
    }
    out
}

/// Expands every class into four classes rotated by 0°, 90°, 180° and 270°.
/// Rotations are new classes, not extra samples of the source class.
pub fn augment_rotations(split: &DatasetSplit) -> Result<DatasetSplit> {
    let [c, h, w] = split.image_shape;
    if h != w {
        return Err(Error::Shape(format!("rotation needs square images, got {h}×{w}")));
    }
    let len = split.image_len();
    let mut out = DatasetSplit::new(split.name, split.image_shape);
    for class in &split.classes {
        let mut current = class.pixels.clone();
        for quarter in 0..4 {
            if quarter > 0 {
                current = current.chunks(len).flat_map(|img| rotate90(img, c, h)).collect();
            }
            out.push_class(format!("{}/rot{}", class.id, quarter * 90), current.clone())?;
        }
    }
    Ok(out)
}
