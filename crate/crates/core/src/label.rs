use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Error, Result};

pub const IGNORE_INDEX: u8 = 255;

/// Integer class map `[H, W]`; `IGNORE_INDEX` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: vec![height, width],
                got: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn num_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_INDEX).count()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes) {
            Some(v) => Err(invalid(format!("label {v} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }
}

/// One-hot targets `[B, C, H, W]` with all-zero columns at ignored pixels,
/// plus the number of valid pixels.
pub fn one_hot_targets(labels: &[&LabelMap], num_classes: usize, dtype: DType, dev: &Device) -> Result<(Tensor, usize)> {
    let first = labels.first().ok_or_else(|| invalid("empty label batch"))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let mut v = vec![0f64; labels.len() * num_classes * hw];
    let mut valid = 0;
    for (b, l) in labels.iter().enumerate() {
        if l.height != h || l.width != w {
            return Err(Error::Shape {
                expected: vec![h, w],
                got: vec![l.height, l.width],
            });
        }
        l.check_classes(num_classes)?;
        for (i, &c) in l.data.iter().enumerate() {
            if c != IGNORE_INDEX {
                v[(b * num_classes + c as usize) * hw + i] = 1.0;
                valid += 1;
            }
        }
    }
    let t = Tensor::from_vec(v, (labels.len(), num_classes, h, w), dev)?.to_dtype(dtype)?;
    Ok((t, valid))
}
