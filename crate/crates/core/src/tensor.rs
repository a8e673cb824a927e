//! Dense f64 tensors in NCHW layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_mismatch(shape, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading (batch) dimension; 1 for scalars.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        debug_assert_eq!(
            self.shape.len(),
            4,
            "expected rank-4 tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn ensure_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_mismatch(shape, &self.shape));
        }
        Ok(())
    }

    /// Stacks same-shaped images into an `N×C×H×W` tensor.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or(crate::error::Error::Empty("image batch"))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.ensure_same_shape(img)?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, ch));
                    }
                }
            }
        }
        Ok(Self {
            shape: vec![images.len(), c, h, w],
            data,
        })
    }

    /// Splits an `N×C×H×W` tensor back into images (C must be 1 or 3).
    pub fn to_images(&self) -> Result<Vec<Image>> {
        let (n, c, h, w) = self.dims4();
        let plane = h * w;
        (0..n)
            .map(|i| {
                let sample = &self.data[i * c * plane..(i + 1) * c * plane];
                let mut data = Vec::with_capacity(c * plane);
                for p in 0..plane {
                    for ch in 0..c {
                        data.push(sample[ch * plane + p]);
                    }
                }
                Image::new(h, w, c, data)
            })
            .collect()
    }

    /// Sample `index` of the batch, keeping a leading dimension of 1.
    pub fn sample(&self, index: usize) -> Tensor {
        let per = self.data.len() / self.batch();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }
}
