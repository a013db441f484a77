//! Grayscale raster images.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// H x W grayscale image, row-major f32. Values live in [0, 1] for dataset
/// images; intermediate sampler states are unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} = {} pixels", height, width, height * width),
                got: format!("{} pixels", pixels.len()),
            });
        }
        Ok(ImageTensor {
            height,
            width,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.height, self.width),
                got: format!("{}x{}", other.height, other.width),
            })
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    /// Widen to f64 for arithmetic.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Narrow an f64 buffer back into an image of this shape.
    pub fn from_f64(&self, values: &[f64]) -> ImageTensor {
        debug_assert_eq!(values.len(), self.len());
        ImageTensor {
            height: self.height,
            width: self.width,
            pixels: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.is_finite())
    }

    /// Mean squared difference against another image of the same shape.
    pub fn mse(&self, other: &ImageTensor) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.len() as f64;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }
}
