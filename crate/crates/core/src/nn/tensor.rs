use crate::error::{dims, Result};
use crate::image::Image;
use crate::real::Real;

/// Channel-major feature map: `values[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            values: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(dims(format!(
                "{channels}x{height}x{width} tensor needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn from_image(img: &Image) -> Self {
        Tensor {
            channels: 1,
            height: img.height(),
            width: img.width(),
            values: img.data().iter().map(|&v| T::of(f64::from(v))).collect(),
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        if self.channels != 1 {
            return Err(dims(format!("{} channels cannot form an image", self.channels)));
        }
        Image::new(
            self.width,
            self.height,
            self.values.iter().map(|v| v.f64() as f32).collect(),
        )
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}
