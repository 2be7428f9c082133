use crate::error::{Error, Result};

/// A floating-point RGB image in `H x W x 3` order with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.repeat(height * width),
        }
    }

    /// Converts a square 8-bit RGB image.
    pub fn from_u8(pixels: &[u8], side: usize) -> Self {
        debug_assert_eq!(pixels.len(), side * side * 3);
        Self {
            height: side,
            width: side,
            data: pixels.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub(crate) fn square_side(&self) -> Result<usize> {
        if self.height != self.width {
            return Err(Error::NotSquare {
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.height)
    }
}
