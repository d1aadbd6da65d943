use crate::error::{Error, Result};
use ndarray::Array3;

/// Multi-channel image with values in `[0, 1]`, laid out `H x W x C`.
///
/// Synthetic scenes are not RGB: the channel count matches the palette
/// dimensionality so that class prototypes can be mutually orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, _) = pixels.dim();
        if h < 16 || w < 16 {
            return Err(Error::config("image dimensions must be at least 16x16"));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::config("image contains non-finite values"));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}
