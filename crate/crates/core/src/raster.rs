//! Owned 8-bit image buffers.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("unsupported channel count {0}; expected 1 or 3")]
    Channels(u8),
    #[error("data length {actual} does not match {width}x{height}x{channels} = {expected}")]
    DataLength {
        width: u32,
        height: u32,
        channels: u8,
        expected: usize,
        actual: usize,
    },
}

/// Row-major interleaved 8-bit image with one (grayscale) or three (RGB) channels.
///
/// Thermal frames are conventionally stored as grayscale and visual frames as RGB.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::ZeroDimension { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(RasterError::Channels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(RasterError::DataLength {
                width,
                height,
                channels,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A raster with every sample set to `value`.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, RasterError> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; len])
    }

    /// Builds a raster by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(
        width: u32,
        height: u32,
        channels: u8,
        mut f: impl FnMut(u32, u32, u8) -> u8,
    ) -> Result<Self, RasterError> {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// All channel samples of one pixel.
    ///
    /// Panics if the coordinate is outside the raster.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        let o = self.offset(x, y);
        &self.data[o..o + self.channels as usize]
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * self.channels as usize;
        let start = y as usize * stride;
        &self.data[start..start + stride]
    }

    pub(crate) fn row_mut(&mut self, y: u32) -> &mut [u8] {
        let stride = self.width as usize * self.channels as usize;
        let start = y as usize * stride;
        &mut self.data[start..start + stride]
    }

    /// Replicates a grayscale raster into three identical channels. RGB input is returned as-is.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Arithmetic mean over every sample.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(matches!(
            Raster::new(2, 2, 1, vec![0; 3]),
            Err(RasterError::DataLength { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Raster::new(2, 2, 3, vec![0; 4]),
            Err(RasterError::DataLength { expected: 12, .. })
        ));
        assert!(Raster::new(2, 2, 3, vec![0; 12]).is_ok());
    }

    #[test]
    fn rejects_zero_dims_and_channel_counts() {
        assert!(matches!(
            Raster::new(0, 2, 1, vec![]),
            Err(RasterError::ZeroDimension { .. })
        ));
        assert_eq!(Raster::new(1, 1, 2, vec![0, 0]), Err(RasterError::Channels(2)));
        assert_eq!(Raster::new(1, 1, 4, vec![0; 4]), Err(RasterError::Channels(4)));
    }

    #[test]
    fn pixel_and_row_access() {
        let r = Raster::from_fn(3, 2, 3, |x, y, c| (y * 30 + x * 3 + c as u32) as u8).unwrap();
        assert_eq!(r.pixel(2, 1), &[36, 37, 38]);
        assert_eq!(r.row(1).len(), 9);
        assert_eq!(r.row(1)[0], 30);
    }

    #[test]
    fn gray_to_rgb_replicates() {
        let g = Raster::new(2, 1, 1, vec![7, 9]).unwrap();
        let rgb = g.to_rgb();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.data(), &[7, 7, 7, 9, 9, 9]);
    }
}
