//! Multi-channel float images, crops, and grayscale dumps.
//!
//! Pixels are `f32` in `[0, 1]`, stored channel-major (`[c][y][x]`) —
//! the same layout as the raw frame files on disk, so an image renders
//! identically whether it stayed in memory or took a round trip through
//! a dataset directory. Geometry helpers compute in `f64` and quantize
//! once at the end.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

/// Fill value for samples outside the source frame (mid-gray).
pub const OUT_OF_FRAME_FILL: f32 = 0.5;

/// A dense float image, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// Channel count.
    pub channels: usize,
    /// Height in pixels.
    pub height: usize,
    /// Width in pixels.
    pub width: usize,
    /// `channels * height * width` samples in `[c][y][x]` order.
    pub data: Vec<f32>,
}

impl Image {
    /// A black image.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Builds an image from raw samples, validating the length.
    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Contract(format!(
                "image {channels}x{height}x{width} needs {} samples, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    /// Sample at integer coordinates.
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Overwrites one sample.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// True when every sample lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Bilinear sample at continuous coordinates (pixel centers at
    /// half-integers); neighbors outside the frame contribute the
    /// mid-gray fill.
    fn sample(&self, c: usize, sx: f64, sy: f64) -> f64 {
        let u = sx - 0.5;
        let v = sy - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let xi = x0 + dx;
                let yi = y0 + dy;
                let val = if xi < 0.0
                    || yi < 0.0
                    || xi >= self.width as f64
                    || yi >= self.height as f64
                {
                    f64::from(OUT_OF_FRAME_FILL)
                } else {
                    f64::from(self.get(c, yi as usize, xi as usize))
                };
                acc += wy * wx * val;
            }
        }
        acc
    }

    /// Extracts the square window centered at `(cx, cy)` with side
    /// `side` (frame coordinates, any float), resampled bilinearly to
    /// `out_size x out_size`. Out-of-frame area is filled mid-gray.
    pub fn crop_resize(&self, cx: f64, cy: f64, side: f64, out_size: usize) -> Result<Image> {
        if !(side.is_finite() && side > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Contract(format!(
                "crop window must be finite with positive side, got center ({cx}, {cy}) side {side}"
            )));
        }
        let mut out = Image::new(self.channels, out_size, out_size);
        let step = side / out_size as f64;
        let x_origin = cx - side / 2.0;
        let y_origin = cy - side / 2.0;
        for c in 0..self.channels {
            for i in 0..out_size {
                let sy = y_origin + (i as f64 + 0.5) * step;
                for j in 0..out_size {
                    let sx = x_origin + (j as f64 + 0.5) * step;
                    out.set(c, i, j, self.sample(c, sx, sy) as f32);
                }
            }
        }
        Ok(out)
    }

    /// Converts to a `[c, h, w]` tensor of `f64`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("image buffer consistent")
    }
}

/// Writes a matrix of values in `[0, 1]` as an ASCII portable graymap
/// (PGM, `P2`), 0 mapping to black and 1 to white.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Contract(format!(
            "pgm {rows}x{cols} needs {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    let mut text = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                let v = values[r * cols + c].clamp(0.0, 1.0);
                format!("{}", (v * 255.0).round() as u8)
            })
            .collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
