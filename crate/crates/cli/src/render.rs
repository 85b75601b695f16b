//! Grayscale rendering of grid files for human inspection.
//!
//! Output is binary PGM (P5), 8 bits per pixel, pixel = round(255·p).
//! Probability grids render their single attribute; augmented grids render
//! the occupancy flag. Quantized grids therefore produce at most six
//! distinct gray values.

use std::path::Path;

use pogrid_core::grid::io::{load_grid, RawGrid};
use pogrid_core::grid::AOG_ATTRIBUTES;
use pogrid_core::{Error, Result};

/// Pixel grid in row-major order, one byte per cell.
pub fn render_pixels(raw: &RawGrid) -> Result<Vec<u8>> {
    let mut pixels = Vec::with_capacity(raw.rows * raw.cols);
    for cell in 0..raw.rows * raw.cols {
        let v = match raw.attributes {
            1 => raw.values[cell] as f64,
            AOG_ATTRIBUTES => raw.values[cell * AOG_ATTRIBUTES] as f64,
            n => {
                return Err(Error::InvalidArgument(format!(
                    "cannot render a grid with {n} attributes"
                )))
            }
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidProbability(v));
        }
        pixels.push((255.0 * v).round() as u8);
    }
    Ok(pixels)
}

pub fn to_pgm(raw: &RawGrid) -> Result<Vec<u8>> {
    let pixels = render_pixels(raw)?;
    let mut out = format!("P5\n{} {}\n255\n", raw.cols, raw.rows).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn render_file(input: &Path, output: &Path) -> Result<()> {
    let raw = load_grid(input)?;
    let pgm = to_pgm(&raw)?;
    std::fs::write(output, pgm).map_err(|e| Error::io(output.display().to_string(), e))
}
