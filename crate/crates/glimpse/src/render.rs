use std::path::Path;

use glimpse_core::backbone::Image;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{CliError, CliResult};

/// Importance map as 8-bit gray levels, `round(255·p)`.
pub fn heatmap_bytes(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Binary PGM (`P5`) of the importance map.
pub fn encode_pgm(probs: &[f64], grid_h: usize, grid_w: usize) -> CliResult<Vec<u8>> {
    if probs.len() != grid_h * grid_w {
        return Err(CliError::Usage(format!("{} probabilities for a {grid_h}x{grid_w} grid", probs.len())));
    }
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&heatmap_bytes(probs), grid_w as u32, grid_h as u32, ExtendedColorType::L8)
        .map_err(|e| CliError::Format(format!("pgm: {e}")))?;
    Ok(out)
}

pub fn write_pgm(path: &Path, probs: &[f64], grid_h: usize, grid_w: usize) -> CliResult<()> {
    let bytes = encode_pgm(probs, grid_h, grid_w)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// One line per grid row: `#` for kept tokens, `.` for dropped ones.
pub fn ascii_grid(keep: &[usize], grid_h: usize, grid_w: usize) -> Vec<String> {
    let mut cells = vec![b'.'; grid_h * grid_w];
    for &i in keep {
        cells[i] = b'#';
    }
    cells
        .chunks(grid_w)
        .map(|row| String::from_utf8(row.to_vec()).expect("ascii"))
        .collect()
}

/// Loads any PNM or PNG file as RGB with one pixel per patch.
pub fn read_image(path: &Path) -> CliResult<Image> {
    let img = image::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::new(h as usize, w as usize, rgb.into_raw())?)
}
