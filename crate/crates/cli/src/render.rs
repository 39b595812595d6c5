//! Confusion maps as binary PPM (P6) images.

use diffnet_core::data::Mask;
use diffnet_core::loss::NODATA;

use crate::error::{CliError, Result};

pub const TP: [u8; 3] = [255, 255, 255];
pub const TN: [u8; 3] = [0, 0, 0];
pub const FP: [u8; 3] = [255, 0, 0];
pub const FN: [u8; 3] = [0, 0, 255];
pub const NODATA_RGB: [u8; 3] = [128, 128, 128];

/// Colour of one pixel. Nodata in either mask wins.
pub fn confusion_color(pred: u8, truth: u8) -> [u8; 3] {
    match (pred, truth) {
        (NODATA, _) | (_, NODATA) => NODATA_RGB,
        (1, 1) => TP,
        (1, _) => FP,
        (_, 1) => FN,
        _ => TN,
    }
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn render_confusion(pred: &Mask, truth: &Mask) -> Result<Vec<u8>> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(CliError::Usage(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let rgb: Vec<u8> = pred
        .values
        .iter()
        .zip(&truth.values)
        .flat_map(|(&p, &t)| confusion_color(p, t))
        .collect();
    Ok(encode_ppm(pred.width, pred.height, &rgb))
}
