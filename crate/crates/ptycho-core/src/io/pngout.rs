//! 8-bit grayscale PNG export with explicit contrast bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};

/// How image values map to the 8-bit range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Contrast {
    /// Explicit limits.
    MinMax { min: f64, max: f64 },
    /// Percentile clip, e.g. (1, 99).
    Percentile { lo: f64, hi: f64 },
}

/// Limits actually applied, written to the sidecar.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AppliedContrast {
    pub min: f64,
    pub max: f64,
    pub clipped_low: usize,
    pub clipped_high: usize,
}

fn resolve(values: &[f64], contrast: Contrast) -> Result<(f64, f64)> {
    match contrast {
        Contrast::MinMax { min, max } => {
            if !(min.is_finite() && max.is_finite()) || max <= min {
                return Err(PtychoError::config("contrast limits must be finite with max > min"));
            }
            Ok((min, max))
        }
        Contrast::Percentile { lo, hi } => {
            if !(0.0..100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || hi <= lo {
                return Err(PtychoError::config("percentiles must satisfy 0 <= lo < hi <= 100"));
            }
            let mut sorted: Vec<f64> = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let k_lo = ((lo / 100.0) * n as f64).floor() as usize;
            let k_hi = n - 1 - ((100.0 - hi) / 100.0 * n as f64).floor() as usize;
            let (min, max) = (sorted[k_lo.min(n - 1)], sorted[k_hi.min(n - 1)]);
            if max <= min {
                return Err(PtychoError::data("degenerate contrast window (constant image?)"));
            }
            Ok((min, max))
        }
    }
}

/// Render to PNG bytes with a linear 8-bit mapping; returns the bytes and
/// the applied limits. Constant images map to uniform mid-gray.
pub fn render_png(values: &[f64], h: usize, w: usize, contrast: Contrast) -> Result<(Vec<u8>, AppliedContrast)> {
    if values.len() != h * w {
        return Err(PtychoError::shape("image buffer does not match extent"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PtychoError::data("image contains non-finite values"));
    }
    let all_equal = values.windows(2).all(|p| p[0] == p[1]);
    let (min, max, mut low, mut high) = if all_equal {
        (values[0] - 0.5, values[0] + 0.5, 0usize, 0usize)
    } else {
        let (mn, mx) = resolve(values, contrast)?;
        (mn, mx, 0, 0)
    };
    let scale = 255.0 / (max - min);
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if v < min {
                low += 1;
                0
            } else if v > max {
                high += 1;
                255
            } else {
                ((v - min) * scale).round() as u8
            }
        })
        .collect();

    let mut png = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut png, w as u32, h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| PtychoError::data(format!("png header: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| PtychoError::data(format!("png body: {e}")))?;
    }
    Ok((png, AppliedContrast { min, max, clipped_low: low, clipped_high: high }))
}

/// Write the PNG plus a JSON sidecar recording the contrast limits.
pub fn export_png(values: &[f64], h: usize, w: usize, contrast: Contrast, path: &Path) -> Result<AppliedContrast> {
    let (bytes, applied) = render_png(values, h, w, contrast)?;
    std::fs::write(path, bytes)?;
    let sidecar = path.with_extension("png.json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&applied).unwrap())?;
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_uniform_gray() {
        let (bytes, _) =
            render_png(&[3.0; 16], 4, 4, Contrast::Percentile { lo: 1.0, hi: 99.0 }).unwrap();
        // Decode and check all pixels equal.
        let decoder = png::Decoder::new(&bytes[..]);
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert!(buf.iter().all(|&p| p == buf[0]));
    }

    #[test]
    fn minmax_maps_extremes_to_0_and_255() {
        let values = vec![0.0, 0.5, 1.0, 0.25];
        let (bytes, applied) =
            render_png(&values, 2, 2, Contrast::MinMax { min: 0.0, max: 1.0 }).unwrap();
        let decoder = png::Decoder::new(&bytes[..]);
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(buf[0], 0);
        assert_eq!(buf[2], 255);
        assert_eq!(applied.min, 0.0);
        assert_eq!(applied.max, 1.0);
    }

    #[test]
    fn percentile_clips_exactly_two_percent_of_a_ramp() {
        let n = 10_000usize;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (_, applied) =
            render_png(&ramp, 100, 100, Contrast::Percentile { lo: 1.0, hi: 99.0 }).unwrap();
        assert_eq!(applied.clipped_low + applied.clipped_high, n / 50);
        assert_eq!(applied.clipped_low, 100);
        assert_eq!(applied.clipped_high, 100);
    }
}
