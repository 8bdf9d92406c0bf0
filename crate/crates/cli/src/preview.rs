//! Static PNG previews. Signed data uses a blue-white-red map (negative
//! blue, positive red) scaled by the largest magnitude; non-negative data
//! is written as grayscale scaled by its maximum.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CliError, CliResult};

/// RGB for `v` in `[-1, 1]`.
pub fn diverging(v: f64) -> [u8; 3] {
    let t = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> CliResult<()> {
    let f = File::create(path).map_err(|e| CliError::artifact(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| CliError::artifact(path, e))?;
    w.write_image_data(data).map_err(|e| CliError::artifact(path, e))?;
    Ok(())
}

pub fn write_signed(path: &Path, a: &Array2<f64>) -> CliResult<()> {
    let peak = a.fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let data: Vec<u8> = a.iter().flat_map(|v| diverging(v * scale)).collect();
    write_png(path, a.ncols(), a.nrows(), png::ColorType::Rgb, &data)
}

pub fn write_gray(path: &Path, a: &Array2<f64>) -> CliResult<()> {
    let peak = a.fold(0.0f64, |m, v| m.max(*v));
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let data: Vec<u8> = a.iter().map(|v| (v.max(0.0) * scale).round().min(255.0) as u8).collect();
    write_png(path, a.ncols(), a.nrows(), png::ColorType::Grayscale, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(diverging(0.0), [255, 255, 255]);
        assert_eq!(diverging(1.0), [255, 0, 0]);
        assert_eq!(diverging(-1.0), [0, 0, 255]);
        assert_eq!(diverging(-7.0), [0, 0, 255]);
    }

    #[test]
    fn signed_png_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let a = Array2::from_shape_fn((3, 5), |(i, j)| i as f64 - j as f64);
        write_signed(&p, &a).unwrap();
        let mut r = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap())).read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size()];
        let info = r.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        // (0, 4) is the most negative pixel: pure blue.
        assert_eq!(&buf[3 * 4..3 * 5], &[0, 0, 255]);
    }
}
