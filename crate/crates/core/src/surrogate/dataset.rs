//! Tabulated cell responses and their file format.
//!
//! File layout: `PSRD1 {json header}\n` followed by little-endian f32 rows
//! `(w_x, w_y, lambda)` in nanometres then
//! `(t_x, cos phi_x, sin phi_x, t_y, cos phi_y, sin phi_y)`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CellParams, OpticalResponse, SyntheticFdtd, WAVELENGTH_MAX, WAVELENGTH_MIN, WIDTH_MAX, WIDTH_MIN};
use crate::error::{Error, Result};

const MAGIC: &str = "PSRD1";
const ROW: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponseSample {
    pub cell: CellParams,
    pub wavelength: f64,
    pub response: OpticalResponse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseDataset {
    pub widths: Vec<f64>,
    pub wavelengths: Vec<f64>,
    pub samples: Vec<ResponseSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    columns: Vec<String>,
    units: String,
    widths_nm: Vec<f64>,
    wavelengths_nm: Vec<f64>,
    endianness: String,
    sha256: String,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

impl ResponseDataset {
    pub fn new(widths: Vec<f64>, wavelengths: Vec<f64>, samples: Vec<ResponseSample>) -> Result<Self> {
        let d = Self { widths, wavelengths, samples };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Domain("dataset is empty".into()));
        }
        let mut keys = HashSet::new();
        for s in &self.samples {
            s.cell.validate()?;
            if !(s.wavelength >= WAVELENGTH_MIN * (1.0 - 1e-6) && s.wavelength <= WAVELENGTH_MAX * (1.0 + 1e-6)) {
                return Err(Error::Domain(format!("sample wavelength {:e} outside [300, 750] nm", s.wavelength)));
            }
            let key = [s.cell.w_x, s.cell.w_y, s.wavelength].map(|v| (v * 1e12).round() as i64);
            if !keys.insert(key) {
                return Err(Error::Domain(format!(
                    "duplicate sample at w = ({:e}, {:e}), lambda = {:e}",
                    s.cell.w_x, s.cell.w_y, s.wavelength
                )));
            }
        }
        Ok(())
    }

    /// Full grid of `n_widths^2 x n_wavelengths` generator samples over the box.
    pub fn synthetic_grid(generator: &SyntheticFdtd, n_widths: usize, n_wavelengths: usize) -> Result<Self> {
        let widths = linspace(WIDTH_MIN, WIDTH_MAX, n_widths);
        let wavelengths = linspace(WAVELENGTH_MIN, WAVELENGTH_MAX, n_wavelengths);
        let mut samples = Vec::with_capacity(n_widths * n_widths * n_wavelengths);
        for &wx in &widths {
            for &wy in &widths {
                for &lam in &wavelengths {
                    let cell = CellParams { w_x: wx, w_y: wy };
                    samples.push(ResponseSample { cell, wavelength: lam, response: generator.response(cell, lam)? });
                }
            }
        }
        Self::new(widths, wavelengths, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * ROW * 4);
        for s in &self.samples {
            let r = &s.response;
            let row = [
                s.cell.w_x * 1e9,
                s.cell.w_y * 1e9,
                s.wavelength * 1e9,
                r.t_x,
                r.phi_x.0,
                r.phi_x.1,
                r.t_y,
                r.phi_y.0,
                r.phi_y.1,
            ];
            for v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let payload = self.payload();
        let header = Header {
            rows: self.samples.len(),
            columns: ["w_x", "w_y", "wavelength", "t_x", "cos_phi_x", "sin_phi_x", "t_y", "cos_phi_y", "sin_phi_y"]
                .map(String::from)
                .to_vec(),
            units: "nm for the first three columns, dimensionless otherwise".into(),
            widths_nm: self.widths.iter().map(|w| w * 1e9).collect(),
            wavelengths_nm: self.wavelengths.iter().map(|w| w * 1e9).collect(),
            endianness: "little".into(),
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{MAGIC} {json}")?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let json = line
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Format("not a response dataset (bad magic)".into()))?;
        let header: Header = serde_json::from_str(json).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != header.rows * ROW * 4 {
            return Err(Error::Format(format!(
                "dataset payload is {} bytes, header implies {}",
                payload.len(),
                header.rows * ROW * 4
            )));
        }
        if hex::encode(Sha256::digest(&payload)) != header.sha256 {
            return Err(Error::Format("dataset checksum mismatch".into()));
        }
        let vals: Vec<f64> =
            payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let samples = vals
            .chunks_exact(ROW)
            .map(|v| {
                let unit = |c: f64, s: f64| {
                    let n = c.hypot(s);
                    (c / n, s / n)
                };
                ResponseSample {
                    cell: CellParams { w_x: v[0] * 1e-9, w_y: v[1] * 1e-9 },
                    wavelength: v[2] * 1e-9,
                    response: OpticalResponse { t_x: v[3], phi_x: unit(v[4], v[5]), t_y: v[6], phi_y: unit(v[7], v[8]) },
                }
            })
            .collect();
        Self::new(
            header.widths_nm.iter().map(|w| w * 1e-9).collect(),
            header.wavelengths_nm.iter().map(|w| w * 1e-9).collect(),
            samples,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size_and_uniqueness() {
        let d = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 6, 3).unwrap();
        assert_eq!(d.len(), 108);
        let mut dup = d.clone();
        dup.samples.push(dup.samples[5]);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn file_round_trip() {
        let d = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 4, 2).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = ResponseDataset::read_from(&buf[..]).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert!((a.cell.w_x - b.cell.w_x).abs() < 1e-14);
            assert!((a.response.t_x - b.response.t_x).abs() < 1e-6);
            assert!((a.response.phi_y.1 - b.response.phi_y.1).abs() < 1e-6);
        }
        let n = buf.len();
        buf[n - 3] ^= 0x40;
        assert!(matches!(ResponseDataset::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn wavelength_range_enforced() {
        let mut d = ResponseDataset::synthetic_grid(&SyntheticFdtd::default(), 2, 2).unwrap();
        d.samples[0].wavelength = 900e-9;
        assert!(d.validate().is_err());
    }
}
