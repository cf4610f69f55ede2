//! Hyperspectral cubes, their on-disk format, and the pixel × band matrix view.
//!
//! File layout (little-endian): `b"HSIC"`, `rows: u32`, `cols: u32`,
//! `bands: u32`, then `rows * cols * bands` `f32` values, band-major and
//! row-major within each band.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSIC";
pub const HEADER_LEN: usize = 16;

/// A rows × cols × bands reflectance cube stored band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f32>,
}

impl Cube {
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(Error::Dimension(format!(
                "cube dimensions must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|p| p.checked_mul(bands))
            .ok_or_else(|| Error::Dimension("cube dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "{rows}x{cols}x{bands} cube needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            rows,
            cols,
            bands,
            data,
        })
    }

    /// Cube filled with zeros.
    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Result<Self> {
        Self::new(rows, cols, bands, vec![0.0; rows * cols * bands])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.bands)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.pixels() + row * self.cols + col]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[band * n..(band + 1) * n]
    }

    /// Band converted to `f64`.
    pub fn band_f64(&self, band: usize) -> Vec<f64> {
        self.band(band).iter().map(|&v| f64::from(v)).collect()
    }
}

/// N × B view of a cube: row `i = r * cols + c`, column `j` = band `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    values: DMatrix<f64>,
}

impl ObservationMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension(
                "observation matrix must be non-empty".into(),
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn n_pixels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<Cube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

pub fn decode_cube(bytes: &[u8]) -> Result<Cube> {
    if bytes.len() < HEADER_LEN {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if found != MAGIC {
            return Err(Error::BadMagic { found });
        }
        return Err(Error::PayloadLength {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    let dim = |at: usize| {
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
    };
    let (rows, cols, bands) = (dim(4), dim(8), dim(12));
    let count = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| Error::Dimension("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::PayloadLength {
            expected: count * 4,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Cube::new(rows, cols, bands, data)
}

pub fn encode_cube(cube: &Cube) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + cube.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    for d in [cube.rows, cube.cols, cube.bands] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_cube(cube))
        .map_err(|e| Error::io(path, e))
}

/// Per-band affine map onto [0, 1]; constant bands become all zeros.
pub fn normalize_bands(cube: &Cube) -> Cube {
    let mut out = cube.clone();
    for j in 0..cube.bands {
        let band = out.band_mut(j);
        let (lo, hi) = band
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if hi > lo {
            let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
            for v in band.iter_mut() {
                *v = ((f64::from(*v) - lo) / span) as f32;
            }
        } else {
            band.fill(0.0);
        }
    }
    out
}

pub fn cube_to_matrix(cube: &Cube) -> ObservationMatrix {
    let n = cube.pixels();
    let values = DMatrix::from_fn(n, cube.bands, |i, j| f64::from(cube.data[j * n + i]));
    ObservationMatrix { values }
}

/// Inverse of [`cube_to_matrix`]. Values are rounded to `f32`.
pub fn matrix_to_cube(m: &ObservationMatrix, rows: usize, cols: usize) -> Result<Cube> {
    dmatrix_to_cube(&m.values, rows, cols)
}

pub(crate) fn dmatrix_to_cube(m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<Cube> {
    if rows == 0 || cols == 0 || rows * cols != m.nrows() {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} spatial grid does not match {} pixels",
            m.nrows()
        )));
    }
    // nalgebra storage is column-major, which is exactly band-major order.
    let data: Vec<f32> = m.as_slice().iter().map(|&v| v as f32).collect();
    Cube::new(rows, cols, m.ncols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(rows: usize, cols: usize, bands: usize) -> Cube {
        let data = (0..rows * cols * bands).map(|v| v as f32 * 0.25).collect();
        Cube::new(rows, cols, bands, data).unwrap()
    }

    #[test]
    fn decode_header_and_payload() {
        let c = cube(2, 2, 3);
        let back = decode_cube(&encode_cube(&c)).unwrap();
        assert_eq!(back.shape(), (2, 2, 3));
        assert_eq!(back.data().len(), 12);
    }

    #[test]
    fn unit_cube_is_twenty_bytes() {
        let c = Cube::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_cube(&c);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"HSIC");
        assert_eq!(&bytes[16..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hsic");
        let c = Cube::new(
            2,
            3,
            2,
            vec![
                0.1, -0.0, 1e-30, 3.5, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
            ],
        )
        .unwrap();
        save_cube(&c, &path).unwrap();
        let back = load_cube(&path).unwrap();
        let bits = |c: &Cube| c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c), bits(&back));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_cube(&cube(1, 1, 2));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_cube(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = encode_cube(&cube(2, 2, 2));
        bytes.pop();
        assert!(matches!(
            decode_cube(&bytes),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut bytes = encode_cube(&cube(1, 1, 2));
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_cube(&bytes),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_cube("/nonexistent/nope.hsic"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let c = cube(1, 1, 1);
        assert!(matches!(
            save_cube(&c, "/nonexistent-dir/x.hsic"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn normalize_rules() {
        let c = Cube::new(1, 2, 3, vec![2.0, 4.0, 7.0, 7.0, 0.0, 1.0]).unwrap();
        let n = normalize_bands(&c);
        assert_eq!(n.band(0), &[0.0, 1.0]);
        assert_eq!(n.band(1), &[0.0, 0.0]);
        assert_eq!(n.band(2), &[0.0, 1.0]);
    }

    #[test]
    fn matrix_layout() {
        // 2x1x2 cube: pixels (0,0), (1,0); bands are columns.
        let c = Cube::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = cube_to_matrix(&c);
        assert_eq!(
            m.values(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0])
        );
        let single = cube_to_matrix(&Cube::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(single.values().shape(), (1, 3));
        assert_eq!(matrix_to_cube(&single, 1, 1).unwrap().shape(), (1, 1, 3));
    }

    #[test]
    fn pixel_index_is_row_major() {
        let c = cube(3, 4, 2);
        let m = cube_to_matrix(&c);
        for r in 0..3 {
            for col in 0..4 {
                for b in 0..2 {
                    assert_eq!(m.values()[(r * 4 + col, b)], f64::from(c.get(r, col, b)));
                }
            }
        }
    }

    #[test]
    fn matrix_to_cube_dimension_error() {
        let m = cube_to_matrix(&cube(2, 3, 2));
        assert!(matches!(matrix_to_cube(&m, 4, 2), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn layout_round_trip(rows in 1usize..=8, cols in 1usize..=8, bands in 1usize..=8, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols * bands)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32)
                .collect();
            let c = Cube::new(rows, cols, bands, data).unwrap();
            let m = cube_to_matrix(&c);
            prop_assert_eq!(&matrix_to_cube(&m, rows, cols).unwrap(), &c);
            let c2 = matrix_to_cube(&m, rows, cols).unwrap();
            prop_assert_eq!(cube_to_matrix(&c2), m);
        }

        #[test]
        fn normalize_in_unit_interval_and_idempotent(values in proptest::collection::vec(-50.0f32..50.0, 12)) {
            let c = Cube::new(2, 3, 2, values).unwrap();
            let n = normalize_bands(&c);
            prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let twice = normalize_bands(&n);
            for (a, b) in n.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
