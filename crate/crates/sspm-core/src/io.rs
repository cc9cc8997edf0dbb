//! The array file format, mask loading, PGM export, and JSON sidecars.
//!
//! # Array format
//!
//! Files open with the ASCII magic `SSPM1 ` followed by a single-line JSON
//! header and a newline:
//!
//! ```text
//! SSPM1 {"dtype":"f64","shape":[2,3],"order":"col-major"}\n
//! ```
//!
//! The payload is exactly `product(shape)` IEEE-754 binary64 values,
//! little-endian, in column-major order (first dimension fastest). Readers
//! reject a bad magic, an undeclared dtype/order, a truncated payload, and
//! any payload whose byte length disagrees with the header shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spatial::Mask;

const MAGIC: &[u8] = b"SSPM1 ";
const MAX_HEADER_LINE: usize = 1 << 16;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

/// A dense array with its shape; values in column-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ArrayData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {:?} does not match {} values",
                shape,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }
}

pub fn write_array(path: &Path, array: &ArrayData) -> Result<()> {
    if array.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("array written to {}", path.display())));
    }
    let header = Header {
        dtype: "f64".into(),
        shape: array.shape.clone(),
        order: "col-major".into(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for v in &array.values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<ArrayData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "missing header line"));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > MAX_HEADER_LINE {
            return Err(Error::format(path, "header line too long"));
        }
    }
    if line.len() < MAGIC.len() || &line[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "bad magic; expected \"SSPM1 \""));
    }
    let header: Header = serde_json::from_slice(&line[MAGIC.len()..])
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    if header.dtype != "f64" {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "col-major" {
        return Err(Error::format(path, format!("unsupported order {:?}", header.order)));
    }
    if header.shape.is_empty() {
        return Err(Error::format(path, "empty shape"));
    }
    let count: usize = header.shape.iter().product();
    let mut payload = vec![0u8; count * 8];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, format!("truncated payload; expected {} bytes", count * 8))
        } else {
            Error::io(path, e)
        }
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "payload longer than declared shape"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ArrayData { shape: header.shape, values })
}

/// Writes a matrix as a 2-D array file (shape `[nrows, ncols]`). The matrix
/// storage is already column-major, so the payload is a direct dump.
pub fn write_matrix(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let array = ArrayData {
        shape: vec![matrix.nrows(), matrix.ncols()],
        values: matrix.as_slice().to_vec(),
    };
    write_array(path, &array)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let array = read_array(path)?;
    if array.shape.len() != 2 {
        return Err(Error::format(
            path,
            format!("expected a 2-D array, got shape {:?}", array.shape),
        ));
    }
    Ok(DMatrix::from_column_slice(array.shape[0], array.shape[1], &array.values))
}

/// Reads a 0/1-valued array file as a mask. Any value other than exactly 0.0
/// or 1.0 is rejected.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let array = read_array(path)?;
    let mut values = Vec::with_capacity(array.values.len());
    for v in &array.values {
        match *v {
            0.0 => values.push(false),
            1.0 => values.push(true),
            other => {
                return Err(Error::format(path, format!("mask value {other} is not 0 or 1")))
            }
        }
    }
    Mask::new(array.shape, values)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let values: Vec<f64> = mask.values().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_array(path, &ArrayData::new(mask.shape().to_vec(), values)?)
}

/// Writes a max-normalized 8-bit PGM (P5) image.
///
/// `values` is a `width x height` field in column-major order; pixel `(x, y)`
/// is `values[x + width * y]`. The maximum value maps to 255; an all-zero (or
/// all-negative) field produces a black image.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "pgm {}x{} needs {} values, got {}",
            width,
            height,
            width * height,
            values.len()
        )));
    }
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    let mut row = Vec::with_capacity(width);
    for y in 0..height {
        row.clear();
        for x in 0..width {
            let v = values[x + width * y];
            let byte = if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            };
            row.push(byte);
        }
        w.write_all(&row).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DictionaryMeta {
    schedule: crate::dictionary::AcquisitionSchedule,
    grid: crate::dictionary::SpectralGrid,
}

/// Sidecar path of a dictionary array file: `dict.sspm` -> `dict.meta.json`.
pub fn dictionary_meta_path(array_path: &Path) -> std::path::PathBuf {
    let mut name = array_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dict".into());
    name.push_str(".meta.json");
    array_path.with_file_name(name)
}

/// Writes the dictionary matrix plus its schedule/grid sidecar.
pub fn save_dictionary(array_path: &Path, dict: &crate::dictionary::Dictionary) -> Result<()> {
    write_matrix(array_path, dict.entries())?;
    let meta = DictionaryMeta {
        schedule: dict.schedule().clone(),
        grid: dict.grid().clone(),
    };
    write_json(&dictionary_meta_path(array_path), &meta)
}

/// Loads a dictionary from its array file and sidecar, re-validating shape
/// consistency.
pub fn load_dictionary(array_path: &Path) -> Result<crate::dictionary::Dictionary> {
    let entries = read_matrix(array_path)?;
    let meta: DictionaryMeta = read_json(&dictionary_meta_path(array_path))?;
    crate::dictionary::Dictionary::from_parts(entries, meta.grid, meta.schedule)
}

/// SHA-256 of a file, lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Serializes a value as pretty JSON next to an artifact.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sspm");
        let array = ArrayData::new(
            vec![2, 3],
            vec![1.0, -2.5, 3.25e-300, 4.0, 5.0, -0.0],
        )
        .unwrap();
        write_array(&path, &array).unwrap();
        let back = read_array(&path).unwrap();
        assert_eq!(back.shape, array.shape);
        for (a, b) in back.values.iter().zip(&array.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn one_encodes_canonically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.sspm");
        write_array(&path, &ArrayData::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(payload, &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F]);
    }

    #[test]
    fn header_declares_shape_and_payload_len() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.sspm");
        write_array(&path, &ArrayData::new(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = std::str::from_utf8(&bytes[6..newline]).unwrap();
        assert!(header.contains("\"shape\":[2,3]"), "header was {header}");
        assert_eq!(bytes.len() - newline - 1, 48);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.sspm");
        std::fs::write(&path, b"NOPE1 {\"dtype\":\"f64\",\"shape\":[1],\"order\":\"col-major\"}\n12345678").unwrap();
        assert!(matches!(read_array(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.sspm");
        write_array(&path, &ArrayData::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        let err = read_array(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got {err}");
    }

    #[test]
    fn rejects_oversized_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("long.sspm");
        write_array(&path, &ArrayData::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_array(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_finite_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.sspm");
        let arr = ArrayData { shape: vec![1], values: vec![f64::NAN] };
        assert!(write_array(&path, &arr).is_err());
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.sspm");
        let mask = Mask::new(vec![2, 2], vec![true, false, false, true]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);

        write_array(&path, &ArrayData::new(vec![1], vec![0.5]).unwrap()).unwrap();
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn matrix_roundtrip_preserves_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sspm");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn dictionary_roundtrip_with_sidecar() {
        use crate::dictionary::{build_dictionary, build_grid, AxisSpec, Spacing};
        let dir = tempdir().unwrap();
        let path = dir.path().join("dict.sspm");
        let grid = build_grid(&[AxisSpec {
            min: 0.02,
            max: 0.5,
            count: 6,
            spacing: Spacing::Logarithmic,
        }])
        .unwrap();
        let schedule = crate::dictionary::AcquisitionSchedule::new(
            crate::dictionary::Kernel::T2Exp,
            vec![vec![0.01], vec![0.05], vec![0.1]],
        )
        .unwrap();
        let dict = build_dictionary(&schedule, &grid).unwrap();
        save_dictionary(&path, &dict).unwrap();
        assert!(dictionary_meta_path(&path).exists());
        let back = load_dictionary(&path).unwrap();
        assert_eq!(back.entries(), dict.entries());
        assert_eq!(back.grid().points(), dict.grid().points());
        assert_eq!(back.schedule().entries, dict.schedule().entries);
    }

    #[test]
    fn pgm_normalizes_to_255() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_pgm(&path, 2, 2, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = b"P5\n2 2\n255\n".len();
        assert_eq!(&bytes[..header_end], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[header_end..], &[0, 64, 128, 255]);
    }
}
