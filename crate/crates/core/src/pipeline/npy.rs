//! NPY version 1.0 for 2-D little-endian `f64` arrays in C order.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
/// Magic, version bytes and the 2-byte header length.
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

fn at(offset: usize, message: impl Into<String>) -> Error {
    Error::format(format!("byte {offset}"), message)
}

pub fn write_npy(out: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    let (n, v) = m.shape();
    if n == 0 || v == 0 {
        return Err(Error::EmptyData(format!("refusing to write a {n}x{v} matrix")));
    }
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({n}, {v}), }}");
    let used = PREAMBLE + header.len() + 1;
    header.push_str(&" ".repeat(used.next_multiple_of(ALIGN) - used));
    header.push('\n');
    let len = u16::try_from(header.len()).map_err(|_| Error::invalid("NPY header too long"))?;
    let mut bytes = Vec::with_capacity(PREAMBLE + header.len() + 8 * n * v);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for i in 0..n {
        for j in 0..v {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_npy(input: &mut impl Read) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_npy(&bytes)
}

pub fn parse_npy(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < PREAMBLE || &bytes[..6] != MAGIC {
        return Err(at(0, "missing NPY magic string"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(at(6, format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE + header_len;
    if bytes.len() < data_start {
        return Err(at(8, format!("header length {header_len} runs past the end of the file")));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE..data_start]).map_err(|e| at(PREAMBLE + e.valid_up_to(), "header is not ASCII"))?;
    let (descr, descr_at) = field(header, "descr").ok_or_else(|| at(PREAMBLE, "header has no 'descr'"))?;
    if descr.trim_matches(|c| c == '\'' || c == '"') != "<f8" {
        return Err(at(PREAMBLE + descr_at, format!("unsupported dtype {descr}; only '<f8' is read")));
    }
    let (order, order_at) = field(header, "fortran_order").ok_or_else(|| at(PREAMBLE, "header has no 'fortran_order'"))?;
    match order {
        "False" => {}
        "True" => return Err(at(PREAMBLE + order_at, "unsupported order: Fortran-ordered arrays are not read")),
        other => return Err(at(PREAMBLE + order_at, format!("invalid fortran_order value {other}"))),
    }
    let (shape, shape_at) = field(header, "shape").ok_or_else(|| at(PREAMBLE, "header has no 'shape'"))?;
    let dims: Vec<usize> = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| at(PREAMBLE + shape_at, format!("invalid shape {shape}"))))
        .collect::<Result<_>>()?;
    let [n, v] = dims[..] else {
        return Err(at(PREAMBLE + shape_at, format!("expected a 2-D array, shape is {shape}")));
    };
    if n == 0 || v == 0 {
        return Err(Error::EmptyData(format!("array has shape ({n}, {v})")));
    }
    let expected = n.checked_mul(v).and_then(|c| c.checked_mul(8)).ok_or_else(|| at(PREAMBLE + shape_at, "shape overflows"))?;
    let data = &bytes[data_start..];
    if data.len() != expected {
        return Err(at(
            data_start,
            format!("expected {expected} data bytes for shape ({n}, {v}), found {}", data.len()),
        ));
    }
    let mut m = DMatrix::zeros(n, v);
    for (k, c) in data.chunks_exact(8).enumerate() {
        m[(k / v, k % v)] = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
    }
    Ok(m)
}

/// Value text and its offset within the header for a top-level dictionary key.
fn field<'a>(header: &'a str, key: &str) -> Option<(&'a str, usize)> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let pos = quoted.iter().find_map(|q| header.find(q.as_str()).map(|p| p + q.len()))?;
    let rest = &header[pos..];
    let colon = rest.find(':')?;
    let start = pos + colon + 1;
    let value = &header[start..];
    let trimmed_start = value.len() - value.trim_start().len();
    let value = value.trim_start();
    let end = if value.starts_with('(') {
        value.find(')')? + 1
    } else {
        value.find(',').or_else(|| value.find('}'))?
    };
    Some((value[..end].trim(), start + trimmed_start))
}
