//! Little-endian binary formats for matrices, sparse overlays, tile
//! patterns and layer checkpoints.
//!
//! | magic  | body                                                          |
//! |--------|---------------------------------------------------------------|
//! | `TWMX` | ver, rows, cols: u32; layout: u8; 3 pad bytes; f32 data       |
//! | `TWCS` | ver, rows, cols, nnz: u32; col_ptr, row_idx: u32; values: f32 |
//! | `TWPT` | ver, K, N, G, tiles: u32; per tile n_i, col ids, mask words   |
//! | `TWML` | ver, layers: u32; per layer in, out: u32; then TWMX W, b each |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::RowMask;
use crate::matrix::{CscMatrix, DenseMatrix, Layout};
use crate::pattern::{Tile, TilePattern};

pub const MATRIX_MAGIC: [u8; 4] = *b"TWMX";
pub const CSC_MAGIC: [u8; 4] = *b"TWCS";
pub const PATTERN_MAGIC: [u8; 4] = *b"TWPT";
pub const MODEL_MAGIC: [u8; 4] = *b"TWML";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read exactly `len` bytes without trusting `len` for the allocation.
fn take_bytes(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Truncated(format!("{what}: expected {len} bytes, got {}", buf.len())));
    }
    Ok(buf)
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let b = take_bytes(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
}

fn get_u32s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<u32>> {
    let len = count
        .checked_mul(4)
        .ok_or_else(|| Error::Malformed(format!("{what}: count {count} overflows")))?;
    Ok(take_bytes(r, len, what)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn get_f32s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    Ok(get_u32s(r, count, what)?.into_iter().map(f32::from_bits).collect())
}

fn expect_header(r: &mut impl Read, magic: [u8; 4]) -> Result<()> {
    let found: [u8; 4] = take_bytes(r, 4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(Error::MagicMismatch { expected: magic, found });
    }
    match get_u32(r, "version")? as u32 {
        VERSION => Ok(()),
        v => Err(Error::UnsupportedVersion(v)),
    }
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Malformed("trailing bytes after payload".into())),
    }
}

fn malformed(e: Error) -> Error {
    match e {
        Error::InvalidMatrix(m) | Error::InvalidPattern(m) => Error::Malformed(m),
        other => other,
    }
}

pub fn write_matrix_to(w: &mut impl Write, m: &DenseMatrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidMatrix(format!("refusing to write a {}x{} matrix", m.rows(), m.cols())));
    }
    w.write_all(&MATRIX_MAGIC)?;
    put_u32(w, VERSION as usize, "version")?;
    put_u32(w, m.rows(), "rows")?;
    put_u32(w, m.cols(), "cols")?;
    let layout = match m.layout() {
        Layout::RowMajor => 0u8,
        Layout::ColMajor => 1u8,
    };
    w.write_all(&[layout, 0, 0, 0])?;
    put_f32s(w, m.data())
}

pub fn read_matrix_from(r: &mut impl Read) -> Result<DenseMatrix> {
    expect_header(r, MATRIX_MAGIC)?;
    let rows = get_u32(r, "rows")?;
    let cols = get_u32(r, "cols")?;
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed(format!("empty {rows}x{cols} matrix")));
    }
    let tail = take_bytes(r, 4, "layout")?;
    let layout = match tail[0] {
        0 => Layout::RowMajor,
        1 => Layout::ColMajor,
        b => return Err(Error::Malformed(format!("unknown layout byte {b}"))),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Malformed(format!("{rows}x{cols} overflows")))?;
    let data = get_f32s(r, count, "matrix data")?;
    DenseMatrix::new(rows, cols, layout, data).map_err(malformed)
}

pub fn write_matrix(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    // Validate before touching the filesystem.
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidMatrix(format!("refusing to write a {}x{} matrix", m.rows(), m.cols())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_to(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_matrix_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok(m)
}

pub fn write_csc_to(w: &mut impl Write, s: &CscMatrix) -> Result<()> {
    w.write_all(&CSC_MAGIC)?;
    put_u32(w, VERSION as usize, "version")?;
    put_u32(w, s.rows(), "rows")?;
    put_u32(w, s.cols(), "cols")?;
    put_u32(w, s.nnz(), "nnz")?;
    for &p in s.col_ptr() {
        put_u32(w, p, "col_ptr")?;
    }
    for &i in s.row_idx() {
        put_u32(w, i, "row index")?;
    }
    put_f32s(w, s.values())
}

pub fn read_csc_from(r: &mut impl Read) -> Result<CscMatrix> {
    expect_header(r, CSC_MAGIC)?;
    let rows = get_u32(r, "rows")?;
    let cols = get_u32(r, "cols")?;
    let nnz = get_u32(r, "nnz")?;
    let col_ptr = get_u32s(r, cols + 1, "col_ptr")?;
    let row_idx = get_u32s(r, nnz, "row indices")?;
    let values = get_f32s(r, nnz, "values")?;
    CscMatrix::new(
        rows,
        cols,
        col_ptr.into_iter().map(|v| v as usize).collect(),
        row_idx.into_iter().map(|v| v as usize).collect(),
        values,
    )
    .map_err(malformed)
}

pub fn write_csc(s: &CscMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csc_to(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn read_csc(path: impl AsRef<Path>) -> Result<CscMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let s = read_csc_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok(s)
}

pub fn write_pattern_to(w: &mut impl Write, p: &TilePattern) -> Result<()> {
    w.write_all(&PATTERN_MAGIC)?;
    put_u32(w, VERSION as usize, "version")?;
    put_u32(w, p.k(), "K")?;
    put_u32(w, p.n(), "N")?;
    put_u32(w, p.g(), "G")?;
    put_u32(w, p.tiles().len(), "tile count")?;
    for tile in p.tiles() {
        put_u32(w, tile.width(), "tile width")?;
        for &c in tile.col_ids() {
            put_u32(w, c, "column id")?;
        }
        for &word in tile.row_keep().words() {
            w.write_all(&word.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pattern_from(r: &mut impl Read) -> Result<TilePattern> {
    expect_header(r, PATTERN_MAGIC)?;
    let k = get_u32(r, "K")?;
    let n = get_u32(r, "N")?;
    let g = get_u32(r, "G")?;
    let count = get_u32(r, "tile count")?;
    if g == 0 || count > n.div_ceil(g) {
        return Err(Error::Malformed(format!("{count} tiles for N = {n}, G = {g}")));
    }
    let words = RowMask::words_for(k);
    let mut tiles = Vec::with_capacity(count);
    for t in 0..count {
        let width = get_u32(r, "tile width")?;
        if width > g {
            return Err(Error::Malformed(format!("tile {t} is {width} wide, G = {g}")));
        }
        let cols = get_u32s(r, width, "column ids")?;
        let mask = RowMask::from_words(k, get_u32s(r, words, "row mask")?).map_err(malformed)?;
        tiles.push(Tile::new(cols.into_iter().map(|c| c as usize).collect(), mask));
    }
    TilePattern::new(k, n, g, tiles).map_err(malformed)
}

pub fn write_pattern(p: &TilePattern, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pattern_to(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn read_pattern(path: impl AsRef<Path>) -> Result<TilePattern> {
    let mut r = BufReader::new(File::open(path)?);
    let p = read_pattern_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok(p)
}

/// One layer of a checkpoint: `in x out` weights and an `out`-long bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub weight: DenseMatrix,
    pub bias: Vec<f32>,
}

pub fn write_layers_to(w: &mut impl Write, layers: &[LayerRecord]) -> Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    put_u32(w, VERSION as usize, "version")?;
    put_u32(w, layers.len(), "layer count")?;
    for l in layers {
        if l.bias.len() != l.weight.cols() {
            return Err(Error::dim(
                "write_layers",
                format!("bias of {} for {} outputs", l.bias.len(), l.weight.cols()),
            ));
        }
        put_u32(w, l.weight.rows(), "layer inputs")?;
        put_u32(w, l.weight.cols(), "layer outputs")?;
    }
    for l in layers {
        write_matrix_to(w, &l.weight)?;
        write_matrix_to(w, &DenseMatrix::new(1, l.bias.len(), Layout::RowMajor, l.bias.clone())?)?;
    }
    Ok(())
}

pub fn read_layers_from(r: &mut impl Read) -> Result<Vec<LayerRecord>> {
    expect_header(r, MODEL_MAGIC)?;
    let count = get_u32(r, "layer count")?;
    let shapes = get_u32s(r, count.saturating_mul(2), "layer shapes")?;
    shapes
        .chunks_exact(2)
        .enumerate()
        .map(|(i, s)| {
            let (inputs, outputs) = (s[0] as usize, s[1] as usize);
            let weight = read_matrix_from(r)?;
            let bias = read_matrix_from(r)?;
            if weight.shape() != (inputs, outputs) || bias.shape() != (1, outputs) {
                return Err(Error::Malformed(format!(
                    "layer {i}: header says {inputs}x{outputs}, found weight {:?} and bias {:?}",
                    weight.shape(),
                    bias.shape()
                )));
            }
            Ok(LayerRecord {
                weight,
                bias: bias.into_data(),
            })
        })
        .collect()
}

pub fn write_layers(layers: &[LayerRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_layers_to(&mut w, layers)?;
    w.flush()?;
    Ok(())
}

pub fn read_layers(path: impl AsRef<Path>) -> Result<Vec<LayerRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    let layers = read_layers_from(&mut r)?;
    expect_eof(&mut r)?;
    Ok(layers)
}
