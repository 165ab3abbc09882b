//! Little-endian binary helpers shared by the model checkpoint formats.
//!
//! Every checkpoint starts with an 8-byte magic followed by a `u32` version.
//! Strings are `u32` length-prefixed UTF-8; matrices are `u32` rows, `u32`
//! cols, then row-major `f64` values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub fn write_header(w: &mut impl Write, magic: &[u8; 8], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

pub fn read_header(r: &mut impl Read, magic: &[u8; 8], supported: u32) -> Result<u32> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != supported {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {supported}")));
    }
    Ok(version)
}

pub fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8 string: {e}")))
}

pub fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(values.len() as u32)?;
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    (0..len).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
}

pub fn write_usizes(w: &mut impl Write, values: &[usize]) -> Result<()> {
    w.write_u32::<LittleEndian>(values.len() as u32)?;
    for &v in values {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    Ok(())
}

pub fn read_usizes(r: &mut impl Read) -> Result<Vec<usize>> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    (0..len).map(|_| Ok(r.read_u64::<LittleEndian>()? as usize)).collect()
}

pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_u32::<LittleEndian>(m.nrows() as u32)?;
    w.write_u32::<LittleEndian>(m.ncols() as u32)?;
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Matrix::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_params(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    let (names, values) = store.parts();
    w.write_u32::<LittleEndian>(names.len() as u32)?;
    for (name, value) in names.iter().zip(values) {
        write_str(w, name)?;
        write_matrix(w, value)?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        names.push(read_str(r)?);
        values.push(read_matrix(r)?);
    }
    Ok(ParamStore::from_parts(names, values))
}

/// Writes via a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}
