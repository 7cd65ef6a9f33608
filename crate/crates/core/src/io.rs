//! Binary container for batches of grid functions and CSV export.
//!
//! Layout of an `MFN1` container, all fields little-endian:
//!
//! ```text
//! b"MFN1"
//! u32 dim, u32 points_per_axis, u32 channels, u32 count
//! count · m^dim · channels × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape, Error, Result};
use crate::grid::{GridFunction, GridSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"MFN1";

pub(crate) fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn get_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8], path: &Path) -> Result<()> {
    let mut got = vec![0u8; magic.len()];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    Ok(())
}

/// Serializes functions sharing one layout into `w`.
pub fn write_functions(w: &mut impl Write, functions: &[GridFunction]) -> Result<()> {
    let spec = match functions.first() {
        Some(f) => *f.spec(),
        None => return Err(shape("cannot write an empty batch without a layout")),
    };
    if functions.iter().any(|f| *f.spec() != spec) {
        return Err(shape("all functions in a container must share one layout"));
    }
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, spec.dim)?;
    put_u32(w, spec.points_per_axis)?;
    put_u32(w, spec.channels)?;
    put_u32(w, functions.len())?;
    for f in functions {
        put_f64s(w, f.values())?;
    }
    Ok(())
}

pub fn read_functions(r: &mut impl Read, path: &Path) -> Result<Vec<GridFunction>> {
    expect_magic(r, DATASET_MAGIC, path)?;
    let dim = get_u32(r)?;
    let m = get_u32(r)?;
    let c = get_u32(r)?;
    let count = get_u32(r)?;
    let spec = GridSpec::new(dim, m, c).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    (0..count)
        .map(|_| GridFunction::new(spec, get_f64s(r, spec.len())?))
        .collect()
}

pub fn save_functions(path: &Path, functions: &[GridFunction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_functions(&mut w, functions)?;
    w.flush()?;
    Ok(())
}

pub fn load_functions(path: &Path) -> Result<Vec<GridFunction>> {
    let mut r = BufReader::new(File::open(path)?);
    read_functions(&mut r, path)
}

/// One row per grid node: coordinates `x0..`, then one column per function
/// and channel (`f{i}_c{c}`).
pub fn write_csv(w: &mut impl Write, functions: &[GridFunction]) -> Result<()> {
    let spec = match functions.first() {
        Some(f) => *f.spec(),
        None => return Ok(()),
    };
    if functions.iter().any(|f| !f.spec().same_nodes(&spec)) {
        return Err(shape("CSV export needs functions on one grid"));
    }
    let mut header: Vec<String> = (0..spec.dim).map(|k| format!("x{k}")).collect();
    for (i, f) in functions.iter().enumerate() {
        for c in 0..f.spec().channels {
            header.push(format!("f{i}_c{c}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for n in 0..spec.nodes() {
        let mut row: Vec<String> = spec.coords(n).iter().map(|x| format!("{x}")).collect();
        for f in functions {
            for c in 0..f.spec().channels {
                row.push(format!("{}", f.value(n, c)));
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
