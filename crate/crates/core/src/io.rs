//! Field files and image previews.
//!
//! `SEPDA-F32`: the 8 bytes `SEPDAF32`, then `n_x`, `n_y`, component count
//! as little-endian `u32`, then `f32` little-endian values in flat node
//! order, components interleaved per node.
//!
//! Previews are 16-bit binary PGM with the value range in a text sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SepdaError};
use crate::fields::{Grid, ScalarField, VectorField};

pub const MAGIC: &[u8; 8] = b"SEPDAF32";

#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl From<ScalarField> for AnyField {
    fn from(f: ScalarField) -> Self {
        AnyField::Scalar(f)
    }
}

impl From<VectorField> for AnyField {
    fn from(f: VectorField) -> Self {
        AnyField::Vector(f)
    }
}

fn header(w: &mut impl Write, grid: Grid, ncomp: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [grid.nx() as u32, grid.ny() as u32, ncomp] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_scalar(mut w: impl Write, f: &ScalarField) -> Result<()> {
    header(&mut w, f.grid(), 1)?;
    for &v in f.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_vector(mut w: impl Write, f: &VectorField) -> Result<()> {
    header(&mut w, f.grid(), 2)?;
    for (&a, &b) in f.component(0).iter().zip(f.component(1)) {
        w.write_all(&(a as f32).to_le_bytes())?;
        w.write_all(&(b as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_field(w: impl Write, f: &AnyField) -> Result<()> {
    match f {
        AnyField::Scalar(s) => write_scalar(w, s),
        AnyField::Vector(v) => write_vector(w, v),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_field(mut r: impl Read) -> Result<AnyField> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SepdaError::Format("bad magic".into()));
    }
    let nx = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let ncomp = read_u32(&mut r)? as usize;
    if !(ncomp == 1 || ncomp == 2) {
        return Err(SepdaError::Format(format!("{ncomp} components")));
    }
    let grid = Grid::new(nx, ny)?;
    let mut raw = vec![0u8; 4 * grid.len() * ncomp];
    r.read_exact(&mut raw).map_err(|_| SepdaError::Format("truncated payload".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(SepdaError::Format("trailing bytes".into()));
    }
    let vals: Vec<f64> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if ncomp == 1 {
        Ok(AnyField::Scalar(ScalarField::new(grid, vals)?))
    } else {
        let x = vals.iter().step_by(2).copied().collect();
        let y = vals.iter().skip(1).step_by(2).copied().collect();
        Ok(AnyField::Vector(VectorField::new(grid, x, y)?))
    }
}

pub fn save(path: impl AsRef<Path>, f: &AnyField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyField> {
    read_field(BufReader::new(File::open(path)?))
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarField> {
    match load(path)? {
        AnyField::Scalar(s) => Ok(s),
        AnyField::Vector(_) => Err(SepdaError::Format("expected a scalar field".into())),
    }
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<VectorField> {
    match load(path)? {
        AnyField::Vector(v) => Ok(v),
        AnyField::Scalar(_) => Err(SepdaError::Format("expected a vector field".into())),
    }
}

/// 16-bit P5 with `y` pointing up; returns the `(min, max)` mapped to
/// `0` and `65535`. A constant image maps to all zeros.
pub fn write_pgm(mut w: impl Write, f: &ScalarField) -> Result<(f64, f64)> {
    let g = f.grid();
    let (lo, hi) = f.min_max();
    let span = hi - lo;
    write!(w, "P5\n{} {}\n65535\n", g.nx(), g.ny())?;
    for j in (0..g.ny()).rev() {
        for i in 0..g.nx() {
            let v = if span > 0.0 { ((f.get(i, j) - lo) / span * 65535.0).round() } else { 0.0 };
            w.write_all(&(v as u16).to_be_bytes())?;
        }
    }
    Ok((lo, hi))
}

/// Writes `path` and `path.range` holding `min max`.
pub fn save_pgm(path: impl AsRef<Path>, f: &ScalarField) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    let (lo, hi) = write_pgm(&mut w, f)?;
    w.flush()?;
    let mut side = path.as_os_str().to_owned();
    side.push(".range");
    let side = PathBuf::from(side);
    std::fs::write(&side, format!("min {lo:e}\nmax {hi:e}\n"))?;
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let g = Grid::new(9, 12).unwrap();
        let f = ScalarField::from_fn(g, |x, y| x - 2.0 * y * y + 0.25);
        let mut buf = Vec::new();
        write_scalar(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 20 + 4 * g.len());
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 12);
        let AnyField::Scalar(back) = read_field(&buf[..]).unwrap() else { panic!() };
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn vector_layout_interleaves_components() {
        let g = Grid::square(8).unwrap();
        let f = VectorField::from_fn(g, |x, y| [x, -y]);
        let mut buf = Vec::new();
        write_vector(&mut buf, &f).unwrap();
        let at = |k: usize| f32::from_le_bytes(buf[20 + 4 * k..24 + 4 * k].try_into().unwrap());
        // node (0, 1) is flat index 1: components at 2 and 3
        assert_eq!(at(2), 0.0);
        assert_eq!(at(3), -(1.0f32 / 7.0));
        assert_eq!(read_field(&buf[..]).unwrap(), AnyField::Vector(f.clone()).round_to_f32());
    }

    impl AnyField {
        fn round_to_f32(self) -> Self {
            match self {
                AnyField::Scalar(s) => AnyField::Scalar(s.map(|v| v as f32 as f64)),
                AnyField::Vector(v) => {
                    let g = v.grid();
                    let r = |c: usize| v.component(c).iter().map(|&x| x as f32 as f64).collect();
                    AnyField::Vector(VectorField::new(g, r(0), r(1)).unwrap())
                }
            }
        }
    }

    #[test]
    fn malformed_files() {
        let g = Grid::square(8).unwrap();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &ScalarField::zeros(g)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_field(&bad[..]), Err(SepdaError::Format(_))));
        assert!(read_field(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_field(&long[..]).is_err());
        let mut three = buf;
        three[16] = 3;
        assert!(read_field(&three[..]).is_err());
    }

    #[test]
    fn pgm_layout() {
        let g = Grid::new(3, 2).unwrap();
        let f = ScalarField::from_fn(g, |x, y| x + 2.0 * y);
        let mut buf = Vec::new();
        let (lo, hi) = write_pgm(&mut buf, &f).unwrap();
        assert_eq!((lo, hi), (0.0, 3.0));
        let head = b"P5\n3 2\n65535\n";
        assert_eq!(&buf[..head.len()], head);
        let px: Vec<u16> =
            buf[head.len()..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        // top row is y = 1
        assert_eq!(px, vec![43690, 54613, 65535, 0, 10923, 21845]);
    }
}
