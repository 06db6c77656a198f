//! Binary model checkpoints.
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! magic            b"LFCK"
//! version          u32 (= CHECKPOINT_VERSION)
//! input_dim        u32
//! n_hidden         u32, then n_hidden widths
//! classes          u32
//! annotators       u32
//! basis_size       u32
//! basis_present    u32 (0 or 1); if 1: basis_size permutations of `classes` u32 each
//! tensors          every weight then bias, trunk layers first, then the class,
//!                  weight and coefficient heads; weights row-major (in x out)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::PermutationBasis;

use super::{ModelDims, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LFCK";

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint(
    w: &mut impl Write,
    params: &ModelParams,
    basis: Option<&PermutationBasis>,
) -> std::io::Result<()> {
    let d = &params.dims;
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    put_u32(w, d.input_dim)?;
    put_u32(w, d.hidden.len())?;
    for &h in &d.hidden {
        put_u32(w, h)?;
    }
    put_u32(w, d.classes)?;
    put_u32(w, d.annotators)?;
    put_u32(w, d.basis_size)?;
    match basis {
        Some(b) => {
            put_u32(w, 1)?;
            for perm in b.permutations() {
                for &row in perm {
                    put_u32(w, row)?;
                }
            }
        }
        None => put_u32(w, 0)?,
    }
    for t in params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self, what: &str) -> Result<usize> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("reading {what}: {e}")))?;
        Ok(u32::from_le_bytes(buf) as usize)
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let mut buf = [0u8; 8];
        for v in out {
            self.inner
                .read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("reading tensors: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(())
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<(ModelParams, Option<PermutationBasis>)> {
    let mut r = Reader { inner: r };
    let mut magic = [0u8; 4];
    r.inner
        .read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("reading magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let input_dim = r.u32("input_dim")?;
    let n_hidden = r.u32("n_hidden")?;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!("implausible depth {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.u32("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let dims = ModelDims {
        input_dim,
        hidden,
        classes: r.u32("classes")?,
        annotators: r.u32("annotators")?,
        basis_size: r.u32("basis_size")?,
    };
    dims.validate()?;
    let basis = match r.u32("basis flag")? {
        0 => None,
        1 => {
            let perms = (0..dims.basis_size)
                .map(|_| (0..dims.classes).map(|_| r.u32("basis")).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Some(PermutationBasis::from_permutations(dims.classes, perms)?)
        }
        other => return Err(Error::Checkpoint(format!("bad basis flag {other}"))),
    };
    let mut params = ModelParams::zeros(&dims);
    for t in params.tensors_mut() {
        r.f64s(t)?;
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((params, basis))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    basis: Option<&PermutationBasis>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params, basis)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<PermutationBasis>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::linalg::random_permutation_basis;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden: vec![4, 5],
            classes: 3,
            annotators: 2,
            basis_size: 4,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let p = init_params(&dims(), 9, true).unwrap();
        let basis = random_permutation_basis(3, 4, 2, true).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, Some(&basis)).unwrap();
        let (q, b) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(b.unwrap().permutations(), basis.permutations());

        let mut again = Vec::new();
        write_checkpoint(&mut again, &q, Some(&basis)).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let p = init_params(&dims(), 0, false).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, None).unwrap();
        assert_eq!(&buf[..4], b"LFCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        let header = 4 + 4 * (1 + 1 + 1 + 2 + 3 + 1);
        assert_eq!(buf.len(), header + 8 * p.parameter_count());
    }

    #[test]
    fn rejects_corruption() {
        let p = init_params(&dims(), 0, false).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, None).unwrap();
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(truncated).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 99;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
