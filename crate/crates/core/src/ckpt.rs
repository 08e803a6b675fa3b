//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FASTCKPT"
//! version u32 (= 1)
//! count   u32
//! then per tensor:
//!   name_len u32, name (UTF-8), rank u32, dims (u64 x rank), payload (f64 LE)
//! ```
//!
//! Tensor name prefixes in a model checkpoint: `acoustic.`, `cif.`,
//! `semantic.`, `decoder.` for parameters, `opt.` for optimizer moments,
//! `meta.` for scalars (config fields, epoch, step).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"FASTCKPT";
pub const VERSION: u32 = 1;

/// Serialize tensors in the given order. The write is atomic: a temp file in
/// the same directory is renamed over the target.
pub fn save(path: &Path, tensors: &[(String, Mat)]) -> Result<()> {
    let mut seen = BTreeMap::new();
    for (name, _) in tensors {
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::data(format!("duplicate tensor name `{name}`")));
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(tensors.len()).expect("tensor count").to_le_bytes());
    for (name, mat) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&u32::try_from(nb.len()).expect("name length").to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(mat.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(mat.cols as u64).to_le_bytes());
        for v in &mat.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Atomic write of raw bytes: temp file alongside the target, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Read back tensors in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Mat)>> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::data(format!("{}: bad magic, not a checkpoint", path.display())));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    let mut names = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|_| Error::data("tensor name is not UTF-8"))?
            .to_string();
        if names.insert(name.clone(), ()).is_some() {
            return Err(Error::data(format!("duplicate tensor name `{name}` in checkpoint")));
        }
        let rank = c.u32("rank")?;
        let (rows, cols) = match rank {
            1 => (c.u64("dim")? as usize, 1),
            2 => (c.u64("dim 0")? as usize, c.u64("dim 1")? as usize),
            r => return Err(Error::data(format!("tensor `{name}` has unsupported rank {r}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::data(format!("tensor `{name}` dims overflow")))?;
        let raw = c.take(n * 8, "payload")?;
        let mut data = Vec::with_capacity(n);
        for ch in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(ch.try_into().unwrap()));
        }
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    if c.pos != buf.len() {
        return Err(Error::data(format!(
            "{}: {} trailing bytes after last tensor",
            path.display(),
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn load_map(path: &Path) -> Result<BTreeMap<String, Mat>> {
    Ok(load(path)?.into_iter().collect())
}

/// Element-wise mean of the parameter tensors across checkpoints.
/// `opt.*` moments and run-specific `meta.*` scalars are dropped, except
/// `meta.cfg.*` entries, which must agree across inputs and are carried over.
pub fn average(paths: &[std::path::PathBuf]) -> Result<Vec<(String, Mat)>> {
    if paths.is_empty() {
        return Err(Error::contract("average: no checkpoints given".to_string()));
    }
    let first = load(&paths[0])?;
    let keep = |name: &str| !name.starts_with("opt.") && (!name.starts_with("meta.") || name.starts_with("meta.cfg."));
    let mut acc: Vec<(String, Mat)> =
        first.into_iter().filter(|(n, _)| keep(n)).collect();
    for p in &paths[1..] {
        let m = load_map(p)?;
        for (name, mat) in acc.iter_mut() {
            let other = m.get(name).ok_or_else(|| {
                Error::data(format!("checkpoint {} missing tensor `{name}`", p.display()))
            })?;
            if name.starts_with("meta.cfg.") {
                if other.data != mat.data {
                    return Err(Error::data(format!(
                        "checkpoint {} disagrees on `{name}`",
                        p.display()
                    )));
                }
            } else {
                if (other.rows, other.cols) != (mat.rows, mat.cols) {
                    return Err(Error::data(format!(
                        "checkpoint {} tensor `{name}` shape mismatch",
                        p.display()
                    )));
                }
                mat.add_assign(other);
            }
        }
    }
    let inv = 1.0 / paths.len() as f64;
    for (name, mat) in acc.iter_mut() {
        if !name.starts_with("meta.cfg.") {
            for v in mat.data.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::test_mat;

    fn tdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn roundtrip_is_bit_identical_including_nonfinite() {
        let d = tdir();
        let p = d.path().join("a.fastckpt");
        let mut weird = Mat::from_vec(1, 4, vec![f64::NAN, f64::INFINITY, -0.0, 1e-300]);
        weird.data[0] = f64::from_bits(0x7ff8_dead_beef_0001); // NaN payload
        let tensors = vec![
            ("acoustic.w".to_string(), test_mat(3, 4, 1, "ck")),
            ("meta.epoch".to_string(), Mat::scalar(3.0)),
            ("weird".to_string(), weird),
        ];
        save(&p, &tensors).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.len(), tensors.len());
        for ((n0, m0), (n1, m1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!((m0.rows, m0.cols), (m1.rows, m1.cols));
            assert!(m0
                .data
                .iter()
                .zip(&m1.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // save(load(x)) is byte-identical to x.
        let p2 = d.path().join("b.fastckpt");
        save(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let d = tdir();
        let p = d.path().join("bad.fastckpt");
        std::fs::write(&p, b"NOTMAGIC").unwrap();
        assert!(matches!(load(&p), Err(crate::Error::Data(_))));

        let good = d.path().join("good.fastckpt");
        save(&good, &[("w".to_string(), test_mat(2, 2, 3, "ck2"))]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let tr = d.path().join("trunc.fastckpt");
        std::fs::write(&tr, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&tr), Err(crate::Error::Data(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        let ex = d.path().join("extra.fastckpt");
        std::fs::write(&ex, &extra).unwrap();
        assert!(matches!(load(&ex), Err(crate::Error::Data(_))));
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let d = tdir();
        let p = d.path().join("dup.fastckpt");
        let r = save(
            &p,
            &[
                ("w".to_string(), Mat::scalar(1.0)),
                ("w".to_string(), Mat::scalar(2.0)),
            ],
        );
        assert!(matches!(r, Err(crate::Error::Data(_))));
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let d = tdir();
        let tensors = vec![
            ("acoustic.w".to_string(), test_mat(4, 4, 9, "avg")),
            ("meta.cfg.d_model".to_string(), Mat::scalar(32.0)),
            ("meta.epoch".to_string(), Mat::scalar(1.0)),
            ("opt.m.acoustic.w".to_string(), test_mat(4, 4, 10, "avg-m")),
        ];
        let p0 = d.path().join("c0.fastckpt");
        let p1 = d.path().join("c1.fastckpt");
        save(&p0, &tensors).unwrap();
        save(&p1, &tensors).unwrap();
        let avg = average(&[p0, p1]).unwrap();
        // opt.* and run meta dropped, cfg meta kept.
        let names: Vec<&str> = avg.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["acoustic.w", "meta.cfg.d_model"]);
        let orig = &tensors[0].1;
        assert!(avg[0]
            .1
            .data
            .iter()
            .zip(&orig.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn averaging_averages() {
        let d = tdir();
        let p0 = d.path().join("m0.fastckpt");
        let p1 = d.path().join("m1.fastckpt");
        save(&p0, &[("w".to_string(), Mat::from_vec(1, 2, vec![1.0, 4.0]))]).unwrap();
        save(&p1, &[("w".to_string(), Mat::from_vec(1, 2, vec![3.0, 0.0]))]).unwrap();
        let avg = average(&[p0, p1]).unwrap();
        assert_eq!(avg[0].1.data, vec![2.0, 2.0]);
    }
}
