//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "MEVF"            4 bytes
//! version u32               currently 1
//! count   u32               number of entries
//! entry*  name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank | f32 × prod(dims)
//! ```
//!
//! Values are stored as float32, so a roundtrip rounds float64 parameters
//! to the nearest float32.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Params, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEVF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count =
        u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for `{name}`")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large for `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses checkpoint bytes into constant tensors.
pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_owned();
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let byte_len = n
            .and_then(|n| n.checked_mul(4))
            .filter(|&b| b <= bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("`{name}`: shape {dims:?} disagrees with file size"))
            })?;
        let values = r
            .take(byte_len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t =
            Tensor::new(values, &dims).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

/// Writes atomically: the bytes go to a temporary sibling which is then renamed.
pub fn checkpoint_save(params: &Params, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Params> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> Params {
        Params::from_entries([
            (
                "a.weight".to_string(),
                Tensor::new(vec![0.1, -2.5, 3.0, 1e-3, 7.0, 0.0], &[2, 3]).unwrap(),
            ),
            ("s".to_string(), Tensor::scalar(0.25)),
        ])
    }

    #[test]
    fn byte_layout_is_exact() {
        let p =
            Params::from_entries([("w".to_string(), Tensor::new(vec![1.0, -2.0], &[2]).unwrap())]);
        let bytes = encode(&p).unwrap();
        let mut expected = b"MEVF".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend([1, 0, b'w', 1, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn empty_collection_is_valid() {
        let bytes = encode(&Params::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(
            matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("truncated"))
        );
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        // inflate a dimension so the declared byte count exceeds the file
        let mut bad = bytes;
        let dim_at = 12 + 2 + "a.weight".len() + 1;
        bad[dim_at..dim_at + 4].copy_from_slice(&1_000_000u32.to_le_bytes());
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn save_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint_save(&sample(), &path).unwrap();
        let back = checkpoint_load(&path).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["a.weight", "s"]);
        assert_eq!(back.get("s").unwrap().shape(), &[] as &[usize]);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn roundtrip_equals_f32_rounding(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let p = Params::from_entries([("x".to_string(), Tensor::new(values.clone(), &[n]).unwrap())]);
            let back = decode(&encode(&p).unwrap()).unwrap();
            for (a, b) in values.iter().zip(back.get("x").unwrap().values()) {
                prop_assert_eq!((*a as f32) as f64, *b);
            }
        }
    }
}
