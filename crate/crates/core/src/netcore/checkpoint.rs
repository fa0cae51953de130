//! SYMC checkpoint container.
//!
//! ```text
//! "SYMC" | u32 version=1 | u32 n_entries
//! | n_entries × { u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload }
//! | u32 config_len | UTF-8 config snapshot
//! ```
//!
//! All integers and floats are little-endian. Entries are written in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYMC_MAGIC: [u8; 4] = *b"SYMC";
pub const SYMC_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor<f32>>,
    pub config: String,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| ck(format!("missing entry {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.insert(name.into(), t);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&SYMC_MAGIC);
        out.extend_from_slice(&SYMC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| ck(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| ck("rank > 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| ck("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if magic != SYMC_MAGIC {
            return Err(Error::BadMagic {
                expected: SYMC_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32("version")?;
        if version != SYMC_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = cur.u32("entry count")? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| ck("entry name is not UTF-8"))?
                .to_string();
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32("dims")? as usize);
            }
            let count: usize = dims.iter().product();
            let payload = cur.take(4 * count, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entries.insert(name.clone(), Tensor::from_vec(&dims, data)?).is_some() {
                return Err(ck(format!("duplicate entry {name}")));
            }
        }
        let cfg_len = cur.u32("config length")? as usize;
        let config = std::str::from_utf8(cur.take(cfg_len, "config")?)
            .map_err(|_| ck("config snapshot is not UTF-8"))?
            .to_string();
        if cur.pos != bytes.len() {
            return Err(ck("trailing bytes after config snapshot"));
        }
        Ok(Checkpoint { entries, config })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                what,
                expected: n,
                found: avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            config: "seq_len = 8\n".into(),
            ..Default::default()
        };
        c.insert("b", Tensor::from_vec(&[3], vec![1.0, -2.5, 3.0]).unwrap());
        c.insert("a.w", Tensor::from_vec(&[2, 2], vec![0.5, 0.25, -0.0, 7.0]).unwrap());
        c
    }

    #[test]
    fn exact_layout() {
        let bytes = sample().to_bytes().unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"SYMC");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&3u16.to_le_bytes());
        expect.extend_from_slice(b"a.w");
        expect.push(2);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        for x in [0.5f32, 0.25, -0.0, 7.0] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(b"b");
        expect.push(1);
        expect.extend_from_slice(&3u32.to_le_bytes());
        for x in [1.0f32, -2.5, 3.0] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        expect.extend_from_slice(&12u32.to_le_bytes());
        expect.extend_from_slice(b"seq_len = 8\n");
        assert_eq!(bytes, expect);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
