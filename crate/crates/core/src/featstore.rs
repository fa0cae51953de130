//! Precomputed teacher features and the SYMF container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SYMF" | u32 version=1 | u32 N | u32 V | u32 grid_h | u32 grid_w | u32 d_t
//! | u8 dtype (0 = f32le) | u8 has_labels | u16 reserved=0
//! | [u32 n_classes | u32 label × N]            (only when has_labels = 1)
//! | f32 payload [N][V][P][d_t], P = 1 + grid_h·grid_w
//! ```
//!
//! Token 0 of every view is the pooled/global token, tokens 1..P are patches.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const SYMF_MAGIC: [u8; 4] = *b"SYMF";
pub const SYMF_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub n_classes: u32,
    pub ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    n_samples: usize,
    n_views: usize,
    grid_h: usize,
    grid_w: usize,
    d_t: usize,
    tokens: Vec<f32>,
    labels: Option<Labels>,
}

impl FeatureSet {
    pub fn new(
        n_samples: usize,
        n_views: usize,
        grid_h: usize,
        grid_w: usize,
        d_t: usize,
        tokens: Vec<f32>,
        labels: Option<Labels>,
    ) -> Result<Self> {
        let set = FeatureSet {
            n_samples,
            n_views,
            grid_h,
            grid_w,
            d_t,
            tokens,
            labels,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::EmptySet);
        }
        if self.n_views == 0 || self.grid_h == 0 || self.grid_w == 0 || self.d_t == 0 {
            return Err(invalid("views, grid dims and d_t must be nonzero"));
        }
        let expected = self.n_samples * self.n_views * self.tokens_per_view() * self.d_t;
        if self.tokens.len() != expected {
            return Err(Error::Shape(format!(
                "token buffer holds {} values, header implies {expected}",
                self.tokens.len()
            )));
        }
        if let Some(pos) = self.tokens.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature payload at offset {pos}")));
        }
        if let Some(l) = &self.labels {
            if l.ids.len() != self.n_samples {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    l.ids.len(),
                    self.n_samples
                )));
            }
            if let Some(&bad) = l.ids.iter().find(|&&id| id >= l.n_classes) {
                return Err(invalid(format!("label {bad} outside [0, {})", l.n_classes)));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    /// P = 1 + grid_h·grid_w.
    pub fn tokens_per_view(&self) -> usize {
        1 + self.grid_h * self.grid_w
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l.ids[i])
    }

    /// Global token and the row-major `[P-1][d_t]` patch block of sample `i`, view `v`.
    pub fn view(&self, i: usize, v: usize) -> Result<(&[f32], &[f32])> {
        if i >= self.n_samples {
            return Err(Error::OutOfRange {
                what: "sample",
                index: i,
                limit: self.n_samples,
            });
        }
        if v >= self.n_views {
            return Err(Error::OutOfRange {
                what: "view",
                index: v,
                limit: self.n_views,
            });
        }
        let p = self.tokens_per_view();
        let start = (i * self.n_views + v) * p * self.d_t;
        let block = &self.tokens[start..start + p * self.d_t];
        Ok(block.split_at(self.d_t))
    }

    /// Global tokens `[n, d_t]` and stacked patch tokens `[n * (P-1), d_t]`
    /// of view `v` for the samples `idx`.
    pub fn gather_view(&self, idx: &[usize], v: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let np = self.n_patches();
        let mut globals = Vec::with_capacity(idx.len() * self.d_t);
        let mut patches = Vec::with_capacity(idx.len() * np * self.d_t);
        for &i in idx {
            let (g, p) = self.view(i, v)?;
            globals.extend_from_slice(g);
            patches.extend_from_slice(p);
        }
        Ok((
            Tensor::from_vec(&[idx.len(), self.d_t], globals)?,
            Tensor::from_vec(&[idx.len() * np, self.d_t], patches)?,
        ))
    }

    /// Order-sensitive hash of the payload bits and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in &self.tokens {
            h.write_u32(x.to_bits());
        }
        if let Some(l) = &self.labels {
            h.write_u32(l.n_classes);
            for &id in &l.ids {
                h.write_u32(id);
            }
        }
        h.finish()
    }

    /// A new set holding samples `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<FeatureSet> {
        let block = self.n_views * self.tokens_per_view() * self.d_t;
        let mut tokens = Vec::with_capacity(idx.len() * block);
        for &i in idx {
            if i >= self.n_samples {
                return Err(Error::OutOfRange {
                    what: "sample",
                    index: i,
                    limit: self.n_samples,
                });
            }
            tokens.extend_from_slice(&self.tokens[i * block..(i + 1) * block]);
        }
        let labels = self.labels.as_ref().map(|l| Labels {
            n_classes: l.n_classes,
            ids: idx.iter().map(|&i| l.ids[i]).collect(),
        });
        FeatureSet::new(
            idx.len(),
            self.n_views,
            self.grid_h,
            self.grid_w,
            self.d_t,
            tokens,
            labels,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.tokens.len());
        out.extend_from_slice(&SYMF_MAGIC);
        for x in [
            SYMF_VERSION,
            u32_of(self.n_samples)?,
            u32_of(self.n_views)?,
            u32_of(self.grid_h)?,
            u32_of(self.grid_w)?,
            u32_of(self.d_t)?,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.push(0);
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&0u16.to_le_bytes());
        if let Some(l) = &self.labels {
            out.extend_from_slice(&l.n_classes.to_le_bytes());
            for id in &l.ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        for x in &self.tokens {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<FeatureSet> {
        let mut head = [0u8; HEADER_LEN];
        read_exact_or_truncated(&mut r, &mut head, "header")?;
        let magic = [head[0], head[1], head[2], head[3]];
        if magic != SYMF_MAGIC {
            return Err(Error::BadMagic {
                expected: SYMF_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != SYMF_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (n, v, gh, gw, d_t) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let dtype = head[28];
        if dtype != 0 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let has_labels = match head[29] {
            0 => false,
            1 => true,
            other => return Err(invalid(format!("has_labels byte {other}"))),
        };
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let labels = if has_labels {
            let mut buf = vec![0u8; 4 * (n + 1)];
            read_exact_or_truncated(&mut r, &mut buf, "labels")?;
            let words: Vec<u32> = buf
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some(Labels {
                n_classes: words[0],
                ids: words[1..].to_vec(),
            })
        } else {
            None
        };
        let count = n
            .checked_mul(v)
            .and_then(|x| x.checked_mul(1 + gh * gw))
            .and_then(|x| x.checked_mul(d_t))
            .ok_or_else(|| invalid("header sizes overflow"))?;
        let mut payload = vec![0u8; 4 * count];
        read_exact_or_truncated(&mut r, &mut payload, "payload")?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Shape("trailing bytes after payload".into()));
        }
        let tokens = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureSet::new(n, v, gh, gw, d_t, tokens, labels)
    }
}

fn u32_of(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| invalid(format!("{x} does not fit in u32")))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    what,
                    expected: buf.len(),
                    found: filled,
                })
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn write_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = set.to_bytes()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    FeatureSet::from_reader(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatureSet {
        let tokens = (0..2 * 2 * 5 * 3).map(|i| i as f32 * 0.5 - 7.0).collect();
        FeatureSet::new(
            2,
            2,
            2,
            2,
            3,
            tokens,
            Some(Labels {
                n_classes: 3,
                ids: vec![2, 0],
            }),
        )
        .unwrap()
    }

    #[test]
    fn zero_tensor_layout() {
        let set = FeatureSet::new(1, 1, 2, 2, 4, vec![0.0; 20], None).unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 20 * 4);
        assert_eq!(&bytes[..4], b"SYMF");
        assert!(bytes[HEADER_LEN..].iter().all(|&b| b == 0));
    }

    #[test]
    fn header_bytes() {
        let bytes = small().to_bytes().unwrap();
        let expect_head: Vec<u8> = [
            &b"SYMF"[..],
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &3u32.to_le_bytes(),
            &[0u8, 1, 0, 0],
            &3u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &0u32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(&bytes[..expect_head.len()], &expect_head[..]);
        assert_eq!(bytes.len(), expect_head.len() + 4 * 60);
    }

    #[test]
    fn empty_set_refused() {
        assert!(matches!(
            FeatureSet::new(0, 1, 1, 1, 1, vec![], None),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn non_finite_refused() {
        let mut tokens = vec![0.0; 20];
        tokens[7] = f32::NAN;
        assert!(matches!(
            FeatureSet::new(1, 1, 2, 2, 4, tokens, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = FeatureSet::from_reader(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn bad_version() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            FeatureSet::from_reader(&bytes[..]),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = small().to_bytes().unwrap();
        let err = FeatureSet::from_reader(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn nan_payload_rejected_on_load() {
        let mut bytes = small().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureSet::from_reader(&bytes[..]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn view_slices_match_index_arithmetic() {
        let set = small();
        let (p, d) = (5, 3);
        for i in 0..2 {
            for v in 0..2 {
                let (g, patches) = set.view(i, v).unwrap();
                for t in 0..p {
                    for c in 0..d {
                        let direct = set.tokens()[((i * 2 + v) * p + t) * d + c];
                        let got = if t == 0 { g[c] } else { patches[(t - 1) * d + c] };
                        assert_eq!(got.to_bits(), direct.to_bits());
                    }
                }
            }
        }
        assert!(matches!(set.view(2, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(set.view(0, 2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let err = FeatureSet::new(
            1,
            1,
            1,
            1,
            1,
            vec![0.0; 2],
            Some(Labels {
                n_classes: 2,
                ids: vec![2],
            }),
        );
        assert!(err.is_err());
    }
}
