//! Cross-attention maps of generated symbols over the patch grid, PGM export
//! and per-class symbol scans.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::discretize::DiscretizeSpec;
use crate::error::{invalid, Error, Result};
use crate::featstore::FeatureSet;
use crate::netcore::ModelParams;
use crate::seqgen::{generate_batch, Sampling, SymbolSequence};

pub const MANIFEST_HEADER: &str = "sample\tview\tposition\tsymbol\tpath";
const SCAN_CHUNK: usize = 128;

/// Which heads of the deepest decoder layer a map shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Mean,
    Single(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub position: usize,
    pub token_id: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major `[grid_h][grid_w]` softmax weights.
    pub weights: Vec<f32>,
}

impl AttentionMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.grid_w + x]
    }

    /// Min-max scaled to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f32> {
        let lo = self.weights.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.weights.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !(hi > lo) {
            return vec![0.0; self.weights.len()];
        }
        self.weights.iter().map(|&w| ((w - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    }
}

/// Maps for every position of `seq`.
pub fn sequence_maps(seq: &SymbolSequence<f32>, grid: (usize, usize), heads: Heads) -> Result<Vec<AttentionMap>> {
    let a = seq.deepest_attn();
    let (n_heads, n_patches) = (a.shape()[0], a.shape()[2]);
    if grid.0 * grid.1 != n_patches {
        return Err(Error::Shape(format!("grid {}x{} for {n_patches} patches", grid.0, grid.1)));
    }
    if let Heads::Single(h) = heads {
        if h >= n_heads {
            return Err(Error::OutOfRange {
                what: "head",
                index: h,
                limit: n_heads,
            });
        }
    }
    Ok((0..seq.len())
        .map(|t| {
            let weights = match heads {
                Heads::Single(h) => seq.attn_row(h, t).to_vec(),
                Heads::Mean => {
                    let mut w = vec![0f32; n_patches];
                    for h in 0..n_heads {
                        for (acc, &x) in w.iter_mut().zip(seq.attn_row(h, t)) {
                            *acc += x;
                        }
                    }
                    w.iter_mut().for_each(|x| *x /= n_heads as f32);
                    w
                }
            };
            AttentionMap {
                position: t,
                token_id: seq.ids[t],
                grid_h: grid.0,
                grid_w: grid.1,
                weights,
            }
        })
        .collect())
}

fn generate_eval(params: &ModelParams<f32>, spec: &DiscretizeSpec, set: &FeatureSet, idx: &[usize], view: usize) -> Result<Vec<SymbolSequence<f32>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(SCAN_CHUNK) {
        let (_, patches) = set.gather_view(chunk, view)?;
        let (seqs, _) = generate_batch(params, spec, spec.tau_end, &patches, chunk.len(), Sampling::Eval, false)?;
        out.extend(seqs);
    }
    Ok(out)
}

/// Generates the sequence of one sample and view deterministically and
/// returns one map per position.
pub fn attention_maps(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    set: &FeatureSet,
    sample: usize,
    view: usize,
    heads: Heads,
) -> Result<Vec<AttentionMap>> {
    set.view(sample, view)?;
    let seq = generate_eval(params, spec, set, &[sample], view)?.pop().unwrap();
    sequence_maps(&seq, set.grid(), heads)
}

/// Binary greyscale image of the normalized map, each cell upsampled to a
/// `scale` x `scale` block.
pub fn pgm_bytes(map: &AttentionMap, scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(invalid("scale must be at least 1"));
    }
    let norm = map.normalized();
    let (w, h) = (map.grid_w * scale, map.grid_h * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = norm[(y / scale) * map.grid_w + x / scale];
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn export_pgm(map: &AttentionMap, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = pgm_bytes(map, scale)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Raw weights as `y,x,weight` rows.
pub fn export_csv(map: &AttentionMap, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("y,x,weight\n");
    for y in 0..map.grid_h {
        for x in 0..map.grid_w {
            let _ = writeln!(s, "{y},{x},{}", map.at(y, x));
        }
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRow {
    pub sample: usize,
    pub view: usize,
    pub position: usize,
    pub symbol: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanReport {
    pub symbol: usize,
    pub class_id: u32,
    pub n_class_samples: usize,
    pub rows: Vec<ScanRow>,
    /// Occurrences of every symbol over the class; sums to samples x length.
    pub symbol_counts: Vec<usize>,
    pub manifest: PathBuf,
}

impl ScanReport {
    pub fn occurrences(&self) -> usize {
        self.rows.len()
    }

    /// Fraction of all generated positions carrying the symbol.
    pub fn frequency(&self) -> f64 {
        let total: usize = self.symbol_counts.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.rows.len() as f64 / total as f64
        }
    }

    /// Samples with at least one occurrence.
    pub fn samples_with_symbol(&self) -> usize {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.sample).collect();
        s.dedup();
        s.len()
    }
}

/// Generates sequences for every sample of `class_id` and exports a map for
/// each occurrence of `symbol` into `out_dir`, with a TSV manifest.
#[allow(clippy::too_many_arguments)]
pub fn symbol_scan(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    set: &FeatureSet,
    symbol: usize,
    class_id: u32,
    view: usize,
    scale: usize,
    out_dir: impl AsRef<Path>,
) -> Result<ScanReport> {
    let labels = set.labels().ok_or_else(|| invalid("symbol scan needs labels"))?;
    let vocab = params.config().vocab_size;
    if symbol >= vocab {
        return Err(Error::OutOfRange {
            what: "symbol",
            index: symbol,
            limit: vocab,
        });
    }
    let idx: Vec<usize> = (0..set.n_samples()).filter(|&i| labels.ids[i] == class_id).collect();
    if idx.is_empty() {
        return Err(invalid(format!("class {class_id} has no samples")));
    }
    if scale == 0 {
        return Err(invalid("scale must be at least 1"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let seqs = generate_eval(params, spec, set, &idx, view)?;
    let mut counts = vec![0usize; vocab];
    let mut rows = Vec::new();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (&sample, seq) in idx.iter().zip(&seqs) {
        for &id in &seq.ids {
            counts[id] += 1;
        }
        if !seq.ids.contains(&symbol) {
            continue;
        }
        let maps = sequence_maps(seq, set.grid(), Heads::Mean)?;
        for m in maps.iter().filter(|m| m.token_id == symbol) {
            let name = PathBuf::from(format!("s{sample:06}_v{view}_p{:02}_sym{symbol}.pgm", m.position));
            export_pgm(m, scale, out_dir.join(&name))?;
            let _ = writeln!(manifest, "{sample}\t{view}\t{}\t{symbol}\t{}", m.position, name.display());
            rows.push(ScanRow {
                sample,
                view,
                position: m.position,
                symbol,
                path: name,
            });
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    Ok(ScanReport {
        symbol,
        class_id,
        n_class_samples: idx.len(),
        rows,
        symbol_counts: counts,
        manifest: manifest_path,
    })
}
