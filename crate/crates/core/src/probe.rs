//! kNN and linear probing of frozen representations, and the per-prefix
//! subsequence report.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discretize::DiscretizeSpec;
use crate::error::{invalid, shape, Error, Result};
use crate::featstore::FeatureSet;
use crate::netcore::ModelParams;
use crate::seqgen::{generate_batch, prefix_lengths, Sampling};
use crate::tensor::{matmul_into, softmax_in_place, Tensor};

/// Default kNN vote temperature.
pub const KNN_TEMP: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;
const EXTRACT_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Encoder summary output of the generated sequence (`d_model`).
    StudentPooled,
    /// Sum of the student-head logits over prefixes (`K`).
    StudentAggregated,
    /// Stored global teacher token (`d_t`).
    TeacherFeature,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::StudentPooled => "student_pooled",
            Representation::StudentAggregated => "student_aggregated",
            Representation::TeacherFeature => "teacher_feature",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_pooled" => Ok(Representation::StudentPooled),
            "student_aggregated" => Ok(Representation::StudentAggregated),
            "teacher_feature" => Ok(Representation::TeacherFeature),
            other => Err(invalid(format!("unknown representation {other:?}"))),
        }
    }
}

/// Embeddings `[N, d]` of view 0 of every sample. Student representations
/// come from noise-free argmax generation. For `StudentAggregated`,
/// `prefix_n` limits the sum to prefixes up to `n`.
pub fn extract_embeddings(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    features: &FeatureSet,
    repr: Representation,
    prefix_n: Option<usize>,
) -> Result<Tensor<f32>> {
    let cfg = params.config();
    if features.d_t() != cfg.d_t {
        return Err(shape(format!("features have d_t {}, model {}", features.d_t(), cfg.d_t)));
    }
    let lengths = prefix_lengths(cfg.seq_len)?;
    let n_sel = match prefix_n {
        None => cfg.seq_len,
        Some(n) if lengths.contains(&n) && repr != Representation::TeacherFeature => n,
        Some(n) => return Err(invalid(format!("prefix_n {n} is not a valid prefix length for {repr}"))),
    };
    let n = features.n_samples();
    let all: Vec<usize> = (0..n).collect();
    if repr == Representation::TeacherFeature {
        return Ok(features.gather_view(&all, 0)?.0);
    }
    let width = match repr {
        Representation::StudentPooled => cfg.d_model,
        _ => cfg.n_prototypes,
    };
    let mut out = Vec::with_capacity(n * width);
    for chunk in all.chunks(EXTRACT_CHUNK) {
        let (_, patches) = features.gather_view(chunk, 0)?;
        let (_, emb) = generate_batch(params, spec, spec.tau_end, &patches, chunk.len(), Sampling::Eval, true)?;
        for e in emb.unwrap() {
            match repr {
                Representation::StudentPooled => out.extend_from_slice(&e.prefix(n_sel).unwrap().pooled),
                _ => {
                    let mut acc = vec![0f32; width];
                    for p in e.per_prefix.iter().filter(|p| p.n <= n_sel) {
                        acc.iter_mut().zip(&p.proj).for_each(|(a, &x)| *a += x);
                    }
                    out.extend_from_slice(&acc);
                }
            }
        }
    }
    Tensor::from_vec(&[n, width], out)
}

/// Accuracy pair in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    /// Neighbour count for kNN rows, `None` for the linear probe.
    pub k: Option<usize>,
    pub prefix_n: Option<usize>,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub method: String,
    pub representation: String,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,representation,prefix_n,k,top1,top5\n");
        for r in &self.rows {
            let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.2},{:.2}",
                self.method,
                self.representation,
                opt(r.prefix_n),
                opt(r.k),
                r.top1,
                r.top5
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{} probe on {}\n", self.method, self.representation);
        let _ = writeln!(s, "{:>8} {:>6} {:>8} {:>8}", "prefix", "k", "top1", "top5");
        for r in &self.rows {
            let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:>8} {:>6} {:>8.2} {:>8.2}", opt(r.prefix_n), opt(r.k), r.top1, r.top5);
        }
        s
    }
}

fn normalized_rows(x: &Tensor<f32>) -> Vec<f64> {
    let c = x.cols();
    let mut out: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    for row in out.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Classes ranked by score, highest first, lower class index on ties.
fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_labels(labels: &[u32], rows: usize, n_classes: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(shape(format!("{what}: {} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(invalid(format!("{what}: label {bad} >= n_classes {n_classes}")));
    }
    Ok(())
}

/// Weighted kNN with cosine similarity. Neighbours are the `k` most similar
/// training rows (lower index on ties); each votes `exp(sim / temp)` for its
/// class.
pub fn knn_classify(
    train: &Tensor<f32>,
    train_labels: &[u32],
    eval: &Tensor<f32>,
    eval_labels: &[u32],
    k_values: &[usize],
    temp: f64,
    n_classes: usize,
) -> Result<ProbeReport> {
    let (nt, ne) = (train.rows(), eval.rows());
    if nt == 0 || ne == 0 {
        return Err(Error::EmptySet);
    }
    if train.cols() != eval.cols() {
        return Err(shape("train and eval embeddings differ in width"));
    }
    check_labels(train_labels, nt, n_classes, "train")?;
    check_labels(eval_labels, ne, n_classes, "eval")?;
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > nt) {
        return Err(invalid(format!("k = {k} outside 1..={nt}")));
    }
    if !(temp > 0.0) {
        return Err(invalid("knn temperature must be positive"));
    }
    let d = train.cols();
    let tn = normalized_rows(train);
    let en = normalized_rows(eval);
    let mut sims = vec![0f64; ne * nt];
    matmul_into(&en, ne, d, false, &tn, nt, d, true, &mut sims, false);
    let kmax = k_values.iter().copied().max().unwrap_or(0);
    let mut hits = vec![(0usize, 0usize); k_values.len()];
    let mut order: Vec<usize> = Vec::with_capacity(nt);
    for e in 0..ne {
        let row = &sims[e * nt..(e + 1) * nt];
        let by_sim = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        order.clear();
        order.extend(0..nt);
        if kmax < nt {
            order.select_nth_unstable_by(kmax, by_sim);
            order.truncate(kmax);
        }
        order.sort_by(by_sim);
        for (ki, &k) in k_values.iter().enumerate() {
            let mut scores = vec![0f64; n_classes];
            for &j in &order[..k] {
                scores[train_labels[j] as usize] += (row[j] / temp).exp();
            }
            let ranked = rank_classes(&scores);
            let y = eval_labels[e] as usize;
            hits[ki].0 += (ranked[0] == y) as usize;
            hits[ki].1 += ranked.iter().take(5).any(|&c| c == y) as usize;
        }
    }
    Ok(ProbeReport {
        method: "knn".into(),
        representation: String::new(),
        rows: k_values
            .iter()
            .zip(&hits)
            .map(|(&k, &(h1, h5))| ProbeRow {
                k: Some(k),
                prefix_n: None,
                top1: 100.0 * h1 as f64 / ne as f64,
                top5: 100.0 * h5 as f64 / ne as f64,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 100,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized frozen embeddings,
/// trained with AdamW; reports top-1/top-5 on `eval`.
pub fn linear_probe(
    train: &Tensor<f32>,
    train_labels: &[u32],
    eval: &Tensor<f32>,
    eval_labels: &[u32],
    n_classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<ProbeReport> {
    let (nt, ne, d) = (train.rows(), eval.rows(), train.cols());
    if nt == 0 || ne == 0 {
        return Err(Error::EmptySet);
    }
    if eval.cols() != d {
        return Err(shape("train and eval embeddings differ in width"));
    }
    check_labels(train_labels, nt, n_classes, "train")?;
    check_labels(eval_labels, ne, n_classes, "eval")?;
    let mut seen = vec![false; n_classes];
    train_labels.iter().for_each(|&l| seen[l as usize] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(invalid("linear probe needs at least two classes in the training set"));
    }
    let c = n_classes;
    // per-dimension standardization from training statistics
    let mut mean = vec![0f64; d];
    let mut var = vec![0f64; d];
    for r in 0..nt {
        for (m, &x) in mean.iter_mut().zip(train.row(r)) {
            *m += x as f64 / nt as f64;
        }
    }
    for r in 0..nt {
        for j in 0..d {
            let dx = train.row(r)[j] as f64 - mean[j];
            var[j] += dx * dx / nt as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let standardize = |x: &Tensor<f32>| -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            out.extend(x.row(r).iter().enumerate().map(|(j, &v)| (v as f64 - mean[j]) / std[j]));
        }
        out
    };
    let xt = standardize(train);
    let xe = standardize(eval);

    let mut w = vec![0f64; d * c];
    let mut b = vec![0f64; c];
    let mut adam = Adam::new(d * c + c);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..nt).collect();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let n = batch.len();
            let mut x = Vec::with_capacity(n * d);
            for &i in batch {
                x.extend_from_slice(&xt[i * d..(i + 1) * d]);
            }
            let mut logits = vec![0f64; n * c];
            matmul_into(&x, n, d, false, &w, d, c, false, &mut logits, false);
            for (r, row) in logits.chunks_mut(c).enumerate() {
                row.iter_mut().zip(&b).for_each(|(l, &bb)| *l += bb);
                softmax_in_place(row);
                row[train_labels[batch[r]] as usize] -= 1.0;
                row.iter_mut().for_each(|v| *v /= n as f64);
            }
            let mut grad = vec![0f64; d * c + c];
            matmul_into(&x, n, d, true, &logits, n, c, false, &mut grad[..d * c], false);
            for row in logits.chunks(c) {
                grad[d * c..].iter_mut().zip(row).for_each(|(g, &v)| *g += v);
            }
            adam.step(&mut w, &mut b, &grad, cfg.lr, cfg.weight_decay);
        }
    }

    let mut logits = vec![0f64; ne * c];
    matmul_into(&xe, ne, d, false, &w, d, c, false, &mut logits, false);
    let (mut h1, mut h5) = (0, 0);
    for (r, row) in logits.chunks_mut(c).enumerate() {
        row.iter_mut().zip(&b).for_each(|(l, &bb)| *l += bb);
        let ranked = rank_classes(row);
        let y = eval_labels[r] as usize;
        h1 += (ranked[0] == y) as usize;
        h5 += ranked.iter().take(5).any(|&k| k == y) as usize;
    }
    Ok(ProbeReport {
        method: "linear".into(),
        representation: String::new(),
        rows: vec![ProbeRow {
            k: None,
            prefix_n: None,
            top1: 100.0 * h1 as f64 / ne as f64,
            top5: 100.0 * h5 as f64 / ne as f64,
        }],
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], b: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let nw = w.len();
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            if i < nw {
                w[i] -= upd + lr * wd * w[i];
            } else {
                b[i - nw] -= upd;
            }
        }
    }
}

fn labels_of(set: &FeatureSet) -> Result<(&[u32], usize)> {
    let l = set.labels().ok_or_else(|| invalid("feature set has no labels"))?;
    Ok((&l.ids, l.n_classes as usize))
}

/// kNN over view-0 embeddings of `train` and `eval`.
#[allow(clippy::too_many_arguments)]
pub fn knn_probe(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    train: &FeatureSet,
    eval: &FeatureSet,
    repr: Representation,
    prefix_n: Option<usize>,
    k_values: &[usize],
    temp: f64,
) -> Result<ProbeReport> {
    let (tl, nc) = labels_of(train)?;
    let (el, nc_e) = labels_of(eval)?;
    let nc = nc.max(nc_e);
    let a = extract_embeddings(params, spec, train, repr, prefix_n)?;
    let b = extract_embeddings(params, spec, eval, repr, prefix_n)?;
    let mut r = knn_classify(&a, tl, &b, el, k_values, temp, nc)?;
    r.representation = repr.to_string();
    r.rows.iter_mut().for_each(|row| row.prefix_n = prefix_n);
    Ok(r)
}

/// Linear probe over view-0 embeddings of `train` and `eval`.
pub fn linear_probe_sets(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    train: &FeatureSet,
    eval: &FeatureSet,
    repr: Representation,
    prefix_n: Option<usize>,
    cfg: &LinearProbeConfig,
) -> Result<ProbeReport> {
    let (tl, nc) = labels_of(train)?;
    let (el, nc_e) = labels_of(eval)?;
    let a = extract_embeddings(params, spec, train, repr, prefix_n)?;
    let b = extract_embeddings(params, spec, eval, repr, prefix_n)?;
    let mut r = linear_probe(&a, tl, &b, el, nc.max(nc_e), cfg)?;
    r.representation = repr.to_string();
    r.rows.iter_mut().for_each(|row| row.prefix_n = prefix_n);
    Ok(r)
}

/// kNN accuracy of the pooled embedding of every power-of-two prefix.
pub fn subsequence_report(
    params: &ModelParams<f32>,
    spec: &DiscretizeSpec,
    train: &FeatureSet,
    eval: &FeatureSet,
    k: usize,
    temp: f64,
) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    for n in prefix_lengths(params.config().seq_len)? {
        let r = knn_probe(params, spec, train, eval, Representation::StudentPooled, Some(n), &[k], temp)?;
        rows.extend(r.rows);
    }
    Ok(ProbeReport {
        method: "subseq".into(),
        representation: Representation::StudentPooled.to_string(),
        rows,
    })
}
