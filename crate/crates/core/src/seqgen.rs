//! Autoregressive symbol generation with discretized re-feeding, prefix
//! embeddings through the encoder and student head, and the sequence-level
//! diversity measures.
//!
//! The graph builders here are batched over `rows` samples and are shared by
//! the trainer; the value-level functions wrap them for single sequences.

use rand::RngCore;

use crate::autograd::{Graph, Var};
use crate::discretize::{code_distances, discretize_logits, gumbel_noise, one_hot, quantize, DiscretizeKind, DiscretizeSpec, Relaxed};
use crate::error::{invalid, shape, Result};
use crate::netcore::layers::{encoder_pooled, student_head, DecoderRun};
use crate::netcore::{Bound, ModelConfig, ModelParams};
use crate::tensor::{entropy, s, Scalar, Tensor};

/// How generation discretizes.
pub enum Sampling<'a> {
    /// Gumbel noise (when the discretizer is Gumbel) drawn from the given stream.
    Train(&'a mut dyn RngCore),
    /// No noise, hard one-hot re-feeding of the argmax.
    Eval,
}

impl Sampling<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, Sampling::Eval)
    }
}

/// `[1, 2, 4, ..., seq_len]`.
pub fn prefix_lengths(seq_len: usize) -> Result<Vec<usize>> {
    if seq_len == 0 || !seq_len.is_power_of_two() {
        return Err(invalid(format!("seq_len {seq_len}: power of two required")));
    }
    let mut out = vec![1];
    while *out.last().unwrap() < seq_len {
        out.push(out.last().unwrap() * 2);
    }
    Ok(out)
}

/// Per-step Gumbel noise for `rows` samples, drawn step-major.
pub fn draw_noise<T: Scalar>(rng: &mut dyn RngCore, steps: usize, rows: usize, width: usize) -> Vec<Tensor<T>> {
    (0..steps)
        .map(|_| {
            let data = gumbel_noise(rng, rows * width).into_iter().map(s).collect();
            Tensor::from_vec(&[rows, width], data).unwrap()
        })
        .collect()
}

/// Graph nodes of one batched unrolled generation.
pub struct Unrolled {
    /// Decoder outputs per step, `[rows, A]` (or `[rows, d_model]` under VQ).
    pub out: Vec<Var>,
    /// Relaxation nodes per step; empty under VQ.
    pub relaxed: Vec<Relaxed>,
    /// Embedding fed back after each step, `[rows, d_model]`.
    pub fed: Vec<Var>,
    /// `ids[t][r]`.
    pub ids: Vec<Vec<usize>>,
    /// `cross_attn[t][layer]`.
    pub cross_attn: Vec<Vec<Var>>,
    /// Codebook + commitment loss averaged over rows and steps (VQ only).
    pub vq_aux: Option<Var>,
}

/// Free-running generation of `seq_len` steps over `patches`
/// (`[rows * n_patches, d_t]`). `noise` holds one `[rows, A]` tensor per step;
/// `hard` forces straight-through one-hot re-feeding.
#[allow(clippy::too_many_arguments)]
pub fn unroll<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    spec: &DiscretizeSpec,
    tau: f64,
    patches: Var,
    rows: usize,
    noise: Option<&[Tensor<T>]>,
    hard: bool,
) -> Unrolled {
    let steps = cfg.seq_len;
    let tokemb = p.get("tokemb");
    let mut run = DecoderRun::new(g, p, cfg, patches, rows);
    let mut input = run.start_input(g, p);
    let mut u = Unrolled {
        out: Vec::with_capacity(steps),
        relaxed: Vec::with_capacity(steps),
        fed: Vec::with_capacity(steps),
        ids: Vec::with_capacity(steps),
        cross_attn: Vec::with_capacity(steps),
        vq_aux: None,
    };
    for t in 0..steps {
        let step = run.step(g, p, cfg, input);
        u.out.push(step.out);
        u.cross_attn.push(step.cross_attn);
        let fed = if spec.kind == DiscretizeKind::Vq {
            let (q, ids, aux) = quantize(g, step.out, tokemb, spec.vq_beta);
            u.vq_aux = Some(match u.vq_aux {
                Some(acc) => g.add(acc, aux),
                None => aux,
            });
            u.ids.push(ids);
            q
        } else {
            let n = noise.map(|n| &n[t]);
            let r = discretize_logits(g, step.out, tau, n, hard || spec.st_hard);
            u.ids.push(r.ids.clone());
            let e = g.matmul(r.out, tokemb);
            u.relaxed.push(r);
            e
        };
        u.fed.push(fed);
        input = fed;
    }
    if let Some(aux) = u.vq_aux {
        u.vq_aux = Some(g.scale(aux, 1.0 / (rows * steps) as f64));
    }
    u
}

/// Graph nodes of the per-prefix student embeddings.
pub struct PrefixNodes {
    pub lengths: Vec<usize>,
    /// Encoder summary output per prefix, `[rows, d_model]`.
    pub pooled: Vec<Var>,
    /// Student-head logits per prefix, `[rows, K]`.
    pub proj: Vec<Var>,
    /// Sum of `proj` in prefix order.
    pub aggregated: Var,
}

/// Encodes every power-of-two prefix of `fed` and projects it with the
/// student head.
pub fn embed_prefix_nodes<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, fed: &[Var], rows: usize) -> Result<PrefixNodes> {
    let lengths = prefix_lengths(fed.len())?;
    let mut pooled = Vec::with_capacity(lengths.len());
    let mut proj = Vec::with_capacity(lengths.len());
    for &n in &lengths {
        let pv = encoder_pooled(g, p, cfg, &fed[..n], rows);
        pooled.push(pv);
        proj.push(student_head(g, p, cfg, pv));
    }
    let mut aggregated = proj[0];
    for &q in &proj[1..] {
        aggregated = g.add(aggregated, q);
    }
    Ok(PrefixNodes {
        lengths,
        pooled,
        proj,
        aggregated,
    })
}

/// Batch mean of the per-sequence mean row entropy of the relaxed soft
/// assignments.
pub fn entropy_node<T: Scalar>(g: &mut Graph<T>, relaxed: &[Relaxed], rows: usize) -> Var {
    let mut acc = None;
    for r in relaxed {
        let logp = g.log_softmax(r.scaled);
        let plogp = g.mul(r.soft, logp);
        let sum = g.sum_all(plogp);
        acc = Some(match acc {
            Some(a) => g.add(a, sum),
            None => sum,
        });
    }
    g.scale(acc.expect("no steps"), -1.0 / (rows * relaxed.len()) as f64)
}

/// Batch mean of `H(mean_t soft_t)` per sequence.
pub fn info_node<T: Scalar>(g: &mut Graph<T>, relaxed: &[Relaxed], rows: usize) -> Var {
    let mut acc = relaxed[0].soft;
    for r in &relaxed[1..] {
        acc = g.add(acc, r.soft);
    }
    let mean = g.scale(acc, 1.0 / relaxed.len() as f64);
    let h = g.row_entropy(mean);
    let total = g.sum_all(h);
    g.scale(total, 1.0 / rows as f64)
}

/// A generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolSequence<T> {
    /// `[L, A]` decoder logits; under VQ the negated squared code distances.
    pub logits: Tensor<T>,
    /// `[L, A]` relaxed soft assignments (one-hot under VQ).
    pub soft: Tensor<T>,
    pub ids: Vec<usize>,
    /// Whether the decoder was fed the one-hot of `ids` rather than `soft`.
    pub hard: bool,
    /// Cross-attention per decoder layer (shallowest first), `[heads, L, n_patches]`.
    pub attn: Vec<Tensor<T>>,
}

impl<T: Scalar> SymbolSequence<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn deepest_attn(&self) -> &Tensor<T> {
        self.attn.last().expect("decoder has at least one layer")
    }

    /// Deepest-layer weights of `head` at position `t`, `[n_patches]`.
    pub fn attn_row(&self, head: usize, t: usize) -> &[T] {
        let a = self.deepest_attn();
        let (l, p) = (a.shape()[1], a.shape()[2]);
        let off = (head * l + t) * p;
        &a.data()[off..off + p]
    }

    /// Rows actually fed to the encoder.
    pub fn fed_assignments(&self) -> Tensor<T> {
        if self.hard {
            one_hot(&self.ids, self.soft.cols())
        } else {
            self.soft.clone()
        }
    }
}

/// Per-prefix student embeddings of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEmbedding<T> {
    pub n: usize,
    /// Encoder output, `[d_model]`.
    pub pooled: Vec<T>,
    /// Student-head logits, `[K]`.
    pub proj: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GranularEmbeddings<T> {
    pub per_prefix: Vec<PrefixEmbedding<T>>,
    /// Elementwise sum of every `proj`, in prefix order.
    pub aggregated: Vec<T>,
}

impl<T: Scalar> GranularEmbeddings<T> {
    pub fn prefix(&self, n: usize) -> Option<&PrefixEmbedding<T>> {
        self.per_prefix.iter().find(|e| e.n == n)
    }
}

fn check_patches<T: Scalar>(cfg: &ModelConfig, patches: &Tensor<T>, rows: usize) -> Result<usize> {
    if rows == 0 {
        return Err(invalid("no samples"));
    }
    if patches.cols() != cfg.d_t {
        return Err(shape(format!("patch width {} != d_t {}", patches.cols(), cfg.d_t)));
    }
    if patches.rows() == 0 || patches.rows() % rows != 0 {
        return Err(invalid(format!("{} patch rows for {rows} samples", patches.rows())));
    }
    Ok(patches.rows() / rows)
}

fn check_spec<T: Scalar>(params: &ModelParams<T>, spec: &DiscretizeSpec) -> Result<()> {
    if (spec.kind == DiscretizeKind::Vq) != params.vq_head() {
        return Err(invalid(format!(
            "discretization {} does not match a {} decoder head",
            spec.kind,
            if params.vq_head() { "vq" } else { "logit" }
        )));
    }
    Ok(())
}

/// Generates one sequence per sample of `patches` (`[rows * n_patches, d_t]`)
/// and, when `with_prefixes`, their prefix embeddings.
pub fn generate_batch<T: Scalar>(
    params: &ModelParams<T>,
    spec: &DiscretizeSpec,
    tau: f64,
    patches: &Tensor<T>,
    rows: usize,
    sampling: Sampling<'_>,
    with_prefixes: bool,
) -> Result<(Vec<SymbolSequence<T>>, Option<Vec<GranularEmbeddings<T>>>)> {
    let cfg = params.config();
    check_spec(params, spec)?;
    let n_patches = check_patches(cfg, patches, rows)?;
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let hard = sampling.is_eval();
    let noise = match sampling {
        Sampling::Train(rng) if spec.kind == DiscretizeKind::Gumbel => Some(draw_noise(rng, cfg.seq_len, rows, cfg.vocab_size)),
        _ => None,
    };
    let mut g = Graph::new();
    let prefixes: &[&str] = if with_prefixes {
        &["tokemb", "dec.", "enc.", "proj_s."]
    } else {
        &["tokemb", "dec."]
    };
    let p = params.bind(&mut g, prefixes, false);
    let pv = g.constant(patches.clone());
    let u = unroll(&mut g, &p, cfg, spec, tau, pv, rows, noise.as_deref(), hard);

    let (l, a, heads, depth) = (cfg.seq_len, cfg.vocab_size, cfg.n_heads, cfg.dec_depth);
    let tokemb = params.get("tokemb");
    let mut seqs = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut logits = Tensor::zeros(&[l, a]);
        let mut soft = Tensor::zeros(&[l, a]);
        let mut ids = Vec::with_capacity(l);
        let mut attn = vec![Tensor::zeros(&[heads, l, n_patches]); depth];
        for t in 0..l {
            let id = u.ids[t][r];
            ids.push(id);
            if spec.kind == DiscretizeKind::Vq {
                let z = g.value(u.out[t]).row(r);
                for (dst, dist) in logits.row_mut(t).iter_mut().zip(code_distances(z, tokemb)) {
                    *dst = -dist;
                }
                soft.row_mut(t)[id] = T::one();
            } else {
                logits.row_mut(t).copy_from_slice(g.value(u.out[t]).row(r));
                soft.row_mut(t).copy_from_slice(g.value(u.relaxed[t].soft).row(r));
            }
            for (layer, &av) in u.cross_attn[t].iter().enumerate() {
                let probs = g.attention_probs(av).expect("attention node");
                for h in 0..heads {
                    let src = &probs[(r * heads + h) * n_patches..(r * heads + h + 1) * n_patches];
                    let off = (h * l + t) * n_patches;
                    attn[layer].data_mut()[off..off + n_patches].copy_from_slice(src);
                }
            }
        }
        seqs.push(SymbolSequence {
            logits,
            soft,
            ids,
            hard: hard || spec.st_hard || spec.kind == DiscretizeKind::Vq,
            attn,
        });
    }

    let embeds = if with_prefixes {
        let nodes = embed_prefix_nodes(&mut g, &p, cfg, &u.fed, rows)?;
        Some(collect_embeddings(&g, &nodes, rows))
    } else {
        None
    };
    Ok((seqs, embeds))
}

fn collect_embeddings<T: Scalar>(g: &Graph<T>, nodes: &PrefixNodes, rows: usize) -> Vec<GranularEmbeddings<T>> {
    (0..rows)
        .map(|r| GranularEmbeddings {
            per_prefix: nodes
                .lengths
                .iter()
                .enumerate()
                .map(|(i, &n)| PrefixEmbedding {
                    n,
                    pooled: g.value(nodes.pooled[i]).row(r).to_vec(),
                    proj: g.value(nodes.proj[i]).row(r).to_vec(),
                })
                .collect(),
            aggregated: g.value(nodes.aggregated).row(r).to_vec(),
        })
        .collect()
}

/// Generates the symbol sequence for one sample's patch tokens `[n_patches, d_t]`.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    spec: &DiscretizeSpec,
    tau: f64,
    patch_tokens: &Tensor<T>,
    sampling: Sampling<'_>,
) -> Result<SymbolSequence<T>> {
    let (mut seqs, _) = generate_batch(params, spec, tau, patch_tokens, 1, sampling, false)?;
    Ok(seqs.pop().unwrap())
}

/// Prefix embeddings of an already generated sequence, re-embedding the
/// assignments that were fed during generation.
pub fn embed_prefixes<T: Scalar>(params: &ModelParams<T>, seq: &SymbolSequence<T>) -> Result<GranularEmbeddings<T>> {
    let cfg = params.config();
    if seq.len() != cfg.seq_len || seq.soft.cols() != cfg.vocab_size {
        return Err(shape(format!(
            "sequence is [{}, {}], model expects [{}, {}]",
            seq.len(),
            seq.soft.cols(),
            cfg.seq_len,
            cfg.vocab_size
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &["tokemb", "enc.", "proj_s."], false);
    let assign = seq.fed_assignments();
    let fed: Vec<Var> = (0..seq.len())
        .map(|t| {
            let row = g.constant(Tensor::row_vector(assign.row(t).to_vec()));
            g.matmul(row, p.get("tokemb"))
        })
        .collect();
    let nodes = embed_prefix_nodes(&mut g, &p, cfg, &fed, 1)?;
    Ok(collect_embeddings(&g, &nodes, 1).pop().unwrap())
}

/// `H(mean_t soft_t)`: zero when every position carries the same one-hot.
pub fn sequence_info<T: Scalar>(seq: &SymbolSequence<T>) -> T {
    let l = seq.soft.rows();
    let mut mean = vec![T::zero(); seq.soft.cols()];
    for t in 0..l {
        for (m, &x) in mean.iter_mut().zip(seq.soft.row(t)) {
            *m += x;
        }
    }
    let inv: T = s(1.0 / l as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    entropy(&mean)
}

/// Mean row entropy of the soft assignments.
pub fn sequence_entropy<T: Scalar>(seq: &SymbolSequence<T>) -> T {
    let l = seq.soft.rows();
    let total = (0..l).fold(T::zero(), |acc, t| acc + entropy(seq.soft.row(t)));
    total / s(l as f64)
}

/// Distinct symbols divided by length.
pub fn distinct_ratio(ids: &[usize]) -> f64 {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len() as f64 / ids.len().max(1) as f64
}
