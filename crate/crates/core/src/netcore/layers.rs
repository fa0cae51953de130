//! Batched forward builders over bound parameters.
//!
//! All builders work on `rows` independent sequences at once: a per-step
//! activation is `[rows, d]`, a whole sequence is stacked group-major as
//! `[rows * len, d]`.

use super::config::ModelConfig;
use super::params::Bound;
use crate::autograd::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, p.get(&format!("{name}.w")));
    g.add_tiled(y, p.get(&format!("{name}.b")))
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")))
}

fn mlp<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let h = linear(g, p, &format!("{name}.fc1"), x);
    let h = g.gelu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Layer normalisation without affine parameters.
fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let d = g.value(x).cols();
    let one = g.constant(Tensor::full(&[1, d], T::one()));
    let zero = g.constant(Tensor::zeros(&[1, d]));
    g.layer_norm(x, one, zero)
}

/// `last(l2norm(fc3(gelu(fc2(gelu(fc1(ln(x))))))))`, or `last(ln(x))` for the
/// single-layer head. `ln` has no parameters, so the student and teacher heads
/// see inputs on the same scale.
pub fn projector<T: Scalar>(g: &mut Graph<T>, p: &Bound, head: &str, cfg: &ModelConfig, x: Var) -> Var {
    let x = standardize(g, x);
    if cfg.proj_hidden == 0 {
        return linear(g, p, &format!("{head}.last"), x);
    }
    let h = linear(g, p, &format!("{head}.fc1"), x);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{head}.fc2"), h);
    let h = g.gelu(h);
    let b = linear(g, p, &format!("{head}.fc3"), h);
    let n = g.l2_normalize_rows(b);
    linear(g, p, &format!("{head}.last"), n)
}

/// `[rows, d]` copies of a `[1, d]` parameter row.
fn broadcast_row<T: Scalar>(g: &mut Graph<T>, row: Var, rows: usize) -> Var {
    let d = g.value(row).cols();
    let z = g.constant(Tensor::zeros(&[rows, d]));
    g.add_tiled(z, row)
}

/// Incremental state of one autoregressive decoder pass: cached self-attention
/// keys/values per layer and the cross-attention keys/values of the patches.
pub struct DecoderRun {
    rows: usize,
    self_k: Vec<Vec<Var>>,
    self_v: Vec<Vec<Var>>,
    cross_kv: Vec<(Var, Var)>,
    steps: usize,
}

/// Outputs of one decoder step.
pub struct StepOut {
    /// `[rows, A]` logits, or `[rows, d_model]` pre-quantisation vectors for VQ.
    pub out: Var,
    /// Cross-attention nodes per layer, shallowest first.
    pub cross_attn: Vec<Var>,
}

impl DecoderRun {
    /// `patches` is `[rows * n_patches, d_t]`, grouped by row.
    pub fn new<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, patches: Var, rows: usize) -> Self {
        let cross_kv = (0..cfg.dec_depth)
            .map(|l| {
                let k = linear(g, p, &format!("dec.l{l}.cross.k"), patches);
                let v = linear(g, p, &format!("dec.l{l}.cross.v"), patches);
                (k, v)
            })
            .collect();
        DecoderRun {
            rows,
            self_k: vec![Vec::new(); cfg.dec_depth],
            self_v: vec![Vec::new(); cfg.dec_depth],
            cross_kv,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// The start-token input for step 0.
    pub fn start_input<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        broadcast_row(g, p.get("dec.start"), self.rows)
    }

    /// Feeds one `[rows, d]` input at the next position and returns the
    /// prediction for that position. Attends causally to all earlier inputs.
    pub fn step<T: Scalar>(&mut self, g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, input: Var) -> StepOut {
        let t = self.steps;
        assert!(t < cfg.seq_len, "decoder step {t} beyond seq_len {}", cfg.seq_len);
        let pos = g.select_rows(p.get("dec.pos"), &[t]);
        let mut x = g.add_tiled(input, pos);
        let mut cross_attn = Vec::with_capacity(cfg.dec_depth);
        for l in 0..cfg.dec_depth {
            let pre = format!("dec.l{l}");
            let h = layer_norm(g, p, &format!("{pre}.ln1"), x);
            let q = linear(g, p, &format!("{pre}.self.q"), h);
            let k = linear(g, p, &format!("{pre}.self.k"), h);
            let v = linear(g, p, &format!("{pre}.self.v"), h);
            self.self_k[l].push(k);
            self.self_v[l].push(v);
            let ks = g.interleave(&self.self_k[l]);
            let vs = g.interleave(&self.self_v[l]);
            let a = g.attention(q, ks, vs, cfg.n_heads, self.rows);
            let o = linear(g, p, &format!("{pre}.self.o"), a);
            x = g.add(x, o);

            let h = layer_norm(g, p, &format!("{pre}.ln2"), x);
            let q = linear(g, p, &format!("{pre}.cross.q"), h);
            let (ck, cv) = self.cross_kv[l];
            let a = g.attention(q, ck, cv, cfg.n_heads, self.rows);
            cross_attn.push(a);
            let o = linear(g, p, &format!("{pre}.cross.o"), a);
            x = g.add(x, o);

            let h = layer_norm(g, p, &format!("{pre}.ln3"), x);
            let m = mlp(g, p, &format!("{pre}.mlp"), h);
            x = g.add(x, m);
        }
        let h = layer_norm(g, p, "dec.lnf", x);
        let out = linear(g, p, "dec.head", h);
        self.steps += 1;
        StepOut { out, cross_attn }
    }
}

/// Runs the encoder over `tokens` (each `[rows, d]`, one per position) with a
/// prepended summary token and returns the summary output `[rows, d]`.
pub fn encoder_pooled<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, tokens: &[Var], rows: usize) -> Var {
    assert!(!tokens.is_empty() && tokens.len() <= cfg.seq_len);
    let n = tokens.len();
    let summary = broadcast_row(g, p.get("enc.summary"), rows);
    if cfg.enc_depth == 0 {
        return summary;
    }
    // Slot 0 of every group is the summary token; symbol slots carry positions.
    let mut parts = Vec::with_capacity(n + 1);
    parts.push(summary);
    for (j, &tok) in tokens.iter().enumerate() {
        let pos = g.select_rows(p.get("enc.pos"), &[j]);
        parts.push(g.add_tiled(tok, pos));
    }
    let mut x = g.interleave(&parts);
    for l in 0..cfg.enc_depth {
        let pre = format!("enc.l{l}");
        let h = layer_norm(g, p, &format!("{pre}.ln1"), x);
        let q = linear(g, p, &format!("{pre}.attn.q"), h);
        let k = linear(g, p, &format!("{pre}.attn.k"), h);
        let v = linear(g, p, &format!("{pre}.attn.v"), h);
        let a = g.attention(q, k, v, cfg.n_heads, rows);
        let o = linear(g, p, &format!("{pre}.attn.o"), a);
        x = g.add(x, o);
        let h = layer_norm(g, p, &format!("{pre}.ln2"), x);
        let m = mlp(g, p, &format!("{pre}.mlp"), h);
        x = g.add(x, m);
    }
    let x = layer_norm(g, p, "enc.lnf", x);
    let first: Vec<usize> = (0..rows).map(|r| r * (n + 1)).collect();
    g.select_rows(x, &first)
}

/// Student head: adapter into the teacher feature space, then `proj_s`.
pub fn student_head<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, pooled: Var) -> Var {
    let z = linear(g, p, "enc.out", pooled);
    projector(g, p, super::params::STUDENT_HEAD, cfg, z)
}
