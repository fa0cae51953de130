//! Differentiable building blocks: projector heads, the cross-attending
//! autoregressive decoder, the sequence encoder, and the EMA update.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;

pub use config::ModelConfig;
pub use params::{Bound, ModelParams, TensorMap, STUDENT_HEAD, TEACHER_HEAD};

use crate::autograd::Graph;
use crate::error::{invalid, shape, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Which projector head to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Student,
    Teacher,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Student => STUDENT_HEAD,
            Head::Teacher => TEACHER_HEAD,
        }
    }
}

/// Prototype logits `[K]` of one input vector of width `d_t`.
pub fn projector_forward<T: Scalar>(params: &ModelParams<T>, head: Head, x: &[T]) -> Result<Vec<T>> {
    let cfg = params.config();
    if x.len() != cfg.d_t {
        return Err(shape(format!("projector input {} != d_t {}", x.len(), cfg.d_t)));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[head.prefix()], false);
    let xv = g.constant(Tensor::row_vector(x.to_vec()));
    let y = layers::projector(&mut g, &p, head.prefix(), cfg, xv);
    Ok(g.value(y).data().to_vec())
}

/// Result of [`decoder_step`].
#[derive(Clone, Debug)]
pub struct DecoderStep<T> {
    /// `[A]` logits (or `[d_model]` for a VQ head).
    pub logits: Vec<T>,
    /// Deepest-layer cross-attention, `[heads][n_patches]`.
    pub attn: Vec<T>,
}

/// Runs the decoder over `prefix` (`[t][d_model]`, row 0 being the start
/// input) and returns the prediction at position `t-1`.
pub fn decoder_step<T: Scalar>(
    params: &ModelParams<T>,
    prefix: &Tensor<T>,
    patch_tokens: &Tensor<T>,
) -> Result<DecoderStep<T>> {
    let cfg = params.config();
    let t = prefix.rows();
    if t == 0 || t > cfg.seq_len {
        return Err(invalid(format!("prefix length {t} outside 1..={}", cfg.seq_len)));
    }
    if prefix.cols() != cfg.d_model {
        return Err(shape(format!("prefix width {} != d_model {}", prefix.cols(), cfg.d_model)));
    }
    if patch_tokens.rows() == 0 {
        return Err(invalid("no patch tokens"));
    }
    if patch_tokens.cols() != cfg.d_t {
        return Err(shape(format!("patch width {} != d_t {}", patch_tokens.cols(), cfg.d_t)));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &["dec."], false);
    let patches = g.constant(patch_tokens.clone());
    let mut run = layers::DecoderRun::new(&mut g, &p, cfg, patches, 1);
    let mut last = None;
    for r in 0..t {
        let x = g.constant(Tensor::row_vector(prefix.row(r).to_vec()));
        last = Some(run.step(&mut g, &p, cfg, x));
    }
    let out = last.unwrap();
    let deepest = *out.cross_attn.last().unwrap();
    Ok(DecoderStep {
        logits: g.value(out.out).data().to_vec(),
        attn: g.attention_probs(deepest).unwrap().to_vec(),
    })
}

/// Summary-token output `[d_model]` of the encoder over `tokens` (`[n][d_model]`).
pub fn encoder_forward<T: Scalar>(params: &ModelParams<T>, tokens: &Tensor<T>) -> Result<Vec<T>> {
    let cfg = params.config();
    let n = tokens.rows();
    if n == 0 || n > cfg.seq_len {
        return Err(invalid(format!("encoder input length {n} outside 1..={}", cfg.seq_len)));
    }
    if tokens.cols() != cfg.d_model {
        return Err(shape(format!("token width {} != d_model {}", tokens.cols(), cfg.d_model)));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, &["enc."], false);
    let toks: Vec<_> = (0..n)
        .map(|r| g.constant(Tensor::row_vector(tokens.row(r).to_vec())))
        .collect();
    let y = layers::encoder_pooled(&mut g, &p, cfg, &toks, 1);
    Ok(g.value(y).data().to_vec())
}

/// `lambda * teacher + (1 - lambda) * student`, elementwise and per name.
pub fn ema_update<T: Scalar>(teacher: &TensorMap<T>, student: &TensorMap<T>, lambda: f64) -> Result<TensorMap<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("ema lambda {lambda} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(shape("teacher and student maps differ in size"));
    }
    let l: T = s(lambda);
    let one_minus: T = s(1.0 - lambda);
    teacher
        .iter()
        .map(|(name, t)| {
            let st = student
                .get(name)
                .ok_or_else(|| shape(format!("student has no {name}")))?;
            if st.shape() != t.shape() {
                return Err(shape(format!("{name}: {:?} vs {:?}", t.shape(), st.shape())));
            }
            let data = t
                .data()
                .iter()
                .zip(st.data())
                .map(|(&a, &b)| l * a + one_minus * b)
                .collect();
            Ok((name.clone(), Tensor::from_vec(t.shape(), data)?))
        })
        .collect()
}

impl<T: Scalar> ModelParams<T> {
    /// Moves the teacher head towards the student head in place.
    pub fn ema_teacher(&mut self, lambda: f64) -> Result<()> {
        let next = ema_update(&self.head(TEACHER_HEAD), &self.head(STUDENT_HEAD), lambda)?;
        self.set_head(TEACHER_HEAD, next)
    }
}
