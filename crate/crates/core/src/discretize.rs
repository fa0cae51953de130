//! Mapping per-step decoder outputs to soft symbol assignments and hard ids:
//! tempered softmax, Gumbel-Softmax, and nearest-code vector quantisation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{argmax, s, softmax_in_place, Scalar, Tensor};

/// Uniform draws are clamped to this distance from 0 and 1.
pub const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscretizeKind {
    SoftmaxTemp,
    Gumbel,
    Vq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauSchedule {
    Constant,
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizeSpec {
    pub kind: DiscretizeKind,
    pub tau_start: f64,
    pub tau_end: f64,
    pub schedule: TauSchedule,
    /// Forward the one-hot of the argmax, backward through the soft vector.
    pub st_hard: bool,
    pub vq_beta: f64,
}

impl Default for DiscretizeSpec {
    fn default() -> Self {
        DiscretizeSpec {
            kind: DiscretizeKind::Gumbel,
            tau_start: 1.0,
            tau_end: 0.12,
            schedule: TauSchedule::Cosine,
            st_hard: false,
            vq_beta: 0.25,
        }
    }
}

impl DiscretizeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(invalid(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if !(self.vq_beta >= 0.0) {
            return Err(invalid("vq_beta must be non-negative"));
        }
        Ok(())
    }
}

impl fmt::Display for DiscretizeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscretizeKind::SoftmaxTemp => "softmax_temp",
            DiscretizeKind::Gumbel => "gumbel",
            DiscretizeKind::Vq => "vq",
        })
    }
}

impl FromStr for DiscretizeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_temp" | "softmax" => Ok(DiscretizeKind::SoftmaxTemp),
            "gumbel" => Ok(DiscretizeKind::Gumbel),
            "vq" => Ok(DiscretizeKind::Vq),
            other => Err(invalid(format!("unknown discretization {other:?}"))),
        }
    }
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauSchedule::Constant => "constant",
            TauSchedule::Linear => "linear",
            TauSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for TauSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(TauSchedule::Constant),
            "linear" => Ok(TauSchedule::Linear),
            "cosine" => Ok(TauSchedule::Cosine),
            other => Err(invalid(format!("unknown tau schedule {other:?}"))),
        }
    }
}

/// Temperature at `step` of `total_steps`; non-increasing in `step`.
pub fn schedule_tau(spec: &DiscretizeSpec, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond total {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    let (a, b) = (spec.tau_start, spec.tau_end);
    Ok(match spec.schedule {
        TauSchedule::Constant => a,
        TauSchedule::Linear => a + (b - a) * frac,
        TauSchedule::Cosine => b + (a - b) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax(logits / tau)`.
pub fn softmax_discretize<T: Scalar>(logits: &[T], tau: f64) -> Result<Vec<T>> {
    check_tau(tau)?;
    let inv: T = s(1.0 / tau);
    let mut out: Vec<T> = logits.iter().map(|&x| x * inv).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `n` i.i.d. Gumbel(0, 1) draws, `-ln(-ln U)` with clamped `U`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + g) / tau)` with fresh Gumbel noise `g`.
pub fn gumbel_discretize<T: Scalar, R: Rng + ?Sized>(logits: &[T], tau: f64, rng: &mut R) -> Result<Vec<T>> {
    check_tau(tau)?;
    let noise = gumbel_noise(rng, logits.len());
    gumbel_with_noise(logits, tau, &noise)
}

/// Gumbel-Softmax with caller-supplied noise.
pub fn gumbel_with_noise<T: Scalar>(logits: &[T], tau: f64, noise: &[f64]) -> Result<Vec<T>> {
    check_tau(tau)?;
    if noise.len() != logits.len() {
        return Err(shape("noise length differs from logits"));
    }
    let inv: T = s(1.0 / tau);
    let mut out: Vec<T> = logits
        .iter()
        .zip(noise)
        .map(|(&x, &n)| (x + s(n)) * inv)
        .collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Hard symbol of a soft assignment.
pub fn hard_id<T: Scalar>(soft: &[T]) -> usize {
    argmax(soft)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqResult<T> {
    pub id: usize,
    pub quantized: Vec<T>,
    /// `|sg(z) - e|^2 + beta |z - sg(e)|^2`, whose value is `(1 + beta) |z - e|^2`.
    pub aux_loss: T,
}

/// Squared distances from `z` to every codebook row.
pub fn code_distances<T: Scalar>(z: &[T], codebook: &Tensor<T>) -> Vec<T> {
    (0..codebook.rows())
        .map(|i| {
            codebook
                .row(i)
                .iter()
                .zip(z)
                .fold(T::zero(), |acc, (&e, &x)| acc + (x - e) * (x - e))
        })
        .collect()
}

/// Index of the smallest entry, lowest index on ties.
pub fn argmin<T: Scalar>(d: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in d.iter().enumerate().skip(1) {
        if x < d[best] {
            best = i;
        }
    }
    best
}

/// Nearest code to `z` (lowest index on ties).
pub fn vq_discretize<T: Scalar>(z: &[T], codebook: &Tensor<T>, beta: f64) -> Result<VqResult<T>> {
    if codebook.rows() == 0 {
        return Err(invalid("empty codebook"));
    }
    if codebook.cols() != z.len() {
        return Err(shape(format!("z has {} dims, codes have {}", z.len(), codebook.cols())));
    }
    let d = code_distances(z, codebook);
    let id = argmin(&d);
    Ok(VqResult {
        id,
        quantized: codebook.row(id).to_vec(),
        aux_loss: d[id] * s(1.0 + beta),
    })
}

/// One-hot rows for `ids` over `width` classes.
pub fn one_hot<T: Scalar>(ids: &[usize], width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[ids.len(), width]);
    for (r, &i) in ids.iter().enumerate() {
        t.row_mut(r)[i] = T::one();
    }
    t
}

/// Graph nodes of a batched softmax / Gumbel-Softmax discretization.
#[derive(Clone, Debug)]
pub struct Relaxed {
    /// `(logits + noise) / tau`, `[rows, A]`.
    pub scaled: Var,
    /// `softmax(scaled)`.
    pub soft: Var,
    /// What is fed downstream: `soft`, or the straight-through one-hot.
    pub out: Var,
    pub ids: Vec<usize>,
}

/// Soft assignments for a batch of logits `[rows, A]` inside a graph.
pub fn discretize_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    noise: Option<&Tensor<T>>,
    st_hard: bool,
) -> Relaxed {
    let x = match noise {
        Some(n) => {
            let nv = g.constant(n.clone());
            g.add(logits, nv)
        }
        None => logits,
    };
    let scaled = g.scale(x, 1.0 / tau);
    let soft = g.softmax(scaled);
    let sv = g.value(soft);
    let width = sv.cols();
    let ids: Vec<usize> = (0..sv.rows()).map(|r| argmax(sv.row(r))).collect();
    let out = if st_hard {
        let hard = one_hot(&ids, width);
        g.straight_through(soft, hard)
    } else {
        soft
    };
    Relaxed { scaled, soft, out, ids }
}

/// Graph-side vector quantisation of `z` `[rows, d]` against `codebook`
/// `[A, d]`: straight-through quantised vectors, ids, and the summed
/// codebook + commitment loss.
pub fn quantize<T: Scalar>(g: &mut Graph<T>, z: Var, codebook: Var, beta: f64) -> (Var, Vec<usize>, Var) {
    let zv = g.value(z);
    let cb = g.value(codebook);
    let ids: Vec<usize> = (0..zv.rows())
        .map(|r| argmin(&code_distances(zv.row(r), cb)))
        .collect();
    let codes = g.select_rows(codebook, &ids);
    let quantized = g.straight_through(z, g.value(codes).clone());
    // codebook term pulls codes to the (frozen) outputs
    let z_sg = g.detach(z);
    let d1 = g.sub(z_sg, codes);
    let sq1 = g.mul(d1, d1);
    let codebook_loss = g.sum_all(sq1);
    // commitment term pulls outputs to the (frozen) codes
    let codes_sg = g.detach(codes);
    let d2 = g.sub(z, codes_sg);
    let sq2 = g.mul(d2, d2);
    let commit = g.sum_all(sq2);
    let commit = g.scale(commit, beta);
    let aux = g.add(codebook_loss, commit);
    (quantized, ids, aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_function, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_uniform_soft() {
        let out = softmax_discretize(&[0.3f64; 5], 0.12).unwrap();
        for &p in &out {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_tau_is_one_hot() {
        let out = softmax_discretize(&[2.0f64, 1.0, 0.5], 1e-3).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert_eq!(hard_id(&out), 0);
    }

    #[test]
    fn non_positive_tau_rejected() {
        assert!(softmax_discretize(&[1.0f64], 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_discretize(&[1.0f64], -1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_is_seed_deterministic() {
        let logits = [0.1f32, -0.4, 1.2, 0.0];
        let a = gumbel_discretize(&logits, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = gumbel_discretize(&logits, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_tau_smooths_gumbel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [0.5f64, -0.5, 1.0, 0.0, -1.0];
        for _ in 0..100 {
            let out = gumbel_discretize(&logits, 100.0, &mut rng).unwrap();
            let max = out.iter().cloned().fold(f64::MIN, f64::max);
            let min = out.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min < 0.05);
        }
    }

    #[test]
    fn vq_nearest_and_ties() {
        let cb = Tensor::from_rows(&[vec![0.0f64, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(vq_discretize(&[0.9, 0.8], &cb, 0.25).unwrap().id, 1);
        let tie = vq_discretize(&[0.5, 0.5], &cb, 0.25).unwrap();
        assert_eq!(tie.id, 0);
        assert_eq!(tie.quantized, vec![0.0, 0.0]);
        assert!((tie.aux_loss - 1.25 * 0.5).abs() < 1e-15);
        assert!(vq_discretize(&[0.5], &cb, 0.25).is_err());
    }

    #[test]
    fn tau_schedules() {
        let spec = DiscretizeSpec {
            tau_start: 1.0,
            tau_end: 0.2,
            schedule: TauSchedule::Cosine,
            ..Default::default()
        };
        assert_eq!(schedule_tau(&spec, 0, 10).unwrap(), 1.0);
        assert!((schedule_tau(&spec, 5, 10).unwrap() - 0.6).abs() < 1e-15);
        assert!((schedule_tau(&spec, 10, 10).unwrap() - 0.2).abs() < 1e-15);
        let lin = DiscretizeSpec {
            schedule: TauSchedule::Linear,
            ..spec.clone()
        };
        assert!((schedule_tau(&lin, 10, 10).unwrap() - 0.2).abs() < 1e-15);
        let c = DiscretizeSpec {
            schedule: TauSchedule::Constant,
            ..spec.clone()
        };
        assert_eq!(schedule_tau(&c, 7, 10).unwrap(), 1.0);
        assert!(schedule_tau(&spec, 0, 0).is_err());
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = schedule_tau(&spec, step, 10).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn discretizer_validation() {
        let bad = DiscretizeSpec {
            tau_start: 0.1,
            tau_end: 0.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DiscretizeSpec::default().validate().is_ok());
    }

    #[test]
    fn graph_discretizers_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let noise = Tensor::from_vec(&[3, 5], gumbel_noise(&mut rng, 15)).unwrap();
        for noise in [None, Some(&noise)] {
            let report = check_function(
                &[logits.clone()],
                &|g: &mut Graph<f64>, v: &[Var]| {
                    let soft = discretize_logits(g, v[0], 0.7, noise, false).out;
                    let wv = g.constant(w.clone());
                    let m = g.mul(soft, wv);
                    g.sum_all(m)
                },
                &GradCheckConfig::default(),
            );
            assert!(report.max_rel_err < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn graph_vq_straight_through_is_identity() {
        let cb = Tensor::from_rows(&[vec![0.0f64, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_rows(&[vec![0.9, 0.8], vec![-0.7, 0.2]]).unwrap());
        let c = g.param(cb.clone());
        let (q, ids, aux) = quantize(&mut g, z, c, 0.25);
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(g.value(q).data(), &[1.0, 1.0, -1.0, 0.5]);
        let w = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let m = g.mul(q, w);
        let l = g.sum_all(m);
        let grads = g.backward(l);
        assert_eq!(grads.get(z).unwrap().data(), &[2.0, 3.0, 5.0, 7.0]);
        let expect_aux = 1.25 * (0.01 + 0.04 + 0.09 + 0.09);
        assert!((g.value(aux).data()[0] - expect_aux).abs() < 1e-12);
    }
}
