//! Centered, sharpened teacher distributions, the multi-granularity
//! cross-entropy, and the exploration terms.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::seqgen::{sequence_entropy, sequence_info, SymbolSequence};
use crate::tensor::{s, softmax_in_place, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Base,
    Entropy,
    Info,
    /// Entropy and info terms until the switch epoch, base afterwards.
    Combined,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Base => "base",
            Strategy::Entropy => "entropy",
            Strategy::Info => "info",
            Strategy::Combined => "combined",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Strategy::Base),
            "entropy" => Ok(Strategy::Entropy),
            "info" => Ok(Strategy::Info),
            "combined" => Ok(Strategy::Combined),
            other => Err(invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub granularity_lambda: f64,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub strategy_switch_epoch: Option<usize>,
    /// Pair each teacher view with every other student view.
    pub cross_view: bool,
    /// Add the aggregated student logits as one more granularity.
    pub aggregate_term: bool,
    /// Linear warmup of the teacher temperature from `teacher_temp_warmup_start`.
    pub teacher_temp_warmup_epochs: usize,
    pub teacher_temp_warmup_start: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            granularity_lambda: 1.0,
            strategy: Strategy::Base,
            alpha: 0.1,
            beta: 0.1,
            strategy_switch_epoch: None,
            cross_view: false,
            aggregate_term: false,
            teacher_temp_warmup_epochs: 0,
            teacher_temp_warmup_start: 0.04,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.teacher_temp) || !pos(self.student_temp) || !pos(self.teacher_temp_warmup_start) {
            return Err(invalid("temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(invalid(format!("center_momentum {} outside [0, 1)", self.center_momentum)));
        }
        if !pos(self.granularity_lambda) {
            return Err(invalid("granularity_lambda must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(invalid("alpha and beta must be non-negative"));
        }
        if self.strategy == Strategy::Combined && self.strategy_switch_epoch.is_none() {
            return Err(invalid("combined strategy needs strategy_switch_epoch"));
        }
        Ok(())
    }

    /// Teacher temperature at a (fractional) epoch.
    pub fn teacher_temp_at(&self, epoch: f64) -> f64 {
        let w = self.teacher_temp_warmup_epochs as f64;
        if w == 0.0 || epoch >= w {
            self.teacher_temp
        } else {
            self.teacher_temp_warmup_start + (self.teacher_temp - self.teacher_temp_warmup_start) * epoch / w
        }
    }

    /// Whether the entropy and info terms apply during `epoch`.
    pub fn active_terms(&self, epoch: usize) -> (bool, bool) {
        match self.strategy {
            Strategy::Base => (false, false),
            Strategy::Entropy => (true, false),
            Strategy::Info => (false, true),
            Strategy::Combined => {
                let before = epoch < self.strategy_switch_epoch.unwrap_or(usize::MAX);
                (before, before)
            }
        }
    }
}

/// `softmax((logits - center) / temp)`.
pub fn teacher_distribution<T: Scalar>(logits: &[T], center: &[T], temp: f64) -> Result<Vec<T>> {
    if logits.len() != center.len() {
        return Err(shape(format!("logits {} vs center {}", logits.len(), center.len())));
    }
    if !(temp > 0.0) {
        return Err(invalid("teacher temperature must be positive"));
    }
    let inv: T = s(1.0 / temp);
    let mut p: Vec<T> = logits.iter().zip(center).map(|(&l, &c)| (l - c) * inv).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// `m * center + (1 - m) * mean_b logits[b]`.
pub fn update_center<T: Scalar>(center: &[T], batch_logits: &Tensor<T>, m: f64) -> Result<Vec<T>> {
    let b = batch_logits.rows();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    if batch_logits.cols() != center.len() {
        return Err(shape("batch width differs from center"));
    }
    let mut mean = vec![T::zero(); center.len()];
    for r in 0..b {
        for (m, &x) in mean.iter_mut().zip(batch_logits.row(r)) {
            *m += x;
        }
    }
    let inv_b: T = s(1.0 / b as f64);
    let (mm, one_minus): (T, T) = (s(m), s(1.0 - m));
    Ok(center
        .iter()
        .zip(&mean)
        .map(|(&c, &x)| mm * c + one_minus * (x * inv_b))
        .collect())
}

/// `w_j = lambda^j / sum_k lambda^k`, `j = 1..=d`.
pub fn granularity_weights(d: usize, lambda: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=d).map(|j| lambda.powi(j as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Teacher-student view pairs the loss sums over.
pub fn view_pairs(n_views: usize, cross_view: bool) -> Result<Vec<(usize, usize)>> {
    if n_views == 0 {
        return Err(invalid("no views"));
    }
    if !cross_view {
        return Ok((0..n_views).map(|i| (i, i)).collect());
    }
    if n_views < 2 {
        return Err(invalid("cross-view pairing needs at least two views"));
    }
    Ok((0..n_views)
        .flat_map(|i| (0..n_views).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect())
}

/// `-sum_k p_k log softmax(q / temp)_k`.
pub fn cross_entropy<T: Scalar>(p: &[T], student_logits: &[T], temp: f64) -> T {
    let inv: T = s(1.0 / temp);
    let x: Vec<T> = student_logits.iter().map(|&v| v * inv).collect();
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = x.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    let mass = p.iter().fold(T::zero(), |a, &pk| a + pk);
    let dot = p.iter().zip(&x).fold(T::zero(), |a, (&pk, &xk)| a + pk * xk);
    lse * mass - dot
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslBreakdown<T> {
    pub total: T,
    /// Weighted cross-entropy per granularity, summed over view pairs.
    pub per_granularity: Vec<T>,
    pub n_pairs: usize,
}

fn check_simplex<T: Scalar>(p: &[T]) -> Result<()> {
    let sum = p.iter().fold(0.0, |a, &x| a + x.as_f64());
    if p.iter().any(|&x| x < T::zero() || !x.is_finite()) || (sum - 1.0).abs() > 1e-4 {
        return Err(invalid("teacher distribution is not on the simplex"));
    }
    Ok(())
}

/// Multi-granularity cross-entropy for one sample: `student[v][j]` holds the
/// student logits of view `v` at granularity `j`.
pub fn ssl_loss<T: Scalar>(teacher: &[Vec<T>], student: &[Vec<Vec<T>>], spec: &LossSpec) -> Result<SslBreakdown<T>> {
    if teacher.len() != student.len() {
        return Err(shape(format!("{} teacher views vs {} student views", teacher.len(), student.len())));
    }
    let pairs = view_pairs(teacher.len(), spec.cross_view)?;
    let d = student[0].len();
    if d == 0 || student.iter().any(|v| v.len() != d) {
        return Err(shape("every view needs the same non-zero number of granularities"));
    }
    for p in teacher {
        check_simplex(p)?;
    }
    let w = granularity_weights(d, spec.granularity_lambda);
    let mut per = vec![T::zero(); d];
    for &(ti, si) in &pairs {
        for (j, logits) in student[si].iter().enumerate() {
            if logits.len() != teacher[ti].len() {
                return Err(shape("student and teacher widths differ"));
            }
            per[j] += s::<T>(w[j]) * cross_entropy(&teacher[ti], logits, spec.student_temp);
        }
    }
    let total = per.iter().fold(T::zero(), |a, &x| a + x);
    Ok(SslBreakdown {
        total,
        per_granularity: per,
        n_pairs: pairs.len(),
    })
}

/// Graph form of [`ssl_loss`] averaged over a batch. `teacher[v]` is a
/// constant `[B, K]` distribution, `student[v][j]` a `[B, K]` logit node.
pub fn ssl_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &[Tensor<T>],
    student: &[Vec<Var>],
    spec: &LossSpec,
) -> Result<(Var, Vec<Var>)> {
    if teacher.len() != student.len() {
        return Err(shape("teacher and student view counts differ"));
    }
    let pairs = view_pairs(teacher.len(), spec.cross_view)?;
    let d = student[0].len();
    let b = teacher[0].rows();
    let w = granularity_weights(d, spec.granularity_lambda);
    let tv: Vec<Var> = teacher.iter().map(|t| g.constant(t.clone())).collect();
    let mut per: Vec<Option<Var>> = vec![None; d];
    for &(ti, si) in &pairs {
        for (j, &logits) in student[si].iter().enumerate() {
            let scaled = g.scale(logits, 1.0 / spec.student_temp);
            let logq = g.log_softmax(scaled);
            let plogq = g.mul(tv[ti], logq);
            let sum = g.sum_all(plogq);
            let term = g.scale(sum, -w[j] / b as f64);
            per[j] = Some(match per[j] {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
    }
    let per: Vec<Var> = per.into_iter().map(Option::unwrap).collect();
    let mut total = per[0];
    for &x in &per[1..] {
        total = g.add(total, x);
    }
    Ok((total, per))
}

/// Adds the active exploration terms (and the VQ auxiliary loss) to `ssl`.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    ssl: Var,
    seq_entropy: Option<Var>,
    seq_info: Option<Var>,
    vq_aux: Option<Var>,
    spec: &LossSpec,
    epoch: usize,
) -> Var {
    let (use_h, use_i) = spec.active_terms(epoch);
    let mut total = ssl;
    if let Some(aux) = vq_aux {
        total = g.add(total, aux);
    }
    if use_h && spec.alpha > 0.0 {
        if let Some(h) = seq_entropy {
            let t = g.scale(h, spec.alpha);
            total = g.sub(total, t);
        }
    }
    if use_i && spec.beta > 0.0 {
        if let Some(i) = seq_info {
            let t = g.scale(i, spec.beta);
            total = g.sub(total, t);
        }
    }
    total
}

/// Value form of the combined objective over a batch of sequences.
pub fn total_loss<T: Scalar>(ssl: T, seqs: &[SymbolSequence<T>], spec: &LossSpec, vq_aux: T, epoch: usize) -> T {
    let (use_h, use_i) = spec.active_terms(epoch);
    let n: T = s(seqs.len().max(1) as f64);
    let mut total = ssl + vq_aux;
    if use_h {
        let h = seqs.iter().fold(T::zero(), |a, q| a + sequence_entropy(q)) / n;
        total -= s::<T>(spec.alpha) * h;
    }
    if use_i {
        let i = seqs.iter().fold(T::zero(), |a, q| a + sequence_info(q)) / n;
        total -= s::<T>(spec.beta) * i;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_function, GradCheckConfig};
    use proptest::prelude::*;
    use super::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn teacher_distribution_cases() {
        let l = [0.3f64, -1.0, 2.0];
        let p = teacher_distribution(&l, &l, 0.04).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a = teacher_distribution(&l, &[0.0; 3], 0.04).unwrap();
        let b = teacher_distribution(&l, &[0.0; 3], 0.1).unwrap();
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        assert!(max(&a) > max(&b));
    }

    #[test]
    fn center_update_cases() {
        let batch = Tensor::from_rows(&[vec![1.0f64, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(update_center(&[7.0, 7.0], &batch, 0.0).unwrap(), vec![2.0, 4.0]);
        assert_eq!(update_center(&[7.0, 7.0], &batch, 1.0).unwrap(), vec![7.0, 7.0]);
        let ones = Tensor::from_rows(&[vec![1.0f64]]).unwrap();
        assert_eq!(update_center(&[0.0], &ones, 0.9).unwrap(), vec![1.0 - 0.9]);
        assert!(update_center(&[0.0f64], &Tensor::zeros(&[0, 1]), 0.9).is_err());
    }

    #[test]
    fn uniform_case_is_ln_k() {
        let k = 64;
        let p = vec![vec![1.0 / k as f64; k]; 2];
        let s = vec![vec![vec![0.0; k]; 4]; 2];
        let out = ssl_loss(&p, &s, &LossSpec::default()).unwrap();
        assert!((out.total / 2.0 - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for lambda in [0.5, 1.0, 2.0] {
            let w = granularity_weights(4, lambda);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(granularity_weights(4, 1.0), vec![0.25; 4]);
    }

    #[test]
    fn view_pairing() {
        assert_eq!(view_pairs(2, false).unwrap(), vec![(0, 0), (1, 1)]);
        assert_eq!(view_pairs(2, true).unwrap(), vec![(0, 1), (1, 0)]);
        assert!(view_pairs(1, true).is_err());
    }

    #[test]
    fn rejects_bad_teacher() {
        let s = vec![vec![vec![0.0; 2]]];
        assert!(ssl_loss(&[vec![0.7f64, 0.7]], &s, &LossSpec::default()).is_err());
        assert!(ssl_loss::<f64>(&[], &[], &LossSpec::default()).is_err());
    }

    #[test]
    fn strategy_terms() {
        let soft = Tensor::from_rows(&[vec![0.25f64; 4], vec![0.25; 4]]).unwrap();
        let seq = SymbolSequence {
            logits: soft.clone(),
            soft,
            ids: vec![0, 0],
            hard: false,
            attn: vec![],
        };
        let mut spec = LossSpec {
            alpha: 0.0,
            beta: 0.0,
            strategy: Strategy::Entropy,
            ..Default::default()
        };
        assert_eq!(total_loss(1.5, std::slice::from_ref(&seq), &spec, 0.0, 0), 1.5);
        spec.alpha = 0.5;
        let t = total_loss(1.5, std::slice::from_ref(&seq), &spec, 0.0, 0);
        assert!((t - (1.5 - 0.5 * 4f64.ln())).abs() < 1e-15);
        let hard = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![1.0, 0.0]]).unwrap();
        let rep = SymbolSequence {
            logits: hard.clone(),
            soft: hard,
            ids: vec![0, 0],
            hard: true,
            attn: vec![],
        };
        let info = LossSpec {
            strategy: Strategy::Info,
            beta: 1.0,
            ..Default::default()
        };
        assert_eq!(total_loss(2.0, &[rep], &info, 0.0, 0), 2.0);
        let comb = LossSpec {
            strategy: Strategy::Combined,
            strategy_switch_epoch: Some(3),
            ..Default::default()
        };
        assert_eq!(comb.active_terms(2), (true, true));
        assert_eq!(comb.active_terms(3), (false, false));
    }

    #[test]
    fn teacher_temp_warmup() {
        let spec = LossSpec {
            teacher_temp: 0.07,
            teacher_temp_warmup_start: 0.04,
            teacher_temp_warmup_epochs: 30,
            ..Default::default()
        };
        assert_eq!(spec.teacher_temp_at(0.0), 0.04);
        assert!((spec.teacher_temp_at(15.0) - 0.055).abs() < 1e-15);
        assert_eq!(spec.teacher_temp_at(40.0), 0.07);
        assert_eq!(LossSpec::default().teacher_temp_at(0.0), 0.04);
    }

    #[test]
    fn node_matches_value_and_has_student_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, k, v, d) = (3, 6, 2, 3);
        let rand_t = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_vec(&[b, k], (0..b * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let teacher: Vec<Tensor<f64>> = (0..v)
            .map(|_| {
                let mut t = rand_t(&mut rng);
                for r in 0..b {
                    softmax_in_place(t.row_mut(r));
                }
                t
            })
            .collect();
        let students: Vec<Tensor<f64>> = (0..v * d).map(|_| rand_t(&mut rng)).collect();
        for cross_view in [false, true] {
            let spec = LossSpec {
                granularity_lambda: 0.7,
                cross_view,
                ..Default::default()
            };
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = (0..v).map(|vi| (0..d).map(|j| g.param(students[vi * d + j].clone())).collect()).collect();
            let (total, _) = ssl_loss_node(&mut g, &teacher, &vars, &spec).unwrap();
            let mut expect = 0.0;
            for r in 0..b {
                let tp: Vec<Vec<f64>> = teacher.iter().map(|t| t.row(r).to_vec()).collect();
                let sp: Vec<Vec<Vec<f64>>> = (0..v).map(|vi| (0..d).map(|j| students[vi * d + j].row(r).to_vec()).collect()).collect();
                expect += ssl_loss(&tp, &sp, &spec).unwrap().total;
            }
            assert!((g.value(total).data()[0] - expect / b as f64).abs() < 1e-12);

            let report = check_function(
                &students,
                &|g: &mut Graph<f64>, xs: &[Var]| {
                    let vars: Vec<Vec<Var>> = (0..v).map(|vi| xs[vi * d..(vi + 1) * d].to_vec()).collect();
                    ssl_loss_node(g, &teacher, &vars, &spec).unwrap().0
                },
                &GradCheckConfig::default(),
            );
            assert!(report.max_rel_err < 1e-6, "{report:?}");
        }
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let mut v = raw;
        softmax_in_place(&mut v);
        v
    }

    proptest! {
        #[test]
        fn cross_entropy_at_least_entropy(a in prop::collection::vec(-3.0f64..3.0, 8), b in prop::collection::vec(-3.0f64..3.0, 8)) {
            let p = simplex(a);
            let ce = cross_entropy(&p, &b, 1.0);
            prop_assert!(ce >= crate::tensor::entropy(&p) - 1e-12);
            let logp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            prop_assert!((cross_entropy(&p, &logp, 1.0) - crate::tensor::entropy(&p)).abs() < 1e-12);
        }

        #[test]
        fn shift_invariance(a in prop::collection::vec(-3.0f64..3.0, 8), b in prop::collection::vec(-3.0f64..3.0, 8), c in -5.0f64..5.0) {
            let p = simplex(a);
            let shifted: Vec<f64> = b.iter().map(|x| x + c).collect();
            let spec = LossSpec::default();
            let x = ssl_loss(&[p.clone()], &[vec![b]], &spec).unwrap().total;
            let y = ssl_loss(&[p], &[vec![shifted]], &spec).unwrap().total;
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
