//! Central finite-difference gradient checking at f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per input tensor; 0 checks every coordinate.
    pub coords_per_input: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so that vanishing gradients
    /// are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_input: 0,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst comparison.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of a scalar function of `inputs` with central
/// differences. `build` must be a pure function of the input values.
pub fn check_function<F>(inputs: &[Tensor<f64>], build: &F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if cfg.coords_per_input == 0 || cfg.coords_per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_input).into_vec()
        };
        for c in coords {
            let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[c]);
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + cfg.eps;
            let fp = eval(&work);
            work[i].data_mut()[c] = orig - cfg.eps;
            let fm = eval(&work);
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let err = relative_error(analytic, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, c);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // straight-through claims d/dx = 1 while the value is x^2
        let x = Tensor::row_vector(vec![0.7, -1.3]);
        let report = check_function(
            &[x],
            &|g: &mut Graph<f64>, v: &[Var]| {
                let sq: Vec<f64> = g.value(v[0]).data().iter().map(|a| a * a).collect();
                let y = g.straight_through(v[0], Tensor::row_vector(sq));
                g.sum_all(y)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
