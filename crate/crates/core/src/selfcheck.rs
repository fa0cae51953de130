//! Invariant suite run by the `selfcheck` command: finite-difference
//! gradients, Gumbel-max frequencies, exhaustive VQ search, the loss against
//! a direct cross-entropy sum, EMA/centering closed forms and format
//! round-trips.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::discretize::{discretize_logits, gumbel_discretize, gumbel_noise, hard_id, quantize, vq_discretize, DiscretizeKind, DiscretizeSpec};
use crate::featstore::FeatureSet;
use crate::gradcheck::{check_function, GradCheckConfig};
use crate::loss::{ssl_loss, ssl_loss_node, total_loss_node, update_center, LossSpec, Strategy};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::layers::{encoder_pooled, projector, student_head, DecoderRun};
use crate::netcore::{ema_update, ModelConfig, ModelParams, TensorMap};
use crate::seqgen::{embed_prefix_nodes, entropy_node, info_node, unroll};
use crate::tensor::{softmax_in_place, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const GUMBEL_TV_TOL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Small random architecture for gradient checks.
pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let n_heads = rng.random_range(1..=2);
    ModelConfig {
        vocab_size: rng.random_range(3..=6),
        seq_len: [1, 2, 4][rng.random_range(0..3)],
        d_model: n_heads * rng.random_range(2..=4),
        n_heads,
        dec_depth: rng.random_range(1..=2),
        enc_depth: rng.random_range(0..=2),
        proj_hidden: rng.random_range(4..=8),
        proj_bottleneck: rng.random_range(2..=4),
        n_prototypes: rng.random_range(3..=6),
        d_t: rng.random_range(2..=4),
    }
}

/// Parameters with weights drawn from U(-0.5, 0.5), so that finite
/// differences are not dominated by rounding. Norm gains stay at one.
pub fn random_params(cfg: &ModelConfig, vq: bool, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg, vq, rng).expect("valid config");
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        if n.ends_with(".g") {
            continue;
        }
        for x in p.get_mut(&n).data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Var {
    let wv = g.constant(w.clone());
    let m = g.mul(x, wv);
    g.sum_all(m)
}

/// Binds `p` with the named tensors replaced by `vars`.
fn bind_with(g: &mut Graph<f64>, p: &ModelParams<f64>, names: &[String], vars: &[Var]) -> crate::netcore::Bound {
    let mut b = p.bind(g, &[], false);
    for (n, &v) in names.iter().zip(vars) {
        b = b.with(n, v);
    }
    b
}

/// Up to `k` parameter names with the given prefix, spread over the list.
fn pick(p: &ModelParams<f64>, prefix: &str, k: usize, rng: &mut impl Rng) -> Vec<String> {
    let all: Vec<String> = p.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    let mut out: Vec<String> = rand::seq::index::sample(rng, all.len(), k.min(all.len())).into_iter().map(|i| all[i].clone()).collect();
    out.sort();
    out
}

fn gc_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        coords_per_input: 6,
        seed,
        ..Default::default()
    }
}

/// The VQ auxiliary loss stops gradients into one side of each term, so the
/// tape gradient for `z` is compared with finite differences of the
/// commitment term alone and the codebook gradient with those of the
/// codebook term alone.
fn vq_aux_error(z: &Tensor<f64>, codebook: &Tensor<f64>, beta: f64) -> f64 {
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let cv = g.param(codebook.clone());
    let (_, ids, aux) = quantize(&mut g, zv, cv, beta);
    let grads = g.backward(aux);
    let dim = z.cols();
    let sq = |z: &Tensor<f64>, cb: &Tensor<f64>| -> f64 {
        ids.iter().enumerate().map(|(r, &k)| (0..dim).map(|j| (z.row(r)[j] - cb.row(k)[j]).powi(2)).sum::<f64>()).sum::<f64>()
    };
    let eps = 1e-5;
    let mut worst = 0f64;
    for (which, analytic) in [(0, grads.get(zv).unwrap()), (1, grads.get(cv).unwrap())] {
        let base = if which == 0 { z } else { codebook };
        for i in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.data_mut()[i] += eps;
            minus.data_mut()[i] -= eps;
            let numeric = if which == 0 {
                beta * (sq(&plus, codebook) - sq(&minus, codebook)) / (2.0 * eps)
            } else {
                (sq(z, &plus) - sq(z, &minus)) / (2.0 * eps)
            };
            worst = worst.max(crate::gradcheck::relative_error(analytic.data()[i], numeric, 1e-6));
        }
    }
    worst
}

/// Worst relative error per differentiable component over `n_configs`
/// random configurations each.
pub fn gradient_suite(n_configs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        if !(err <= *e) {
            *e = err;
        }
    };
    for c in 0..n_configs {
        let cfg = random_config(&mut rng);
        let rows = rng.random_range(1..=2);
        let np = rng.random_range(1..=3);
        let p = random_params(&cfg, false, &mut rng);
        let patches = rand_tensor(&mut rng, &[rows * np, cfg.d_t], 1.0);

        // projector
        let x = rand_tensor(&mut rng, &[rows, cfg.d_t], 1.0);
        let names = pick(&p, "proj_s.", 3, &mut rng);
        let w = rand_tensor(&mut rng, &[rows, cfg.n_prototypes], 1.0);
        let mut inputs = vec![x];
        inputs.extend(names.iter().map(|n| p.get(n).clone()));
        let r = check_function(
            &inputs,
            &|g: &mut Graph<f64>, v: &[Var]| {
                let b = bind_with(g, &p, &names, &v[1..]);
                let y = projector(g, &b, "proj_s", &cfg, v[0]);
                weighted_sum(g, y, &w)
            },
            &gc_cfg(c as u64),
        );
        record("projector", r.max_rel_err);

        // one decoder step
        let names = pick(&p, "dec.", 5, &mut rng);
        let w = rand_tensor(&mut rng, &[rows, cfg.vocab_size], 1.0);
        let mut inputs = vec![patches.clone()];
        inputs.extend(names.iter().map(|n| p.get(n).clone()));
        let r = check_function(
            &inputs,
            &|g: &mut Graph<f64>, v: &[Var]| {
                let b = bind_with(g, &p, &names, &v[1..]);
                let mut run = DecoderRun::new(g, &b, &cfg, v[0], rows);
                let input = run.start_input(g, &b);
                let out = run.step(g, &b, &cfg, input).out;
                weighted_sum(g, out, &w)
            },
            &gc_cfg(c as u64),
        );
        record("decoder_step", r.max_rel_err);

        // encoder and student head
        let tokens: Vec<Tensor<f64>> = (0..cfg.seq_len).map(|_| rand_tensor(&mut rng, &[rows, cfg.d_model], 1.0)).collect();
        let names = pick(&p, "enc.", 4, &mut rng);
        let w = rand_tensor(&mut rng, &[rows, cfg.n_prototypes], 1.0);
        let mut inputs = tokens.clone();
        inputs.extend(names.iter().map(|n| p.get(n).clone()));
        let l = cfg.seq_len;
        let r = check_function(
            &inputs,
            &|g: &mut Graph<f64>, v: &[Var]| {
                let b = bind_with(g, &p, &names, &v[l..]);
                let pooled = encoder_pooled(g, &b, &cfg, &v[..l], rows);
                let y = student_head(g, &b, &cfg, pooled);
                weighted_sum(g, y, &w)
            },
            &gc_cfg(c as u64),
        );
        record("encoder", r.max_rel_err);

        // discretizations with frozen noise
        let logits = rand_tensor(&mut rng, &[rows, cfg.vocab_size], 2.0);
        let noise = Tensor::from_vec(&[rows, cfg.vocab_size], gumbel_noise(&mut rng, rows * cfg.vocab_size)).unwrap();
        let w = rand_tensor(&mut rng, &[rows, cfg.vocab_size], 1.0);
        let tau = rng.random_range(0.3..1.5);
        for (name, nz) in [("softmax_temp", None), ("gumbel", Some(&noise))] {
            let r = check_function(
                &[logits.clone()],
                &|g: &mut Graph<f64>, v: &[Var]| {
                    let out = discretize_logits(g, v[0], tau, nz, false).out;
                    weighted_sum(g, out, &w)
                },
                &gc_cfg(c as u64),
            );
            record(if name == "gumbel" { "gumbel" } else { "softmax_temp" }, r.max_rel_err);
        }
        let z = rand_tensor(&mut rng, &[rows, 3], 1.0);
        let codebook = rand_tensor(&mut rng, &[cfg.vocab_size, 3], 1.0);
        let err = vq_aux_error(&z, &codebook, 0.25);
        record("vq_aux", err);

        // full unrolled student loss
        let spec = DiscretizeSpec {
            kind: DiscretizeKind::Gumbel,
            ..Default::default()
        };
        let noise: Vec<Tensor<f64>> = (0..cfg.seq_len)
            .map(|_| Tensor::from_vec(&[rows, cfg.vocab_size], gumbel_noise(&mut rng, rows * cfg.vocab_size)).unwrap())
            .collect();
        let teacher: Vec<Tensor<f64>> = (0..1)
            .map(|_| {
                let mut t = rand_tensor(&mut rng, &[rows, cfg.n_prototypes], 2.0);
                for r in 0..rows {
                    softmax_in_place(t.row_mut(r));
                }
                t
            })
            .collect();
        let loss = LossSpec {
            strategy: Strategy::Entropy,
            granularity_lambda: 0.8,
            alpha: 0.3,
            aggregate_term: cfg.seq_len > 1,
            ..Default::default()
        };
        let mut names = pick(&p, "dec.", 3, &mut rng);
        names.extend(pick(&p, "enc.", 2, &mut rng));
        names.push("tokemb".into());
        names.extend(pick(&p, "proj_s.", 2, &mut rng));
        let mut inputs = vec![patches.clone()];
        inputs.extend(names.iter().map(|n| p.get(n).clone()));
        let r = check_function(
            &inputs,
            &|g: &mut Graph<f64>, v: &[Var]| {
                let b = bind_with(g, &p, &names, &v[1..]);
                let u = unroll(g, &b, &cfg, &spec, 0.7, v[0], rows, Some(&noise), false);
                let nodes = embed_prefix_nodes(g, &b, &cfg, &u.fed, rows).unwrap();
                let mut grans = nodes.proj.clone();
                if loss.aggregate_term {
                    grans.push(nodes.aggregated);
                }
                let (ssl, _) = ssl_loss_node(g, &teacher, &[grans], &loss).unwrap();
                let h = entropy_node(g, &u.relaxed, rows);
                let i = info_node(g, &u.relaxed, rows);
                total_loss_node(g, ssl, Some(h), Some(i), None, &loss, 0)
            },
            &gc_cfg(c as u64),
        );
        record("student_loss", r.max_rel_err);
    }
    worst
        .into_iter()
        .map(|(name, err)| {
            check(
                format!("gradient {name}"),
                err < GRAD_TOL,
                format!("max relative error {err:.2e} over {n_configs} configurations (< {GRAD_TOL:e})"),
            )
        })
        .collect()
}

/// Total-variation distance between Gumbel argmax frequencies and the
/// softmax, maximised over `n_vectors` random logit vectors.
pub fn gumbel_max_tv(n_vectors: usize, draws: usize, width: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..n_vectors {
        let logits: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        let mut counts = vec![0usize; width];
        for _ in 0..draws {
            let y = gumbel_discretize(&logits, 1.0, &mut rng).unwrap();
            counts[hard_id(&y)] += 1;
        }
        let tv = 0.5 * counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / draws as f64 - q).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

/// Instances where `vq_discretize` disagrees with a linear scan for the
/// nearest code (first minimum wins).
pub fn vq_mismatches(instances: usize, codes: usize, dim: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..instances {
        let mut cb: Vec<f64> = (0..codes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if i % 4 == 0 {
            // duplicate a code so two indices tie
            let (a, b) = (rng.random_range(0..codes), rng.random_range(0..codes));
            let src: Vec<f64> = cb[a * dim..(a + 1) * dim].to_vec();
            cb[b * dim..(b + 1) * dim].copy_from_slice(&src);
        }
        let mut best = (f64::INFINITY, 0);
        for k in 0..codes {
            let d: f64 = (0..dim).map(|j| (z[j] - cb[k * dim + j]).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        let codebook = Tensor::from_vec(&[codes, dim], cb).unwrap();
        if vq_discretize(&z, &codebook, 0.25).unwrap().id != best.1 {
            bad += 1;
        }
    }
    bad
}

fn loss_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, k) = (2, 4, 64);
    let spec = LossSpec {
        granularity_lambda: 0.9,
        ..Default::default()
    };
    let mut worst = 0f64;
    for _ in 0..20 {
        let teacher: Vec<Vec<f64>> = (0..v)
            .map(|_| {
                let mut t: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
                softmax_in_place(&mut t);
                t
            })
            .collect();
        let student: Vec<Vec<Vec<f64>>> = (0..v).map(|_| (0..d).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()).collect();
        let got = ssl_loss(&teacher, &student, &spec).unwrap().total;
        let norm: f64 = (0..d).map(|j| 0.9f64.powi(j as i32)).sum();
        let mut expect = 0.0;
        for (t, s) in teacher.iter().zip(&student) {
            for (j, logits) in s.iter().enumerate() {
                let scaled: Vec<f64> = logits.iter().map(|x| x / spec.student_temp).collect();
                let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                let ce: f64 = t.iter().zip(&scaled).map(|(p, x)| -p * (x - lse)).sum();
                expect += 0.9f64.powi(j as i32) / norm * ce;
            }
        }
        worst = worst.max((got - expect).abs());
    }
    let uniform_t = vec![vec![1.0 / k as f64; k]];
    let uniform_s = vec![vec![vec![0.0; k]]];
    let u = ssl_loss(&uniform_t, &uniform_s, &LossSpec::default()).unwrap().total;
    vec![
        check("loss oracle", worst < 1e-10, format!("max |difference| {worst:.2e} on 20 draws (V=2, D=4, K=64)")),
        check("loss uniform", u == (k as f64).ln(), format!("{u} vs ln {k}")),
    ]
}

fn ema_center_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = |rng: &mut ChaCha8Rng| -> TensorMap<f64> { [("a".to_string(), rand_tensor(rng, &[3, 4], 1.0))].into_iter().collect() };
    let (t, s) = (map(&mut rng), map(&mut rng));
    let mut ok = true;
    for lambda in [0.0, 0.5, 1.0] {
        let got = ema_update(&t, &s, lambda).unwrap();
        let expect: Vec<f64> = t["a"].data().iter().zip(s["a"].data()).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b).collect();
        ok &= got["a"].data() == expect.as_slice();
    }
    ok &= ema_update(&t, &s, 1.0).unwrap() == t && ema_update(&t, &s, 0.0).unwrap() == s;
    let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = rand_tensor(&mut rng, &[4, 5], 1.0);
    let mut cok = true;
    for m in [0.0, 0.9, 1.0] {
        let got = update_center(&c, &batch, m).unwrap();
        for j in 0..5 {
            let mean = (0..4).map(|r| batch.row(r)[j]).sum::<f64>() / 4.0;
            cok &= got[j] == m * c[j] + (1.0 - m) * mean;
        }
    }
    vec![
        check("ema closed form", ok, "lambda in {0, 0.5, 1}, bitwise"),
        check("centering closed form", cok, "m in {0, 0.9, 1}, bitwise"),
    ]
}

fn format_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, v, h, w, d) = (3, 2, 2, 3, 4);
    let tokens: Vec<f32> = (0..n * v * (1 + h * w) * d).map(|_| rng.random_range(-10.0..10.0)).collect();
    let set = FeatureSet::new(n, v, h, w, d, tokens, Some(crate::featstore::Labels { n_classes: 2, ids: vec![0, 1, 1] })).unwrap();
    let symf = set.to_bytes().and_then(|b| FeatureSet::from_reader(b.as_slice()).map(|s| (b, s)));
    let symf_ok = matches!(&symf, Ok((b, s)) if *s == set && s.to_bytes().ok().as_ref() == Some(b));

    let cfg = random_config(&mut rng);
    let p = ModelParams::<f32>::init(&cfg, false, &mut rng).unwrap();
    let ck = Checkpoint {
        entries: p.tensors().clone(),
        config: "seed = 3\n".into(),
    };
    let symc = ck.to_bytes().and_then(|b| Checkpoint::from_bytes(&b).map(|c| (b, c)));
    let symc_ok = matches!(&symc, Ok((b, c)) if *c == ck && c.to_bytes().ok().as_ref() == Some(b));
    vec![
        check("SYMF round trip", symf_ok, "bytes and values identical"),
        check("SYMC round trip", symc_ok, "bytes and values identical"),
    ]
}

fn attention_check(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..5 {
        let cfg = random_config(&mut rng);
        let p = random_params(&cfg, false, &mut rng).cast::<f32>();
        let np = rng.random_range(1..=6);
        let patches = rand_tensor(&mut rng, &[np, cfg.d_t], 1.0).cast::<f32>();
        let seq = crate::seqgen::generate(&p, &DiscretizeSpec::default(), 0.5, &patches, crate::seqgen::Sampling::Eval).unwrap();
        for a in &seq.attn {
            for row in a.data().chunks(np) {
                worst = worst.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    check("attention rows", worst < 1e-5, format!("max |sum - 1| {worst:.2e}"))
}

/// The full suite. `quick` shrinks the sampling checks.
pub fn run_all(quick: bool) -> Vec<Check> {
    let mut out = gradient_suite(5, 0);
    let draws = if quick { 20_000 } else { 100_000 };
    let tv = gumbel_max_tv(10, draws, 16, 1);
    let tol = if quick { 0.025 } else { GUMBEL_TV_TOL };
    out.push(check("gumbel-max frequencies", tv < tol, format!("max TV {tv:.4} over 10 vectors x {draws} draws (< {tol})")));
    let bad = vq_mismatches(1000, 32, 8, 2);
    out.push(check("vq nearest code", bad == 0, format!("{bad} of 1000 instances disagree with exhaustive search")));
    out.extend(loss_checks(3));
    out.extend(ema_center_checks(4));
    out.extend(format_checks(5));
    out.push(attention_check(6));
    out
}
