//! Acceptance run: one PASS/FAIL line per criterion, written straight to
//! stderr so the lines show up even when the harness captures output.
//!
//! Reference values come from oracles written here, independent of the
//! library code paths they check.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symdistill::config::RunConfig;
use symdistill::discretize::{gumbel_discretize, vq_discretize};
use symdistill::featstore::{read_features, write_features, FeatureSet};
use symdistill::interpret::{attention_maps, export_pgm, Heads};
use symdistill::loss::{ssl_loss, update_center, LossSpec};
use symdistill::netcore::checkpoint::Checkpoint;
use symdistill::netcore::{ema_update, ModelParams, TensorMap};
use symdistill::probe::{extract_embeddings, knn_probe, subsequence_report, Representation};
use symdistill::selfcheck::gradient_suite;
use symdistill::seqgen::{generate_batch, Sampling};
use symdistill::synth::{point_clusters, PointClusterSpec};
use symdistill::tensor::Tensor;
use symdistill::trainer::{train, TrainOptions, TrainOutcome, TrainState};

// Pinned tolerances.
const GRAD_REL_ERR: f64 = 1e-4;
const GRAD_SECONDS: f64 = 300.0;
const GUMBEL_DRAWS: usize = 100_000;
const GUMBEL_TV: f64 = 0.01;
const LOSS_ABS: f64 = 1e-10;
const LOSS_DROP: f64 = 0.30;
const KNN_TOP1: f64 = 80.0;
const PREFIX_SLACK: f64 = 2.0;
const EXPLORE_MARGIN: f64 = 0.01;
const ATTN_ROW: f64 = 1e-5;
const E2E_SECONDS: f64 = 900.0;

/// Ten-cluster run at default widths. Only the criterion's named settings
/// and the feature width are given; warmup is shortened to fit 30 epochs.
const E2E_DEFAULT: &str = "\
vocab_size = 128
seq_len = 8
d_t = 64
discretize = gumbel
strategy = base
epochs = 30
batch_size = 64
warmup_epochs = 3
eval_every_epochs = 10
knn_k = 20
";

/// Narrower variant for the repeated runs of the determinism and exploration
/// checks, which do not depend on width.
const E2E_SMALL: &str = "\
d_model = 64
dec_depth = 2
proj_hidden = 256
proj_bottleneck = 64
n_prototypes = 256
";
const EXPLORE_EPOCHS: usize = 10;

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn emit(l: &Line) {
    let tag = if l.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {} {}: {}", l.id, l.name, l.detail);
}

fn line(id: &'static str, name: &'static str, pass: bool, detail: String) -> Line {
    let l = Line { id, name, pass, detail };
    emit(&l);
    l
}

// ---------------------------------------------------------------- oracles

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn first_max<T: PartialOrd + Copy>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Cosine kNN with `exp(sim / t)` votes; ties go to the lower index.
fn knn_top1(train: &Tensor<f32>, ty: &[u32], eval: &Tensor<f32>, ey: &[u32], k: usize, t: f64, classes: usize) -> f64 {
    let unit = |r: &[f32]| -> Vec<f64> {
        let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        r.iter().map(|&x| x as f64 / n).collect()
    };
    let tr: Vec<Vec<f64>> = (0..train.rows()).map(|i| unit(train.row(i))).collect();
    let mut hits = 0;
    for e in 0..eval.rows() {
        let q = unit(eval.row(e));
        let sims: Vec<f64> = tr.iter().map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        let mut votes = vec![0f64; classes];
        for &j in &idx[..k] {
            votes[ty[j] as usize] += (sims[j] / t).exp();
        }
        hits += usize::from(first_max(&votes) == ey[e] as usize);
    }
    100.0 * hits as f64 / eval.rows() as f64
}

/// Minimal binary PGM (P5) parser: `(width, height, maxval, pixels)`.
fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.to_string());
    }
    if fields[0] != "P5" {
        return None;
    }
    let (w, h, max): (usize, usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?, fields[3].parse().ok()?);
    let pix = bytes.get(i + 1..)?.to_vec();
    (pix.len() == w * h && max <= 255).then_some((w, h, max, pix))
}

// ---------------------------------------------------------------- criteria

fn c1_gradients() -> Line {
    let t = Instant::now();
    let checks = gradient_suite(5, 2024);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let detail = checks.iter().map(|c| format!("{} [{}]", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    line(
        "1",
        "gradient suite",
        failed.is_empty() && secs < GRAD_SECONDS,
        format!("{} ops, 5 configs each, rel err < {GRAD_REL_ERR:e}, {secs:.1}s (< {GRAD_SECONDS}s); {detail}", checks.len()),
    )
}

fn c2_gumbel() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    for _ in 0..10 {
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = softmax(&logits);
        let mut counts = [0usize; 16];
        for _ in 0..GUMBEL_DRAWS {
            let soft = gumbel_discretize(&logits, 1.0, &mut rng).unwrap();
            counts[first_max(&soft)] += 1;
        }
        let tv = 0.5 * counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / GUMBEL_DRAWS as f64 - q).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    line("2", "gumbel-max exactness", worst < GUMBEL_TV, format!("max TV {worst:.5} (< {GUMBEL_TV}) over 10 vectors, A=16, {GUMBEL_DRAWS} draws"))
}

fn c3_vq() -> Line {
    let (a, d) = (32, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut mismatch, mut ties) = (0, 0);
    for inst in 0..1000 {
        let mut codes: Vec<f64> = (0..a * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // copy a lower code onto a higher slot; half the time query at that code
        let lo = rng.random_range(0..a - 1);
        let hi = rng.random_range(lo + 1..a);
        let src = codes[lo * d..(lo + 1) * d].to_vec();
        codes[hi * d..(hi + 1) * d].copy_from_slice(&src);
        let z: Vec<f64> = if inst % 2 == 0 { src.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect() } else { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let dist: Vec<f64> = (0..a).map(|i| (0..d).map(|j| (z[j] - codes[i * d + j]).powi(2)).sum()).collect();
        let mut best = 0;
        for i in 1..a {
            if dist[i] < dist[best] {
                best = i;
            }
        }
        ties += usize::from(best == lo);
        let cb = Tensor::from_vec(&[a, d], codes).unwrap();
        let got = vq_discretize(&z, &cb, 0.25).unwrap();
        mismatch += usize::from(got.id != best || got.quantized.as_slice() != cb.row(best));
    }
    line("3", "vq oracle", mismatch == 0, format!("{mismatch} mismatches in 1000 instances (A=32, d=8), {ties} resolved across a duplicated code"))
}

fn c4_loss() -> Line {
    let (v, dg, k) = (2, 4, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = LossSpec { granularity_lambda: 0.8, ..Default::default() };
    let mut worst = 0f64;
    for _ in 0..50 {
        let teacher: Vec<Vec<f64>> = (0..v).map(|_| softmax(&(0..k).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>())).collect();
        let student: Vec<Vec<Vec<f64>>> = (0..v).map(|_| (0..dg).map(|_| (0..k).map(|_| rng.random_range(-4.0..4.0)).collect()).collect()).collect();
        let got = ssl_loss(&teacher, &student, &spec).unwrap().total;
        let z: f64 = (1..=dg).map(|j| 0.8f64.powi(j as i32)).sum();
        let mut want = 0.0;
        for i in 0..v {
            for (j, s) in student[i].iter().enumerate() {
                let scaled: Vec<f64> = s.iter().map(|x| x / spec.student_temp).collect();
                let ls = log_softmax(&scaled);
                want += 0.8f64.powi(j as i32 + 1) / z * -teacher[i].iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>();
            }
        }
        worst = worst.max((got - want).abs());
    }
    let uniform = ssl_loss(&[vec![1.0 / k as f64; k]], &[vec![vec![0.0; k]]], &LossSpec::default()).unwrap().total;
    let exact = uniform == (k as f64).ln();
    line(
        "4",
        "loss oracle",
        worst < LOSS_ABS && exact,
        format!("max |diff| {worst:.2e} (< {LOSS_ABS:e}) over 50 draws V=2 D=4 K=64; uniform case {uniform} vs ln 64 = {} ({})", (k as f64).ln(), if exact { "exact" } else { "inexact" }),
    )
}

fn c5_ema_center() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut tensor = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()).unwrap()
    };
    let t: TensorMap<f64> = [("a".to_string(), tensor(&[4, 5])), ("b".to_string(), tensor(&[7]))].into();
    let s: TensorMap<f64> = [("a".to_string(), tensor(&[4, 5])), ("b".to_string(), tensor(&[7]))].into();
    let center: Vec<f64> = tensor(&[6]).data().to_vec();
    let batch = tensor(&[5, 6]);
    let mut ok = true;
    for lambda in [0.0, 0.5, 1.0] {
        let got = ema_update(&t, &s, lambda).unwrap();
        for (name, tt) in &t {
            let want: Vec<f64> = match lambda {
                0.0 => s[name].data().to_vec(),
                1.0 => tt.data().to_vec(),
                _ => tt.data().iter().zip(s[name].data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect(),
            };
            ok &= got[name].data().iter().zip(&want).all(|(g, w)| g.to_bits() == w.to_bits());
        }
    }
    for m in [0.0, 0.9, 1.0] {
        let got = update_center(&center, &batch, m).unwrap();
        for (j, g) in got.iter().enumerate() {
            let mean = (0..5).map(|r| batch.row(r)[j]).fold(0.0, |a, x| a + x) * (1.0 / 5.0);
            let want = match m {
                0.0 => mean,
                1.0 => center[j],
                _ => 0.9 * center[j] + (1.0 - 0.9) * mean,
            };
            ok &= g.to_bits() == want.to_bits();
        }
    }
    line("5", "ema/centering exactness", ok, "lambda in {0, 0.5, 1}, m in {0, 0.9, 1}, compared bitwise at f64".into())
}

struct E2e {
    train: FeatureSet,
    eval: FeatureSet,
    cfg: RunConfig,
    run: TrainOutcome,
    base_e10: ModelParams<f32>,
}

fn data() -> (FeatureSet, FeatureSet) {
    let spec = |n, seed| PointClusterSpec { n_samples: n, n_classes: 10, d_t: 64, n_views: 2, grid: (2, 2), seed, layout_seed: Some(0), ..Default::default() };
    (point_clusters(&spec(600, 1)).unwrap(), point_clusters(&spec(200, 2)).unwrap())
}

fn config(out: &Path, strategy: &str, small: bool) -> RunConfig {
    let text = E2E_DEFAULT.replace("strategy = base\n", &format!("strategy = {strategy}\n"));
    let extra = if small { E2E_SMALL } else { "" };
    RunConfig::parse(&format!("{text}{extra}out_dir = {}\n", out.display())).unwrap()
}

fn c6_determinism(root: &Path) -> (Line, E2e) {
    let (train_set, eval_set) = data();
    let dir = root.join("base");
    let cfg = config(&dir, "base", true);
    let quiet = TrainOptions::default();

    let first = train(&cfg, &train_set, Some(&eval_set), &quiet).unwrap();
    let metrics_a = std::fs::read(dir.join("metrics.csv")).unwrap();
    let ckpt_a = std::fs::read(dir.join("final.symc")).unwrap();
    let (_, e10) = TrainState::from_checkpoint(&Checkpoint::read(dir.join("checkpoint_e0010.symc")).unwrap()).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();

    train(&cfg, &train_set, Some(&eval_set), &quiet).unwrap();
    let metrics_b = std::fs::read(dir.join("metrics.csv")).unwrap();
    let ckpt_b = std::fs::read(dir.join("final.symc")).unwrap();
    let same = metrics_a == metrics_b && ckpt_a == ckpt_b;
    let l = line(
        "6",
        "determinism",
        same,
        format!(
            "two seeded 30-epoch runs (narrow widths): metrics.csv {} ({} bytes), final.symc {} ({} bytes)",
            if metrics_a == metrics_b { "identical" } else { "DIFFER" },
            metrics_a.len(),
            if ckpt_a == ckpt_b { "identical" } else { "DIFFER" },
            ckpt_a.len()
        ),
    );
    (
        l,
        E2e {
            train: train_set,
            eval: eval_set,
            cfg,
            run: first,
            base_e10: e10.params,
        },
    )
}

fn c7_end_to_end(root: &Path, e: &E2e) -> (Line, TrainOutcome, RunConfig) {
    let cfg = config(&root.join("default"), "base", false);
    let t = Instant::now();
    let run = train(&cfg, &e.train, Some(&e.eval), &TrainOptions::default()).unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let losses: Vec<f64> = run.metrics.iter().map(|m| m.loss as f64).collect();
    let steps_per_epoch = losses.len() / cfg.train.epochs;
    let start = losses[..10].iter().sum::<f64>() / 10.0;
    let end_slice = &losses[losses.len() - steps_per_epoch..];
    let end = end_slice.iter().sum::<f64>() / end_slice.len() as f64;
    let drop = 1.0 - end / start;

    let p = &run.state.params;
    let spec = &cfg.discretize;
    let tr = extract_embeddings(p, spec, &e.train, Representation::StudentPooled, None).unwrap();
    let ev = extract_embeddings(p, spec, &e.eval, Representation::StudentPooled, None).unwrap();
    let (ty, ey) = (&e.train.labels().unwrap().ids, &e.eval.labels().unwrap().ids);
    let oracle = knn_top1(&tr, ty, &ev, ey, 20, 0.07, 10);
    let lib = knn_probe(p, spec, &e.train, &e.eval, Representation::StudentPooled, None, &[20], 0.07).unwrap().rows[0].top1;
    let sub = subsequence_report(p, spec, &e.train, &e.eval, 20, 0.07).unwrap();
    let top = |n: usize| sub.rows.iter().find(|r| r.prefix_n == Some(n)).unwrap().top1;
    let (p1, p8) = (top(1), top(8));

    let a = drop >= LOSS_DROP;
    let b = oracle >= KNN_TOP1 && (oracle - lib).abs() < 1e-9;
    let c = p8 >= p1 - PREFIX_SLACK;
    let fast = seconds < E2E_SECONDS;
    let trend: Vec<String> = sub.rows.iter().map(|r| format!("{}:{:.1}", r.prefix_n.unwrap(), r.top1)).collect();
    let l = line(
        "7",
        "synthetic end-to-end",
        a && b && c && fast,
        format!(
            "(a) loss {start:.3} -> {end:.3}, drop {:.1}% (>= {:.0}%) {}; (b) kNN top1 {oracle:.1}% oracle / {lib:.1}% probe (>= {KNN_TOP1}%) {}; (c) prefix top1 [{}] 8 vs 1: {p8:.1} >= {p1:.1} - {PREFIX_SLACK} {}; run {:.0}s (< {E2E_SECONDS}s)",
            100.0 * drop,
            100.0 * LOSS_DROP,
            ok(a),
            ok(b),
            trend.join(" "),
            ok(c),
            seconds
        ),
    );
    (l, run, cfg)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

/// Mean entropy of `softmax(logits)` over positions and eval samples, with
/// deterministic decoding.
fn logit_entropy(p: &ModelParams<f32>, cfg: &RunConfig, set: &FeatureSet) -> f64 {
    let idx: Vec<usize> = (0..set.n_samples()).collect();
    let (_, patches) = set.gather_view(&idx, 0).unwrap();
    let (seqs, _) = generate_batch(p, &cfg.discretize, cfg.discretize.tau_end, &patches, idx.len(), Sampling::Eval, false).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for s in &seqs {
        for t in 0..s.logits.rows() {
            let row: Vec<f64> = s.logits.row(t).iter().map(|&x| x as f64).collect();
            total += entropy(&softmax(&row));
            n += 1;
        }
    }
    total / n as f64
}

fn c8_exploration(root: &Path, e: &E2e) -> Line {
    let opts = TrainOptions { stop_after_epochs: Some(EXPLORE_EPOCHS), progress: false };
    let info = train(&config(&root.join("info"), "info", true), &e.train, None, &opts).unwrap();
    let ent_cfg = config(&root.join("entropy"), "entropy", true);
    let ent = train(&ent_cfg, &e.train, None, &opts).unwrap();

    let steps = info.metrics.len();
    let mean = |m: &[symdistill::trainer::StepMetrics]| m[..steps].iter().map(|x| x.seq_info as f64).sum::<f64>() / steps as f64;
    let (base_info, info_info) = (mean(&e.run.metrics), mean(&info.metrics));
    let base_h = logit_entropy(&e.base_e10, &e.cfg, &e.eval);
    let ent_h = logit_entropy(&ent.state.params, &ent_cfg, &e.eval);
    let a = info_info - base_info > EXPLORE_MARGIN;
    let b = ent_h - base_h > EXPLORE_MARGIN;
    line(
        "8",
        "exploration terms",
        a && b,
        format!(
            "first {steps} steps: mean seq_info info {info_info:.4} vs base {base_info:.4} {}; epoch {EXPLORE_EPOCHS} eval logit entropy entropy {ent_h:.4} vs base {base_h:.4} {} (margin > {EXPLORE_MARGIN})",
            ok(a),
            ok(b)
        ),
    )
}

fn c9_formats(root: &Path, e: &E2e, run: &TrainOutcome, cfg: &RunConfig) -> Line {
    let dir = root.join("formats");
    std::fs::create_dir_all(&dir).unwrap();
    let f = dir.join("eval.symf");
    write_features(&e.eval, &f).unwrap();
    let back = read_features(&f).unwrap();
    let mut again = Vec::new();
    again.extend(back.to_bytes().unwrap());
    let symf = std::fs::read(&f).unwrap() == again && back.tokens().iter().zip(e.eval.tokens()).all(|(a, b)| a.to_bits() == b.to_bits());

    let ck_path = &run.checkpoint;
    let ck = Checkpoint::read(ck_path).unwrap();
    let c2 = dir.join("copy.symc");
    ck.write(&c2).unwrap();
    let symc = std::fs::read(ck_path).unwrap() == std::fs::read(&c2).unwrap()
        && Checkpoint::read(&c2).unwrap().entries.iter().zip(&ck.entries).all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let p = &run.state.params;
    let mut worst_row = 0f64;
    let mut pgm_ok = true;
    let mut n_maps = 0;
    for sample in 0..10 {
        for heads in [Heads::Mean, Heads::Single(0)] {
            let maps = attention_maps(p, &cfg.discretize, &e.eval, sample, 0, heads).unwrap();
            for m in maps {
                let s: f64 = m.weights.iter().map(|&w| w as f64).sum();
                worst_row = worst_row.max((s - 1.0).abs());
                let path = dir.join(format!("m{sample}_{}.pgm", m.position));
                export_pgm(&m, 4, &path).unwrap();
                pgm_ok &= matches!(parse_pgm(&std::fs::read(&path).unwrap()), Some((w, h, 255, _)) if w == m.grid_w * 4 && h == m.grid_h * 4);
                n_maps += 1;
            }
        }
    }
    // every head and layer, straight from generation
    let (_, patches) = e.eval.gather_view(&(0..20).collect::<Vec<_>>(), 0).unwrap();
    let (seqs, _) = generate_batch(p, &cfg.discretize, cfg.discretize.tau_end, &patches, 20, Sampling::Eval, false).unwrap();
    for s in &seqs {
        for layer in &s.attn {
            let np = layer.shape()[2];
            for row in layer.data().chunks(np) {
                worst_row = worst_row.max((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    let rows = worst_row <= ATTN_ROW;
    line(
        "9",
        "interchange formats",
        symf && symc && pgm_ok && rows,
        format!("SYMF bitwise {}; SYMC bitwise {}; {n_maps} PGMs parsed by independent P5 reader {}; max |attention row sum - 1| {worst_row:.2e} (<= {ATTN_ROW:e}) {}", ok(symf), ok(symc), ok(pgm_ok), ok(rows)),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut lines = vec![c1_gradients(), c2_gumbel(), c3_vq(), c4_loss(), c5_ema_center()];
    let (l6, e2e) = c6_determinism(root);
    lines.push(l6);
    let (l7, run, cfg) = c7_end_to_end(root, &e2e);
    lines.push(l7);
    lines.push(c8_exploration(root, &e2e));
    lines.push(c9_formats(root, &e2e, &run, &cfg));
    let _ = writeln!(
        std::io::stderr(),
        "[SKIP] criterion 10 long-run reproduction: needs externally extracted CIFAR-10 ViT-B/16 features; documented, not gating"
    );
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    let _ = writeln!(std::io::stderr(), "acceptance: {}/{} criteria passed", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
