//! The training loop: batching, schedules, AdamW with global-norm clipping,
//! the EMA teacher head, centering, metrics, periodic kNN probing and
//! checkpoints.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose,
//! index)`, so a run resumed from a checkpoint replays exactly the draws of
//! an uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::discretize::{schedule_tau, DiscretizeKind};
use crate::error::{invalid, shape, Error, Result};
use crate::featstore::FeatureSet;
use crate::loss::{ssl_loss_node, teacher_distribution, total_loss_node, update_center, view_pairs};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::layers::projector;
use crate::netcore::{ModelParams, TensorMap, TEACHER_HEAD};
use crate::probe::{knn_probe, Representation};
use crate::seqgen::{draw_noise, embed_prefix_nodes, entropy_node, info_node, unroll};
use crate::tensor::{entropy, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// The cosine learning-rate schedule ends at `lr_base * LR_FLOOR`.
pub const LR_FLOOR: f64 = 1e-2;

pub const METRICS_HEADER: &str = "step,loss,ssl,teacher_entropy,kl_teacher_student,seq_entropy,seq_info,tau,lr,ema_lambda";
pub const PROBE_HEADER: &str = "epoch,step,k,top1,top5";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub seed: u64,
    /// 0 probes and checkpoints only at the end.
    pub eval_every_epochs: usize,
    pub knn_temp: f64,
    pub knn_k: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 140,
            batch_size: 64,
            lr_base: 5e-4,
            warmup_epochs: 10,
            weight_decay: 0.04,
            clip_norm: 2.0,
            ema_start: 0.996,
            ema_end: 1.0,
            seed: 0,
            eval_every_epochs: 10,
            knn_temp: 0.07,
            knn_k: vec![10, 20],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip_norm must be positive"));
        }
        for x in [self.ema_start, self.ema_end] {
            if !(0.0..=1.0).contains(&x) {
                return Err(invalid(format!("ema value {x} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_base` over `warmup_steps`, then cosine decay
/// to `lr_base * LR_FLOOR` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_base: f64) -> f64 {
    if step < warmup_steps {
        return lr_base * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return lr_base;
    }
    let end = lr_base * LR_FLOOR;
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    end + (lr_base - end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Cosine increase of the EMA decay from `start` to `end`.
pub fn ema_lambda_at(step: usize, total_steps: usize, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    let progress = step as f64 / total_steps as f64;
    end - (end - start) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Independent generator for `purpose` and `index` under `seed`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 56) ^ index);
    r
}

/// Mutable training state; everything a checkpoint stores besides the config.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub center: Vec<f32>,
    pub opt_m: TensorMap<f32>,
    pub opt_v: TensorMap<f32>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<TrainState> {
        let params = ModelParams::init(&cfg.model, cfg.vq_head(), &mut stream_rng(cfg.train.seed, STREAM_INIT, 0))?;
        let zeros: TensorMap<f32> = params
            .student_names()
            .into_iter()
            .map(|n| {
                let z = Tensor::zeros(params.get(&n).shape());
                (n, z)
            })
            .collect();
        Ok(TrainState {
            center: vec![0.0; cfg.model.n_prototypes],
            opt_m: zeros.clone(),
            opt_v: zeros,
            params,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint {
            entries: self.params.tensors().clone(),
            config: cfg.to_text(),
        };
        ck.insert("center", Tensor::row_vector(self.center.clone()));
        for (n, t) in &self.opt_m {
            ck.insert(format!("opt.m.{n}"), t.clone());
        }
        for (n, t) in &self.opt_v {
            ck.insert(format!("opt.v.{n}"), t.clone());
        }
        ck.insert("opt.step", encode_u64(self.step as u64));
        ck.insert("rng.seed", encode_u64(cfg.train.seed));
        ck
    }

    /// Restores the state and the configuration it was trained with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, TrainState)> {
        let cfg = RunConfig::parse(&ck.config)?;
        let seed = decode_u64(ck.get("rng.seed")?)?;
        if seed != cfg.train.seed {
            return Err(Error::Checkpoint(format!("rng.seed {seed} differs from config seed {}", cfg.train.seed)));
        }
        let step = decode_u64(ck.get("opt.step")?)? as usize;
        let mut params_map = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (name, t) in &ck.entries {
            if let Some(n) = name.strip_prefix("opt.m.") {
                opt_m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                opt_v.insert(n.to_string(), t.clone());
            } else if !matches!(name.as_str(), "center" | "opt.step" | "rng.seed") {
                params_map.insert(name.clone(), t.clone());
            }
        }
        let params = ModelParams::from_tensors(&cfg.model, cfg.vq_head(), params_map)?;
        for n in params.student_names() {
            for (which, map) in [("m", &opt_m), ("v", &opt_v)] {
                let t = map
                    .get(&n)
                    .ok_or_else(|| Error::Checkpoint(format!("missing entry opt.{which}.{n}")))?;
                if t.shape() != params.get(&n).shape() {
                    return Err(Error::Checkpoint(format!("opt.{which}.{n} has the wrong shape")));
                }
            }
        }
        let center = ck.get("center")?.data().to_vec();
        if center.len() != cfg.model.n_prototypes {
            return Err(Error::Checkpoint("center has the wrong length".into()));
        }
        Ok((
            cfg,
            TrainState {
                params,
                center,
                opt_m,
                opt_v,
                step,
            },
        ))
    }
}

/// A u64 as four exact 16-bit chunks, least significant first.
fn encode_u64(x: u64) -> Tensor<f32> {
    Tensor::row_vector((0..4).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect())
}

fn decode_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.len() != 4 {
        return Err(Error::Checkpoint("integer entry must hold four chunks".into()));
    }
    let mut x = 0u64;
    for (i, &c) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("bad integer chunk {c}")));
        }
        x |= (c as u64) << (16 * i);
    }
    Ok(x)
}

/// Loads a checkpoint's configuration and parameters.
pub fn load_model(path: impl AsRef<Path>) -> Result<(RunConfig, ModelParams<f32>)> {
    let ck = Checkpoint::read(path)?;
    let (cfg, state) = TrainState::from_checkpoint(&ck)?;
    Ok((cfg, state.params))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub ssl: f32,
    pub teacher_entropy: f32,
    pub kl_teacher_student: f32,
    pub seq_entropy: f32,
    pub seq_info: f32,
    pub tau: f64,
    pub lr: f64,
    pub ema_lambda: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.ssl,
            self.teacher_entropy,
            self.kl_teacher_student,
            self.seq_entropy,
            self.seq_info,
            self.tau,
            self.lr,
            self.ema_lambda
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub step: usize,
    pub k: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
    /// Per-epoch progress on stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub probes: Vec<ProbeRecord>,
    pub state: TrainState,
}

/// Trains from scratch into `cfg.out_dir`.
pub fn train(cfg: &RunConfig, train: &FeatureSet, eval: Option<&FeatureSet>, opts: &TrainOptions) -> Result<TrainOutcome> {
    let state = TrainState::init(cfg)?;
    run(cfg, state, train, eval, opts)
}

/// Continues a run from a checkpoint. When `cfg` is given, it must agree with
/// the checkpointed configuration in everything but paths.
pub fn resume(
    ckpt: impl AsRef<Path>,
    cfg: Option<&RunConfig>,
    train: &FeatureSet,
    eval: Option<&FeatureSet>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let ck = Checkpoint::read(ckpt)?;
    let (saved, state) = TrainState::from_checkpoint(&ck)?;
    let cfg = match cfg {
        Some(c) => {
            if c.without_paths() != saved.without_paths() {
                return Err(Error::Config("configuration differs from the checkpoint".into()));
            }
            c.clone()
        }
        None => saved,
    };
    run(&cfg, state, train, eval, opts)
}

fn check_features(cfg: &RunConfig, set: &FeatureSet, what: &str) -> Result<()> {
    if set.d_t() != cfg.model.d_t {
        return Err(shape(format!("{what} features have d_t {}, model expects {}", set.d_t(), cfg.model.d_t)));
    }
    Ok(())
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Keeps the header and rows of `path` whose step is below `step`, creating
/// the file with `header` if needed.
fn prepare_log(path: &Path, header: &str, keep_below: usize, step_col: usize) -> Result<()> {
    let mut out = format!("{header}\n");
    if keep_below > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let s: Option<usize> = line.split(',').nth(step_col).and_then(|x| x.parse().ok());
                if s.is_some_and(|s| s < keep_below) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn run(cfg: &RunConfig, mut state: TrainState, train: &FeatureSet, eval: Option<&FeatureSet>, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    check_features(cfg, train, "training")?;
    if let Some(e) = eval {
        check_features(cfg, e, "eval")?;
    }
    if cfg.loss.cross_view && train.n_views() < 2 {
        return Err(invalid("cross_view needs at least two views"));
    }
    let n = train.n_samples();
    let spe = steps_per_epoch(n, cfg.train.batch_size);
    let total = cfg.train.epochs * spe;
    let stop_epoch = opts.stop_after_epochs.map_or(cfg.train.epochs, |e| e.min(cfg.train.epochs));
    if state.step > total || state.step % spe != 0 {
        return Err(Error::Checkpoint(format!("checkpoint step {} does not fit this run", state.step)));
    }

    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let metrics_path = out.join("metrics.csv");
    let probe_path = out.join("probe.csv");
    prepare_log(&metrics_path, METRICS_HEADER, state.step, 0)?;
    prepare_log(&probe_path, PROBE_HEADER, state.step + 1, 1)?;

    let mut metrics = Vec::new();
    let mut probes = Vec::new();
    let mut ckpt_path = out.join("final.symc");
    let start_epoch = state.step / spe;
    for epoch in start_epoch..stop_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.train.seed, STREAM_SHUFFLE, epoch as u64));
        for batch in order.chunks(cfg.train.batch_size) {
            let m = train_step(cfg, &mut state, train, batch, epoch, spe, total).inspect_err(|e| {
                if let Error::Diverged { diagnostic, .. } = e {
                    let _ = fs::write(out.join("diverged.txt"), diagnostic);
                }
            })?;
            append(&metrics_path, &m.csv_row())?;
            metrics.push(m);
        }
        let done = epoch + 1;
        let last = done == cfg.train.epochs;
        let periodic = cfg.train.eval_every_epochs > 0 && done % cfg.train.eval_every_epochs == 0;
        if periodic || last || done == stop_epoch {
            if let Some(ev) = eval.filter(|e| e.labels().is_some() && train.labels().is_some()) {
                let ks: Vec<usize> = cfg.train.knn_k.iter().map(|&k| k.min(n)).collect();
                let r = knn_probe(&state.params, &cfg.discretize, train, ev, Representation::StudentPooled, None, &ks, cfg.train.knn_temp)?;
                for row in r.rows {
                    let rec = ProbeRecord {
                        epoch: done,
                        step: state.step,
                        k: row.k.unwrap_or(0),
                        top1: row.top1,
                        top5: row.top5,
                    };
                    append(&probe_path, &format!("{},{},{},{:.2},{:.2}", rec.epoch, rec.step, rec.k, rec.top1, rec.top5))?;
                    probes.push(rec);
                }
            }
            let ck = state.to_checkpoint(cfg);
            ckpt_path = if last { out.join("final.symc") } else { out.join(format!("checkpoint_e{done:04}.symc")) };
            ck.write(&ckpt_path)?;
        }
        if opts.progress {
            let last_m = metrics.last();
            eprintln!(
                "epoch {done}/{} step {} loss {} knn {}",
                cfg.train.epochs,
                state.step,
                last_m.map(|m| m.loss.to_string()).unwrap_or_default(),
                probes.last().filter(|p| p.epoch == done).map(|p| format!("{:.2}", p.top1)).unwrap_or_else(|| "-".into())
            );
        }
    }
    if start_epoch >= stop_epoch {
        ckpt_path = out.join(if stop_epoch == cfg.train.epochs { "final.symc".to_string() } else { format!("checkpoint_e{stop_epoch:04}.symc") });
        state.to_checkpoint(cfg).write(&ckpt_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics,
        probes,
        state,
    })
}

fn student_prefixes() -> [&'static str; 4] {
    ["tokemb", "dec.", "enc.", "proj_s."]
}

/// Whether a parameter receives decoupled weight decay: weight matrices and
/// the token table, not biases, norms or positional rows.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") || name == "tokemb"
}

fn train_step(
    cfg: &RunConfig,
    state: &mut TrainState,
    set: &FeatureSet,
    idx: &[usize],
    epoch: usize,
    spe: usize,
    total: usize,
) -> Result<StepMetrics> {
    let step = state.step;
    let mc = &cfg.model;
    let (b, v) = (idx.len(), set.n_views());
    let rows = b * v;
    let tau = schedule_tau(&cfg.discretize, step, total)?;
    let lr = lr_at(step, total, cfg.train.warmup_epochs * spe, cfg.train.lr_base);
    let ema = ema_lambda_at(step, total, cfg.train.ema_start, cfg.train.ema_end);
    let t_temp = cfg.loss.teacher_temp_at(step as f64 / spe as f64);

    // view-major stacking: row v * b + i is view v of sample idx[i]
    let mut globals = Vec::with_capacity(rows * mc.d_t);
    let mut patches = Vec::with_capacity(rows * set.n_patches() * mc.d_t);
    for vi in 0..v {
        let (g, p) = set.gather_view(idx, vi)?;
        globals.extend_from_slice(g.data());
        patches.extend_from_slice(p.data());
    }
    let globals = Tensor::from_vec(&[rows, mc.d_t], globals)?;
    let patches = Tensor::from_vec(&[rows * set.n_patches(), mc.d_t], patches)?;

    // teacher
    let teacher_logits = {
        let mut g = Graph::<f32>::new();
        let p = state.params.bind(&mut g, &[TEACHER_HEAD], false);
        let x = g.constant(globals);
        let y = projector(&mut g, &p, TEACHER_HEAD, mc, x);
        g.value(y).clone()
    };
    let mut teacher = Vec::with_capacity(v);
    let mut t_entropy = 0f64;
    for vi in 0..v {
        let mut pt = Tensor::zeros(&[b, mc.n_prototypes]);
        for i in 0..b {
            let p = teacher_distribution(teacher_logits.row(vi * b + i), &state.center, t_temp)?;
            t_entropy += entropy(&p) as f64;
            pt.row_mut(i).copy_from_slice(&p);
        }
        teacher.push(pt);
    }
    t_entropy /= rows as f64;

    // student
    let mut g = Graph::<f32>::new();
    let p = state.params.bind(&mut g, &student_prefixes(), true);
    let pv = g.constant(patches);
    let noise = if cfg.discretize.kind == DiscretizeKind::Gumbel {
        Some(draw_noise(&mut stream_rng(cfg.train.seed, STREAM_NOISE, step as u64), mc.seq_len, rows, mc.vocab_size))
    } else {
        None
    };
    let u = unroll(&mut g, &p, mc, &cfg.discretize, tau, pv, rows, noise.as_deref(), false);
    let nodes = embed_prefix_nodes(&mut g, &p, mc, &u.fed, rows)?;
    let mut per_view: Vec<Vec<Var>> = Vec::with_capacity(v);
    for vi in 0..v {
        let sel: Vec<usize> = (vi * b..(vi + 1) * b).collect();
        let mut grans: Vec<Var> = Vec::with_capacity(nodes.proj.len() + 1);
        for &q in &nodes.proj {
            grans.push(if v == 1 { q } else { g.select_rows(q, &sel) });
        }
        if cfg.loss.aggregate_term {
            grans.push(if v == 1 { nodes.aggregated } else { g.select_rows(nodes.aggregated, &sel) });
        }
        per_view.push(grans);
    }
    let (ssl, _) = ssl_loss_node(&mut g, &teacher, &per_view, &cfg.loss)?;
    let (h, info) = if u.relaxed.is_empty() {
        (None, None)
    } else {
        (Some(entropy_node(&mut g, &u.relaxed, rows)), Some(info_node(&mut g, &u.relaxed, rows)))
    };
    let total_loss = total_loss_node(&mut g, ssl, h, info, u.vq_aux, &cfg.loss, epoch);

    let val = |g: &Graph<f32>, x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
    let loss_v = val(&g, Some(total_loss));
    let ssl_v = val(&g, Some(ssl));
    let n_pairs = view_pairs(v, cfg.loss.cross_view)?.len();
    let mut m = StepMetrics {
        step,
        loss: loss_v,
        ssl: ssl_v,
        teacher_entropy: t_entropy as f32,
        kl_teacher_student: (ssl_v as f64 / n_pairs as f64 - t_entropy) as f32,
        seq_entropy: val(&g, h),
        seq_info: val(&g, info),
        tau,
        lr,
        ema_lambda: ema,
        grad_norm: 0.0,
    };
    let diverged = |m: &StepMetrics, what: &str| Error::Diverged {
        step,
        diagnostic: format!(
            "{what}\nepoch {epoch} batch of {b} samples x {v} views\nloss {} ssl {} teacher_entropy {} seq_entropy {} seq_info {}\ntau {} lr {} ema {} teacher temp {}\nmax |teacher logit| {}\ngrad norm {}\n",
            m.loss,
            m.ssl,
            m.teacher_entropy,
            m.seq_entropy,
            m.seq_info,
            tau,
            lr,
            ema,
            t_temp,
            teacher_logits.data().iter().fold(0f32, |a, &x| a.max(x.abs())),
            m.grad_norm
        ),
    };
    if !loss_v.is_finite() {
        return Err(diverged(&m, "non-finite loss"));
    }

    let mut grads = g.backward(total_loss);
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, var) in p.iter() {
        if !ModelParams::<f32>::is_student(name) {
            continue;
        }
        let gr = grads.take(var).unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
        named.push((name.to_string(), gr));
    }
    let norm = named
        .iter()
        .map(|(_, t)| t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    m.grad_norm = norm;
    if !norm.is_finite() {
        return Err(diverged(&m, "non-finite gradient"));
    }
    let clip = if norm > cfg.train.clip_norm { cfg.train.clip_norm / (norm + 1e-6) } else { 1.0 };

    // AdamW
    let t = (step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let wd = cfg.train.weight_decay;
    for (name, gr) in &named {
        let decay = decays(name);
        let mm = state.opt_m.get_mut(name).expect("moment").data_mut();
        let vv = state.opt_v.get_mut(name).expect("moment").data_mut();
        let w = state.params.get_mut(name).data_mut();
        for i in 0..w.len() {
            let gi = gr.data()[i] as f64 * clip;
            let mi = ADAM_BETA1 * mm[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * vv[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            mm[i] = mi as f32;
            vv[i] = vi as f32;
            let mut wi = w[i] as f64;
            if decay {
                wi -= lr * wd * wi;
            }
            wi -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            w[i] = wi as f32;
        }
    }

    state.params.ema_teacher(ema)?;
    state.center = update_center(&state.center, &teacher_logits, cfg.loss.center_momentum)?;
    state.step += 1;
    Ok(m)
}

/// Global L2 norm of a set of gradients after clipping to `max_norm`.
pub fn clipped_norm(grads: &[Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|t| t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let clip = if norm > max_norm { max_norm / (norm + 1e-6) } else { 1.0 };
    let scaled: f64 = grads
        .iter()
        .map(|t| t.data().iter().map(|&x| (x as f64 * clip).powi(2)).sum::<f64>())
        .sum();
    scaled.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_clusters, ClusterSpec};

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.model = crate::netcore::ModelConfig {
            vocab_size: 16,
            seq_len: 4,
            d_model: 16,
            n_heads: 2,
            dec_depth: 1,
            enc_depth: 1,
            proj_hidden: 32,
            proj_bottleneck: 8,
            n_prototypes: 32,
            d_t: 8,
        };
        c.train.epochs = 3;
        c.train.batch_size = 8;
        c.train.warmup_epochs = 1;
        c.train.eval_every_epochs = 1;
        c.train.knn_k = vec![5];
        c.out_dir = dir.to_path_buf();
        c
    }

    fn data(n: usize, seed: u64) -> FeatureSet {
        gaussian_clusters(&ClusterSpec {
            n_samples: n,
            n_classes: 4,
            d_t: 8,
            n_views: 2,
            grid: (2, 2),
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_at(0, 100, 10, 5e-4), 0.0);
        assert_eq!(lr_at(10, 100, 10, 5e-4), 5e-4);
        assert!((lr_at(100, 100, 10, 5e-4) - 5e-6).abs() < 1e-18);
        assert_eq!(ema_lambda_at(0, 100, 0.996, 1.0), 0.996);
        assert_eq!(ema_lambda_at(100, 100, 0.996, 1.0), 1.0);
        assert!((ema_lambda_at(50, 100, 0.996, 1.0) - 0.998).abs() < 1e-15);
    }

    #[test]
    fn u64_chunks_round_trip() {
        for x in [0u64, 1, 65535, 65536, u64::MAX, 0x1234_5678_9abc_def0] {
            assert_eq!(decode_u64(&encode_u64(x)).unwrap(), x);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let g = vec![Tensor::from_vec(&[3], vec![3.0f32, 4.0, 12.0]).unwrap()];
        assert!(clipped_norm(&g, 2.0) <= 2.0 + 1e-6);
        assert!((clipped_norm(&g, 100.0) - 13.0).abs() < 1e-9);
    }

    #[test]
    fn one_step_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(dir.path());
        c.train.epochs = 1;
        c.train.batch_size = 2;
        let set = data(2, 1);
        let out = train(&c, &set, None, &TrainOptions::default()).unwrap();
        assert_eq!(out.metrics.len(), 1);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn overfits_a_single_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(dir.path());
        c.train.epochs = 200;
        c.train.batch_size = 8;
        c.train.warmup_epochs = 5;
        c.train.eval_every_epochs = 1000;
        let out = train(&c, &data(8, 4), None, &TrainOptions::default()).unwrap();
        let loss: Vec<f32> = out.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(loss.len(), 200);
        let first_better = loss.iter().position(|&l| l < loss[0]).unwrap();
        assert!(first_better <= 200);
        let tail = loss[180..].iter().sum::<f32>() / 20.0;
        assert!(tail < 0.8 * loss[0], "start {} tail {tail}", loss[0]);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let set = data(40, 2);
        let ev = data(20, 3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fp = set.fingerprint();
        let ra = train(&tiny_cfg(a.path()), &set, Some(&ev), &TrainOptions::default()).unwrap();
        assert_eq!(set.fingerprint(), fp);
        train(&tiny_cfg(b.path()), &set, Some(&ev), &TrainOptions::default()).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        // configs differ only in out_dir
        let entries = |d: &Path| Checkpoint::read(d.join("final.symc")).unwrap().entries;
        assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
        assert_eq!(entries(a.path()), entries(b.path()));
        assert_eq!(ra.probes.len(), 3);

        // stop after one epoch, then resume to the end
        let c = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(c.path());
        let part = train(
            &cfg,
            &set,
            Some(&ev),
            &TrainOptions {
                stop_after_epochs: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let rest = resume(&part.checkpoint, None, &set, Some(&ev), &TrainOptions::default()).unwrap();
        assert_eq!(rest.state, ra.state);
        assert_eq!(read(c.path(), "metrics.csv"), read(a.path(), "metrics.csv"));
        assert_eq!(entries(c.path()), entries(a.path()));

        // nothing left to do
        let again = resume(c.path().join("final.symc"), None, &set, Some(&ev), &TrainOptions::default()).unwrap();
        assert!(again.metrics.is_empty());
        assert_eq!(again.state, ra.state);
    }

    #[test]
    fn resume_rejects_mismatches() {
        let set = data(16, 4);
        let d = tempfile::tempdir().unwrap();
        let out = train(&tiny_cfg(d.path()), &set, None, &TrainOptions::default()).unwrap();
        let wrong = gaussian_clusters(&ClusterSpec {
            n_samples: 16,
            d_t: 6,
            ..Default::default()
        })
        .unwrap();
        assert!(resume(&out.checkpoint, None, &wrong, None, &TrainOptions::default()).is_err());
        let mut other = tiny_cfg(d.path());
        other.train.lr_base = 1e-3;
        assert!(resume(&out.checkpoint, Some(&other), &set, None, &TrainOptions::default()).is_err());
        let mut ck = Checkpoint::read(&out.checkpoint).unwrap();
        ck.entries.remove("opt.m.tokemb");
        assert!(TrainState::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn frozen_teacher_head_with_unit_ema() {
        let set = data(16, 5);
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(d.path());
        c.train.ema_start = 1.0;
        c.train.ema_end = 1.0;
        let init = TrainState::init(&c).unwrap();
        let out = train(&c, &set, None, &TrainOptions::default()).unwrap();
        assert_eq!(out.state.params.head(TEACHER_HEAD), init.params.head(TEACHER_HEAD));
        assert_ne!(out.state.params.head("proj_s"), init.params.head("proj_s"));
    }

    #[test]
    fn infinite_lr_aborts_with_diagnostic() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(d.path());
        c.train.lr_base = f64::INFINITY;
        c.train.warmup_epochs = 0;
        let set = data(16, 6);
        let err = train(&c, &set, None, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(d.path().join("diverged.txt").exists());
    }

    #[test]
    fn all_strategies_and_discretizers_run() {
        let set = data(8, 7);
        for (kind, strategy) in [
            ("softmax_temp", "entropy"),
            ("gumbel", "info"),
            ("vq", "base"),
            ("gumbel", "combined"),
        ] {
            let d = tempfile::tempdir().unwrap();
            let mut c = tiny_cfg(d.path());
            c.train.epochs = 1;
            c.discretize.kind = kind.parse().unwrap();
            c.loss.strategy = strategy.parse().unwrap();
            c.loss.strategy_switch_epoch = Some(1);
            c.loss.cross_view = strategy == "info";
            c.loss.aggregate_term = kind == "softmax_temp";
            let out = train(&c, &set, None, &TrainOptions::default()).unwrap();
            assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
        }
    }
}
