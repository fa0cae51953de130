//! Trains on the ten-cluster synthetic set and prints the probe results.
//!
//! `cargo run --release --example synthetic_run -- [strategy] [epochs] [out_dir] [key=value ...]`

use std::time::Instant;

use symdistill::config::RunConfig;
use symdistill::probe::subsequence_report;
use symdistill::synth::{point_clusters, PointClusterSpec};
use symdistill::trainer::{train, TrainOptions};

fn main() -> symdistill::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strategy = args.first().map(String::as_str).unwrap_or("base");
    let epochs: usize = args.get(1).and_then(|e| e.parse().ok()).unwrap_or(30);
    let out = args.get(2).cloned().unwrap_or_else(|| "synthetic_run".into());

    let train_set = point_clusters(&PointClusterSpec { n_samples: 600, seed: 1, layout_seed: Some(0), ..Default::default() })?;
    let eval_set = point_clusters(&PointClusterSpec { n_samples: 200, seed: 2, layout_seed: Some(0), ..Default::default() })?;
    let mut keys: Vec<(String, String)> = [
        ("vocab_size", "128"),
        ("d_model", "64"),
        ("n_heads", "4"),
        ("dec_depth", "2"),
        ("enc_depth", "2"),
        ("proj_hidden", "256"),
        ("proj_bottleneck", "64"),
        ("n_prototypes", "256"),
        ("d_t", "64"),
        ("warmup_epochs", "3"),
        ("eval_every_epochs", "10"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    keys.push(("epochs".into(), epochs.to_string()));
    keys.push(("strategy".into(), strategy.into()));
    keys.push(("out_dir".into(), out));
    for kv in args.iter().skip(3) {
        let (k, v) = kv.split_once('=').expect("key=value");
        keys.retain(|(key, _)| key != k);
        keys.push((k.into(), v.into()));
    }
    let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let cfg = RunConfig::parse(&text)?;
    let t = Instant::now();
    let r = train(&cfg, &train_set, Some(&eval_set), &TrainOptions { progress: true, ..Default::default() })?;
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    let rep = subsequence_report(&r.state.params, &cfg.discretize, &train_set, &eval_set, 20, 0.07)?;
    print!("{}", rep.to_table());
    Ok(())
}
