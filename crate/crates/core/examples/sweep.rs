//! Runs the bias-level sweep and the failure-mode comparison, printing
//! summaries. Optional arguments: samples epochs noise learning_rate.

use std::time::Instant;

use biasprobe::bench::{run_experiment2, run_experiment3, Experiment2Config, Experiment3Config};

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let mut e2 = Experiment2Config::default();
    let mut e3 = Experiment3Config::default();
    if let [samples, epochs, noise, lr, ..] = args[..] {
        for (synth, train) in [(&mut e2.synth, &mut e2.train), (&mut e3.synth, &mut e3.train)] {
            synth.samples = samples as usize;
            synth.noise = noise;
            train.epochs = epochs as usize;
            train.learning_rate = lr;
        }
    }

    if let Some(o) = std::env::var("SEED_OFFSET").ok().and_then(|s| s.parse::<u64>().ok()) {
        e2.seeds = (1 + o..=5 + o).collect();
        e3.seeds = e2.seeds.clone();
    }
    let t = Instant::now();
    let r2 = run_experiment2(&e2).expect("bias sweep");
    for s in &r2.summary {
        println!("tau {:.2}: mean KL {:.4} (sd {:.4}), mean cosine {:.3}", s.tau, s.mean_kl, s.std_kl, s.mean_cosine);
    }
    println!("spearman {:.3}, {:.1?}", r2.spearman_mean, t.elapsed());
    if std::env::var_os("SKIP3").is_some() {
        return;
    }
    if let Some(o) = std::env::var("SEED_OFFSET").ok().and_then(|s| s.parse::<u64>().ok()) {
        e2.seeds = (1 + o..=5 + o).collect();
        e3.seeds = e2.seeds.clone();
    }
    let t = Instant::now();
    let r3 = run_experiment3(&e3).expect("failure modes");
    println!("ours {:.4} vs entropy {:.4}, {:.1?}", r3.mean_decrease_ours, r3.mean_decrease_entropy, t.elapsed());
}
