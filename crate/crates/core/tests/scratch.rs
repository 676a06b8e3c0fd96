use gogenzip::config::{DataSource, ExperimentConfig};
use gogenzip::data::SynthConfig;
use std::time::Instant;

fn probe(cfg: &ExperimentConfig, label: &str) {
    let t0 = Instant::now();
    let ds = gogenzip::experiment::prepare_dataset(cfg).unwrap();
    let (artifacts, row) = gogenzip::experiment::train_and_eval(cfg, &ds, None).unwrap();
    println!("== {label}: {:.1}s", t0.elapsed().as_secs_f64());
    for m in artifacts.outcome.metrics.iter().step_by(4) {
        println!("  ep {:2} loss {:+.5} sr {:.3} rate {:.3} bs {:.4} bc {:.4}", m.epoch, m.loss, m.sr, m.rate, m.beta_s, m.beta_c);
    }
    let m = artifacts.outcome.metrics.last().unwrap();
    println!("  last ep {:2} sr {:.3} rate {:.3} bs {:.4} bc {:.4}", m.epoch, m.sr, m.rate, m.beta_s, m.beta_c);
    println!("  EVAL sr {:.4} (budget {}) rate {:.4} (budget {}) cr {:.2} mae {:.5}", row.achieved_sr, cfg.sr_budget, row.achieved_rate, cfg.rate_budget, row.achieved_cr, row.mae);
}

#[test]
#[ignore]
fn probe_constraint_matching() {
    let mut cfg = ExperimentConfig::default();
    cfg.source = DataSource::Synth(SynthConfig::default());
    cfg.epochs = 60;
    probe(&cfg, "sr0.4 rate0.25 ep30");

    let mut c2 = cfg.clone();
    c2.sr_budget = 0.2;
    probe(&c2, "sr0.2 rate0.25 ep30");

    let mut c3 = cfg.clone();
    c3.sr_budget = 0.8;
    c3.rate_budget = 0.4;
    probe(&c3, "sr0.8 rate0.4 ep30");
}
