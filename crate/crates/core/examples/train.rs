//! Train a small model on the synthetic corpus (or a text file given as
//! the first argument) and print the loss curve.
//!
//!     cargo run --release --example train -- [corpus.txt] [gpt|ngpt] [steps]

use std::path::Path;

use fp4lab::experiments::{smoothed, train_model, Corpus, TrainOptions};
use fp4lab::fpquant::QuantConfig;
use fp4lab::models::{Arch, ModelConfig, ModelState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let corpus = match args.first().filter(|a| *a != "-") {
        Some(p) => Corpus::from_path(Path::new(p))?,
        None => Corpus::synthetic(1 << 20, 0)?,
    };
    let arch: Arch = args.get(1).map_or(Ok(Arch::Ngpt), |a| a.parse())?;
    let steps: usize = args.get(2).map_or(Ok(100), |s| s.parse())?;

    let mut cfg = ModelConfig::desk(arch)
        .with_width(128, 2)
        .with_quant(Some(QuantConfig::nvfp4_lean()));
    cfg.seq_len = 64;
    let opts = TrainOptions {
        steps,
        batch_size: 8,
        seed: 0,
        eval_interval: 25,
        val_batches: 4,
    };
    let out = train_model(ModelState::new(cfg)?, &corpus, &opts)?;
    let s = smoothed(&out.trace, 10);
    for r in out.trace.iter().step_by(10) {
        println!(
            "step {:>4}  loss {:.4}  smoothed {:.4}",
            r.step, r.loss, s[r.step]
        );
    }
    for e in &out.evals {
        println!(
            "eval {:>4}  val {:.4}  bpb {:.4}",
            e.step, e.val_loss, e.bpb
        );
    }
    Ok(())
}
