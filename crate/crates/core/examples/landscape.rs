//! Loss increase under Gaussian weight noise for a briefly trained GPT and
//! nGPT pair, and the ratio of their degradation slopes.

use fp4lab::experiments::{train_model, Corpus, TrainOptions};
use fp4lab::landscape::landscape_curve;
use fp4lab::models::{Arch, ModelConfig, ModelState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::synthetic(1 << 20, 0)?;
    let opts = TrainOptions {
        steps: 150,
        batch_size: 8,
        seed: 0,
        eval_interval: 150,
        val_batches: 4,
    };
    let mut trained = Vec::new();
    for arch in [Arch::Gpt, Arch::Ngpt] {
        let mut cfg = ModelConfig::desk(arch).with_width(64, 2);
        cfg.seq_len = 64;
        let out = train_model(ModelState::new(cfg)?, &corpus, &opts)?;
        println!(
            "{arch}: val loss {:.4}",
            out.final_val_loss().unwrap_or(f64::NAN)
        );
        trained.push(out.state);
    }
    let val = corpus.val_batches(8, 64, 4)?;
    let alphas = [0.0, 0.02, 0.05, 0.1, 0.2];
    let seeds: Vec<u64> = (0..10).collect();
    let r = landscape_curve(&trained[0], &trained[1], &alphas, &seeds, &val)?;
    for (i, a) in alphas.iter().enumerate() {
        println!(
            "alpha {a:<5} gpt {:+.4} ± {:.4}   ngpt {:+.4} ± {:.4}",
            r.gpt.mean[i], r.gpt.std[i], r.ngpt.mean[i], r.ngpt.std[i]
        );
    }
    println!("slope ratio (gpt / ngpt): {:.3}", r.slope_ratio);
    if r.mismatch_warning {
        println!(
            "warning: clean losses differ by {:.1}%",
            100.0 * r.clean_gap
        );
    }
    Ok(())
}
