//! A miniature learning-rate sweep over both architectures with and
//! without NVFP4, reporting validation bits per byte per cell.

use fp4lab::experiments::{precision_quant, retarget, Corpus};
use fp4lab::landscape::{log_grid, lr_sweep, Budget, Precision};
use fp4lab::models::{Arch, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::synthetic(1 << 20, 0)?;
    let mut base = ModelConfig::desk(Arch::Gpt).with_width(32, 2);
    base.n_layers = 2;
    base.seq_len = 32;
    let bases = [retarget(&base, Arch::Gpt), retarget(&base, Arch::Ngpt)];
    let precisions = ["off", "nvfp4"]
        .iter()
        .map(|p| Ok(Precision::new(p, precision_quant(p)?)))
        .collect::<Result<Vec<_>, fp4lab::experiments::ExperimentError>>()?;
    let grid = log_grid(1e-4, 1e-2, 4);
    let budget = Budget {
        steps: 40,
        batch_size: 4,
        seq: 32,
        seed: 0,
        val_batches: 2,
    };
    let r = lr_sweep(&bases, &precisions, &grid, &budget, &corpus)?;
    for c in &r.cells {
        let bpb = c.bpb.map_or("diverged".to_string(), |b| format!("{b:.4}"));
        println!(
            "{:<5} {:<6} lr {:.1e}  bpb {bpb}",
            c.arch, c.precision, c.lr
        );
    }
    for arch in [Arch::Gpt, Arch::Ngpt] {
        println!("{arch} spread {:?}", r.spread(arch, None));
    }
    Ok(())
}
