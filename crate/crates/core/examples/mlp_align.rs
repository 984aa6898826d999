//! One-layer gated MLP trained with and without hypersphere constraints;
//! compares held-out loss and the signal correlation of the layer GEMMs.

use fp4lab::experiments::{mlp_align, Corpus, MlpSettings};
use fp4lab::fpquant::QuantConfig;
use fp4lab::models::Arch;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::synthetic(1 << 20, 0)?;
    let settings = MlpSettings {
        width: 64,
        context: 8,
        steps: 1000,
        batch: 64,
        lr_gpt: 3e-3,
        lr_ngpt: 3e-3,
        eval_positions: 1024,
        arms: vec![Arch::Gpt, Arch::Ngpt],
        seeds: vec![0, 1, 2],
        quant: QuantConfig::nvfp4(),
    };
    let r = mlp_align(&settings, &corpus)?;
    for arm in &r.arms {
        println!(
            "{:<5} val loss {:.4}  rho_s {:.5} (95% CI {:.5} .. {:.5})",
            arm.arch, arm.val_loss_mean, arm.rho_s_mean, arm.rho_s_ci.0, arm.rho_s_ci.1
        );
    }
    println!(
        "loss gap {:?}, intervals separate {:?}",
        r.loss_gap(),
        r.intervals_separate()
    );
    Ok(())
}
