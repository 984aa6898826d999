//! Finite-difference gradient check of both architectures on a small
//! random batch.

use fp4lab::models::{Arch, Batch, ModelConfig, ModelState};
use fp4lab::tensorcore::GradCheckOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for arch in [Arch::Gpt, Arch::Ngpt] {
        let mut cfg = ModelConfig::desk(arch).with_width(64, 2);
        cfg.n_layers = 2;
        cfg.seq_len = 8;
        let state = ModelState::new(cfg)?;
        let windows: Vec<Vec<usize>> = (0..2)
            .map(|j| (0..9).map(|i| (31 * i + 17 * j + 5) % 256).collect())
            .collect();
        let batch = Batch::from_windows(&windows);
        let opts = GradCheckOptions {
            samples_per_param: 8,
            ..Default::default()
        };
        let r = state.grad_check(&batch, &opts)?;
        println!(
            "{arch}: {} coordinates, max relative error {:.2e}",
            r.checked, r.max_rel_err
        );
    }
    Ok(())
}
