//! Stage-wise SNR (weights, activations, element products, dot products)
//! of every block GEMM of a freshly initialized model under NVFP4.

use fp4lab::analysis::{stage_snr, Stage};
use fp4lab::experiments::{analysis_taps, Corpus};
use fp4lab::fpquant::QuantConfig;
use fp4lab::models::{Arch, ModelConfig, ModelState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::synthetic(200_000, 0)?;
    let q = QuantConfig::nvfp4();
    for arch in [Arch::Gpt, Arch::Ngpt] {
        let mut cfg = ModelConfig::desk(arch).with_width(128, 2);
        cfg.n_layers = 2;
        cfg.seq_len = 64;
        let state = ModelState::new(cfg)?;
        println!("{arch}");
        for tap in analysis_taps(&state, &corpus, 4)? {
            let r = stage_snr(&tap.w, &tap.x, Some(&q))?;
            let cells: Vec<String> = Stage::ALL
                .iter()
                .map(|&s| format!("{}={}", s, r.stages.get(s)))
                .collect();
            println!("  block {} {:<6} {}", tap.layer, tap.gemm, cells.join("  "));
        }
    }
    Ok(())
}
