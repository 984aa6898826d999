//! Effective pairwise correlation of dot-product terms: equi-correlated
//! synthetic streams with known correlation, then the signal/noise
//! correlation and partial-sum curve of a real GEMM.

use fp4lab::analysis::{
    effective_correlation, equicorrelated_rows, gemm_correlation, gemm_partial_curve,
    quantize_operands,
};
use fp4lab::experiments::{analysis_taps, Corpus};
use fp4lab::fpquant::QuantConfig;
use fp4lab::models::{Arch, ModelConfig, ModelState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for rho in [0.0, 0.01, 0.1] {
        let u = equicorrelated_rows(4000, 128, rho, 1.0, 0.0, 1);
        println!(
            "target {rho:<5} measured {:.4}",
            effective_correlation(&u)?.rho
        );
    }

    let corpus = Corpus::synthetic(200_000, 0)?;
    let mut cfg = ModelConfig::desk(Arch::Ngpt).with_width(128, 2);
    cfg.n_layers = 1;
    cfg.seq_len = 64;
    let state = ModelState::new(cfg)?;
    let taps = analysis_taps(&state, &corpus, 8)?;
    let tap = &taps[0];
    let (x_hat, w_hat) = quantize_operands(&tap.x, &tap.w, &QuantConfig::nvfp4())?;
    let c = gemm_correlation(&tap.x, &tap.w, &x_hat, &w_hat)?;
    println!("{}: rho_s {:.5} rho_n {:.5}", tap.gemm, c.rho_s, c.rho_n);
    let curve = gemm_partial_curve(&tap.x, &tap.w, &[16, 32, 64, 128], 50, 0)?;
    for (k, (r, se)) in curve.k.iter().zip(curve.rho.iter().zip(&curve.se)) {
        println!("  k {k:>4}  rho {r:.5} ± {se:.5}");
    }
    println!("flat within 3 se: {:?}", curve.is_flat(3.0));
    Ok(())
}
