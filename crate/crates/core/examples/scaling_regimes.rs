//! Width scaling of the dot-product SNR ratio between two correlation
//! levels, with the regime boundaries, and a Monte-Carlo check of the
//! closed-form SNR.

use fp4lab::analysis::{monte_carlo_snr, predict_snr, snr_ratio_and_regimes};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (rho_n, rho_g) = (1.32e-3, 9.31e-5);
    let widths: Vec<f64> = (4..=16).map(|p| 2f64.powi(p)).collect();
    let r = snr_ratio_and_regimes(rho_n, rho_g, &widths)?;
    println!(
        "transitions at D = {:.0} and {:.0}, saturation {:.2}",
        r.t1, r.t2, r.saturation
    );
    for (d, ratio, regime) in &r.curve {
        println!("  D {d:>6}  ratio {ratio:>6.3}  regime {regime}");
    }

    for d in [64, 256, 1024] {
        let mc = monte_carlo_snr(d, 0.01, 1.0, 0.3, 0.0, 0.0, 2000, 1)?;
        let theory = predict_snr(d as f64, 1.0, 0.3, 0.0, 0.0, 0.01)?;
        println!(
            "D {d:>5}: Monte Carlo {} vs theory {:.2} dB",
            mc.dot,
            10.0 * theory.log10()
        );
    }
    Ok(())
}
