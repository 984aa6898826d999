//! Fake-quantize a heavy-tailed matrix under a few NVFP4 recipes and report
//! the SNR of each, plus the raw encoding of the first block.

use fp4lab::analysis::snr;
use fp4lab::fpquant::{encode, fake_quant, QuantConfig};
use fp4lab::tensorcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t3 = StudentT::new(3.0)?;
    let data: Vec<f64> = (0..64 * 256).map(|_| t3.sample(&mut rng)).collect();
    let x = Tensor::matrix(64, 256, data)?;

    let recipes = [
        ("nearest", QuantConfig::nvfp4()),
        (
            "nearest+rht",
            QuantConfig {
                rht: true,
                ..QuantConfig::nvfp4()
            },
        ),
        ("stochastic", QuantConfig::nvfp4_lean()),
        ("full", QuantConfig::nvfp4_full()),
    ];
    for (name, cfg) in &recipes {
        let q = fake_quant(&x, cfg)?;
        println!("{name:>12}: SNR {}", snr(&x, &q)?);
    }

    let enc = encode(&x, &QuantConfig::nvfp4())?;
    println!("tensor scale: {:?}", enc.tensor_scale);
    println!("first block scale: {}", enc.block_scales[0]);
    println!("first block codes: {:?}", &enc.codes[..16]);
    Ok(())
}
