//! Shows that a decoder block with zero-initialised gates is exactly the
//! identity, unlike one with ordinary gates, and that only the adaLN-Zero
//! policy predicts exactly zero noise at initialisation.
//!
//! ```text
//! cargo run --release --example zero_init_blocks
//! ```

use ditblock::nn::{Builder, DitBlock, Forward, ParamStore, Variant};
use ditblock::policy::PolicyNet;
use ditblock::tensor::Tensor;
use ditblock::training::{synthetic_batch, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ditblock::Result<()> {
    let (d, heads, groups, len) = (32, 4, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_vec(&[groups * len, d], (0..groups * len * d).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
    let c = Tensor::from_vec(&[groups, d], (0..groups * d).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
    for zero_gates in [true, false] {
        let mut store = ParamStore::<f32>::new();
        let block = DitBlock::new(&mut Builder::new(&mut store, &mut rng), "block", d, heads, zero_gates);
        let mut f = Forward::new(&store, false);
        let (xv, cv) = (f.tape.constant(x.clone()), f.tape.constant(c.clone()));
        let y = block.forward(&mut f, xv, cv, groups, len);
        let moved = f.tape.value(y).data.iter().zip(&x.data).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        println!("zero gates {zero_gates:<5}: {moved:>3} of {} entries changed", x.data.len());
    }

    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let net = PolicyNet::<f32>::init(cfg.clone(), 3)?;
        let batch = synthetic_batch(&cfg, 4, 1);
        let x = Tensor::from_vec(&[batch.batch() * cfg.horizon, cfg.action_dim], batch.noise.clone());
        let eps = net.predict_epsilon(&x, &batch.ks, &batch.obs, None)?;
        let zeros = eps.data.iter().filter(|v| v.to_bits() == 0).count();
        println!("{:<11} {:>6} params, {zeros}/{} outputs exactly zero", variant.as_str(), net.param_count(), eps.data.len());
    }
    Ok(())
}
