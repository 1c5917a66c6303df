//! Gumbel noise for relaxed one-hot selections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Temperature used for training-time lookups.
pub const LOOKUP_TEMPERATURE: f64 = 2.0;

/// Draws i.i.d. standard Gumbel noise `-ln(-ln U)` from an explicit generator.
pub fn gumbel_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("gumbel shape")
}

/// Seeded Gumbel noise. The temperature is validated here because the noise
/// is only ever consumed by [`gumbel_softmax`] at that temperature.
pub fn sample_gumbel(shape: &[usize], seed: u64, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Ok(gumbel_noise(shape, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument(format!(
            "gumbel temperature must be positive, got {temperature}"
        )))
    }
}

/// `softmax((logits + noise) / temperature)` over the trailing dimension.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, noise: Tensor, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let noise = tape.constant(noise)?;
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scale(noisy, 1.0 / temperature)?;
    tape.softmax(scaled)
}
