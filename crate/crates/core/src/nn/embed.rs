//! Sinusoidal time embedding for diffusion steps.

use super::NnError;

/// Embed a time step as interleaved (sin, cos) pairs.
///
/// Pair `k` (1-based, `k = 1..=dim/2`) oscillates at `t / 10000^(2k/dim)`,
/// so the final pair reaches period `2*pi*10000` and `t = 10000` lands at
/// phase 1 there. `t_max` bounds the admissible step index.
pub fn time_embed(t: usize, dim: usize, t_max: usize) -> Result<Vec<f64>, NnError> {
    if dim % 2 != 0 || dim == 0 {
        return Err(NnError::OddEmbedDim(dim));
    }
    if t > t_max {
        return Err(NnError::TimeOutOfRange { t, max: t_max });
    }
    let mut out = Vec::with_capacity(dim);
    for k in 1..=dim / 2 {
        let divisor = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let phase = t as f64 / divisor;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}
