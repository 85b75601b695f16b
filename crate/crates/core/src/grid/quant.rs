//! Probability quantization onto the six levels {0, 0.2, …, 1.0}.
//!
//! Rule: nearest multiple of 1/5 of the input's exact value, with a value
//! exactly midway between two levels rounding up. Midpoints are judged
//! against the real numbers 0.1, 0.3, 0.5, 0.7, 0.9 — not their f64
//! roundings — so the rule is well defined for every representable input
//! and the only representable tie is 0.5 (which rounds up to 0.6).
//! Consequently the literal 0.1 quantizes up to 0.2 (its f64 value lies
//! above the real midpoint) while the literal 0.3 quantizes down to 0.2
//! (its f64 value lies below). Idempotent and monotone.

use crate::error::{Error, Result};
use crate::grid::{PredictedOccupancyGrid, QuantizedPog};

/// The quantized probability levels, in ascending order.
pub const LEVELS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Number of quantized levels; the class count of every occupancy classifier.
pub const N_LEVELS: usize = LEVELS.len();

/// Smallest f64 that quantizes to class k+1: the smallest f64 ≥ the real
/// midpoint (2k+1)/10, except at the representable midpoint 0.5 where the
/// tie-up rule keeps 0.5 itself. Verified against exact rational comparison
/// in the tests.
fn upper_bounds() -> [f64; 5] {
    // 0.1 and 0.9 round up when parsed, so the literals already sit above
    // their real midpoints; 0.3 and 0.7 round down and need the next float.
    [0.1, 0.3f64.next_up(), 0.5, 0.7f64.next_up(), 0.9]
}

/// Level index for a probability.
pub fn quantize_class(p: f64) -> Result<usize> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(upper_bounds().iter().filter(|&&u| p >= u).count())
}

/// Quantized probability value (the level itself).
pub fn quantize_probability(p: f64) -> Result<f64> {
    Ok(LEVELS[quantize_class(p)?])
}

/// Probability value of a level index.
pub fn level_value(class: usize) -> f64 {
    LEVELS[class]
}

/// Cell-wise quantization of a probability grid.
pub fn quantize_pog(pog: &PredictedOccupancyGrid) -> QuantizedPog {
    let classes = pog
        .as_slice()
        .iter()
        // Cell probabilities are validated to [0, 1] at construction.
        .map(|&p| quantize_class(p).expect("valid grid probability") as u8)
        .collect();
    QuantizedPog::from_classes(pog.config().clone(), pog.t_pred(), classes)
        .expect("shape preserved")
}
