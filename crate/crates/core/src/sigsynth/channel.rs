use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{IqFrame, SigError};

/// Mean of `i² + q²` over the frame's samples.
pub fn mean_power(frame: &IqFrame) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let sum: f64 = frame
        .i()
        .iter()
        .zip(frame.q())
        .map(|(&a, &b)| (a as f64).powi(2) + (b as f64).powi(2))
        .sum();
    sum / frame.len() as f64
}

/// Adds complex white Gaussian noise at `snr_db` relative to the frame's
/// measured power. The noise power is split evenly between I and Q.
pub fn apply_awgn<R: Rng + ?Sized>(
    frame: &IqFrame,
    snr_db: f64,
    rng: &mut R,
) -> Result<IqFrame, SigError> {
    let power = mean_power(frame);
    if power <= 0.0 {
        return Err(SigError::ZeroPower);
    }
    if !snr_db.is_finite() {
        return Err(SigError::InvalidSpec(format!("SNR {snr_db} dB is not finite")));
    }
    let sigma = (power / (2.0 * 10f64.powf(snr_db / 10.0))).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| SigError::InvalidSpec(e.to_string()))?;
    let mut i = Vec::with_capacity(frame.len());
    let mut q = Vec::with_capacity(frame.len());
    for (&a, &b) in frame.i().iter().zip(frame.q()) {
        i.push((a as f64 + normal.sample(rng)) as f32);
        q.push((b as f64 + normal.sample(rng)) as f32);
    }
    IqFrame::new(i, q)
}
