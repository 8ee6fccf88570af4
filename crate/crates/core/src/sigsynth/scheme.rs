use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{IqFrame, SigError};

/// Modulation index of the binary CPFSK scheme (MSK).
pub const CPFSK_MOD_INDEX: f64 = 0.5;

/// Digital modulation schemes produced by the generator.
///
/// Linear schemes map Gray-coded bit groups onto a unit-average-power
/// constellation. `Cpfsk2` is a binary continuous-phase FSK used as the
/// stand-in for GFSK; its waveform has constant unit envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModulationScheme {
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "PSK8")]
    Psk8,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "QAM64")]
    Qam64,
    #[serde(rename = "ASK4")]
    Ask4,
    #[serde(rename = "CPFSK2")]
    Cpfsk2,
    #[serde(rename = "OOK")]
    Ook,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 8] = [
        ModulationScheme::Bpsk,
        ModulationScheme::Qpsk,
        ModulationScheme::Psk8,
        ModulationScheme::Qam16,
        ModulationScheme::Qam64,
        ModulationScheme::Ask4,
        ModulationScheme::Cpfsk2,
        ModulationScheme::Ook,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModulationScheme::Bpsk => "BPSK",
            ModulationScheme::Qpsk => "QPSK",
            ModulationScheme::Psk8 => "PSK8",
            ModulationScheme::Qam16 => "QAM16",
            ModulationScheme::Qam64 => "QAM64",
            ModulationScheme::Ask4 => "ASK4",
            ModulationScheme::Cpfsk2 => "CPFSK2",
            ModulationScheme::Ook => "OOK",
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            ModulationScheme::Bpsk | ModulationScheme::Cpfsk2 | ModulationScheme::Ook => 1,
            ModulationScheme::Qpsk | ModulationScheme::Ask4 => 2,
            ModulationScheme::Psk8 => 3,
            ModulationScheme::Qam16 => 4,
            ModulationScheme::Qam64 => 6,
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, ModulationScheme::Cpfsk2)
    }

    /// Constellation indexed by the integer value of a bit group (MSB
    /// first). `None` for non-linear schemes.
    pub fn constellation(self) -> Option<Vec<Complex64>> {
        let points = 1usize << self.bits_per_symbol();
        let table = match self {
            ModulationScheme::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            ModulationScheme::Qpsk => psk_table(points, PI / 4.0),
            ModulationScheme::Psk8 => psk_table(points, 0.0),
            ModulationScheme::Qam16 | ModulationScheme::Qam64 => {
                let axis_bits = self.bits_per_symbol() / 2;
                let levels = 1usize << axis_bits;
                let scale = (2.0 * ((levels * levels) as f64 - 1.0) / 3.0).sqrt();
                (0..points)
                    .map(|word| {
                        let re = pam_level(word >> axis_bits, levels);
                        let im = pam_level(word & (levels - 1), levels);
                        Complex64::new(re / scale, im / scale)
                    })
                    .collect()
            }
            ModulationScheme::Ask4 => {
                let scale = ((points * points) as f64 - 1.0) / 3.0;
                let scale = scale.sqrt();
                (0..points)
                    .map(|word| Complex64::new(pam_level(word, points) / scale, 0.0))
                    .collect()
            }
            ModulationScheme::Ook => {
                vec![Complex64::new(0.0, 0.0), Complex64::new(2f64.sqrt(), 0.0)]
            }
            ModulationScheme::Cpfsk2 => return None,
        };
        Some(table)
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = SigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        ModulationScheme::ALL
            .into_iter()
            .find(|m| m.name() == upper || (upper == "GFSK" && *m == ModulationScheme::Cpfsk2))
            .ok_or_else(|| SigError::UnknownScheme(s.to_string()))
    }
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

/// Amplitude of the Gray-coded PAM word on the odd-integer grid
/// {-(M-1), ..., M-1}.
fn pam_level(word: usize, levels: usize) -> f64 {
    let k = gray_to_binary(word);
    2.0 * k as f64 - (levels as f64 - 1.0)
}

fn psk_table(points: usize, offset: f64) -> Vec<Complex64> {
    (0..points)
        .map(|word| {
            let k = gray_to_binary(word) as f64;
            Complex64::from_polar(1.0, offset + 2.0 * PI * k / points as f64)
        })
        .collect()
}

/// Maps `bits` (each 0 or 1) onto symbols of `scheme` and shapes them with a
/// rectangular pulse of `sps` samples.
pub fn modulate(bits: &[u8], scheme: ModulationScheme, sps: usize) -> Result<IqFrame, SigError> {
    if sps == 0 {
        return Err(SigError::InvalidSpec("samples per symbol must be >= 1".into()));
    }
    let bps = scheme.bits_per_symbol();
    if !bits.len().is_multiple_of(bps) {
        return Err(SigError::BitCount { bits: bits.len(), bits_per_symbol: bps });
    }
    if let Some(pos) = bits.iter().position(|&b| b > 1) {
        return Err(SigError::InvalidBit { index: pos, value: bits[pos] });
    }
    let words = bits
        .chunks_exact(bps)
        .map(|group| group.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize));

    let n = bits.len() / bps * sps;
    let mut i = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    match scheme.constellation() {
        Some(table) => {
            for word in words {
                let s = table[word];
                for _ in 0..sps {
                    i.push(s.re as f32);
                    q.push(s.im as f32);
                }
            }
        }
        None => {
            // Continuous phase: each symbol advances the phase by ±πh linearly.
            let step = PI * CPFSK_MOD_INDEX / sps as f64;
            let mut phase = 0.0f64;
            for word in words {
                let dir = if word == 1 { 1.0 } else { -1.0 };
                for _ in 0..sps {
                    phase += dir * step;
                    i.push(phase.cos() as f32);
                    q.push(phase.sin() as f32);
                }
            }
        }
    }
    IqFrame::new(i, q)
}
