//! Parametric "speakers" and the signal generators behind the synthetic
//! corpus: harmonic voices with per-utterance envelopes and jitter, pink
//! noise, and exponential-decay impulse responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::corpus::wav::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Derives a ChaCha stream from an arbitrary list of seed words.
pub fn seeded_rng(words: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for w in words {
        hasher.update(w.to_le_bytes());
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(key)
}

const MAX_HARMONICS: usize = 16;

/// A synthetic voice: fundamental frequency, harmonic amplitude template,
/// spectral tilt, and jitter depth. Deterministic in (speaker_id, corpus_seed).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub f0: f64,
    pub harmonic_gains: Vec<f64>,
    pub spectral_tilt: f64,
    pub jitter: f64,
}

impl SpeakerProfile {
    /// Fundamentals are spread over [110, 255] Hz on a golden-ratio lattice
    /// (rotated per corpus), so any small roster keeps well-separated voices.
    pub fn derive(speaker_id: u32, corpus_seed: u64) -> Self {
        let mut rotation_rng = seeded_rng(&[corpus_seed, 0x726f746174]);
        let rotation: f64 = rotation_rng.gen_range(0.0..1.0);
        let phi = 0.618_033_988_749_894_9_f64;
        let octave = (speaker_id as f64 * phi + rotation).fract();
        let f0 = 110.0 * 2f64.powf(1.2 * octave);

        let mut rng = seeded_rng(&[corpus_seed, 0x73706b72, speaker_id as u64]);
        let mut harmonic_gains: Vec<f64> =
            (0..MAX_HARMONICS).map(|_| rng.gen_range(0.15..1.0)).collect();
        // Two formant-like emphasis regions give each voice its own timbre.
        for _ in 0..2 {
            let center = rng.gen_range(1.0..10.0);
            let boost = rng.gen_range(1.4..2.4);
            let width: f64 = rng.gen_range(0.8..1.8);
            for (h, gain) in harmonic_gains.iter_mut().enumerate() {
                let d = (h as f64 + 1.0 - center) / width;
                *gain *= 1.0 + (boost - 1.0) * (-0.5 * d * d).exp();
            }
        }
        let max = harmonic_gains.iter().cloned().fold(0.0f64, f64::max);
        for g in harmonic_gains.iter_mut() {
            *g /= max;
        }
        SpeakerProfile {
            speaker_id,
            f0,
            harmonic_gains,
            spectral_tilt: rng.gen_range(-9.0..-3.0),
            jitter: rng.gen_range(0.004..0.012),
        }
    }
}

/// Piecewise-linear track from control points spaced `step` samples apart.
struct ControlTrack {
    points: Vec<f64>,
    step: usize,
}

impl ControlTrack {
    fn new(n: usize, step: usize, mut gen: impl FnMut() -> f64) -> Self {
        let count = n / step + 2;
        ControlTrack {
            points: (0..count).map(|_| gen()).collect(),
            step,
        }
    }

    fn at(&self, i: usize) -> f64 {
        let idx = i / self.step;
        let frac = (i % self.step) as f64 / self.step as f64;
        self.points[idx] * (1.0 - frac) + self.points[idx + 1] * frac
    }
}

/// Renders one utterance of a synthetic speaker: a jittered harmonic source
/// with a random amplitude envelope and short silences, peak-normalized to
/// at most 0.9. Deterministic given (profile, utterance_seed).
pub fn render_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    utterance_seed: u64,
) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::invalid("duration must be positive"));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = seeded_rng(&[
        0x75747465,
        profile.speaker_id as u64,
        profile.f0.to_bits(),
        utterance_seed,
    ]);

    // Per-utterance pitch scatter keeps absolute pitch from being a perfect
    // speaker cue, so reference matching has to be relative.
    let f0_mult: f64 = rng.gen_range(0.92..1.08);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let jitter_step = SAMPLE_RATE as usize * 40 / 1000;
    let jitter = {
        let depth = profile.jitter;
        ControlTrack::new(n, jitter_step, || normal.sample(&mut rng) * depth * 3.0)
    };
    let env_step = SAMPLE_RATE as usize * 120 / 1000;
    let mut first = true;
    let envelope = ControlTrack::new(n, env_step, || {
        let v = if !first && rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(0.15..1.0)
        };
        first = false;
        v
    });

    let f0_base = profile.f0 * f0_mult;
    let harmonics = ((3800.0 / f0_base) as usize).clamp(3, MAX_HARMONICS);
    let phases: Vec<f64> = (0..harmonics)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let gains: Vec<f64> = (0..harmonics)
        .map(|h| {
            let tilt = 10f64.powf(profile.spectral_tilt * ((h + 1) as f64).log2() / 20.0);
            profile.harmonic_gains[h] * tilt
        })
        .collect();

    let mut samples = vec![0.0; n];
    let mut phase = 0.0f64;
    for (i, out) in samples.iter_mut().enumerate() {
        let f = (f0_base * (1.0 + jitter.at(i))).clamp(60.0, 400.0);
        phase += std::f64::consts::TAU * f / SAMPLE_RATE as f64;
        let mut s = 0.0;
        for h in 0..harmonics {
            s += gains[h] * ((h + 1) as f64 * phase + phases[h]).sin();
        }
        *out = s * envelope.at(i);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let level = 0.9 * rng.gen_range(0.65..1.0) / peak;
        for s in samples.iter_mut() {
            *s *= level;
        }
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Pink (1/f) noise via the Voss-McCartney octave-row construction,
/// normalized to unit RMS.
pub fn pink_noise(len: usize, seed: u64) -> Waveform {
    let mut rng = seeded_rng(&[0x70696e6b, seed]);
    const ROWS: usize = 12;
    let mut rows = [0.0f64; ROWS];
    for r in rows.iter_mut() {
        *r = rng.gen_range(-1.0..1.0);
    }
    let mut samples = vec![0.0; len];
    for (i, out) in samples.iter_mut().enumerate() {
        for (k, row) in rows.iter_mut().enumerate() {
            if i % (1usize << k) == 0 {
                *row = rng.gen_range(-1.0..1.0);
            }
        }
        *out = rows.iter().sum::<f64>() + rng.gen_range(-1.0..1.0);
    }
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        for s in samples.iter_mut() {
            *s /= rms;
        }
    }
    Waveform::new(samples, SAMPLE_RATE).expect("finite noise")
}

/// Synthetic room impulse response: unit direct path followed by an
/// exponentially decaying noise tail sized so the envelope falls 60 dB over
/// `rt60_s`. Truncated at rt60.
pub fn exp_decay_ir(rt60_s: f64, seed: u64) -> Vec<f64> {
    let tau = rt60_s * SAMPLE_RATE as f64 / (3.0 * std::f64::consts::LN_10);
    let len = ((rt60_s * SAMPLE_RATE as f64) as usize).max(2);
    let mut rng = seeded_rng(&[0x726576, seed]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ir = vec![0.0; len];
    ir[0] = 1.0;
    for (i, h) in ir.iter_mut().enumerate().skip(1) {
        *h = 0.3 * (-(i as f64) / tau).exp() * normal.sample(&mut rng);
    }
    ir
}

/// Direct-form convolution truncated to the input length.
pub fn convolve_truncated(signal: &Waveform, ir: &[f64]) -> Waveform {
    let x = signal.samples();
    let n = x.len();
    let mut out = vec![0.0; n];
    for (k, &h) in ir.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for i in k..n {
            out[i] += h * x[i - k];
        }
    }
    Waveform::new(out, signal.sample_rate()).expect("finite convolution")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_deterministic_and_voice_like() {
        for id in 0..12 {
            let a = SpeakerProfile::derive(id, 99);
            let b = SpeakerProfile::derive(id, 99);
            assert_eq!(a, b);
            assert!((60.0..=400.0).contains(&a.f0), "f0 {}", a.f0);
        }
        let a = SpeakerProfile::derive(0, 99);
        let c = SpeakerProfile::derive(0, 100);
        assert_ne!(a.f0, c.f0);
    }

    #[test]
    fn rendering_is_deterministic_with_expected_length_and_peak() {
        let p = SpeakerProfile::derive(3, 7);
        let a = render_utterance(&p, 1.0, 21).unwrap();
        let b = render_utterance(&p, 1.0, 21).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.len(), 8000);
        assert!(a.peak() <= 0.9 + 1e-12);
        let c = render_utterance(&p, 1.0, 22).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn utterances_carry_energy() {
        let p = SpeakerProfile::derive(1, 5);
        let w = render_utterance(&p, 2.0, 1).unwrap();
        assert!(w.energy() > 1.0, "energy {}", w.energy());
    }

    #[test]
    fn pink_noise_is_unit_rms_and_seeded() {
        let a = pink_noise(4000, 5);
        let b = pink_noise(4000, 5);
        assert_eq!(a.samples(), b.samples());
        let rms = (a.energy() / a.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ir_has_unit_direct_path_and_decays() {
        let ir = exp_decay_ir(0.2, 9);
        assert_eq!(ir[0], 1.0);
        assert_eq!(ir.len(), 1600);
        let early: f64 = ir[1..160].iter().map(|v| v * v).sum();
        let late: f64 = ir[1440..].iter().map(|v| v * v).sum();
        assert!(late < early, "late {late} not quieter than early {early}");
    }

    #[test]
    fn convolution_with_unit_impulse_is_identity() {
        let p = SpeakerProfile::derive(0, 1);
        let w = render_utterance(&p, 0.1, 0).unwrap();
        let out = convolve_truncated(&w, &[1.0]);
        assert_eq!(out.samples(), w.samples());
        let delayed = convolve_truncated(&w, &[0.0, 1.0]);
        assert_eq!(delayed.samples()[1..], w.samples()[..w.len() - 1]);
        assert_eq!(delayed.len(), w.len());
    }
}
