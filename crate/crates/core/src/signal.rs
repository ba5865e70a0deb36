//! Pure signal mathematics: SI-SDR and SDR metrics, SNR-controlled mixing,
//! and weighted multi-scale signal fusion.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any number of threads.

use crate::error::{Error, Result};

/// Guard added to both norms inside the dB ratio so degenerate inputs stay finite.
pub const METRIC_EPS: f64 = 1e-8;
/// Metrics are clamped to [-60, +60] dB.
pub const METRIC_CLAMP_DB: f64 = 60.0;

const LN10: f64 = std::f64::consts::LN_10;

/// A mono time-domain signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, rejecting non-finite samples and a zero sample rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!(
                "sample {i} is not finite ({})",
                samples[i]
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Returns a copy scaled by `gain`.
    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copies `len` samples starting at `offset`, zero-padding past the end.
    pub fn crop(&self, offset: usize, len: usize) -> Waveform {
        let mut out = vec![0.0; len];
        for (i, slot) in out.iter_mut().enumerate() {
            if let Some(&s) = self.samples.get(offset + i) {
                *slot = s;
            }
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    /// Concatenates `self` followed by `other`.
    pub fn concat(&self, other: &Waveform) -> Result<Waveform> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
        })
    }
}

/// Learnable weights for combining the three per-scale decoded signals.
/// Deliberately not constrained to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl FusionWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        if !(w1.is_finite() && w2.is_finite() && w3.is_finite()) {
            return Err(Error::invalid("fusion weights must be finite"));
        }
        Ok(FusionWeights { w1, w2, w3 })
    }
}

fn check_equal_lengths(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Clamped dB ratio of two norms: `20 log10((num + eps) / (den + eps))`.
fn ratio_db(num: f64, den: f64) -> f64 {
    let db = 20.0 / LN10 * ((num + METRIC_EPS) / (den + METRIC_EPS)).ln();
    db.clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB)
}

/// Scale-invariant signal-to-distortion ratio of `estimate` against
/// `reference`, in dB.
///
/// The estimate is compared after projecting it onto the reference:
/// `rho = 20 log10(|alpha s| / |alpha s - e|)` with `alpha = (e.s)/(s.s)`.
/// Both norms carry an epsilon guard and the result is clamped to +/-60 dB,
/// so perfect and orthogonal reconstructions stay finite.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_equal_lengths(estimate, reference)?;
    let e = estimate.samples();
    let s = reference.samples();
    let dot_ss: f64 = s.iter().map(|v| v * v).sum();
    if dot_ss == 0.0 {
        return Err(Error::invalid("reference has zero energy"));
    }
    let dot_es: f64 = e.iter().zip(s).map(|(a, b)| a * b).sum();
    let alpha = dot_es / dot_ss;
    let num = alpha.abs() * dot_ss.sqrt();
    let den = e
        .iter()
        .zip(s)
        .map(|(ei, si)| {
            let r = alpha * si - ei;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(ratio_db(num, den))
}

/// Plain SDR (no scale projection), same guard and clamp policy as [`si_sdr`].
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_equal_lengths(estimate, reference)?;
    let e = estimate.samples();
    let s = reference.samples();
    let dot_ss: f64 = s.iter().map(|v| v * v).sum();
    if dot_ss == 0.0 {
        return Err(Error::invalid("reference has zero energy"));
    }
    let den = e
        .iter()
        .zip(s)
        .map(|(ei, si)| {
            let r = si - ei;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(ratio_db(dot_ss.sqrt(), den))
}

/// Negated SI-SDR, the per-stage reconstruction loss.
pub fn si_sdr_loss(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(-si_sdr(estimate, reference)?)
}

/// [`si_sdr_loss`] together with its gradient with respect to the estimate
/// samples. The gradient is exactly zero wherever the clamp is active.
pub fn si_sdr_loss_with_grad(estimate: &Waveform, reference: &Waveform) -> Result<(f64, Vec<f64>)> {
    check_equal_lengths(estimate, reference)?;
    let e = estimate.samples();
    let s = reference.samples();
    let n = e.len();
    let dot_ss: f64 = s.iter().map(|v| v * v).sum();
    if dot_ss == 0.0 {
        return Err(Error::invalid("reference has zero energy"));
    }
    let dot_es: f64 = e.iter().zip(s).map(|(a, b)| a * b).sum();
    let alpha = dot_es / dot_ss;
    let norm_s = dot_ss.sqrt();
    let num = alpha.abs() * norm_s;
    let residual: Vec<f64> = e.iter().zip(s).map(|(ei, si)| alpha * si - ei).collect();
    let den = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
    let raw = 20.0 / LN10 * ((num + METRIC_EPS) / (den + METRIC_EPS)).ln();
    let loss = -raw.clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB);
    if raw <= -METRIC_CLAMP_DB || raw >= METRIC_CLAMP_DB {
        return Ok((loss, vec![0.0; n]));
    }
    // d(rho)/de = k * [ sign(alpha) |s| s / (s.s (num+eps)) + r / (den (den+eps)) ]
    // where r = alpha s - e, which is orthogonal to s.
    let k = 20.0 / LN10;
    let sign_alpha = if alpha > 0.0 {
        1.0
    } else if alpha < 0.0 {
        -1.0
    } else {
        0.0
    };
    let num_coef = k * sign_alpha * norm_s / (dot_ss * (num + METRIC_EPS));
    let den_coef = if den > 0.0 {
        k / (den * (den + METRIC_EPS))
    } else {
        0.0
    };
    let grad = s
        .iter()
        .zip(&residual)
        .map(|(si, ri)| -(num_coef * si + den_coef * ri))
        .collect();
    Ok((loss, grad))
}

/// Weighted sample-wise combination of three equal-length estimates:
/// `w1*s1 + w2*s2 + w3*s3`.
pub fn fuse_signals(estimates: &[Waveform; 3], weights: &FusionWeights) -> Result<Waveform> {
    let len = estimates[0].len();
    let rate = estimates[0].sample_rate();
    for (i, est) in estimates.iter().enumerate() {
        if est.len() != len {
            return Err(Error::invalid(format!(
                "estimate {i} length {} != {}",
                est.len(),
                len
            )));
        }
        if est.sample_rate() != rate {
            return Err(Error::invalid(format!(
                "estimate {i} sample rate {} != {}",
                est.sample_rate(),
                rate
            )));
        }
    }
    let w = [weights.w1, weights.w2, weights.w3];
    let mut out = vec![0.0; len];
    for (wi, est) in w.iter().zip(estimates.iter()) {
        for (o, s) in out.iter_mut().zip(est.samples()) {
            *o += wi * s;
        }
    }
    Waveform::new(out, rate)
}

/// Result of [`mix_at_snr`]. `norm_gain` is the joint peak-normalization gain
/// that was applied to every returned signal (1.0 when the sum did not clip);
/// callers mixing further signals must apply it to their copies of the target.
#[derive(Debug, Clone)]
pub struct SnrMix {
    pub mixture: Waveform,
    pub scaled_interferer: Waveform,
    pub norm_gain: f64,
}

/// Scales `interferer` so the target-to-interferer power ratio is `snr_db`,
/// then sums. If the sum clips, everything is scaled down together so the
/// mixture peaks at 1.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<SnrMix> {
    check_equal_lengths(target, interferer)?;
    let p_target = target.energy();
    let p_interf = interferer.energy();
    if p_target == 0.0 {
        return Err(Error::invalid("target has zero energy"));
    }
    if p_interf == 0.0 {
        return Err(Error::invalid("interferer has zero energy"));
    }
    let gain = (p_target / (p_interf * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut scaled: Vec<f64> = interferer.samples().iter().map(|s| s * gain).collect();
    let mut mixture: Vec<f64> = target
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(t, i)| t + i)
        .collect();
    let peak = mixture.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let norm_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if norm_gain != 1.0 {
        for s in mixture.iter_mut() {
            *s *= norm_gain;
        }
        for s in scaled.iter_mut() {
            *s *= norm_gain;
        }
    }
    Ok(SnrMix {
        mixture: Waveform::new(mixture, target.sample_rate())?,
        scaled_interferer: Waveform::new(scaled, target.sample_rate())?,
        norm_gain,
    })
}

/// SDR and SI-SDR improvement of `estimate` over the unprocessed `mixture`,
/// both measured against `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Improvement {
    pub sdri: f64,
    pub si_sdri: f64,
}

pub fn improvement(
    estimate: &Waveform,
    mixture: &Waveform,
    target: &Waveform,
) -> Result<Improvement> {
    let si_est = si_sdr(estimate, target)?;
    let si_mix = si_sdr(mixture, target)?;
    let sdr_est = sdr(estimate, target)?;
    let sdr_mix = sdr(mixture, target)?;
    Ok(Improvement {
        sdri: sdr_est - sdr_mix,
        si_sdri: si_est - si_mix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: &[f64]) -> Waveform {
        Waveform::new(samples.to_vec(), 8000).unwrap()
    }

    #[test]
    fn si_sdr_hand_case() {
        // s = [1, 0], e = [1, 1]: projection [1, 0], error [0, 1], ratio 1.
        let rho = si_sdr(&wave(&[1.0, 1.0]), &wave(&[1.0, 0.0])).unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn si_sdr_perfect_scaled_reconstruction_clamps_high() {
        let s = wave(&[0.3, -0.2, 0.5, 0.1]);
        let e = s.scaled(2.0);
        assert_eq!(si_sdr(&e, &s).unwrap(), METRIC_CLAMP_DB);
    }

    #[test]
    fn si_sdr_orthogonal_clamps_low() {
        let rho = si_sdr(&wave(&[0.0, 1.0]), &wave(&[1.0, 0.0])).unwrap();
        assert_eq!(rho, -METRIC_CLAMP_DB);
    }

    #[test]
    fn si_sdr_rejects_mismatched_lengths_and_zero_reference() {
        assert!(si_sdr(&wave(&[1.0]), &wave(&[1.0, 0.0])).is_err());
        assert!(si_sdr(&wave(&[1.0, 0.0]), &wave(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn si_sdr_scale_invariance() {
        let s = wave(&[0.4, -0.1, 0.2, 0.6, -0.3]);
        let e = wave(&[0.35, -0.2, 0.25, 0.5, -0.1]);
        let base = si_sdr(&e, &s).unwrap();
        for alpha in [0.1, 3.0, 10.0] {
            let scaled = si_sdr(&e.scaled(alpha), &s).unwrap();
            assert!(
                (scaled - base).abs() < 1e-4,
                "alpha={alpha}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn si_sdr_loss_values() {
        let s = wave(&[0.3, -0.2, 0.5, 0.1]);
        assert_eq!(si_sdr_loss(&s, &s).unwrap(), -60.0);
        let l = si_sdr_loss(&wave(&[1.0, 1.0]), &wave(&[1.0, 0.0])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn si_sdr_loss_gradient_matches_finite_differences() {
        let s = wave(&[1.0, 0.0]);
        let e = wave(&[1.0, 1.0]);
        let (_, grad) = si_sdr_loss_with_grad(&e, &s).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut plus = e.samples().to_vec();
            plus[i] += h;
            let mut minus = e.samples().to_vec();
            minus[i] -= h;
            let lp = si_sdr_loss(&wave(&plus), &s).unwrap();
            let lm = si_sdr_loss(&wave(&minus), &s).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-9);
            assert!(rel < 1e-4, "i={i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn si_sdr_loss_gradient_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..20 {
            let n = rng.gen_range(4..32);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sw = wave(&s);
            let ew = wave(&e);
            let (_, grad) = si_sdr_loss_with_grad(&ew, &sw).unwrap();
            for i in (0..n).step_by(3) {
                let mut plus = e.clone();
                plus[i] += h;
                let mut minus = e.clone();
                minus[i] -= h;
                let fd = (si_sdr_loss(&wave(&plus), &sw).unwrap()
                    - si_sdr_loss(&wave(&minus), &sw).unwrap())
                    / (2.0 * h);
                let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-9);
                assert!(rel < 1e-3, "i={i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn fusion_identity_selector_and_weighted_cases() {
        let s = wave(&[0.2, -0.4, 0.6]);
        let same = [s.clone(), s.clone(), s.clone()];
        let fused = fuse_signals(&same, &FusionWeights::new(0.8, 0.1, 0.1).unwrap()).unwrap();
        for (f, orig) in fused.samples().iter().zip(s.samples()) {
            assert!((f - orig).abs() < 1e-15);
        }

        let trio = [
            wave(&[1.0, 2.0]),
            wave(&[3.0, 4.0]),
            wave(&[-1.0, -2.0]),
        ];
        let selected = fuse_signals(&trio, &FusionWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(selected.samples(), trio[0].samples());

        let trio = [wave(&[1.0, 1.0]), wave(&[2.0, 0.0]), wave(&[0.0, 2.0])];
        let fused = fuse_signals(&trio, &FusionWeights::new(0.5, 0.25, 0.25).unwrap()).unwrap();
        assert_eq!(fused.samples(), &[1.0, 1.0]);
    }

    #[test]
    fn fusion_is_linear_in_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let w = FusionWeights::new(0.7, -0.2, 1.3).unwrap();
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
            wave(&(0..16).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let a = [gen(&mut rng), gen(&mut rng), gen(&mut rng)];
        let b = [gen(&mut rng), gen(&mut rng), gen(&mut rng)];
        let sum = [
            wave(&a[0].samples().iter().zip(b[0].samples()).map(|(x, y)| x + y).collect::<Vec<_>>()),
            wave(&a[1].samples().iter().zip(b[1].samples()).map(|(x, y)| x + y).collect::<Vec<_>>()),
            wave(&a[2].samples().iter().zip(b[2].samples()).map(|(x, y)| x + y).collect::<Vec<_>>()),
        ];
        let fused_sum = fuse_signals(&sum, &w).unwrap();
        let fa = fuse_signals(&a, &w).unwrap();
        let fb = fuse_signals(&b, &w).unwrap();
        for i in 0..16 {
            let lhs = fused_sum.samples()[i];
            let rhs = fa.samples()[i] + fb.samples()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_at_snr_unit_power_cases() {
        // Unit-power square waves, so no clipping headroom issues at 0 dB are
        // relevant to the gain itself.
        let t = wave(&[0.5, -0.5, 0.5, -0.5]);
        let i = wave(&[-0.5, -0.5, 0.5, 0.5]);
        let mix = mix_at_snr(&t, &i, 0.0).unwrap();
        let gain = mix.scaled_interferer.samples()[0] / i.samples()[0] / mix.norm_gain;
        assert!((gain - 1.0).abs() < 1e-12);

        // 10*log10(4) dB SNR means amplitude gain 1/2.
        let snr = 10.0 * 4.0f64.log10();
        let mix = mix_at_snr(&t, &i, snr).unwrap();
        let gain = mix.scaled_interferer.samples()[0] / i.samples()[0] / mix.norm_gain;
        assert!((gain - 0.5).abs() < 1e-12, "gain {gain}");
    }

    #[test]
    fn mix_at_snr_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = wave(&(0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let i = wave(&(0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let mix = mix_at_snr(&t, &i, 5.0).unwrap();
        let scaled_target = t.scaled(mix.norm_gain);
        let measured =
            10.0 * (scaled_target.energy() / mix.scaled_interferer.energy()).log10();
        assert!((measured - 5.0).abs() < 1e-6, "measured {measured}");
    }

    #[test]
    fn mix_at_snr_normalizes_clipping_jointly() {
        let t = wave(&[0.9, 0.9]);
        let i = wave(&[0.9, 0.9]);
        let mix = mix_at_snr(&t, &i, 0.0).unwrap();
        assert!(mix.peakless());
        // Mixture still equals scaled target + scaled interferer.
        let st = t.scaled(mix.norm_gain);
        for k in 0..2 {
            let sum = st.samples()[k] + mix.scaled_interferer.samples()[k];
            assert!((mix.mixture.samples()[k] - sum).abs() < 1e-12);
        }
    }

    impl SnrMix {
        fn peakless(&self) -> bool {
            self.mixture.peak() <= 1.0 + 1e-12
        }
    }

    #[test]
    fn mix_at_snr_rejects_zero_energy() {
        let z = wave(&[0.0, 0.0]);
        let t = wave(&[0.5, 0.5]);
        assert!(mix_at_snr(&z, &t, 0.0).is_err());
        assert!(mix_at_snr(&t, &z, 0.0).is_err());
    }

    #[test]
    fn improvement_baseline_and_perfect_cases() {
        let target = wave(&[0.4, -0.2, 0.3, 0.1]);
        let noise = wave(&[0.1, 0.2, -0.1, 0.05]);
        let mixture = wave(
            &target
                .samples()
                .iter()
                .zip(noise.samples())
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        );
        let same = improvement(&mixture, &mixture, &target).unwrap();
        assert_eq!(same.sdri, 0.0);
        assert_eq!(same.si_sdri, 0.0);

        let perfect = improvement(&target, &mixture, &target).unwrap();
        let base_si = si_sdr(&mixture, &target).unwrap();
        let base_sdr = sdr(&mixture, &target).unwrap();
        assert_eq!(perfect.si_sdri, METRIC_CLAMP_DB - base_si);
        assert_eq!(perfect.sdri, METRIC_CLAMP_DB - base_sdr);
    }

    #[test]
    fn improvement_matches_hand_computation_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let t: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if t.iter().map(|x| x * x).sum::<f64>() < 1e-3 {
                continue;
            }
            let (tw, mw, ew) = (wave(&t), wave(&m), wave(&e));
            let got = improvement(&ew, &mw, &tw).unwrap();

            // Independent hand computation, scalar-by-scalar.
            let hand = |est: &[f64]| -> (f64, f64) {
                let ss: f64 = t.iter().map(|x| x * x).sum();
                let es: f64 = est.iter().zip(&t).map(|(a, b)| a * b).sum();
                let a = es / ss;
                let num = (a * a * ss).sqrt();
                let den = est
                    .iter()
                    .zip(&t)
                    .map(|(ei, si)| (a * si - ei) * (a * si - ei))
                    .sum::<f64>()
                    .sqrt();
                let si = (20.0 * ((num + 1e-8) / (den + 1e-8)).log10()).clamp(-60.0, 60.0);
                let den_plain = est
                    .iter()
                    .zip(&t)
                    .map(|(ei, si)| (si - ei) * (si - ei))
                    .sum::<f64>()
                    .sqrt();
                let sd = (20.0 * ((ss.sqrt() + 1e-8) / (den_plain + 1e-8)).log10())
                    .clamp(-60.0, 60.0);
                (sd, si)
            };
            let (sd_e, si_e) = hand(&e);
            let (sd_m, si_m) = hand(&m);
            assert!((got.si_sdri - (si_e - si_m)).abs() < 1e-6);
            assert!((got.sdri - (sd_e - sd_m)).abs() < 1e-6);
        }
    }
}
