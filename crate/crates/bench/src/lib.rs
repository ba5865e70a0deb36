//! Shared fixtures for the benchmarks: a toy model and synthetic signals.

use tse_core::corpus::synth::{render_utterance, SpeakerProfile};
use tse_core::corpus::{Condition, MixtureExample};
use tse_core::signal::{mix_at_snr, Waveform};
use tse_core::{ModelConfig, MultiStageModel};

pub fn toy_model(stages: usize, seed: u64) -> MultiStageModel {
    let mut cfg = ModelConfig::toy();
    cfg.num_stages = stages;
    MultiStageModel::new(cfg, seed).unwrap()
}

/// A 1-second mixture with a 2-second reference from synthetic speakers.
pub fn bench_example() -> MixtureExample {
    let a = SpeakerProfile::derive(0, 7);
    let b = SpeakerProfile::derive(1, 7);
    let target = render_utterance(&a, 1.0, 1).unwrap();
    let interf = render_utterance(&b, 1.0, 2).unwrap();
    let mix = mix_at_snr(&target, &interf, 2.5).unwrap();
    let reference = render_utterance(&a, 2.0, 3).unwrap();
    MixtureExample {
        target: target.scaled(mix.norm_gain),
        mixture: mix.mixture,
        reference,
        speaker_id: 0,
        condition: Condition::Clean,
        snr_db: 2.5,
    }
}

pub fn long_wave(seconds: f64) -> Waveform {
    let p = SpeakerProfile::derive(2, 7);
    render_utterance(&p, seconds, 9).unwrap()
}
