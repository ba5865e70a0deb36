//! Synthetic two-speaker corpus: parametric voices mixed at controlled SNR
//! under clean / noise / reverb / noise+reverb conditions, persisted as WAV
//! files plus line-delimited JSON manifests.

pub mod synth;
pub mod wav;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{mix_at_snr, Waveform};
use synth::{convolve_truncated, exp_decay_ir, pink_noise, render_utterance, seeded_rng, SpeakerProfile};
use wav::{load_wav, save_wav};

/// Acoustic condition of a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Noise,
    Reverb,
    NoiseReverb,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Clean,
        Condition::Noise,
        Condition::Reverb,
        Condition::NoiseReverb,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noise => "noise",
            Condition::Reverb => "reverb",
            Condition::NoiseReverb => "noise_reverb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "noise" => Ok(Condition::Noise),
            "reverb" => Ok(Condition::Reverb),
            "noise_reverb" => Ok(Condition::NoiseReverb),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One training/eval record: mixture y, reference x, clean target s, and the
/// true speaker label.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub reference: Waveform,
    pub target: Waveform,
    pub speaker_id: u32,
    pub condition: Condition,
    pub snr_db: f64,
}

/// One manifest line. Paths are relative to the manifest's directory; field
/// order is part of the on-disk contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub mixture_path: String,
    pub reference_path: String,
    pub target_path: String,
    pub speaker_id: u32,
    pub condition: Condition,
    pub snr_db: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn for_split(&self, split: Split) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn speaker_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.speaker_id).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                field: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(Manifest { records })
    }
}

/// Loads the three waveforms of a manifest record, resolving paths against
/// `base_dir` (the manifest's directory).
pub fn load_example(base_dir: &Path, record: &ManifestRecord) -> Result<MixtureExample> {
    Ok(MixtureExample {
        mixture: load_wav(base_dir.join(&record.mixture_path))?,
        reference: load_wav(base_dir.join(&record.reference_path))?,
        target: load_wav(base_dir.join(&record.target_path))?,
        speaker_id: record.speaker_id,
        condition: record.condition,
        snr_db: record.snr_db,
    })
}

/// Everything that defines a corpus; generation is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    /// How many speakers are held out for the test split (the open condition).
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_seconds: f64,
    pub reference_seconds: f64,
    pub train_mixtures: usize,
    pub dev_mixtures: usize,
    pub test_mixtures: usize,
    /// Speaker-mix SNR range in dB, sampled uniformly.
    pub snr_range: (f64, f64),
    /// Conditions cycled over the examples of each split.
    pub conditions: Vec<Condition>,
    pub corpus_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 4,
            test_speakers: 2,
            utterances_per_speaker: 24,
            utterance_seconds: 3.0,
            reference_seconds: 2.0,
            train_mixtures: 200,
            dev_mixtures: 40,
            test_mixtures: 40,
            snr_range: (0.0, 5.0),
            conditions: vec![Condition::Clean],
            corpus_seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 4 {
            return Err(Error::invalid(format!(
                "need at least 4 speakers, got {}",
                self.num_speakers
            )));
        }
        if self.test_speakers < 2 || self.num_speakers - self.test_speakers < 2 {
            return Err(Error::invalid(
                "disjoint splits need >= 2 train and >= 2 test speakers".to_string(),
            ));
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::invalid(
                "need >= 2 utterances per speaker so references can avoid the mixed utterance"
                    .to_string(),
            ));
        }
        if self.reference_seconds <= 0.0 || self.utterance_seconds <= 0.0 {
            return Err(Error::invalid("durations must be positive".to_string()));
        }
        if self.snr_range.0 > self.snr_range.1 {
            return Err(Error::invalid("snr_range must be ordered".to_string()));
        }
        if self.conditions.is_empty() {
            return Err(Error::invalid("conditions must be non-empty".to_string()));
        }
        Ok(())
    }

    /// Fingerprint used for up-to-date detection.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn rosters(&self) -> (Vec<u32>, Vec<u32>) {
        let train: Vec<u32> = (0..(self.num_speakers - self.test_speakers) as u32).collect();
        let test: Vec<u32> =
            ((self.num_speakers - self.test_speakers) as u32..self.num_speakers as u32).collect();
        (train, test)
    }
}

/// Applies an acoustic condition to a clean example. Noise adds pink noise
/// at a mixture-relative SNR drawn from [0, 10] dB; reverb convolves each
/// source with its own synthetic impulse response (RT60 in [0.1, 0.4] s)
/// while the stored target stays the direct-path signal. If the result
/// clips, mixture and target are rescaled together.
pub fn augment_condition(
    example: &MixtureExample,
    condition: Condition,
    aug_seed: u64,
) -> Result<MixtureExample> {
    if example.condition != Condition::Clean {
        return Err(Error::invalid(format!(
            "augment_condition expects a clean example, got {}",
            example.condition.as_str()
        )));
    }
    if condition == Condition::Clean {
        return Ok(example.clone());
    }
    let mut rng = seeded_rng(&[0x617567, aug_seed]);
    let mut mixture = example.mixture.clone();
    let mut target = example.target.clone();

    if matches!(condition, Condition::Reverb | Condition::NoiseReverb) {
        let interferer = Waveform::new(
            mixture
                .samples()
                .iter()
                .zip(target.samples())
                .map(|(m, t)| m - t)
                .collect(),
            mixture.sample_rate(),
        )?;
        let rt60_t = rng.gen_range(0.1..0.4);
        let rt60_i = rng.gen_range(0.1..0.4);
        let ir_t = exp_decay_ir(rt60_t, rng.gen());
        let ir_i = exp_decay_ir(rt60_i, rng.gen());
        let rev_t = convolve_truncated(&target, &ir_t);
        let rev_i = convolve_truncated(&interferer, &ir_i);
        mixture = Waveform::new(
            rev_t
                .samples()
                .iter()
                .zip(rev_i.samples())
                .map(|(a, b)| a + b)
                .collect(),
            mixture.sample_rate(),
        )?;
    }

    if matches!(condition, Condition::Noise | Condition::NoiseReverb) {
        let snr: f64 = rng.gen_range(0.0..10.0);
        let noise = pink_noise(mixture.len(), rng.gen());
        let p_mix = mixture.energy();
        let p_noise = noise.energy();
        let gain = (p_mix / (p_noise * 10f64.powf(snr / 10.0))).sqrt();
        mixture = Waveform::new(
            mixture
                .samples()
                .iter()
                .zip(noise.samples())
                .map(|(m, n)| m + gain * n)
                .collect(),
            mixture.sample_rate(),
        )?;
    }

    let peak = mixture.peak();
    if peak > 1.0 {
        let norm = 1.0 / peak;
        mixture = mixture.scaled(norm);
        target = target.scaled(norm);
    }
    Ok(MixtureExample {
        mixture,
        reference: example.reference.clone(),
        target,
        speaker_id: example.speaker_id,
        condition,
        snr_db: example.snr_db,
    })
}

fn build_example(
    spec: &CorpusSpec,
    roster: &[u32],
    utterances: &dyn Fn(u32, usize) -> Result<Waveform>,
    split: Split,
    index: usize,
) -> Result<MixtureExample> {
    let mut rng = seeded_rng(&[spec.corpus_seed, 0x6d6978, split as u64, index as u64]);
    let target_pos = rng.gen_range(0..roster.len());
    let mut interf_pos = rng.gen_range(0..roster.len() - 1);
    if interf_pos >= target_pos {
        interf_pos += 1;
    }
    let target_spk = roster[target_pos];
    let interf_spk = roster[interf_pos];
    let target_utt = rng.gen_range(0..spec.utterances_per_speaker);
    let interf_utt = rng.gen_range(0..spec.utterances_per_speaker);
    // The reference is always one of the target speaker's *other* utterances.
    let mut ref_utt = rng.gen_range(0..spec.utterances_per_speaker - 1);
    if ref_utt >= target_utt {
        ref_utt += 1;
    }
    let snr_db = rng.gen_range(spec.snr_range.0..=spec.snr_range.1);

    let target_wave = utterances(target_spk, target_utt)?;
    let interf_wave = utterances(interf_spk, interf_utt)?;
    let mix = mix_at_snr(&target_wave, &interf_wave, snr_db)?;
    let target_scaled = target_wave.scaled(mix.norm_gain);

    let ref_full = utterances(target_spk, ref_utt)?;
    let ref_len = (spec.reference_seconds * wav::SAMPLE_RATE as f64).round() as usize;
    let reference = if ref_full.len() > ref_len {
        let offset = rng.gen_range(0..=ref_full.len() - ref_len);
        ref_full.crop(offset, ref_len)
    } else {
        ref_full
    };

    let clean = MixtureExample {
        mixture: mix.mixture,
        reference,
        target: target_scaled,
        speaker_id: target_spk,
        condition: Condition::Clean,
        snr_db,
    };
    let condition = spec.conditions[index % spec.conditions.len()];
    augment_condition(
        &clean,
        condition,
        seeded_rng(&[spec.corpus_seed, 0x636f6e64, split as u64, index as u64]).gen(),
    )
}

/// What [`generate_corpus`] produced (or found already in place).
#[derive(Debug)]
pub struct CorpusOutput {
    pub manifest: Manifest,
    pub manifest_paths: Vec<PathBuf>,
    /// True when an identical corpus was already on disk and nothing was rewritten.
    pub up_to_date: bool,
}

/// Renders all utterances, builds mixtures for disjoint train/dev/test
/// speaker rosters, writes WAVs and per-split manifests under `out_dir`.
/// Generation is deterministic in the spec; rerunning over an identical
/// corpus is detected via a fingerprint file and skipped.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<CorpusOutput> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let fingerprint_path = out_dir.join("corpus.fingerprint");
    let manifest_paths: Vec<PathBuf> = [Split::Train, Split::Dev, Split::Test]
        .iter()
        .map(|s| out_dir.join(format!("{}.jsonl", s.as_str())))
        .collect();

    if let Ok(existing) = fs::read_to_string(&fingerprint_path) {
        if existing.trim() == spec.fingerprint() {
            let mut all = Manifest::default();
            let mut complete = true;
            for p in &manifest_paths {
                match Manifest::load(p) {
                    Ok(m) => all.records.extend(m.records),
                    Err(_) => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete
                && all
                    .records
                    .iter()
                    .all(|r| out_dir.join(&r.mixture_path).is_file())
            {
                return Ok(CorpusOutput {
                    manifest: all,
                    manifest_paths,
                    up_to_date: true,
                });
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let profiles: Vec<SpeakerProfile> = (0..spec.num_speakers as u32)
        .map(|id| SpeakerProfile::derive(id, spec.corpus_seed))
        .collect();
    let utterance = |spk: u32, utt: usize| -> Result<Waveform> {
        render_utterance(
            &profiles[spk as usize],
            spec.utterance_seconds,
            seeded_rng(&[spec.corpus_seed, 0x757474, spk as u64, utt as u64]).gen(),
        )
    };

    let (train_roster, test_roster) = spec.rosters();
    let mut all = Manifest::default();
    for (split, roster, count) in [
        (Split::Train, &train_roster, spec.train_mixtures),
        (Split::Dev, &train_roster, spec.dev_mixtures),
        (Split::Test, &test_roster, spec.test_mixtures),
    ] {
        let split_dir = out_dir.join(split.as_str());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        for i in 0..count {
            let example = build_example(spec, roster, &utterance, split, i)?;
            let stem = format!("{}/{:04}", split.as_str(), i);
            let record = ManifestRecord {
                mixture_path: format!("{stem}_mix.wav"),
                reference_path: format!("{stem}_ref.wav"),
                target_path: format!("{stem}_target.wav"),
                speaker_id: example.speaker_id,
                condition: example.condition,
                snr_db: example.snr_db,
                split,
            };
            save_wav(&example.mixture, out_dir.join(&record.mixture_path))?;
            save_wav(&example.reference, out_dir.join(&record.reference_path))?;
            save_wav(&example.target, out_dir.join(&record.target_path))?;
            all.records.push(record);
        }
    }
    for (path, split) in manifest_paths
        .iter()
        .zip([Split::Train, Split::Dev, Split::Test])
    {
        all.for_split(split).save(path)?;
    }
    let mut f = fs::File::create(&fingerprint_path).map_err(|e| Error::io(&fingerprint_path, e))?;
    writeln!(f, "{}", spec.fingerprint()).map_err(|e| Error::io(&fingerprint_path, e))?;
    Ok(CorpusOutput {
        manifest: all,
        manifest_paths,
        up_to_date: false,
    })
}
