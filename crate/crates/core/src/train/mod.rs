//! Multi-task objective, the Adam training loop with a validation-plateau
//! learning-rate schedule and early stopping, resumable state, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_checkpoint, load_train_state, save_checkpoint, save_train_state, TrainState,
    TrainStateMeta,
};
use crate::corpus::MixtureExample;
use crate::error::{Error, Result};
use crate::eval::mean_final_si_sdri;
use crate::nn::{Graph, Tensor, ValId};
use crate::pipeline::{forward_graph, MultiStageModel, StageOptions, StageTrace};
use crate::signal::{si_sdr_loss, Waveform, METRIC_CLAMP_DB, METRIC_EPS};
use adam::Adam;
use schedule::{PlateauSchedule, Verdict};

use crate::corpus::synth::seeded_rng;
use rand::Rng;

/// Training protocol knobs. Defaults follow the full-scale recipe; `toy`
/// shrinks the budget for desk runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub early_stop_patience: usize,
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub multitask_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            lr_init: 1e-3,
            lr_decay_factor: 0.5,
            lr_patience_epochs: 2,
            early_stop_patience: 6,
            segment_seconds: 4.0,
            batch_size: 8,
            multitask_gamma: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            max_epochs: 30,
            segment_seconds: 1.0,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if self.lr_patience_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_init and lr_decay_factor must be positive".into()));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        if !self.multitask_gamma.is_finite() || self.multitask_gamma < 0.0 {
            return Err(Error::Config("multitask_gamma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Maps corpus speaker ids onto contiguous classifier classes.
#[derive(Debug, Clone, Default)]
pub struct LabelMap {
    ids: Vec<u32>,
}

impl LabelMap {
    pub fn from_examples(examples: &[MixtureExample]) -> Self {
        let mut ids: Vec<u32> = examples.iter().map(|e| e.speaker_id).collect();
        ids.sort_unstable();
        ids.dedup();
        LabelMap { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_of(&self, speaker_id: u32) -> Result<usize> {
        self.ids
            .binary_search(&speaker_id)
            .map_err(|_| Error::invalid(format!("speaker {speaker_id} not in the training roster")))
    }
}

/// SI-SDR loss on the graph: the same epsilon-guarded, clamped definition as
/// the plain metric, assembled from differentiable primitives.
pub fn si_sdr_loss_graph(g: &mut Graph, estimate: ValId, target: ValId) -> ValId {
    let dot_es = g.dot(estimate, target);
    let dot_ss = g.dot(target, target);
    let alpha = g.div(dot_es, dot_ss);
    let proj = g.scale_by(alpha, target);
    let resid = g.sub(proj, estimate);
    let num_sq = g.dot(proj, proj);
    let num = g.sqrt(num_sq);
    let den_sq = g.dot(resid, resid);
    let den = g.sqrt(den_sq);
    let num_eps = g.add_const(num, METRIC_EPS);
    let den_eps = g.add_const(den, METRIC_EPS);
    let ratio = g.div(num_eps, den_eps);
    let ln = g.ln(ratio);
    let rho = g.mul_const(ln, 20.0 / std::f64::consts::LN_10);
    let clamped = g.clamp(rho, -METRIC_CLAMP_DB, METRIC_CLAMP_DB);
    g.mul_const(clamped, -1.0)
}

/// Multi-task objective on the graph: per-stage SI-SDR losses on the fused
/// outputs averaged over stages, plus `gamma` times the per-stage speaker
/// cross-entropies averaged over stages.
pub fn total_loss_graph(
    g: &mut Graph,
    traces: &[StageTrace],
    target: ValId,
    label: usize,
    gamma: f64,
) -> Result<ValId> {
    let si: Vec<ValId> = traces
        .iter()
        .map(|tr| si_sdr_loss_graph(g, tr.fused, target))
        .collect();
    let mut loss = g.mean_of(&si);
    if gamma > 0.0 {
        for tr in traces {
            let classes = g.shape(tr.logits).0;
            if label >= classes {
                return Err(Error::invalid(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
        }
        let ces: Vec<ValId> = traces
            .iter()
            .map(|tr| g.cross_entropy(tr.logits, label))
            .collect();
        let ce_mean = g.mean_of(&ces);
        let scaled = g.mul_const(ce_mean, gamma);
        loss = g.add(loss, scaled);
    }
    Ok(loss)
}

/// The same objective computed from materialized pipeline outputs, used as
/// the independent route for testing and by the finite-difference checker.
pub fn total_loss(
    out: &crate::pipeline::PipelineOutput,
    target: &Waveform,
    label: usize,
    gamma: f64,
) -> Result<f64> {
    let k = out.stages.len() as f64;
    let mut loss = 0.0;
    for st in &out.stages {
        loss += si_sdr_loss(&st.fused, target)? / k;
    }
    if gamma > 0.0 {
        for st in &out.stages {
            let z = &st.speaker_logits;
            if label >= z.len() {
                return Err(Error::invalid(format!(
                    "label {label} out of range for {} classes",
                    z.len()
                )));
            }
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += gamma * (lse - z[label]) / k;
        }
    }
    Ok(loss)
}

/// Picks a crop offset whose target segment carries energy, deterministically
/// in the seed words.
fn choose_crop(example: &MixtureExample, seg_len: usize, seed_words: &[u64]) -> (usize, usize) {
    let n = example.mixture.len();
    if n <= seg_len {
        return (0, n);
    }
    let mut rng = seeded_rng(seed_words);
    let mut best = (0usize, -1.0f64);
    for _ in 0..8 {
        let offset = rng.gen_range(0..=n - seg_len);
        let energy = example.target.crop(offset, seg_len).energy();
        if energy > 1e-4 {
            return (offset, seg_len);
        }
        if energy > best.1 {
            best = (offset, energy);
        }
    }
    (best.0, seg_len)
}

/// Forward + backward on one (possibly cropped) example.
fn example_loss_grad(
    model: &MultiStageModel,
    example: &MixtureExample,
    label: usize,
    seg_len: usize,
    opts: StageOptions,
    gamma: f64,
    crop_words: &[u64],
) -> Result<(f64, Vec<f64>)> {
    let (offset, len) = choose_crop(example, seg_len, crop_words);
    let mixture = example.mixture.crop(offset, len);
    let target = example.target.crop(offset, len);
    let mut g = Graph::new(&model.store);
    let mix = g.input(Tensor::signal(mixture.into_samples()));
    let rf = g.input(Tensor::signal(example.reference.samples().to_vec()));
    let tgt = g.input(Tensor::signal(target.into_samples()));
    let traces = forward_graph(&mut g, model, mix, rf, opts)?;
    let loss = total_loss_graph(&mut g, &traces, tgt, label, gamma)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    Ok((value, grads.params))
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_sisdri: f64,
    pub lr: f64,
    /// (w1, w2, w3) per stage.
    pub fusion_weights: Vec<(f64, f64, f64)>,
}

#[derive(Debug)]
pub struct FitOutput {
    /// The best model by dev metric, reloaded from its checkpoint (so its
    /// parameters are exactly the stored f32 values).
    pub best: MultiStageModel,
    pub best_checkpoint: PathBuf,
    pub best_dev_sisdri: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRAIN_STATE_FILE: &str = "train.state";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Trains `model` on `train`, validating on `dev` with mean final-stage
/// SI-SDR improvement as the schedule metric.
pub fn fit(
    model: &mut MultiStageModel,
    train: &[MixtureExample],
    dev: &[MixtureExample],
    tcfg: &TrainConfig,
    opts: StageOptions,
    out_dir: &Path,
) -> Result<FitOutput> {
    let dev = dev.to_vec();
    fit_with_validator(model, train, tcfg, opts, out_dir, move |m, _| {
        mean_final_si_sdri(m, &dev, opts)
    })
}

/// [`fit`] with a caller-supplied validation metric; the schedule,
/// checkpointing, and early stopping react to whatever it returns.
pub fn fit_with_validator(
    model: &mut MultiStageModel,
    train: &[MixtureExample],
    tcfg: &TrainConfig,
    opts: StageOptions,
    out_dir: &Path,
    validator: impl FnMut(&MultiStageModel, usize) -> Result<f64>,
) -> Result<FitOutput> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let labels = LabelMap::from_examples(train);
    if labels.len() > model.config.num_speakers {
        return Err(Error::Config(format!(
            "training roster has {} speakers but the classifier head has {}",
            labels.len(),
            model.config.num_speakers
        )));
    }
    let schedule = PlateauSchedule::new(
        tcfg.lr_init,
        tcfg.lr_decay_factor,
        tcfg.lr_patience_epochs,
        tcfg.early_stop_patience,
    );
    let optimizer = Adam::new(model.store.len());
    run_epochs(
        model, train, &labels, tcfg, opts, out_dir, validator, schedule, optimizer, 0, Vec::new(),
    )
}

/// Continues a run from the train-state file in `out_dir`. The training and
/// dev sets and config must be the ones the original run used; batch order
/// and crops are pure functions of (seed, epoch), so the continuation matches
/// an uninterrupted run exactly.
pub fn resume_fit(
    train: &[MixtureExample],
    dev: &[MixtureExample],
    tcfg: &TrainConfig,
    opts: StageOptions,
    out_dir: &Path,
) -> Result<FitOutput> {
    tcfg.validate()?;
    let state = load_train_state(out_dir.join(TRAIN_STATE_FILE))?;
    let mut model = MultiStageModel::new(state.meta.config.clone(), 0)?;
    if state.params.len() != model.store.len() {
        return Err(Error::Corrupt {
            path: out_dir.join(TRAIN_STATE_FILE),
            message: "parameter vector does not match the stored config".into(),
        });
    }
    model.store.data_mut().copy_from_slice(&state.params);
    let labels = LabelMap::from_examples(train);
    let schedule = PlateauSchedule::resume(
        state.meta.current_lr,
        tcfg.lr_decay_factor,
        tcfg.lr_patience_epochs,
        tcfg.early_stop_patience,
        state.meta.best_val_metric,
        state.meta.epochs_since_best,
        state.meta.epochs_since_lr_drop,
    );
    let optimizer = Adam::from_state(state.adam_m, state.adam_v, state.meta.adam_step);
    let mut tcfg = tcfg.clone();
    tcfg.seed = state.meta.seed;
    let history = load_history(&out_dir.join(HISTORY_FILE)).unwrap_or_default();
    let dev = dev.to_vec();
    run_epochs(
        &mut model,
        train,
        &labels,
        &tcfg,
        opts,
        out_dir,
        move |m, _| mean_final_si_sdri(m, &dev, opts),
        schedule,
        optimizer,
        state.meta.epochs_done,
        history,
    )
}

pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            field: "history line".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut MultiStageModel,
    train: &[MixtureExample],
    labels: &LabelMap,
    tcfg: &TrainConfig,
    opts: StageOptions,
    out_dir: &Path,
    mut validator: impl FnMut(&MultiStageModel, usize) -> Result<f64>,
    mut schedule: PlateauSchedule,
    mut optimizer: Adam,
    start_epoch: usize,
    mut history: Vec<EpochRecord>,
) -> Result<FitOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT_FILE);
    let state_path = out_dir.join(TRAIN_STATE_FILE);
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_file = fs::OpenOptions::new()
        .create(true)
        .append(start_epoch > 0)
        .truncate(start_epoch == 0)
        .write(true)
        .open(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;

    let sample_rate = train[0].mixture.sample_rate();
    let seg_len = ((tcfg.segment_seconds * sample_rate as f64).round() as usize).max(1);
    let class_of: Vec<usize> = train
        .iter()
        .map(|ex| labels.class_of(ex.speaker_id))
        .collect::<Result<_>>()?;

    let mut stopped_early = false;
    let param_count = model.store.len();
    for epoch in start_epoch..tcfg.max_epochs {
        let lr = schedule.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = seeded_rng(&[tcfg.seed, 0x7368756666, epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<f64>)>> = chunk
                .par_iter()
                .map(|&i| {
                    example_loss_grad(
                        model,
                        &train[i],
                        class_of[i],
                        seg_len,
                        opts,
                        tcfg.multitask_gamma,
                        &[tcfg.seed, 0x63726f70, epoch as u64, i as u64],
                    )
                })
                .collect();
            let mut grad = vec![0.0; param_count];
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx} \
                     (seed {}, examples {:?})",
                    tcfg.seed, chunk
                )));
            }
            for v in grad.iter_mut() {
                *v *= inv;
            }
            optimizer.step(model.store.data_mut(), &grad, lr);
            loss_sum += batch_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        let dev_metric = validator(model, epoch)?;
        if !dev_metric.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation metric at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_sisdri: dev_metric,
            lr,
            fusion_weights: (0..model.stages.len())
                .map(|k| model.fusion_weights(k))
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(history_file, "{line}").map_err(|e| Error::io(&history_path, e))?;
        history.push(record);

        let verdict = schedule.observe(dev_metric);
        if verdict == Verdict::Improved {
            save_checkpoint(model, &best_path)?;
        }
        save_train_state(
            &TrainState {
                meta: TrainStateMeta {
                    config: model.config.clone(),
                    epochs_done: epoch + 1,
                    current_lr: schedule.lr(),
                    best_val_metric: schedule.best(),
                    epochs_since_best: schedule.since_best(),
                    epochs_since_lr_drop: schedule.since_lr_drop(),
                    adam_step: optimizer.step_count,
                    seed: tcfg.seed,
                },
                params: model.store.data().to_vec(),
                adam_m: optimizer.m.clone(),
                adam_v: optimizer.v.clone(),
            },
            &state_path,
        )?;
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
    }

    let best = load_checkpoint(&best_path)?;
    Ok(FitOutput {
        best,
        best_checkpoint: best_path,
        best_dev_sisdri: schedule.best(),
        history,
        stopped_early,
    })
}

/// One finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub items: Vec<GradCheckItem>,
}

/// Compares analytic gradients of the total loss against central finite
/// differences for the selected `(parameter name, element index)` pairs.
pub fn gradcheck(
    model: &mut MultiStageModel,
    example: &MixtureExample,
    label: usize,
    opts: StageOptions,
    picks: &[(String, usize)],
    h: f64,
) -> Result<GradCheckResult> {
    let gamma = model.config.multitask_gamma;
    let analytic = {
        let mut g = Graph::new(&model.store);
        let mix = g.input(Tensor::signal(example.mixture.samples().to_vec()));
        let rf = g.input(Tensor::signal(example.reference.samples().to_vec()));
        let tgt = g.input(Tensor::signal(example.target.samples().to_vec()));
        let traces = forward_graph(&mut g, model, mix, rf, opts)?;
        let loss = total_loss_graph(&mut g, &traces, tgt, label, gamma)?;
        g.backward(loss).params
    };

    let loss_at = |model: &MultiStageModel| -> Result<f64> {
        let out = model.forward_pipeline(&example.mixture, &example.reference, opts)?;
        total_loss(&out, &example.target, label, gamma)
    };

    let mut items = Vec::new();
    let mut max_rel: f64 = 0.0;
    for (name, index) in picks {
        let r = model
            .store
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let entry = model.store.entry(r).clone();
        if *index >= entry.len() {
            return Err(Error::invalid(format!(
                "index {index} out of range for `{name}` ({} elements)",
                entry.len()
            )));
        }
        let orig = model.store.slice(r)[*index];
        model.store.slice_mut(r)[*index] = orig + h;
        let plus = loss_at(model)?;
        model.store.slice_mut(r)[*index] = orig - h;
        let minus = loss_at(model)?;
        model.store.slice_mut(r)[*index] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[entry.offset + index];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        items.push(GradCheckItem {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    Ok(GradCheckResult {
        max_rel_error: max_rel,
        items,
    })
}
