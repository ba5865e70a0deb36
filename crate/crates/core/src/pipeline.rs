//! Chains K single-stage extractors. Stage 1 is conditioned on the enrolled
//! reference alone; every later stage re-derives its speaker references from
//! the previous stage's fused estimate — an utterance-level embedding from
//! the time-domain concat of reference and estimate, and a frame-level
//! embedding from the estimate passed through the shared speech encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    Decoders, EncodingIds, Extractor, FrameEmbedding, MaskSet, ModelConfig, MultiScaleEncoding,
    SpeakerEmbedding, SpeakerEncoder, SpeechEncoder,
};
use crate::nn::{Graph, ParamBuilder, ParamRef, ParamStore, Tensor, ValId};
use crate::signal::Waveform;

/// Ablation switches for how later stages reference the target speaker.
/// `use_utt` refreshes the utterance embedding from the previous estimate;
/// `use_frame` feeds the frame-level embedding. Stage 1 ignores both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOptions {
    pub use_utt: bool,
    pub use_frame: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            use_utt: true,
            use_frame: true,
        }
    }
}

impl StageOptions {
    /// Short form used in reports: "utt", "fm", "utt+fm", or "none".
    pub fn reference_mode(&self) -> &'static str {
        match (self.use_utt, self.use_frame) {
            (true, true) => "utt+fm",
            (true, false) => "utt",
            (false, true) => "fm",
            (false, false) => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "utt+fm" | "fm+utt" => Ok(StageOptions { use_utt: true, use_frame: true }),
            "utt" => Ok(StageOptions { use_utt: true, use_frame: false }),
            "fm" => Ok(StageOptions { use_utt: false, use_frame: true }),
            "none" => Ok(StageOptions { use_utt: false, use_frame: false }),
            other => Err(Error::Config(format!(
                "unknown reference mode `{other}` (expected utt, fm, utt+fm, or none)"
            ))),
        }
    }
}

/// Per-stage fusion weight handles.
#[derive(Debug, Clone)]
pub struct FusionHandles {
    pub w: [ParamRef; 3],
}

impl FusionHandles {
    fn build(b: &mut ParamBuilder, prefix: &str, init: (f64, f64, f64)) -> Self {
        FusionHandles {
            w: [
                b.constant(&format!("{prefix}.w1"), 1, 1, init.0),
                b.constant(&format!("{prefix}.w2"), 1, 1, init.1),
                b.constant(&format!("{prefix}.w3"), 1, 1, init.2),
            ],
        }
    }
}

/// Extractor, decoders, and fusion weights for one stage. The speech and
/// speaker encoders are shared across stages and live on the model.
#[derive(Debug, Clone)]
pub struct Stage {
    pub extractor: Extractor,
    pub decoders: Decoders,
    pub fusion: FusionHandles,
}

/// The complete K-stage extraction model. All parameters live in one flat
/// [`ParamStore`]; the encoder blocks hold handles into it, so the twin /
/// cross-stage sharing is sharing of the same storage by construction.
#[derive(Debug, Clone)]
pub struct MultiStageModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub speech_encoder: SpeechEncoder,
    pub speaker_encoder: SpeakerEncoder,
    pub stages: Vec<Stage>,
}

impl MultiStageModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let speech_encoder = SpeechEncoder::build(&mut b, &config);
        let speaker_encoder = SpeakerEncoder::build(&mut b, &config);
        let mut stages = Vec::new();
        for k in 1..=config.num_stages {
            stages.push(Stage {
                extractor: Extractor::build(&mut b, &format!("stage{k}.extractor"), &config),
                decoders: Decoders::build(&mut b, &format!("stage{k}.decoder"), &config),
                fusion: FusionHandles::build(&mut b, &format!("stage{k}.fusion"), config.fusion_init),
            });
        }
        Ok(MultiStageModel {
            config,
            store,
            speech_encoder,
            speaker_encoder,
            stages,
        })
    }

    /// Rebuilds the layer structure for `config` and overwrites parameters
    /// from `(name, rows, cols, values)` tuples, requiring an exact match of
    /// the registry (used by checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        entries: Vec<(String, usize, usize, Vec<f64>)>,
    ) -> Result<Self> {
        let mut model = MultiStageModel::new(config, 0)?;
        if entries.len() != model.store.entries().len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                model.store.entries().len(),
                entries.len()
            )));
        }
        for (name, rows, cols, values) in entries {
            model.store.set_named(&name, rows, cols, &values)?;
        }
        Ok(model)
    }

    pub fn fusion_weights(&self, stage: usize) -> (f64, f64, f64) {
        let f = &self.stages[stage].fusion;
        (
            self.store.slice(f.w[0])[0],
            self.store.slice(f.w[1])[0],
            self.store.slice(f.w[2])[0],
        )
    }

    fn check_wave(&self, label: &str, w: &Waveform) -> Result<()> {
        if w.len() < self.config.filter_lengths.2 {
            return Err(Error::invalid(format!(
                "{label} with {} samples is shorter than the longest filter ({})",
                w.len(),
                self.config.filter_lengths.2
            )));
        }
        Ok(())
    }

    /// Inference: encode a waveform with the shared speech encoder.
    pub fn encode_waveform(&self, wave: &Waveform) -> Result<MultiScaleEncoding> {
        self.check_wave("input", wave)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(Tensor::signal(wave.samples().to_vec()));
        let ids = self.speech_encoder.encode(&mut g, x)?;
        Ok(MultiScaleEncoding {
            features: ids.scales.map(|s| g.value(s).clone()),
            frame_stride: self.config.frame_stride(),
            frame_count: ids.frame_count,
        })
    }

    /// Inference: utterance embedding and speaker logits for a reference.
    pub fn speaker_embedding(&self, reference: &Waveform) -> Result<(SpeakerEmbedding, Vec<f64>)> {
        self.check_wave("reference", reference)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(Tensor::signal(reference.samples().to_vec()));
        let ids = self.speech_encoder.encode(&mut g, x)?;
        let (emb, logits) = self.speaker_encoder.encode(&mut g, &ids);
        Ok((
            SpeakerEmbedding(g.value(emb).data.clone()),
            g.value(logits).data.clone(),
        ))
    }

    /// Inference: run the full pipeline and materialize every stage output.
    pub fn forward_pipeline(
        &self,
        mixture: &Waveform,
        reference: &Waveform,
        opts: StageOptions,
    ) -> Result<PipelineOutput> {
        self.check_wave("mixture", mixture)?;
        self.check_wave("reference", reference)?;
        let mut g = Graph::new(&self.store);
        let mix = g.input(Tensor::signal(mixture.samples().to_vec()));
        let rf = g.input(Tensor::signal(reference.samples().to_vec()));
        let traces = forward_graph(&mut g, self, mix, rf, opts)?;
        let rate = mixture.sample_rate();
        let mut stages = Vec::new();
        for tr in &traces {
            stages.push(StageOutput {
                per_scale_estimates: [
                    tensor_to_wave(g.value(tr.per_scale[0]), rate)?,
                    tensor_to_wave(g.value(tr.per_scale[1]), rate)?,
                    tensor_to_wave(g.value(tr.per_scale[2]), rate)?,
                ],
                fused: tensor_to_wave(g.value(tr.fused), rate)?,
                speaker_logits: g.value(tr.logits).data.clone(),
                utt_embedding: SpeakerEmbedding(g.value(tr.utt_emb).data.clone()),
                frame_embedding: tr.frame_emb.map(|id| FrameEmbedding {
                    features: g.value(id).clone(),
                }),
            });
        }
        Ok(PipelineOutput { stages })
    }

    /// Inference: masks for one stage given precomputed embeddings, exposed
    /// for shape diagnostics.
    pub fn extract_masks(
        &self,
        stage: usize,
        mixture: &Waveform,
        utt: &SpeakerEmbedding,
        frame: Option<&FrameEmbedding>,
    ) -> Result<MaskSet> {
        self.check_wave("mixture", mixture)?;
        if utt.0.len() != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "embedding dimension {} != {}",
                utt.0.len(),
                self.config.embed_dim
            )));
        }
        let mut g = Graph::new(&self.store);
        let mix = g.input(Tensor::signal(mixture.samples().to_vec()));
        let ids = self.speech_encoder.encode(&mut g, mix)?;
        let emb = g.input(Tensor::column(utt.0.clone()));
        let frame_id = frame.map(|f| g.input(f.features.clone()));
        let masks = self.stages[stage].extractor.extract(&mut g, &ids, emb, frame_id)?;
        Ok(MaskSet {
            masks: masks.map(|m| g.value(m).clone()),
        })
    }
}

fn tensor_to_wave(t: &Tensor, rate: u32) -> Result<Waveform> {
    debug_assert_eq!(t.rows, 1);
    Waveform::new(t.data.clone(), rate)
}

/// Graph-side record of one stage's outputs.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub per_scale: [ValId; 3],
    pub fused: ValId,
    pub logits: ValId,
    pub utt_emb: ValId,
    pub frame_emb: Option<ValId>,
}

/// Materialized outputs of one stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub per_scale_estimates: [Waveform; 3],
    pub fused: Waveform,
    pub speaker_logits: Vec<f64>,
    pub utt_embedding: SpeakerEmbedding,
    /// Absent at stage 1: no previous estimate exists yet.
    pub frame_embedding: Option<FrameEmbedding>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stages: Vec<StageOutput>,
}

impl PipelineOutput {
    pub fn final_estimate(&self) -> &Waveform {
        &self.stages.last().expect("pipeline has >= 1 stage").fused
    }
}

/// Refined references for stage `k >= 2`: the utterance path encodes the
/// time-domain concat of the enrolled reference and the previous estimate;
/// the frame path encodes the previous estimate alone and stacks the three
/// scales channel-wise.
pub fn refine_references(
    g: &mut Graph,
    model: &MultiStageModel,
    reference: ValId,
    prev_estimate: ValId,
) -> Result<(ValId, ValId, ValId)> {
    let cat = g.concat_cols(&[reference, prev_estimate]);
    let enc_cat = model.speech_encoder.encode(g, cat)?;
    let (utt, logits) = model.speaker_encoder.encode(g, &enc_cat);
    let enc_prev = model.speech_encoder.encode(g, prev_estimate)?;
    let frame = g.concat_rows(&enc_prev.scales);
    Ok((utt, logits, frame))
}

/// Runs stage `k` (0-based index) on the graph. `prev` must be `None`
/// exactly when `k == 0`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    g: &mut Graph,
    model: &MultiStageModel,
    k: usize,
    mix_enc: &EncodingIds,
    mixture_len: usize,
    reference: ValId,
    first_stage_ref: (ValId, ValId),
    prev: Option<&StageTrace>,
    opts: StageOptions,
) -> Result<StageTrace> {
    if (k == 0) != prev.is_none() {
        return Err(Error::invalid(format!(
            "stage {} requires a previous stage output iff it is not the first",
            k + 1
        )));
    }
    let (utt, logits, frame) = match prev {
        None => (first_stage_ref.0, first_stage_ref.1, None),
        Some(p) => {
            let (refined_utt, refined_logits, frame) =
                refine_references(g, model, reference, p.fused)?;
            let (utt, logits) = if opts.use_utt {
                (refined_utt, refined_logits)
            } else {
                (first_stage_ref.0, first_stage_ref.1)
            };
            (utt, logits, opts.use_frame.then_some(frame))
        }
    };
    let stage = &model.stages[k];
    let masks = stage.extractor.extract(g, mix_enc, utt, frame)?;
    let per_scale = stage.decoders.decode(g, mix_enc, &masks, mixture_len)?;
    let mut fused = None;
    for (i, &est) in per_scale.iter().enumerate() {
        let w = g.param(stage.fusion.w[i]);
        let term = g.scale_by(w, est);
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    Ok(StageTrace {
        per_scale,
        fused: fused.unwrap(),
        logits,
        utt_emb: utt,
        frame_emb: frame,
    })
}

/// Runs all stages, feeding each fused output forward. Returns one trace per
/// stage so losses can see every intermediate output.
pub fn forward_graph(
    g: &mut Graph,
    model: &MultiStageModel,
    mixture: ValId,
    reference: ValId,
    opts: StageOptions,
) -> Result<Vec<StageTrace>> {
    let mixture_len = g.shape(mixture).1;
    let mix_enc = model.speech_encoder.encode(g, mixture)?;
    let ref_enc = model.speech_encoder.encode(g, reference)?;
    let first_stage_ref = model.speaker_encoder.encode(g, &ref_enc);
    let mut traces: Vec<StageTrace> = Vec::with_capacity(model.config.num_stages);
    for k in 0..model.config.num_stages {
        let prev = if k == 0 { None } else { traces.last() };
        let trace = run_stage(
            g,
            model,
            k,
            &mix_enc,
            mixture_len,
            reference,
            first_stage_ref,
            prev.cloned().as_ref(),
            opts,
        )?;
        traces.push(trace);
    }
    Ok(traces)
}


#[cfg(test)]
mod tests {
    use super::*;
    use tests_support::tiny_cfg;

    fn test_wave(len: usize, f: f64) -> Waveform {
        Waveform::new(
            (0..len).map(|i| (i as f64 * f).sin() * 0.5).collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn pipeline_produces_one_output_per_stage_with_mixture_length() {
        let model = MultiStageModel::new(tiny_cfg(3), 7).unwrap();
        let mix = test_wave(60, 0.31);
        let rf = test_wave(44, 0.47);
        let out = model
            .forward_pipeline(&mix, &rf, StageOptions::default())
            .unwrap();
        assert_eq!(out.stages.len(), 3);
        for (k, st) in out.stages.iter().enumerate() {
            assert_eq!(st.fused.len(), mix.len());
            for est in &st.per_scale_estimates {
                assert_eq!(est.len(), mix.len());
            }
            assert_eq!(st.frame_embedding.is_none(), k == 0);
            assert_eq!(st.speaker_logits.len(), 3);
        }
    }

    #[test]
    fn stage1_is_identical_between_one_and_multi_stage_models() {
        let cfg1 = tiny_cfg(1);
        let cfg2 = tiny_cfg(2);
        let m1 = MultiStageModel::new(cfg1, 7).unwrap();
        let m2 = MultiStageModel::new(cfg2, 7).unwrap();
        // Name-keyed init makes shared blocks and stage-1 parameters
        // identical between the two models.
        let mix = test_wave(60, 0.31);
        let rf = test_wave(44, 0.47);
        let o1 = m1.forward_pipeline(&mix, &rf, StageOptions::default()).unwrap();
        let o2 = m2.forward_pipeline(&mix, &rf, StageOptions::default()).unwrap();
        assert_eq!(
            o1.stages[0].fused.samples(),
            o2.stages[0].fused.samples()
        );
    }

    #[test]
    fn frame_embedding_alignment_with_mixture_encoding() {
        let model = MultiStageModel::new(tiny_cfg(2), 3).unwrap();
        let mix = test_wave(57, 0.21);
        let rf = test_wave(40, 0.83);
        let out = model
            .forward_pipeline(&mix, &rf, StageOptions::default())
            .unwrap();
        let enc = model.encode_waveform(&mix).unwrap();
        let frame = out.stages[1].frame_embedding.as_ref().unwrap();
        assert_eq!(frame.frame_count(), enc.frame_count);
        assert_eq!(frame.features.rows, model.config.frame_embed_channels());
    }

    #[test]
    fn utt_only_and_fm_only_modes_differ_from_full_mode() {
        let model = MultiStageModel::new(tiny_cfg(2), 5).unwrap();
        let mix = test_wave(60, 0.31);
        let rf = test_wave(44, 0.47);
        let full = model
            .forward_pipeline(&mix, &rf, StageOptions { use_utt: true, use_frame: true })
            .unwrap();
        let utt_only = model
            .forward_pipeline(&mix, &rf, StageOptions { use_utt: true, use_frame: false })
            .unwrap();
        let fm_only = model
            .forward_pipeline(&mix, &rf, StageOptions { use_utt: false, use_frame: true })
            .unwrap();
        // Stage 1 is identical in all modes.
        assert_eq!(
            full.stages[0].fused.samples(),
            utt_only.stages[0].fused.samples()
        );
        assert_eq!(
            full.stages[0].fused.samples(),
            fm_only.stages[0].fused.samples()
        );
        // Stage 2 differs between modes.
        assert_ne!(
            full.stages[1].fused.samples(),
            utt_only.stages[1].fused.samples()
        );
        assert_ne!(
            full.stages[1].fused.samples(),
            fm_only.stages[1].fused.samples()
        );
        assert!(utt_only.stages[1].frame_embedding.is_none());
    }

    #[test]
    fn utt_only_equals_zeroed_frame_embedding() {
        // Ablation equivalence: dropping the frame embedding is the same as
        // feeding an all-zero one.
        let model = MultiStageModel::new(tiny_cfg(2), 5).unwrap();
        let mix = test_wave(60, 0.31);
        let rf = test_wave(44, 0.47);

        let utt_only = model
            .forward_pipeline(&mix, &rf, StageOptions { use_utt: true, use_frame: false })
            .unwrap();

        // Rebuild stage 2 by hand with a zero frame embedding.
        let mut g = Graph::new(&model.store);
        let mixv = g.input(Tensor::signal(mix.samples().to_vec()));
        let rfv = g.input(Tensor::signal(rf.samples().to_vec()));
        let mix_enc = model.speech_encoder.encode(&mut g, mixv).unwrap();
        let ref_enc = model.speech_encoder.encode(&mut g, rfv).unwrap();
        let first = model.speaker_encoder.encode(&mut g, &ref_enc);
        let s1 = run_stage(
            &mut g, &model, 0, &mix_enc, mix.len(), rfv, first, None,
            StageOptions::default(),
        )
        .unwrap();
        let (utt2, _, _) = refine_references(&mut g, &model, rfv, s1.fused).unwrap();
        let zeros = g.input(Tensor::zeros(
            model.config.frame_embed_channels(),
            mix_enc.frame_count,
        ));
        let masks = model.stages[1]
            .extractor
            .extract(&mut g, &mix_enc, utt2, Some(zeros))
            .unwrap();
        let per_scale = model.stages[1]
            .decoders
            .decode(&mut g, &mix_enc, &masks, mix.len())
            .unwrap();
        let (w1, w2, w3) = model.fusion_weights(1);
        let mut fused = vec![0.0; mix.len()];
        for (w, est) in [w1, w2, w3].iter().zip(per_scale.iter()) {
            for (f, v) in fused.iter_mut().zip(&g.value(*est).data) {
                *f += w * v;
            }
        }
        for (a, b) in utt_only.stages[1].fused.samples().iter().zip(&fused) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_references_concat_and_alignment_arithmetic() {
        let model = MultiStageModel::new(tiny_cfg(2), 11).unwrap();
        let mix = test_wave(48, 0.3);
        let rf = test_wave(36, 0.7);
        let mut g = Graph::new(&model.store);
        let mixv = g.input(Tensor::signal(mix.samples().to_vec()));
        let rfv = g.input(Tensor::signal(rf.samples().to_vec()));
        let prev = g.input(Tensor::signal(mix.samples().to_vec())); // same length as mixture
        let cat = g.concat_cols(&[rfv, prev]);
        assert_eq!(g.shape(cat).1, rf.len() + mix.len());
        let (utt, _logits, frame) = refine_references(&mut g, &model, rfv, prev).unwrap();
        assert_eq!(g.shape(utt), (model.config.embed_dim, 1));
        let mix_enc = model.speech_encoder.encode(&mut g, mixv).unwrap();
        assert_eq!(g.shape(frame).1, mix_enc.frame_count);
    }

    #[test]
    fn speech_encoder_parameters_are_shared_across_stages() {
        // One registry entry set for the speech encoder, regardless of stage
        // count: sharing is structural.
        let m3 = MultiStageModel::new(tiny_cfg(3), 2).unwrap();
        let enc_entries: Vec<_> = m3
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("speech_encoder."))
            .collect();
        assert_eq!(enc_entries.len(), 3);
        let spk_entries = m3
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("speaker_encoder."))
            .count();
        assert!(spk_entries > 0);
        // Per-stage blocks exist once per stage.
        for k in 1..=3 {
            assert!(m3
                .store
                .find(&format!("stage{k}.extractor.bottleneck.weight"))
                .is_some());
            assert!(m3.store.find(&format!("stage{k}.fusion.w1")).is_some());
        }
    }

    #[test]
    fn run_stage_rejects_inconsistent_prev() {
        let model = MultiStageModel::new(tiny_cfg(2), 5).unwrap();
        let mix = test_wave(48, 0.3);
        let rf = test_wave(36, 0.7);
        let mut g = Graph::new(&model.store);
        let mixv = g.input(Tensor::signal(mix.samples().to_vec()));
        let rfv = g.input(Tensor::signal(rf.samples().to_vec()));
        let mix_enc = model.speech_encoder.encode(&mut g, mixv).unwrap();
        let ref_enc = model.speech_encoder.encode(&mut g, rfv).unwrap();
        let first = model.speaker_encoder.encode(&mut g, &ref_enc);
        // Stage 2 (k=1) with no previous output must fail.
        let err = run_stage(
            &mut g, &model, 1, &mix_enc, mix.len(), rfv, first, None,
            StageOptions::default(),
        );
        assert!(err.is_err());
    }
}
