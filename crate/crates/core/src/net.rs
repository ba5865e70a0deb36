//! Single-stage network blocks: the shared multi-scale speech encoder, the
//! speaker encoder with its classification head, the TCN mask extractor, and
//! the per-scale speech decoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_out_len, Conv1d, ConvTranspose1d, GlobalNorm, Graph, Linear, PRelu, ParamBuilder, Tensor,
    ValId,
};

/// Every architectural hyperparameter of the extraction model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder/decoder filter lengths in samples, shortest first. The common
    /// frame stride is `filter_lengths.0 / 2`.
    pub filter_lengths: (usize, usize, usize),
    /// Feature channels per encoder scale.
    pub encoder_channels: usize,
    /// TCN blocks per stack; block `b` uses dilation `2^b`.
    pub tcn_blocks_per_stack: usize,
    /// Number of TCN stacks.
    pub tcn_stacks: usize,
    /// Hidden width of the depthwise path inside each TCN block.
    pub tcn_channels: usize,
    /// Width of the extractor's residual path.
    pub bottleneck_channels: usize,
    /// Channel widths of the speaker-encoder ResNet blocks.
    pub resnet_blocks: Vec<usize>,
    /// Speaker embedding dimension.
    pub embed_dim: usize,
    /// Classifier output size (training-roster speakers).
    pub num_speakers: usize,
    /// Number of chained extraction stages.
    pub num_stages: usize,
    /// Initial values for each stage's fusion weights.
    pub fusion_init: (f64, f64, f64),
    /// Weight of the speaker cross-entropy term in the training objective.
    pub multitask_gamma: f64,
}

impl ModelConfig {
    /// Desk-scale configuration; trains in minutes on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            filter_lengths: (20, 80, 160),
            encoder_channels: 32,
            tcn_blocks_per_stack: 4,
            tcn_stacks: 2,
            tcn_channels: 32,
            bottleneck_channels: 32,
            resnet_blocks: vec![16, 16, 32],
            embed_dim: 16,
            num_speakers: 2,
            num_stages: 1,
            fusion_init: (0.8, 0.1, 0.1),
            multitask_gamma: 0.5,
        }
    }

    /// Full-scale configuration (2.5/10/20 ms filters at 8 kHz, 8x4 TCN,
    /// 256-dim embeddings). Not intended for single-core training runs.
    pub fn paper_scale() -> Self {
        ModelConfig {
            filter_lengths: (20, 80, 160),
            encoder_channels: 256,
            tcn_blocks_per_stack: 8,
            tcn_stacks: 4,
            tcn_channels: 512,
            bottleneck_channels: 256,
            resnet_blocks: vec![256, 256, 512],
            embed_dim: 256,
            num_speakers: 101,
            num_stages: 3,
            fusion_init: (0.8, 0.1, 0.1),
            multitask_gamma: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l1, l2, l3) = self.filter_lengths;
        if l1 == 0 || l1 % 2 != 0 {
            return Err(Error::Config(format!(
                "filter_lengths.0 must be positive and even, got {l1}"
            )));
        }
        if !(l1 < l2 && l2 < l3) {
            return Err(Error::Config(format!(
                "filter lengths must be strictly increasing, got ({l1}, {l2}, {l3})"
            )));
        }
        let stride = l1 / 2;
        if l2 % stride != 0 || l3 % stride != 0 {
            return Err(Error::Config(format!(
                "filter_lengths.1/.2 must be multiples of the stride {stride}"
            )));
        }
        if self.num_stages == 0 {
            return Err(Error::Config("num_stages must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        for (label, v) in [
            ("encoder_channels", self.encoder_channels),
            ("tcn_blocks_per_stack", self.tcn_blocks_per_stack),
            ("tcn_stacks", self.tcn_stacks),
            ("tcn_channels", self.tcn_channels),
            ("bottleneck_channels", self.bottleneck_channels),
            ("num_speakers", self.num_speakers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{label} must be >= 1")));
            }
        }
        if self.resnet_blocks.is_empty() || self.resnet_blocks.contains(&0) {
            return Err(Error::Config(
                "resnet_blocks must be a non-empty list of positive widths".into(),
            ));
        }
        let (w1, w2, w3) = self.fusion_init;
        if !(w1.is_finite() && w2.is_finite() && w3.is_finite()) {
            return Err(Error::Config("fusion_init must be finite".into()));
        }
        if !self.multitask_gamma.is_finite() || self.multitask_gamma < 0.0 {
            return Err(Error::Config("multitask_gamma must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Common frame stride across scales, in samples.
    pub fn frame_stride(&self) -> usize {
        self.filter_lengths.0 / 2
    }

    /// Frames produced for an input of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        (len - self.filter_lengths.0) / self.frame_stride() + 1
    }

    /// Channel count of a frame-level embedding (all scales concatenated).
    pub fn frame_embed_channels(&self) -> usize {
        3 * self.encoder_channels
    }
}

/// Three time-aligned feature maps, one per filter length.
#[derive(Debug, Clone)]
pub struct MultiScaleEncoding {
    pub features: [Tensor; 3],
    pub frame_stride: usize,
    pub frame_count: usize,
}

/// Utterance-level speaker embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

/// Frame-level speech embedding, time-aligned with the mixture encoding.
#[derive(Debug, Clone)]
pub struct FrameEmbedding {
    /// (3 * encoder_channels, frames)
    pub features: Tensor,
}

impl FrameEmbedding {
    pub fn frame_count(&self) -> usize {
        self.features.cols
    }
}

/// Three non-negative masks matching the mixture encoding shapes.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub masks: [Tensor; 3],
}

/// Graph-side handle to an encoded signal.
#[derive(Debug, Clone, Copy)]
pub struct EncodingIds {
    pub scales: [ValId; 3],
    pub frame_count: usize,
}

/// Twin multi-scale speech encoder: three parallel bias-free convolutions
/// with a common stride, ReLU-activated. One parameter set serves every call
/// site (mixture, reference, and stage feedback paths).
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    convs: [Conv1d; 3],
    filter_lengths: (usize, usize, usize),
    stride: usize,
}

impl SpeechEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let (l1, l2, l3) = cfg.filter_lengths;
        let stride = cfg.frame_stride();
        let n = cfg.encoder_channels;
        let convs = [
            Conv1d::new(b, "speech_encoder.scale1", 1, n, l1, stride, 1, 1),
            Conv1d::new(b, "speech_encoder.scale2", 1, n, l2, stride, 1, 1),
            Conv1d::new(b, "speech_encoder.scale3", 1, n, l3, stride, 1, 1),
        ];
        SpeechEncoder {
            convs,
            filter_lengths: (l1, l2, l3),
            stride,
        }
    }

    /// Encodes a (1, len) signal into three aligned (N, T) maps. The longer
    /// filters see a zero-padded tail so every scale emits the same T.
    pub fn encode(&self, g: &mut Graph, wave: ValId) -> Result<EncodingIds> {
        let len = g.shape(wave).1;
        let (l1, _, l3) = self.filter_lengths;
        if len < l3 {
            return Err(Error::invalid(format!(
                "input of {len} samples is shorter than the longest filter ({l3})"
            )));
        }
        let frames = (len - l1) / self.stride + 1;
        let mut scales = [0; 3];
        for (i, conv) in self.convs.iter().enumerate() {
            let needed = (frames - 1) * self.stride + conv.kernel;
            let pad = needed.saturating_sub(len);
            let raw = conv.apply(g, wave, (0, pad));
            debug_assert_eq!(g.shape(raw).1, frames);
            scales[i] = g.relu(raw);
        }
        Ok(EncodingIds {
            scales,
            frame_count: frames,
        })
    }

    pub fn frame_count(&self, len: usize) -> usize {
        (len - self.filter_lengths.0) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
struct ResnetBlock {
    conv1: Conv1d,
    norm1: GlobalNorm,
    act1: PRelu,
    conv2: Conv1d,
    norm2: GlobalNorm,
    act2: PRelu,
    shortcut: Option<Conv1d>,
}

impl ResnetBlock {
    fn build(b: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Self {
        ResnetBlock {
            conv1: Conv1d::pointwise(b, &format!("{name}.conv1"), in_ch, out_ch),
            norm1: GlobalNorm::new(b, &format!("{name}.norm1"), out_ch),
            act1: PRelu::new(b, &format!("{name}.act1")),
            conv2: Conv1d::pointwise(b, &format!("{name}.conv2"), out_ch, out_ch),
            norm2: GlobalNorm::new(b, &format!("{name}.norm2"), out_ch),
            act2: PRelu::new(b, &format!("{name}.act2")),
            shortcut: (in_ch != out_ch)
                .then(|| Conv1d::pointwise(b, &format!("{name}.shortcut"), in_ch, out_ch)),
        }
    }

    fn apply(&self, g: &mut Graph, x: ValId) -> ValId {
        let mut h = self.conv1.apply(g, x, (0, 0));
        h = self.norm1.apply(g, h);
        h = self.act1.apply(g, h);
        h = self.conv2.apply(g, h, (0, 0));
        h = self.norm2.apply(g, h);
        let skip = match &self.shortcut {
            Some(conv) => conv.apply(g, x, (0, 0)),
            None => x,
        };
        let sum = g.add(h, skip);
        self.act2.apply(g, sum)
    }
}

/// Produces the utterance-level speaker embedding and speaker logits from a
/// multi-scale encoding: concat scales -> ResNet blocks -> mean pooling ->
/// linear projection, with a shared linear classifier on top.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    input_norm: GlobalNorm,
    blocks: Vec<ResnetBlock>,
    proj: Linear,
    classifier: Linear,
}

impl SpeakerEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut in_ch = cfg.frame_embed_channels();
        let input_norm = GlobalNorm::new(b, "speaker_encoder.input_norm", in_ch);
        let mut blocks = Vec::new();
        for (i, &width) in cfg.resnet_blocks.iter().enumerate() {
            blocks.push(ResnetBlock::build(
                b,
                &format!("speaker_encoder.block{i}"),
                in_ch,
                width,
            ));
            in_ch = width;
        }
        let proj = Linear::new(b, "speaker_encoder.proj", in_ch, cfg.embed_dim);
        let classifier = Linear::new(b, "speaker_encoder.classifier", cfg.embed_dim, cfg.num_speakers);
        SpeakerEncoder {
            input_norm,
            blocks,
            proj,
            classifier,
        }
    }

    /// Returns (embedding (D,1), logits (C,1)).
    pub fn encode(&self, g: &mut Graph, enc: &EncodingIds) -> (ValId, ValId) {
        let cat = g.concat_rows(&enc.scales);
        let mut h = self.input_norm.apply(g, cat);
        for block in &self.blocks {
            h = block.apply(g, h);
        }
        let pooled = g.mean_time(h);
        let emb = self.proj.apply(g, pooled);
        let logits = self.classifier.apply(g, emb);
        (emb, logits)
    }
}

#[derive(Debug, Clone)]
struct TcnBlock {
    conv_in: Conv1d,
    act1: PRelu,
    norm1: GlobalNorm,
    dconv: Conv1d,
    act2: PRelu,
    norm2: GlobalNorm,
    conv_out: Conv1d,
    takes_embedding: bool,
}

impl TcnBlock {
    fn build(
        b: &mut ParamBuilder,
        name: &str,
        cfg: &ModelConfig,
        dilation: usize,
        takes_embedding: bool,
    ) -> Self {
        let res_ch = cfg.bottleneck_channels;
        let hid = cfg.tcn_channels;
        let in_ch = if takes_embedding {
            res_ch + cfg.embed_dim
        } else {
            res_ch
        };
        TcnBlock {
            conv_in: Conv1d::pointwise(b, &format!("{name}.conv_in"), in_ch, hid),
            act1: PRelu::new(b, &format!("{name}.act1")),
            norm1: GlobalNorm::new(b, &format!("{name}.norm1"), hid),
            dconv: Conv1d::new(b, &format!("{name}.dconv"), hid, hid, 3, 1, dilation, hid),
            act2: PRelu::new(b, &format!("{name}.act2")),
            norm2: GlobalNorm::new(b, &format!("{name}.norm2"), hid),
            conv_out: Conv1d::pointwise(b, &format!("{name}.conv_out"), hid, res_ch),
            takes_embedding,
        }
    }

    /// Residual block; the embedding (when this block takes one) is
    /// concatenated on the input side only, the residual skips it.
    fn apply(&self, g: &mut Graph, x: ValId, emb_rep: Option<ValId>) -> ValId {
        let inp = if self.takes_embedding {
            let emb = emb_rep.expect("embedding-conditioned block needs an embedding");
            g.concat_rows(&[x, emb])
        } else {
            x
        };
        let mut h = self.conv_in.apply(g, inp, (0, 0));
        h = self.act1.apply(g, h);
        h = self.norm1.apply(g, h);
        h = self.dconv.apply(g, h, self.dconv.same_pad());
        h = self.act2.apply(g, h);
        h = self.norm2.apply(g, h);
        h = self.conv_out.apply(g, h, (0, 0));
        g.add(x, h)
    }
}

/// TCN mask estimator. Input is the channel concat of a frame-level
/// embedding slot (zeros when no previous-stage signal exists) and the
/// mixture encoding; the utterance embedding is repeated over time and fed
/// to the first block of every stack. Three ReLU mask heads, one per scale.
#[derive(Debug, Clone)]
pub struct Extractor {
    input_norm: GlobalNorm,
    bottleneck: Conv1d,
    stacks: Vec<Vec<TcnBlock>>,
    mask_heads: [Conv1d; 3],
}

impl Extractor {
    pub fn build(b: &mut ParamBuilder, prefix: &str, cfg: &ModelConfig) -> Self {
        let in_ch = 2 * cfg.frame_embed_channels();
        let input_norm = GlobalNorm::new(b, &format!("{prefix}.input_norm"), in_ch);
        let bottleneck = Conv1d::pointwise(
            b,
            &format!("{prefix}.bottleneck"),
            in_ch,
            cfg.bottleneck_channels,
        );
        let mut stacks = Vec::new();
        for r in 0..cfg.tcn_stacks {
            let mut blocks = Vec::new();
            for bi in 0..cfg.tcn_blocks_per_stack {
                blocks.push(TcnBlock::build(
                    b,
                    &format!("{prefix}.stack{r}.block{bi}"),
                    cfg,
                    1 << bi,
                    bi == 0,
                ));
            }
            stacks.push(blocks);
        }
        let n = cfg.encoder_channels;
        let mask_heads = [
            Conv1d::pointwise(b, &format!("{prefix}.mask1"), cfg.bottleneck_channels, n),
            Conv1d::pointwise(b, &format!("{prefix}.mask2"), cfg.bottleneck_channels, n),
            Conv1d::pointwise(b, &format!("{prefix}.mask3"), cfg.bottleneck_channels, n),
        ];
        Extractor {
            input_norm,
            bottleneck,
            stacks,
            mask_heads,
        }
    }

    pub fn extract(
        &self,
        g: &mut Graph,
        mix_enc: &EncodingIds,
        utt_emb: ValId,
        frame_emb: Option<ValId>,
    ) -> Result<[ValId; 3]> {
        let t = mix_enc.frame_count;
        let mix_cat = g.concat_rows(&mix_enc.scales);
        let frame = match frame_emb {
            Some(id) => {
                let (rows, cols) = g.shape(id);
                if cols != t {
                    return Err(Error::invalid(format!(
                        "frame embedding has {cols} frames but the mixture encoding has {t}"
                    )));
                }
                if rows != g.shape(mix_cat).0 {
                    return Err(Error::invalid(format!(
                        "frame embedding has {rows} channels, expected {}",
                        g.shape(mix_cat).0
                    )));
                }
                id
            }
            None => g.input(Tensor::zeros(g.shape(mix_cat).0, t)),
        };
        let cat = g.concat_rows(&[frame, mix_cat]);
        let normed = self.input_norm.apply(g, cat);
        let mut h = self.bottleneck.apply(g, normed, (0, 0));
        let emb_rep = g.repeat_time(utt_emb, t);
        for stack in &self.stacks {
            for block in stack {
                let emb = block.takes_embedding.then_some(emb_rep);
                h = block.apply(g, h, emb);
            }
        }
        let mut masks = [0; 3];
        for (i, head) in self.mask_heads.iter().enumerate() {
            let m = head.apply(g, h, (0, 0));
            masks[i] = g.relu(m);
        }
        Ok(masks)
    }
}

/// Per-scale transposed-convolution decoders; outputs are trimmed or
/// zero-padded to the original sample count.
#[derive(Debug, Clone)]
pub struct Decoders {
    deconvs: [ConvTranspose1d; 3],
}

impl Decoders {
    pub fn build(b: &mut ParamBuilder, prefix: &str, cfg: &ModelConfig) -> Self {
        let (l1, l2, l3) = cfg.filter_lengths;
        let stride = cfg.frame_stride();
        let n = cfg.encoder_channels;
        Decoders {
            deconvs: [
                ConvTranspose1d::new(b, &format!("{prefix}.scale1"), n, 1, l1, stride),
                ConvTranspose1d::new(b, &format!("{prefix}.scale2"), n, 1, l2, stride),
                ConvTranspose1d::new(b, &format!("{prefix}.scale3"), n, 1, l3, stride),
            ],
        }
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        mix_enc: &EncodingIds,
        masks: &[ValId; 3],
        original_len: usize,
    ) -> Result<[ValId; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let (mr, mc) = g.shape(masks[i]);
            let (er, ec) = g.shape(mix_enc.scales[i]);
            if (mr, mc) != (er, ec) {
                return Err(Error::invalid(format!(
                    "mask {i} shape ({mr}, {mc}) does not match encoding ({er}, {ec})"
                )));
            }
            let masked = g.mul(masks[i], mix_enc.scales[i]);
            let rec = self.deconvs[i].apply(g, masked);
            out[i] = g.fit_cols(rec, original_len);
        }
        Ok(out)
    }
}

/// Frame-count identity used throughout: for any signal of `len` samples,
/// every scale and every frame embedding derived from an equal-length signal
/// shares this count.
pub fn expected_frames(cfg: &ModelConfig, len: usize) -> usize {
    conv_out_len(len, cfg.filter_lengths.0, cfg.frame_stride(), 1, (0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Tensor};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            filter_lengths: (4, 8, 16),
            encoder_channels: 3,
            tcn_blocks_per_stack: 2,
            tcn_stacks: 2,
            tcn_channels: 5,
            bottleneck_channels: 4,
            resnet_blocks: vec![4, 6],
            embed_dim: 5,
            num_speakers: 3,
            num_stages: 2,
            fusion_init: (0.8, 0.1, 0.1),
            multitask_gamma: 0.5,
        }
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut cfg = tiny_cfg();
        cfg.validate().unwrap();
        cfg.filter_lengths = (5, 8, 16);
        assert!(cfg.validate().is_err()); // odd L1
        cfg.filter_lengths = (4, 9, 16);
        assert!(cfg.validate().is_err()); // L2 not multiple of stride
        cfg.filter_lengths = (4, 16, 8);
        assert!(cfg.validate().is_err()); // not increasing
    }

    #[test]
    fn encoder_emits_aligned_scales_with_expected_frame_count() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let mut g = Graph::new(&store);
        let len = 50;
        let x = g.input(Tensor::signal(vec![0.1; len]));
        let ids = enc.encode(&mut g, x).unwrap();
        let expect = (len - 4) / 2 + 1;
        assert_eq!(ids.frame_count, expect);
        for s in ids.scales {
            assert_eq!(g.shape(s), (3, expect));
        }
    }

    #[test]
    fn encoder_rejects_short_input() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::signal(vec![0.1; 15]));
        assert!(enc.encode(&mut g, x).is_err());
    }

    #[test]
    fn zero_input_encodes_to_zero_features() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::signal(vec![0.0; 40]));
        let ids = enc.encode(&mut g, x).unwrap();
        for s in ids.scales {
            assert!(g.value(s).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn speaker_encoder_embedding_dim_is_length_independent() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let spk = SpeakerEncoder::build(&mut b, &cfg);
        let mut g = Graph::new(&store);
        for len in [40usize, 64] {
            let x = g.input(Tensor::signal((0..len).map(|i| (i as f64 * 0.7).sin() * 0.4).collect()));
            let ids = enc.encode(&mut g, x).unwrap();
            let (emb, logits) = spk.encode(&mut g, &ids);
            assert_eq!(g.shape(emb), (cfg.embed_dim, 1));
            assert_eq!(g.shape(logits), (cfg.num_speakers, 1));
        }
    }

    #[test]
    fn masks_match_encoding_shapes_and_are_non_negative() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let spk = SpeakerEncoder::build(&mut b, &cfg);
        let ext = Extractor::build(&mut b, "stage1.extractor", &cfg);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::signal((0..48).map(|i| (i as f64 * 0.3).cos() * 0.5).collect()));
        let ids = enc.encode(&mut g, x).unwrap();
        let (emb, _) = spk.encode(&mut g, &ids);
        let masks = ext.extract(&mut g, &ids, emb, None).unwrap();
        for (i, m) in masks.iter().enumerate() {
            assert_eq!(g.shape(*m), g.shape(ids.scales[i]));
            assert!(g.value(*m).data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn absent_frame_embedding_equals_zero_frame_embedding() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let spk = SpeakerEncoder::build(&mut b, &cfg);
        let ext = Extractor::build(&mut b, "stage1.extractor", &cfg);

        let run = |frame_zeros: bool| {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::signal(
                (0..48).map(|i| (i as f64 * 0.9).sin() * 0.3).collect(),
            ));
            let ids = enc.encode(&mut g, x).unwrap();
            let (emb, _) = spk.encode(&mut g, &ids);
            let frame = frame_zeros.then(|| {
                g.input(Tensor::zeros(cfg.frame_embed_channels(), ids.frame_count))
            });
            let masks = ext.extract(&mut g, &ids, emb, frame).unwrap();
            masks.map(|m| g.value(m).clone())
        };
        let absent = run(false);
        let zeros = run(true);
        for (a, z) in absent.iter().zip(&zeros) {
            assert_eq!(a.data, z.data);
        }
    }

    #[test]
    fn extract_rejects_misaligned_frame_embedding() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let spk = SpeakerEncoder::build(&mut b, &cfg);
        let ext = Extractor::build(&mut b, "stage1.extractor", &cfg);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::signal(vec![0.2; 48]));
        let ids = enc.encode(&mut g, x).unwrap();
        let (emb, _) = spk.encode(&mut g, &ids);
        let bad = g.input(Tensor::zeros(cfg.frame_embed_channels(), ids.frame_count + 1));
        let err = ext.extract(&mut g, &ids, emb, Some(bad)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frames"), "error should name frame counts: {msg}");
    }

    #[test]
    fn decode_trims_to_original_length_and_zero_masks_give_silence() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let dec = Decoders::build(&mut b, "stage1.decoder", &cfg);
        let mut g = Graph::new(&store);
        let len = 53;
        let x = g.input(Tensor::signal((0..len).map(|i| (i as f64 * 0.2).sin()).collect()));
        let ids = enc.encode(&mut g, x).unwrap();
        let zero_masks = [
            g.input(Tensor::zeros(cfg.encoder_channels, ids.frame_count)),
            g.input(Tensor::zeros(cfg.encoder_channels, ids.frame_count)),
            g.input(Tensor::zeros(cfg.encoder_channels, ids.frame_count)),
        ];
        let outs = dec.decode(&mut g, &ids, &zero_masks, len).unwrap();
        for o in outs {
            assert_eq!(g.shape(o), (1, len));
            assert!(g.value(o).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_is_deterministic_across_calls() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        let enc = SpeechEncoder::build(&mut b, &cfg);
        let wave = Tensor::signal((0..40).map(|i| (i as f64 * 1.3).sin() * 0.8).collect());
        let mut g = Graph::new(&store);
        let x1 = g.input(wave.clone());
        let x2 = g.input(wave);
        let a = enc.encode(&mut g, x1).unwrap();
        let b2 = enc.encode(&mut g, x2).unwrap();
        for (s1, s2) in a.scales.iter().zip(&b2.scales) {
            assert_eq!(g.value(*s1).data, g.value(*s2).data);
        }
    }
}
