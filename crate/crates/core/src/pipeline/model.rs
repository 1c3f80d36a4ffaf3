use serde::{Deserialize, Serialize};

use super::backbone::BackboneStub;
use super::text::TextEmbeddings;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fusion::{ConvFormerConfig, FusionStack};
use crate::nn::{Conv, ConvSpec, Linear, ParamId, ParamStore, Session};
use crate::tensor::{Rng, Scalar, Tensor};

pub const OUTPUT_STRIDE: usize = 8;
pub const IGNORE_INDEX: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Width of the (stub) text embeddings.
    pub text_channels: usize,
    /// Backbone output width.
    pub vis_channels: usize,
    pub decoder_channels: usize,
    /// Score-map temperature: `S = I' T'^T / temperature`.
    pub temperature: f64,
    /// Weight of the auxiliary score-map cross-entropy.
    pub aux_weight: f64,
    /// Seed of the stub text encoder.
    pub text_seed: u64,
    /// Embeddings file to use instead of the stub encoder.
    pub text_embeddings: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            text_channels: 32,
            vis_channels: 32,
            decoder_channels: 32,
            temperature: 1.0,
            aux_weight: 0.4,
            text_seed: 0,
            text_embeddings: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_channels == 0 || self.vis_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::Config("pipeline widths must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight must be >= 0, got {}", self.aux_weight)));
        }
        Ok(())
    }
}

/// `S[i, j, k] = <image[i, j, :], text[k, :]> / temperature`.
pub fn compute_score_map<T: Scalar>(image: &Var<T>, text: &Var<T>, temperature: f64) -> Result<Var<T>> {
    let shape = image.shape();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::shape("score_map", format!("image must be [h, w, C], got {shape:?}")));
    };
    let k = text.shape()[0];
    let s = image.reshape(&[h * w, c])?.matmul(&text.transpose()?)?.reshape(&[h, w, k])?;
    if temperature == 1.0 {
        Ok(s)
    } else {
        s.scale(T::lit(1.0 / temperature))
    }
}

/// `X = [I', S]` along channels, image channels first.
pub fn fuse_and_concat<T: Scalar>(image: &Var<T>, scores: &Var<T>) -> Result<Var<T>> {
    Var::concat(&[image.clone(), scores.clone()], 2)
}

/// Nearest-neighbour label map at output stride 8: score cell `(i, j)` takes
/// the label at pixel `(8i + 4, 8j + 4)`, or the ignore index if that pixel
/// lies in padding.
pub fn downsample_labels(labels: &[usize], height: usize, width: usize, h: usize, w: usize) -> Vec<usize> {
    let half = OUTPUT_STRIDE / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i * OUTPUT_STRIDE + half, j * OUTPUT_STRIDE + half);
            out.push(if y < height && x < width { labels[y * width + x] } else { IGNORE_INDEX });
        }
    }
    out
}

pub struct ForwardOutput<T> {
    /// `[H, W, K]`
    pub logits: Var<T>,
    /// `[H/8, W/8, K]`
    pub score_map: Var<T>,
    /// Fused image features `I'`, `[H/8, W/8, C]`.
    pub fused_image: Var<T>,
    /// Fused class embeddings `T'`, `[K, C]`.
    pub fused_text: Var<T>,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv1: Conv,
    conv2: Conv,
    classifier: Conv,
}

#[derive(Debug, Clone)]
pub struct SegmentationPipeline<T> {
    pub fusion_config: ConvFormerConfig,
    pub config: PipelineConfig,
    pub store: ParamStore<T>,
    text: TextEmbeddings<T>,
    backbone: BackboneStub,
    align_image: Conv,
    align_text: Linear,
    fusion: FusionStack,
    decoder: Decoder,
}

impl<T: Scalar> SegmentationPipeline<T> {
    pub fn new(fusion_config: &ConvFormerConfig, config: &PipelineConfig, text: TextEmbeddings<T>, seed: u64) -> Result<Self> {
        fusion_config.validate()?;
        config.validate()?;
        let k = text.classes();
        if fusion_config.classes != k {
            return Err(Error::Config(format!(
                "fusion expects {} classes, embeddings have {k}",
                fusion_config.classes
            )));
        }
        if text.width() != config.text_channels {
            return Err(Error::Config(format!(
                "text_channels is {}, embeddings have width {}",
                config.text_channels,
                text.width()
            )));
        }
        let c = fusion_config.channels;
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        let backbone = BackboneStub::new(&mut store, &mut root.fork(1), "backbone", config.vis_channels)?;
        let mut rng = root.fork(2);
        let align_image = Conv::new(
            &mut store,
            &mut rng,
            "align.image",
            ConvSpec { kernel: 1, cin: config.vis_channels, cout: c, stride: 1, padding: 0, groups: 1 },
        )?;
        let align_text = Linear::new(&mut store, &mut rng, "align.text", config.text_channels, c)?;
        let fusion = FusionStack::new(&mut store, &mut root.fork(3), "fusion", fusion_config)?;
        let mut rng = root.fork(4);
        let d = config.decoder_channels;
        let conv3 = |cin, cout| ConvSpec { kernel: 3, cin, cout, stride: 1, padding: 1, groups: 1 };
        let decoder = Decoder {
            conv1: Conv::new(&mut store, &mut rng, "decoder.conv1", conv3(c + k, d))?,
            conv2: Conv::new(&mut store, &mut rng, "decoder.conv2", conv3(d, d))?,
            classifier: Conv::new(
                &mut store,
                &mut rng,
                "decoder.classifier",
                ConvSpec { kernel: 1, cin: d, cout: k, stride: 1, padding: 0, groups: 1 },
            )?,
        };
        Ok(Self {
            fusion_config: fusion_config.clone(),
            config: config.clone(),
            store,
            text,
            backbone,
            align_image,
            align_text,
            fusion,
            decoder,
        })
    }

    pub fn text(&self) -> &TextEmbeddings<T> {
        &self.text
    }

    pub fn classes(&self) -> usize {
        self.text.classes()
    }

    pub fn fusion(&self) -> &FusionStack {
        &self.fusion
    }

    /// Backbone parameters and everything else that is trainable. The text
    /// embeddings are in neither list.
    pub fn param_groups(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        self.store.ids().partition(|&id| self.store.name(id).starts_with("backbone."))
    }

    /// Makes both alignment projections the identity. Requires
    /// `vis_channels == text_channels == channels`.
    pub fn set_identity_alignment(&mut self) -> Result<()> {
        let c = self.fusion_config.channels;
        if self.config.vis_channels != c || self.config.text_channels != c {
            return Err(Error::Config("identity alignment needs equal widths".into()));
        }
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = T::one();
        }
        let conv_eye = eye.reshaped(&[1, 1, c, c])?;
        let names = [
            ("align.image.weight", conv_eye),
            ("align.text.weight", eye),
            ("align.image.bias", Tensor::zeros(&[c])),
            ("align.text.bias", Tensor::zeros(&[c])),
        ];
        for (n, t) in names {
            self.store.assign(n, t)?;
        }
        Ok(())
    }

    /// Maps backbone features `[h, w, C_vis]` and embeddings `[K, C_text]` to
    /// the fusion width `C`.
    pub fn align_channels(&self, s: &Session<'_, T>, image: &Var<T>, text: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        Ok((self.align_image.forward(s, image)?, self.align_text.forward(s, text)?))
    }

    pub fn decode(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.decoder.conv1.forward(s, x)?.relu6()?;
        let h = self.decoder.conv2.forward(s, &h)?.relu6()?;
        let h = h.upsample_bilinear(OUTPUT_STRIDE)?;
        self.decoder.classifier.forward(s, &h)
    }

    /// Pre-decoder stages: backbone, alignment, fusion and score map.
    pub fn encode(&self, s: &Session<'_, T>, image: &Var<T>, text: &TextEmbeddings<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let feat = self.backbone.forward(s, image)?;
        let text_var = s.constant(text.matrix().clone());
        let (i, t) = self.align_channels(s, &feat, &text_var)?;
        let (i, t) = self.fusion.forward(s, &i, &t)?;
        let scores = compute_score_map(&i, &t, self.config.temperature)?;
        Ok((i, t, scores))
    }

    /// Full forward pass on one `[H, W, 3]` image. Extents that are not
    /// multiples of 8 are zero-padded and the logits cropped back.
    pub fn forward(&self, s: &Session<'_, T>, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_with_text(s, image, &self.text)
    }

    pub fn forward_with_text(&self, s: &Session<'_, T>, image: &Tensor<T>, text: &TextEmbeddings<T>) -> Result<ForwardOutput<T>> {
        let &[h, w, ch] = image.shape() else {
            return Err(Error::shape("forward", format!("image must be [H, W, 3], got {:?}", image.shape())));
        };
        if ch != 3 {
            return Err(Error::shape("forward", format!("image must have 3 channels, got {ch}")));
        }
        let pad = |n: usize| n.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE - n;
        let mut x = s.constant(image.clone());
        if pad(h) + pad(w) > 0 {
            x = x.pad_bottom_right(pad(h), pad(w))?;
        }
        let (fused_image, fused_text, score_map) = self.encode(s, &x, text)?;
        let fused = fuse_and_concat(&fused_image, &score_map)?;
        let mut logits = self.decode(s, &fused)?;
        if pad(h) > 0 {
            logits = logits.narrow(0, 0, h)?;
        }
        if pad(w) > 0 {
            logits = logits.narrow(1, 0, w)?;
        }
        Ok(ForwardOutput {
            logits,
            score_map,
            fused_image,
            fused_text,
        })
    }

    /// `CE(logits) + aux_weight * CE(score map vs. stride-8 labels)`.
    pub fn loss(&self, out: &ForwardOutput<T>, labels: &[usize]) -> Result<Var<T>> {
        let ls = out.logits.shape();
        let (h, w, k) = (ls[0], ls[1], ls[2]);
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch { op: "loss", lhs: ls, rhs: vec![labels.len()] });
        }
        let main = out.logits.reshape(&[h * w, k])?.cross_entropy(labels, IGNORE_INDEX)?;
        if self.config.aux_weight == 0.0 {
            return Ok(main);
        }
        let ss = out.score_map.shape();
        let small = downsample_labels(labels, h, w, ss[0], ss[1]);
        let aux = out.score_map.reshape(&[ss[0] * ss[1], k])?.cross_entropy(&small, IGNORE_INDEX)?;
        main.add(&aux.scale(T::lit(self.config.aux_weight))?)
    }

    /// Per-pixel argmax class labels.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<usize>> {
        let s = Session::frozen(&self.store);
        let logits = self.forward(&s, image)?.logits.value();
        let k = self.classes();
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }
}
