//! Fusion front-end, transformer speech encoder and autoregressive
//! translation decoder. One parameter set serves every input modality.

mod checkpoint;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointError, CheckpointHeader,
    TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::autodiff::{AttentionSpec, AutodiffError, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::corpus::{BOS, EOS};
use crate::seed::rng_for;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("fused input width {actual} != 2 * feature_dim = {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token {token} outside target vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },
    #[error("batch layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub tgt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            ffn_dim: 128,
            max_positions: 256,
            tgt_vocab: 60,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("attention_heads", self.attention_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.attention_heads) {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by attention_heads {}",
                self.model_dim, self.attention_heads
            )));
        }
        if self.tgt_vocab <= EOS {
            return Err(ModelError::Config("tgt_vocab must include BOS and EOS".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    norm_attn: Norm,
    attn: AttentionParams,
    norm_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    norm_self: Norm,
    self_attn: AttentionParams,
    norm_cross: Norm,
    cross_attn: AttentionParams,
    norm_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn gaussian(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| INIT_STD * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.store
            .add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.gaussian(format!("{name}.weight"), &[fan_in, fan_out]),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn attention(&mut self, name: &str, dim: usize) -> AttentionParams {
        AttentionParams {
            q: self.linear(&format!("{name}.query"), dim, dim),
            k: self.linear(&format!("{name}.key"), dim, dim),
            v: self.linear(&format!("{name}.value"), dim, dim),
            o: self.linear(&format!("{name}.out"), dim, dim),
        }
    }
}

/// Packed batch of fused input frames: utterances are stacked row-wise and
/// `segments[i]` gives the rows of utterance `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub input: Tensor,
    pub segments: Vec<Range<usize>>,
}

impl FrameBatch {
    /// Stacks per-utterance `T_i x 2D` matrices.
    pub fn stack(items: &[Tensor]) -> Result<Self, ModelError> {
        let first = items
            .first()
            .ok_or_else(|| ModelError::Layout("empty batch".into()))?;
        let width = first.cols();
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut segments = Vec::with_capacity(items.len());
        let mut row = 0;
        for t in items {
            if t.cols() != width || t.shape().len() != 2 {
                return Err(ModelError::InputWidth {
                    expected: width,
                    actual: t.cols(),
                });
            }
            segments.push(row..row + t.rows());
            row += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(Self {
            input: Tensor::matrix(row, width, data),
            segments,
        })
    }
}

/// Packed teacher-forcing targets. For an utterance with target tokens
/// `[BOS, w1, .., wL, EOS]` the decoder reads `[BOS, w1, .., wL]` and
/// predicts `[w1, .., wL, EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl TargetBatch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Result<Self, ModelError> {
        let mut out = Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            segments: Vec::new(),
        };
        for seq in seqs {
            if seq.len() < 2 || seq[0] != BOS {
                return Err(ModelError::Layout(
                    "target sequences need a leading BOS and at least one prediction".into(),
                ));
            }
            let start = out.inputs.len();
            out.inputs.extend_from_slice(&seq[..seq.len() - 1]);
            out.targets.extend_from_slice(&seq[1..]);
            out.segments.push(start..out.inputs.len());
        }
        if out.segments.is_empty() {
            return Err(ModelError::Layout("empty batch".into()));
        }
        Ok(out)
    }
}

/// Per-step target distributions for a packed batch (`rows x vocab`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSeq {
    pub var: Var,
    pub segments: Vec<Range<usize>>,
}

/// The trainable network and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    fuser: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    embedding: ParamId,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    output: Linear,
    positions: bool,
}

impl Model {
    /// Gaussian(0, 0.02) weights, zero biases, unit norm gains, drawn from
    /// the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let h = config.model_dim;
        let fuser = b.linear("fuser", 2 * config.feature_dim, h);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderBlock {
                    norm_attn: b.norm(&format!("{p}.norm_attn"), h),
                    attn: b.attention(&format!("{p}.attn"), h),
                    norm_ffn: b.norm(&format!("{p}.norm_ffn"), h),
                    ffn_in: b.linear(&format!("{p}.ffn_in"), h, config.ffn_dim),
                    ffn_out: b.linear(&format!("{p}.ffn_out"), config.ffn_dim, h),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", h);
        let embedding = b.gaussian("decoder.embedding".into(), &[config.tgt_vocab, h]);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderBlock {
                    norm_self: b.norm(&format!("{p}.norm_self"), h),
                    self_attn: b.attention(&format!("{p}.self_attn"), h),
                    norm_cross: b.norm(&format!("{p}.norm_cross"), h),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), h),
                    norm_ffn: b.norm(&format!("{p}.norm_ffn"), h),
                    ffn_in: b.linear(&format!("{p}.ffn_in"), h, config.ffn_dim),
                    ffn_out: b.linear(&format!("{p}.ffn_out"), config.ffn_dim, h),
                }
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", h);
        let output = b.linear("output", h, config.tgt_vocab);
        Ok(Self {
            config,
            params,
            fuser,
            encoder,
            encoder_norm,
            embedding,
            decoder,
            decoder_norm,
            output,
            positions: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Test hook: disable sinusoidal position encodings.
    pub fn set_positional_encoding(&mut self, enabled: bool) {
        self.positions = enabled;
    }

    /// Test hook: zero the output projection so every step predicts the
    /// uniform distribution.
    pub fn zero_output_projection(&mut self) {
        for id in [self.output.w, self.output.b] {
            self.params.value_mut(id).data_mut().fill(0.0);
        }
    }

    fn linear(&self, g: &mut Graph, l: Linear, x: Var) -> Result<Var, ModelError> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var) -> Result<Var, ModelError> {
        let gain = g.param(&self.params, n.gain);
        let bias = g.param(&self.params, n.bias);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn attention(
        &self,
        g: &mut Graph,
        p: AttentionParams,
        queries: Var,
        memory: Var,
        spec: &AttentionSpec,
    ) -> Result<Var, ModelError> {
        let q = self.linear(g, p.q, queries)?;
        let k = self.linear(g, p.k, memory)?;
        let v = self.linear(g, p.v, memory)?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, p.o, a)
    }

    fn feed_forward(&self, g: &mut Graph, inner: Linear, outer: Linear, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(g, inner, x)?;
        let h = g.relu(h);
        self.linear(g, outer, h)
    }

    fn add_positions(&self, g: &mut Graph, x: Var, segments: &[Range<usize>]) -> Result<Var, ModelError> {
        if !self.positions {
            return Ok(x);
        }
        let h = self.config.model_dim;
        let rows = g.value(x).rows();
        let mut data = vec![0.0; rows * h];
        for seg in segments {
            if seg.len() > self.config.max_positions {
                return Err(ModelError::TooLong {
                    len: seg.len(),
                    max: self.config.max_positions,
                });
            }
            for (pos, row) in seg.clone().enumerate() {
                sinusoid(pos, &mut data[row * h..(row + 1) * h]);
            }
        }
        let pe = g.constant(Tensor::matrix(rows, h, data));
        Ok(g.add(x, pe)?)
    }

    /// Affine map of the `T x 2D` fused input followed by `tanh`.
    pub fn fuse(&self, g: &mut Graph, input: Var) -> Result<Var, ModelError> {
        let width = g.value(input).cols();
        if width != 2 * self.config.feature_dim || g.shape(input).len() != 2 {
            return Err(ModelError::InputWidth {
                expected: 2 * self.config.feature_dim,
                actual: width,
            });
        }
        let y = self.linear(g, self.fuser, input)?;
        Ok(g.tanh(y))
    }

    /// Bidirectional self-attention stack over each segment independently.
    pub fn encode(&self, g: &mut Graph, fused: Var, segments: &[Range<usize>]) -> Result<Var, ModelError> {
        check_segments(segments, g.value(fused).rows())?;
        let spec = AttentionSpec {
            heads: self.config.attention_heads,
            causal: false,
            segments: segments.iter().map(|s| seg_pair(s, s)).collect(),
        };
        let mut x = self.add_positions(g, fused, segments)?;
        for block in &self.encoder {
            let h = self.norm(g, block.norm_attn, x)?;
            let a = self.attention(g, block.attn, h, h, &spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, block.norm_ffn, x)?;
            let f = self.feed_forward(g, block.ffn_in, block.ffn_out, h)?;
            x = g.add(x, f)?;
        }
        self.norm(g, self.encoder_norm, x)
    }

    /// Decoder distributions for every target position given the gold
    /// prefix, with a causal mask inside each segment.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        encoded: Var,
        frame_segments: &[Range<usize>],
        targets: &TargetBatch,
    ) -> Result<ProbSeq, ModelError> {
        if frame_segments.len() != targets.segments.len() {
            return Err(ModelError::Layout(format!(
                "{} frame segments for {} target segments",
                frame_segments.len(),
                targets.segments.len()
            )));
        }
        check_segments(frame_segments, g.value(encoded).rows())?;
        check_segments(&targets.segments, targets.inputs.len())?;
        if let Some(&t) = targets
            .inputs
            .iter()
            .chain(&targets.targets)
            .find(|&&t| t >= self.config.tgt_vocab)
        {
            return Err(ModelError::Token {
                token: t,
                vocab: self.config.tgt_vocab,
            });
        }
        let self_spec = AttentionSpec {
            heads: self.config.attention_heads,
            causal: true,
            segments: targets.segments.iter().map(|s| seg_pair(s, s)).collect(),
        };
        let cross_spec = AttentionSpec {
            heads: self.config.attention_heads,
            causal: false,
            segments: targets
                .segments
                .iter()
                .zip(frame_segments)
                .map(|(t, f)| seg_pair(t, f))
                .collect(),
        };
        let table = g.param(&self.params, self.embedding);
        let emb = g.embed(table, &targets.inputs)?;
        let emb = g.scale(emb, (self.config.model_dim as f64).sqrt());
        let mut x = self.add_positions(g, emb, &targets.segments)?;
        for block in &self.decoder {
            let h = self.norm(g, block.norm_self, x)?;
            let a = self.attention(g, block.self_attn, h, h, &self_spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, block.norm_cross, x)?;
            let a = self.attention(g, block.cross_attn, h, encoded, &cross_spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, block.norm_ffn, x)?;
            let f = self.feed_forward(g, block.ffn_in, block.ffn_out, h)?;
            x = g.add(x, f)?;
        }
        let x = self.norm(g, self.decoder_norm, x)?;
        let logits = self.linear(g, self.output, x)?;
        Ok(ProbSeq {
            var: g.softmax_rows(logits),
            segments: targets.segments.clone(),
        })
    }

    /// fuse, encode and teacher-forced decode in one call.
    pub fn forward(&self, g: &mut Graph, frames: &FrameBatch, targets: &TargetBatch) -> Result<ProbSeq, ModelError> {
        let input = g.constant(frames.input.clone());
        let fused = self.fuse(g, input)?;
        let encoded = self.encode(g, fused, &frames.segments)?;
        self.decode_teacher_forced(g, encoded, &frames.segments, targets)
    }

    /// Encoder output for one utterance's fused input, without gradients.
    pub fn encode_utterance(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fused = self.fuse(&mut g, x)?;
        let enc = self.encode(&mut g, fused, &[0..input.rows()])?;
        Ok(g.value(enc).clone())
    }

    /// Greedy autoregressive decoding from BOS. Stops at EOS (not included
    /// in the output) or after `max_len` tokens; ties go to the lowest id.
    pub fn greedy_decode(&self, encoded: &Tensor, max_len: usize) -> Result<Vec<usize>, ModelError> {
        if max_len + 1 > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: max_len + 1,
                max: self.config.max_positions,
            });
        }
        let frames = [0..encoded.rows()];
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new();
            let enc = g.constant(encoded.clone());
            // the final target is a placeholder; only the distributions matter
            let mut seq = prefix.clone();
            seq.push(EOS);
            let targets = TargetBatch::from_sequences([seq.as_slice()])?;
            let probs = self.decode_teacher_forced(&mut g, enc, &frames, &targets)?;
            let p = g.value(probs.var);
            let next = argmax(p.row(p.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn seg_pair(q: &Range<usize>, k: &Range<usize>) -> Segment {
    Segment {
        q_start: q.start,
        q_len: q.len(),
        k_start: k.start,
        k_len: k.len(),
    }
}

fn check_segments(segments: &[Range<usize>], rows: usize) -> Result<(), ModelError> {
    if segments.iter().any(|s| s.is_empty() || s.end > rows) {
        return Err(ModelError::Layout(format!("segments {segments:?} do not fit {rows} rows")));
    }
    Ok(())
}

fn sinusoid(pos: usize, out: &mut [f64]) {
    let h = out.len();
    for i in 0..h / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / h as f64);
        out[2 * i] = (pos as f64 * freq).sin();
        out[2 * i + 1] = (pos as f64 * freq).cos();
    }
    if h % 2 == 1 {
        out[h - 1] = (pos as f64).sin();
    }
}
