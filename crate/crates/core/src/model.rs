//! The five classifier variants behind one forward/backward interface.
//!
//! Output-layer input is the concatenation, in this order, of:
//! the pooled (and dropped-out) CNN features over all kernel sizes, or the
//! BiLSTM final states for `LstmOnly`; then for `LLstmCnn` the context-BiLSTM
//! final states of the adjacent left and right sentences; then for `CLstmCnn`
//! the left and right FOFE codes after their own linear dense layers.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Instance, LabelMap, Tokens};
use crate::embeddings::{digest_u64, EmbeddingTable};
use crate::error::{Error, Result};
use crate::fofe::{encode_context, FofeConfig, Side};
use crate::layers::{
    bilstm_backward, bilstm_forward, conv1d_backward, conv1d_forward, dense_backward,
    dense_forward, dropout, final_states, final_states_backward, max_over_time,
    max_over_time_backward, BiLstmTape, ConvParams, ConvTape, DenseParams, DropoutMask,
    LstmParams, Parameters, PoolTape,
};
use crate::tensor::{softmax, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "cnn")]
    CnnOnly,
    #[serde(rename = "lstm")]
    LstmOnly,
    #[serde(rename = "lstm-cnn")]
    LstmCnn,
    #[serde(rename = "l-lstm-cnn")]
    LLstmCnn,
    #[serde(rename = "c-lstm-cnn")]
    CLstmCnn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::CnnOnly,
        ModelVariant::LstmOnly,
        ModelVariant::LstmCnn,
        ModelVariant::LLstmCnn,
        ModelVariant::CLstmCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::CnnOnly => "cnn",
            ModelVariant::LstmOnly => "lstm",
            ModelVariant::LstmCnn => "lstm-cnn",
            ModelVariant::LLstmCnn => "l-lstm-cnn",
            ModelVariant::CLstmCnn => "c-lstm-cnn",
        }
    }

    pub fn uses_focus_lstm(self) -> bool {
        !matches!(self, ModelVariant::CnnOnly)
    }

    pub fn uses_conv(self) -> bool {
        !matches!(self, ModelVariant::LstmOnly)
    }

    pub fn uses_context(self) -> bool {
        matches!(self, ModelVariant::LLstmCnn | ModelVariant::CLstmCnn)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .or(match norm.as_str() {
                "cnn-only" => Some(ModelVariant::CnnOnly),
                "lstm-only" => Some(ModelVariant::LstmOnly),
                _ => None,
            })
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?}; expected one of cnn, lstm, lstm-cnn, l-lstm-cnn, c-lstm-cnn"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub kernel_sizes: Vec<usize>,
    pub conv_features: usize,
    pub fofe: FofeConfig,
    pub fofe_dense_out: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 50,
            lstm_hidden: 64,
            kernel_sizes: vec![2, 3, 4, 5, 6],
            conv_features: 64,
            fofe: FofeConfig::default(),
            fofe_dense_out: 64,
            dropout_rate: 0.5,
            num_classes: 2,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.lstm_hidden == 0
            || self.conv_features == 0
            || self.fofe_dense_out == 0
        {
            return Err(Error::invalid("model dimensions must all be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.kernel_sizes.is_empty()
            || self.kernel_sizes[0] == 0
            || self.kernel_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(
                "kernel_sizes must be non-empty, positive and strictly ascending",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        self.fofe.validate()
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.last().copied().unwrap_or(1)
    }
}

/// All trainable tensors of a model. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub focus_lstm: Option<LstmParams>,
    pub conv: Vec<ConvParams>,
    pub context_lstm: Option<LstmParams>,
    pub fofe_left: Option<DenseParams>,
    pub fofe_right: Option<DenseParams>,
    pub output: DenseParams,
}

impl ModelParams {
    /// Tensor names in [`Parameters::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let lstm = |prefix: &str, names: &mut Vec<String>| {
            for dir in ["fwd", "bwd"] {
                for t in ["w", "u", "b"] {
                    names.push(format!("{prefix}.{dir}.{t}"));
                }
            }
        };
        if self.focus_lstm.is_some() {
            lstm("focus_lstm", &mut names);
        }
        for c in &self.conv {
            names.push(format!("conv{}.w", c.kernel_size));
            names.push(format!("conv{}.b", c.kernel_size));
        }
        if self.context_lstm.is_some() {
            lstm("context_lstm", &mut names);
        }
        for (side, p) in [("fofe_left", &self.fofe_left), ("fofe_right", &self.fofe_right)] {
            if p.is_some() {
                names.push(format!("{side}.w"));
                names.push(format!("{side}.b"));
            }
        }
        names.push("output.w".into());
        names.push("output.b".into());
        names
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = Vec::new();
        if let Some(p) = &self.focus_lstm {
            v.extend(p.tensors());
        }
        for c in &self.conv {
            v.extend(c.tensors());
        }
        if let Some(p) = &self.context_lstm {
            v.extend(p.tensors());
        }
        if let Some(p) = &self.fofe_left {
            v.extend(p.tensors());
        }
        if let Some(p) = &self.fofe_right {
            v.extend(p.tensors());
        }
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.focus_lstm {
            v.extend(p.tensors_mut());
        }
        for c in &mut self.conv {
            v.extend(c.tensors_mut());
        }
        if let Some(p) = &mut self.context_lstm {
            v.extend(p.tensors_mut());
        }
        if let Some(p) = &mut self.fofe_left {
            v.extend(p.tensors_mut());
        }
        if let Some(p) = &mut self.fofe_right {
            v.extend(p.tensors_mut());
        }
        v.extend(self.output.tensors_mut());
        v
    }
}

/// An [`Instance`] with every token replaced by its frozen embedding.
#[derive(Clone, Debug)]
pub struct Example {
    pub focus: Matrix,
    pub left: Vec<Arc<Matrix>>,
    pub right: Vec<Arc<Matrix>>,
    pub label: usize,
}

/// Embeds instances, sharing one matrix per distinct context sentence.
pub struct Embedder<'a> {
    table: &'a EmbeddingTable,
    cache: HashMap<Tokens, Arc<Matrix>>,
}

impl<'a> Embedder<'a> {
    pub fn new(table: &'a EmbeddingTable) -> Self {
        Embedder {
            table,
            cache: HashMap::new(),
        }
    }

    fn sentence(&mut self, tokens: &Tokens) -> Arc<Matrix> {
        if let Some(m) = self.cache.get(tokens) {
            return m.clone();
        }
        let m = Arc::new(self.table.embed(tokens));
        self.cache.insert(tokens.clone(), m.clone());
        m
    }

    pub fn embed(&mut self, inst: &Instance) -> Example {
        Example {
            focus: self.table.embed(&inst.focus),
            left: inst.left.iter().map(|s| self.sentence(s)).collect(),
            right: inst.right.iter().map(|s| self.sentence(s)).collect(),
            label: inst.label,
        }
    }
}

pub fn embed_instances(table: &EmbeddingTable, instances: &[Instance]) -> Vec<Example> {
    let mut e = Embedder::new(table);
    instances.iter().map(|i| e.embed(i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Cached activations of one forward pass.
#[derive(Debug)]
pub struct ModelTape {
    focus_steps: usize,
    focus_lstm: Option<BiLstmTape>,
    conv: Vec<(ConvTape, PoolTape)>,
    conv_input_rows: usize,
    dropout: Option<DropoutMask>,
    context_lstm: [Option<(usize, BiLstmTape)>; 2],
    fofe_codes: Option<[Vector; 2]>,
    concat: Vector,
    logits: Vector,
}

impl ModelTape {
    pub fn logits(&self) -> &Vector {
        &self.logits
    }
}

fn pad_rows(m: &Matrix, min_rows: usize) -> Matrix {
    if m.rows() >= min_rows {
        return m.clone();
    }
    let mut out = Matrix::zeros(min_rows, m.cols());
    out.data_mut()[..m.len()].copy_from_slice(m.data());
    out
}

impl Model {
    /// Builds a freshly initialized model. Parameters are drawn in a fixed
    /// order from `config.seed`: focus BiLSTM, conv bank, context BiLSTM, FOFE
    /// dense layers, output layer.
    pub fn build(variant: ModelVariant, config: ModelConfig, table: &EmbeddingTable) -> Result<Self> {
        if table.dim() != config.embed_dim {
            return Err(Error::invalid(format!(
                "embedding table has dimension {}, config expects {}",
                table.dim(),
                config.embed_dim
            )));
        }
        Self::init(variant, config)
    }

    /// Like [`Model::build`] without an embedding table to check against.
    pub fn init(variant: ModelVariant, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e = config.embed_dim;
        let h = config.lstm_hidden;
        let focus_lstm = variant
            .uses_focus_lstm()
            .then(|| LstmParams::init(e, h, &mut rng));
        let conv_input = if variant == ModelVariant::CnnOnly { e } else { 2 * h };
        let conv = if variant.uses_conv() {
            config
                .kernel_sizes
                .iter()
                .map(|&l| ConvParams::init(l, conv_input, config.conv_features, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let context_lstm =
            (variant == ModelVariant::LLstmCnn).then(|| LstmParams::init(e, h, &mut rng));
        let (fofe_left, fofe_right) = if variant == ModelVariant::CLstmCnn {
            (
                Some(DenseParams::init(e, config.fofe_dense_out, &mut rng)),
                Some(DenseParams::init(e, config.fofe_dense_out, &mut rng)),
            )
        } else {
            (None, None)
        };
        let concat = Self::concat_width(variant, &config);
        let output = DenseParams::init(concat, config.num_classes, &mut rng);
        Ok(Model {
            variant,
            config,
            params: ModelParams {
                focus_lstm,
                conv,
                context_lstm,
                fofe_left,
                fofe_right,
                output,
            },
        })
    }

    fn concat_width(variant: ModelVariant, cfg: &ModelConfig) -> usize {
        let h2 = 2 * cfg.lstm_hidden;
        let base = if variant.uses_conv() {
            cfg.kernel_sizes.len() * cfg.conv_features
        } else {
            h2
        };
        base + match variant {
            ModelVariant::LLstmCnn => 2 * h2,
            ModelVariant::CLstmCnn => 2 * cfg.fofe_dense_out,
            _ => 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Class probabilities in inference mode.
    pub fn forward(&self, ex: &Example) -> Result<(Vector, ModelTape)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_with(ex, false, &mut rng)
    }

    pub fn predict(&self, ex: &Example) -> Result<Vector> {
        Ok(self.forward(ex)?.0)
    }

    /// Forward pass; `training` enables dropout drawn from `rng`.
    pub fn forward_with<R: Rng>(
        &self,
        ex: &Example,
        training: bool,
        rng: &mut R,
    ) -> Result<(Vector, ModelTape)> {
        let cfg = &self.config;
        let steps = ex.focus.rows();
        if steps == 0 {
            return Err(Error::invalid("focus sentence is empty"));
        }
        if ex.focus.cols() != cfg.embed_dim {
            return Err(Error::Shape {
                op: "model_forward",
                left: (steps, cfg.embed_dim),
                right: ex.focus.shape(),
            });
        }
        let mut concat: Vec<f64> = Vec::with_capacity(Self::concat_width(self.variant, cfg));

        let mut lstm_out = None;
        let mut focus_lstm_tape = None;
        if let Some(p) = &self.params.focus_lstm {
            let (h, tape) = bilstm_forward(&ex.focus, p)?;
            lstm_out = Some(h);
            focus_lstm_tape = Some(tape);
        }

        let mut conv_tapes = Vec::new();
        let mut conv_input_rows = 0;
        let mut dropout_mask = None;
        if self.variant.uses_conv() {
            let source = lstm_out.as_ref().unwrap_or(&ex.focus);
            let input = pad_rows(source, cfg.max_kernel());
            conv_input_rows = input.rows();
            let mut pooled = Vec::with_capacity(cfg.kernel_sizes.len() * cfg.conv_features);
            for p in &self.params.conv {
                let (c, ct) = conv1d_forward(&input, p)?;
                let (v, pt) = max_over_time(&c)?;
                pooled.extend_from_slice(&v);
                conv_tapes.push((ct, pt));
            }
            let (dropped, mask) = dropout(&pooled, cfg.dropout_rate, rng, training)?;
            concat.extend_from_slice(&dropped);
            dropout_mask = Some(mask);
        } else if let Some(h) = &lstm_out {
            concat.extend_from_slice(&final_states(h));
        }

        let mut context_tapes: [Option<(usize, BiLstmTape)>; 2] = [None, None];
        if let Some(p) = &self.params.context_lstm {
            let adjacent = [ex.left.last(), ex.right.first()];
            for (slot, sent) in context_tapes.iter_mut().zip(adjacent) {
                match sent.filter(|s| s.rows() > 0) {
                    Some(s) => {
                        let (h, tape) = bilstm_forward(s, p)?;
                        concat.extend_from_slice(&final_states(&h));
                        *slot = Some((s.rows(), tape));
                    }
                    None => concat.extend(std::iter::repeat(0.0).take(p.output_dim())),
                }
            }
        }

        let mut fofe_codes = None;
        if let (Some(dl), Some(dr)) = (&self.params.fofe_left, &self.params.fofe_right) {
            let left = encode_context(&ex.left, &cfg.fofe, Side::Left, cfg.embed_dim)?;
            let right = encode_context(&ex.right, &cfg.fofe, Side::Right, cfg.embed_dim)?;
            concat.extend_from_slice(&dense_forward(&left, dl)?);
            concat.extend_from_slice(&dense_forward(&right, dr)?);
            fofe_codes = Some([left, right]);
        }

        let concat = Vector::from(concat);
        let logits = dense_forward(&concat, &self.params.output)?;
        let probs = softmax(&logits)?;
        Ok((
            probs,
            ModelTape {
                focus_steps: steps,
                focus_lstm: focus_lstm_tape,
                conv: conv_tapes,
                conv_input_rows,
                dropout: dropout_mask,
                context_lstm: context_tapes,
                fofe_codes,
                concat,
                logits,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `d_logits` into `grads`.
    pub fn backward(&self, tape: ModelTape, d_logits: &[f64], grads: &mut ModelParams) -> Result<()> {
        let cfg = &self.config;
        let p = &self.params;
        let d_concat = dense_backward(&p.output, &tape.concat, d_logits, &mut grads.output)?;
        let mut offset = 0;
        let mut take = |n: usize| {
            let seg = &d_concat[offset..offset + n];
            offset += n;
            seg
        };

        let d_base = take(if self.variant.uses_conv() {
            cfg.kernel_sizes.len() * cfg.conv_features
        } else {
            2 * cfg.lstm_hidden
        });

        if let (Some(ctx), Some(gctx)) = (&p.context_lstm, grads.context_lstm.as_mut()) {
            for slot in tape.context_lstm {
                let seg = take(ctx.output_dim());
                if let Some((steps, t)) = slot {
                    bilstm_backward(ctx, t, &final_states_backward(steps, seg), gctx)?;
                }
            }
        }

        if let Some(codes) = &tape.fofe_codes {
            let (Some(dl), Some(dr)) = (&p.fofe_left, &p.fofe_right) else {
                return Err(Error::invalid("tape has FOFE codes but the model has no FOFE layers"));
            };
            let (Some(gl), Some(gr)) = (grads.fofe_left.as_mut(), grads.fofe_right.as_mut()) else {
                return Err(Error::invalid("gradient container lacks FOFE layers"));
            };
            dense_backward(dl, &codes[0], take(dl.output_dim()), gl)?;
            dense_backward(dr, &codes[1], take(dr.output_dim()), gr)?;
        }

        let steps = tape.focus_steps;
        let d_lstm_out = if self.variant.uses_conv() {
            let mask = tape
                .dropout
                .ok_or_else(|| Error::invalid("tape is missing the dropout mask"))?;
            let d_pooled = mask.apply(d_base);
            let mut d_input: Option<Matrix> = None;
            for (k, ((ct, pt), (cp, cg))) in tape
                .conv
                .into_iter()
                .zip(p.conv.iter().zip(grads.conv.iter_mut()))
                .enumerate()
            {
                let f = cp.features();
                let d_c = max_over_time_backward(pt, &d_pooled[k * f..(k + 1) * f])?;
                let dx = conv1d_backward(cp, ct, &d_c, cg)?;
                match &mut d_input {
                    Some(acc) => acc.add_assign(&dx)?,
                    None => d_input = Some(dx),
                }
            }
            match (&p.focus_lstm, d_input) {
                (Some(_), Some(d)) => {
                    debug_assert_eq!(d.rows(), tape.conv_input_rows);
                    let mut trimmed = Matrix::zeros(steps, d.cols());
                    trimmed
                        .data_mut()
                        .copy_from_slice(&d.data()[..steps * d.cols()]);
                    Some(trimmed)
                }
                _ => None,
            }
        } else {
            Some(final_states_backward(steps, d_base))
        };

        if let (Some(lstm), Some(tape_l), Some(g), Some(d)) = (
            &p.focus_lstm,
            tape.focus_lstm,
            grads.focus_lstm.as_mut(),
            d_lstm_out,
        ) {
            bilstm_backward(lstm, tape_l, &d, g)?;
        }
        Ok(())
    }

    /// Class-weighted cross-entropy averaged over the batch, and its gradient.
    ///
    /// Per-example dropout streams are seeded from `rng` in batch order, and
    /// gradients are summed over fixed-size chunks in order, so results do not
    /// depend on the number of worker threads.
    pub fn loss_and_grads<R: Rng>(
        &self,
        batch: &[&Example],
        class_weights: &[f64],
        rng: &mut R,
        training: bool,
    ) -> Result<(f64, ModelParams)> {
        const CHUNK: usize = 8;
        if batch.is_empty() {
            return Err(Error::invalid("empty minibatch"));
        }
        if class_weights.len() != self.config.num_classes {
            return Err(Error::invalid(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                self.config.num_classes
            )));
        }
        if let Some(bad) = batch.iter().find(|e| e.label >= self.config.num_classes) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                bad.label, self.config.num_classes
            )));
        }
        let scale = 1.0 / batch.len() as f64;
        let seeded: Vec<(&Example, u64)> = batch.iter().map(|e| (*e, rng.gen())).collect();
        let partials: Vec<Result<(f64, ModelParams)>> = seeded
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = self.params.zeros_like();
                let mut loss = 0.0;
                for &(ex, seed) in chunk {
                    let mut local = ChaCha8Rng::seed_from_u64(seed);
                    let (probs, tape) = self.forward_with(ex, training, &mut local)?;
                    let w = class_weights[ex.label];
                    let logits = tape.logits();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    loss += w * (lse - logits[ex.label]) * scale;
                    let mut d_logits: Vec<f64> = probs.iter().map(|p| w * p * scale).collect();
                    d_logits[ex.label] -= w * scale;
                    self.backward(tape, &d_logits, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.params.zeros_like();
        for part in partials {
            let (l, g) = part?;
            total += l;
            grads.accumulate(&g)?;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((total, grads))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
        writeln!(w, "variant {}", self.variant).map_err(io)?;
        writeln!(w, "config {}", serde_json::to_string(&self.config).expect("config serializes"))
            .map_err(io)?;
        writeln!(w, "labels {}", serde_json::to_string(&labels.labels).expect("labels serialize"))
            .map_err(io)?;
        let names = self.params.tensor_names();
        let tensors = self.params.tensors();
        writeln!(w, "tensors {}", tensors.len()).map_err(io)?;
        for (name, t) in names.iter().zip(&tensors) {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols()).map_err(io)?;
            let line: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
        writeln!(w, "checksum {:016x}", params_checksum(&self.params)).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, LabelMap)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_checkpoint(&text)
    }
}

const CHECKPOINT_MAGIC: &str = "ctxclf-checkpoint v1";

fn params_checksum(p: &ModelParams) -> u64 {
    let mut h = Sha256::new();
    for t in p.tensors() {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    digest_u64(h)
}

fn parse_checkpoint(text: &str) -> Result<(Model, LabelMap)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| bad(format!("truncated before {what}")))
    };
    if next("header")? != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint header".into()));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}` line, found {line:?}")))
    };
    let variant: ModelVariant = field(next("variant")?, "variant")?.parse()?;
    let config: ModelConfig = serde_json::from_str(&field(next("config")?, "config")?)
        .map_err(|e| bad(format!("config: {e}")))?;
    let labels: Vec<String> = serde_json::from_str(&field(next("labels")?, "labels")?)
        .map_err(|e| bad(format!("labels: {e}")))?;
    let count: usize = field(next("tensor count")?, "tensors")?
        .parse()
        .map_err(|e| bad(format!("tensor count: {e}")))?;

    let mut model = Model::init(variant, config)?;
    let names = model.params.tensor_names();
    if names.len() != count {
        return Err(bad(format!(
            "{variant} needs {} tensors, checkpoint has {count}",
            names.len()
        )));
    }
    let mut tensors = model.params.tensors_mut();
    for (name, t) in names.iter().zip(tensors.iter_mut()) {
        let header = field(next("tensor header")?, "tensor")?;
        let parts: Vec<&str> = header.split(' ').collect();
        let expected = [name.clone(), t.rows().to_string(), t.cols().to_string()];
        if parts != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(bad(format!(
                "tensor header {header:?} does not match expected {}",
                expected.join(" ")
            )));
        }
        let values = next("tensor values")?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != t.len() {
            return Err(bad(format!(
                "{name}: expected {} values, found {}",
                t.len(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(&values);
    }
    drop(tensors);
    let stored = field(next("checksum")?, "checksum")?;
    let actual = format!("{:016x}", params_checksum(&model.params));
    if stored != actual {
        return Err(bad(format!("checksum mismatch: stored {stored}, computed {actual}")));
    }
    if labels.len() != model.config.num_classes {
        return Err(bad(format!(
            "{} labels for a {}-class model",
            labels.len(),
            model.config.num_classes
        )));
    }
    Ok((model, LabelMap::new(labels)))
}
