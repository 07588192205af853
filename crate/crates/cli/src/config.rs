//! Resolved run configuration. Precedence: command-line flags, then the JSON
//! config file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use ctxclf::data::{ContextMode, SynthConfig};
use ctxclf::embeddings::SkipGramConfig;
use ctxclf::model::ModelConfig;
use ctxclf::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub skipgram: SkipGramConfig,
    pub context: Option<ContextMode>,
}

/// Loads `path` (if any) over the defaults. Also reports whether the file set
/// `model.embed_dim`, which otherwise follows the embedding table.
pub fn load_config(path: Option<&Path>) -> Result<(RunConfig, bool)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), false));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let embed_dim_set = value
        .get("model")
        .and_then(|m| m.get("embed_dim"))
        .is_some();
    let cfg = serde_json::from_value(value).with_context(|| format!("in {}", path.display()))?;
    Ok((cfg, embed_dim_set))
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// Word-vector dimension (defaults to the embedding file's)
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// LSTM hidden units per direction
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Comma-separated convolution kernel sizes
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
    /// Feature maps per kernel size
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub alpha_sent: Option<f64>,
    #[arg(long)]
    pub alpha_cont: Option<f64>,
    /// Width of each FOFE dense layer
    #[arg(long)]
    pub fofe_out: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Parameter initialization seed
    #[arg(long)]
    pub init_seed: Option<u64>,
}

impl ModelFlags {
    pub fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.lstm_hidden, self.hidden);
        set(&mut m.kernel_sizes, self.kernels.clone());
        set(&mut m.conv_features, self.features);
        set(&mut m.fofe.alpha_sent, self.alpha_sent);
        set(&mut m.fofe.alpha_cont, self.alpha_cont);
        set(&mut m.fofe_dense_out, self.fofe_out);
        set(&mut m.dropout_rate, self.dropout);
        set(&mut m.seed, self.init_seed);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed for fold assignment, minibatch order and dropout
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

impl TrainFlags {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.eps, self.eps);
        set(&mut t.folds, self.folds);
        set(&mut t.shuffle_seed, self.shuffle_seed);
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataFlags {
    /// JSONL corpus, one document per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// word2vec text-format embeddings
    #[arg(long)]
    pub embeddings: PathBuf,
    /// How context sentences are chosen
    #[arg(long, value_enum)]
    pub context: Option<ContextArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextArg {
    Adjacent,
    Speaker,
}

impl From<ContextArg> for ContextMode {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::Adjacent => ContextMode::Adjacent,
            ContextArg::Speaker => ContextMode::Speaker,
        }
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
