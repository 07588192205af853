//! Multi-variant comparisons and forgetting-factor sweeps, with their CSV/JSON renderings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{Example, ModelConfig, ModelVariant};
use crate::training::{cross_validate, mean_std, welch_t_test, CvResult, MeanStd, TTest, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: ModelVariant,
    pub b: ModelVariant,
    #[serde(flatten)]
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub results: Vec<CvResult>,
    pub t_tests: Vec<PairTest>,
}

/// Cross-validates each variant on the same fold partition, then runs a
/// Welch t-test on fold accuracies for every pair.
pub fn compare_variants(
    examples: &[Example],
    labels: &[String],
    variants: &[ModelVariant],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Comparison> {
    if variants.is_empty() {
        return Err(Error::invalid("no variants to compare"));
    }
    if labels.len() != model_cfg.num_classes {
        return Err(Error::invalid(format!(
            "{} label names for {} classes",
            labels.len(),
            model_cfg.num_classes
        )));
    }
    let results = variants
        .iter()
        .map(|&v| cross_validate(examples, v, model_cfg, train_cfg))
        .collect::<Result<Vec<_>>>()?;
    if results.windows(2).any(|w| w[0].folds != w[1].folds) {
        return Err(Error::invalid("variants saw different fold partitions"));
    }
    let mut t_tests = Vec::new();
    if train_cfg.folds >= 2 {
        for (i, a) in results.iter().enumerate() {
            for b in &results[i + 1..] {
                t_tests.push(PairTest {
                    a: a.variant,
                    b: b.variant,
                    test: welch_t_test(&a.accuracies(), &b.accuracies())?,
                });
            }
        }
    }
    Ok(Comparison {
        labels: labels.to_vec(),
        results,
        t_tests,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

impl Comparison {
    /// One row per (variant, fold): `variant,fold,accuracy,f1_<label>...,train_seconds`.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = vec!["variant".into(), "fold".into(), "accuracy".into()];
        header.extend(self.labels.iter().map(|l| format!("f1_{l}")));
        header.push("train_seconds".into());
        let mut rows = vec![header];
        for r in &self.results {
            for f in &r.reports {
                let mut row = vec![r.variant.to_string(), f.fold.to_string(), f.accuracy.to_string()];
                row.extend(f.f1.iter().map(f64::to_string));
                row.push(f.train_seconds.to_string());
                rows.push(row);
            }
        }
        csv_string(rows)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let variants: Vec<_> = self
            .results
            .iter()
            .map(|r| {
                let f1: serde_json::Map<String, serde_json::Value> = self
                    .labels
                    .iter()
                    .zip(&r.summary.f1)
                    .map(|(l, s)| (l.clone(), json!(s)))
                    .collect();
                json!({
                    "variant": r.variant,
                    "accuracy": r.summary.accuracy,
                    "f1": f1,
                    "train_seconds": r.summary.train_seconds,
                    "folds": r.reports.len(),
                })
            })
            .collect();
        json!({
            "labels": self.labels,
            "variants": variants,
            "t_tests": self.t_tests,
            "fold_sizes": self.results.first().map(|r| r.folds.iter().map(Vec::len).collect::<Vec<_>>()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    AlphaCont,
    AlphaSent,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::AlphaCont => "alpha_cont",
            SweepParameter::AlphaSent => "alpha_sent",
        })
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "alpha_cont" => Ok(SweepParameter::AlphaCont),
            "alpha_sent" => Ok(SweepParameter::AlphaSent),
            _ => Err(Error::invalid(format!(
                "unknown sweep parameter {s:?}; expected alpha_cont or alpha_sent"
            ))),
        }
    }
}

/// 0.1, 0.2, ..., 1.0.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: MeanStd,
}

/// One cross-validated accuracy per grid value, everything else held fixed.
pub fn sweep(
    examples: &[Example],
    parameter: SweepParameter,
    grid: &[f64],
    variant: ModelVariant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    grid.iter()
        .map(|&value| {
            let mut cfg = model_cfg.clone();
            match parameter {
                SweepParameter::AlphaCont => cfg.fofe.alpha_cont = value,
                SweepParameter::AlphaSent => cfg.fofe.alpha_sent = value,
            }
            let r = cross_validate(examples, variant, &cfg, train_cfg)?;
            log::info!("{parameter} = {value}: accuracy {:.4}", r.summary.accuracy.mean);
            Ok(SweepPoint {
                value,
                accuracy: mean_std(&r.accuracies()),
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let header = ["value", "mean_accuracy", "stddev"].map(String::from).to_vec();
    let rows = points
        .iter()
        .map(|p| vec![p.value.to_string(), p.accuracy.mean.to_string(), p.accuracy.std.to_string()]);
    csv_string(std::iter::once(header).chain(rows).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_instances, generate_synthetic, synthetic_embeddings, ContextMode, SynthConfig};
    use crate::model::embed_instances;

    fn setup() -> (Vec<Example>, ModelConfig, TrainConfig, Vec<String>) {
        let cfg = SynthConfig {
            num_documents: 30,
            sentences_per_document: 4,
            sentence_length: 4,
            vocab_size: 20,
            ..SynthConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let labels = cfg.label_map();
        let inst = build_instances(&docs, &labels, ContextMode::Adjacent).unwrap();
        let table = synthetic_embeddings(&cfg, 5, 1).unwrap();
        let mcfg = ModelConfig {
            embed_dim: 5,
            lstm_hidden: 3,
            kernel_sizes: vec![2],
            conv_features: 3,
            fofe_dense_out: 3,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig { epochs: 1, batch_size: 8, folds: 3, ..TrainConfig::default() };
        (embed_instances(&table, &inst), mcfg, tcfg, labels.labels)
    }

    #[test]
    fn comparison_outputs() {
        let (ex, mcfg, tcfg, labels) = setup();
        let variants = [ModelVariant::CnnOnly, ModelVariant::LstmCnn, ModelVariant::CLstmCnn];
        let cmp = compare_variants(&ex, &labels, &variants, &mcfg, &tcfg).unwrap();
        assert_eq!(cmp.t_tests.len(), 3);
        let csv = cmp.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,fold,accuracy,f1_class0,f1_class1,train_seconds");
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        assert_eq!(rows.len(), 3 * 3);
        let summary = cmp.summary_json();
        for v in &variants {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r[0] == v.name())
                .map(|r| r[2].parse().unwrap())
                .collect();
            let recomputed = mean_std(&accs).mean;
            let reported = summary["variants"]
                .as_array()
                .unwrap()
                .iter()
                .find(|x| x["variant"] == v.name())
                .unwrap()["accuracy"]["mean"]
                .as_f64()
                .unwrap();
            assert!((recomputed - reported).abs() < 1e-12);
        }
        assert!(compare_variants(&ex, &labels, &[], &mcfg, &tcfg).is_err());
    }

    #[test]
    fn sweep_outputs() {
        let (ex, mcfg, tcfg, _) = setup();
        let pts = sweep(&ex, SweepParameter::AlphaCont, &[0.5], ModelVariant::CLstmCnn, &mcfg, &tcfg).unwrap();
        assert_eq!(pts.len(), 1);
        let csv = sweep_csv(&pts);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("value,mean_accuracy,stddev\n0.5,"));
        assert!(sweep(&ex, SweepParameter::AlphaSent, &[], ModelVariant::CLstmCnn, &mcfg, &tcfg).is_err());
        assert_eq!(default_grid().len(), 10);
        assert_eq!(default_grid()[9], 1.0);
        assert_eq!("alpha-sent".parse::<SweepParameter>().unwrap(), SweepParameter::AlphaSent);
    }

    #[test]
    fn label_names_are_quoted() {
        let cmp = Comparison {
            labels: vec!["a,b".into(), "plain".into()],
            results: vec![],
            t_tests: vec![],
        };
        assert_eq!(cmp.to_csv(), "variant,fold,accuracy,\"f1_a,b\",f1_plain,train_seconds\n");
    }
}
