//! Optimization, metrics, cross-validation and significance testing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{Example, Model, ModelConfig, ModelVariant};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub folds: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            folds: 5,
            shuffle_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return Err(Error::invalid("epochs, batch_size and folds must be at least 1"));
        }
        self.adamax().validate()
    }

    pub fn adamax(&self) -> AdamaxConfig {
        AdamaxConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        TrainConfig::default().adamax()
    }
}

impl AdamaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::invalid("lr and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        AdamaxState {
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }
}

pub fn adamax_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamaxState,
    cfg: &AdamaxConfig,
) -> Result<()> {
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and optimizer state tensor counts differ"));
    }
    for ((p, g), m) in ps.iter().zip(&gs).zip(&state.m) {
        p.check_same_shape(g, "adamax_step")?;
        p.check_same_shape(m, "adamax_step")?;
    }
    state.t += 1;
    let step = cfg.lr / (1.0 - cfg.beta1.powi(state.t.min(i32::MAX as u64) as i32));
    for (((p, g), m), u) in ps.into_iter().zip(gs).zip(&mut state.m).zip(&mut state.u) {
        for (((pi, &gi), mi), ui) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(u.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *ui = (cfg.beta2 * *ui).max(gi.abs());
            *pi -= step * *mi / (*ui + cfg.eps);
        }
    }
    Ok(())
}

/// `max(f) / f_i` for each class.
pub fn class_weights(frequencies: &[usize]) -> Result<Vec<f64>> {
    if let Some(i) = frequencies.iter().position(|&f| f == 0) {
        return Err(Error::invalid(format!(
            "class {i} does not occur in the training data"
        )));
    }
    let max = frequencies.iter().copied().max().ok_or_else(|| Error::invalid("no classes"))? as f64;
    Ok(frequencies.iter().map(|&f| max / f as f64).collect())
}

pub fn label_frequencies(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for e in examples {
        if let Some(c) = counts.get_mut(e.label) {
            *c += 1;
        }
    }
    counts
}

/// Epoch loop state: optimizer moments and the shuffling stream.
pub struct Trainer {
    cfg: TrainConfig,
    weights: Vec<f64>,
    state: AdamaxState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Model, cfg: &TrainConfig, class_weights: &[f64], stream: u64) -> Result<Self> {
        cfg.validate()?;
        if class_weights.len() != model.config.num_classes {
            return Err(Error::invalid(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                model.config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        rng.set_stream(stream);
        Ok(Trainer {
            cfg: cfg.clone(),
            weights: class_weights.to_vec(),
            state: AdamaxState::new(&model.params),
            rng,
        })
    }

    /// One pass over `train` in shuffled minibatches; returns the mean per-instance loss.
    pub fn run_epoch(&mut self, model: &mut Model, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let adamax = self.cfg.adamax();
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch, &self.weights, &mut self.rng, true)?;
            adamax_step(&mut model.params, &grads, &mut self.state, &adamax)?;
            total += loss * batch.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    pub fn state(&self) -> &AdamaxState {
        &self.state
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub seconds: f64,
}

pub fn train_fold(
    model: &mut Model,
    train: &[Example],
    cfg: &TrainConfig,
    class_weights: &[f64],
) -> Result<TrainOutcome> {
    train_with_stream(model, train, cfg, class_weights, 0)
}

fn train_with_stream(
    model: &mut Model,
    train: &[Example],
    cfg: &TrainConfig,
    class_weights: &[f64],
    stream: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg, class_weights, stream)?;
    let start = Instant::now();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t = Instant::now();
        let loss = trainer.run_epoch(model, train)?;
        epoch_seconds.push(t.elapsed().as_secs_f64());
        epoch_losses.push(loss);
        log::debug!("{} epoch {}: loss {loss:.6}", model.variant, epoch + 1);
    }
    Ok(TrainOutcome {
        epoch_losses,
        epoch_seconds,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Metrics over one test set. `confusion[t][p]` counts instances of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn metrics(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Evaluation> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid("truth and prediction lengths differ"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty test set"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::invalid(format!("class index out of range for {num_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let tp = confusion[k][k];
        let predicted_k: usize = confusion.iter().map(|row| row[k]).sum();
        let true_k: usize = confusion[k].iter().sum();
        let p = ratio(tp, predicted_k);
        let r = ratio(tp, true_k);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / truth.len() as f64,
        precision,
        recall,
        f1,
        confusion,
    })
}

pub fn predict_labels(model: &Model, examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|e| model.predict(e).map(|p| argmax(&p)))
        .collect()
}

pub fn evaluate(model: &Model, test: &[Example]) -> Result<Evaluation> {
    let predicted = predict_labels(model, test)?;
    let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
    metrics(&truth, &predicted, model.config.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub train_seconds: f64,
    pub epoch_seconds: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Test-fold index sets. Indices are shuffled once, then each class's
/// instances are dealt round-robin with the fold counter carried across classes.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 {
        return Err(Error::invalid("folds must be at least 1"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    let mut counter = 0;
    for class in 0..num_classes {
        let members: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == class).collect();
        if !members.is_empty() && members.len() < folds {
            return Err(Error::invalid(format!(
                "class {class} has {} instances, fewer than {folds} folds",
                members.len()
            )));
        }
        for i in members {
            out[counter % folds].push(i);
            counter += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub accuracy: MeanStd,
    pub f1: Vec<MeanStd>,
    pub train_seconds: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub variant: ModelVariant,
    pub folds: Vec<Vec<usize>>,
    pub reports: Vec<FoldReport>,
    pub summary: CvSummary,
}

impl CvResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.accuracy).collect()
    }
}

/// Stratified k-fold cross-validation. The partition depends only on the
/// labels and `train_cfg.shuffle_seed`, so every variant sees the same folds.
/// Each fold starts from a fresh model initialized from `model_cfg.seed`.
pub fn cross_validate(
    examples: &[Example],
    variant: ModelVariant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CvResult> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let k = model_cfg.num_classes;
    let counts = label_frequencies(examples, k);
    if examples.iter().any(|e| e.label >= k) {
        return Err(Error::invalid(format!("labels out of range for {k} classes")));
    }
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < train_cfg.folds) {
        return Err(Error::invalid(format!(
            "class {c} has {n} instances, fewer than {} folds",
            train_cfg.folds
        )));
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let folds = stratified_folds(&labels, train_cfg.folds, train_cfg.shuffle_seed)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, test_idx) in folds.iter().enumerate() {
        let mut in_test = vec![false; examples.len()];
        test_idx.iter().for_each(|&i| in_test[i] = true);
        let train: Vec<Example> = examples
            .iter()
            .zip(&in_test)
            .filter(|(_, &t)| !t)
            .map(|(e, _)| e.clone())
            .collect();
        let test: Vec<Example> = test_idx.iter().map(|&i| examples[i].clone()).collect();
        let weights = class_weights(&label_frequencies(&train, k))?;
        let mut model = Model::init(variant, model_cfg.clone())?;
        // Fold-specific shuffling stream; stream 0 is left to `train_fold`.
        let outcome = train_with_stream(&mut model, &train, train_cfg, &weights, f as u64 + 1)?;
        let eval = evaluate(&model, &test)?;
        log::info!(
            "{variant} fold {}/{}: accuracy {:.4} ({:.1}s)",
            f + 1,
            folds.len(),
            eval.accuracy,
            outcome.seconds
        );
        reports.push(FoldReport {
            fold: f,
            accuracy: eval.accuracy,
            precision: eval.precision,
            recall: eval.recall,
            f1: eval.f1,
            confusion: eval.confusion,
            train_seconds: outcome.seconds,
            epoch_seconds: outcome.epoch_seconds,
            epoch_losses: outcome.epoch_losses,
        });
    }
    let summary = summarize(&reports, k);
    Ok(CvResult {
        variant,
        folds,
        reports,
        summary,
    })
}

pub fn summarize(reports: &[FoldReport], num_classes: usize) -> CvSummary {
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let secs: Vec<f64> = reports.iter().map(|r| r.train_seconds).collect();
    let f1 = (0..num_classes)
        .map(|c| mean_std(&reports.iter().map(|r| r.f1[c]).collect::<Vec<_>>()))
        .collect();
    CvSummary {
        accuracy: mean_std(&acc),
        f1,
        train_seconds: mean_std(&secs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("t-test sample"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (mean_std(a), mean_std(b));
    let (va, vb) = (sa.std.powi(2) / na, sb.std.powi(2) / nb);
    let se2 = va + vb;
    let diff = sa.mean - sb.mean;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, df: na + nb - 2.0, p: 1.0 }
        } else {
            TTest { t: diff.signum() * f64::INFINITY, df: na + nb - 2.0, p: 0.0 }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TTest { t, df, p: student_t_two_sided(t, df) })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction (modified Lentz), using the
/// symmetry `I_x(a, b) = 1 - I_{1-x}(b, a)` where it converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        for num in [
            m * (b - m) * x / ((a + m2 - 1.0) * (a + m2)),
            -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            if (d * c - 1.0).abs() < 1e-16 {
                return h;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_instances, generate_synthetic, synthetic_embeddings, ContextMode, SynthConfig};
    use crate::model::embed_instances;
    use proptest::prelude::*;

    #[test]
    fn class_weight_formula() {
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[30, 10]).unwrap(), vec![1.0, 3.0]);
        let w = class_weights(&[1103, 1084, 1708, 1041]).unwrap();
        assert_eq!(w, vec![1708.0 / 1103.0, 1708.0 / 1084.0, 1.0, 1708.0 / 1041.0]);
        assert!(class_weights(&[5, 0]).is_err());
        assert!(class_weights(&[]).is_err());
    }

    #[test]
    fn adamax_first_step_and_zero_gradient() {
        let cfg = AdamaxConfig::default();
        let mut p = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let g = Matrix::from_vec(1, 3, vec![0.3, -4.0, 0.0]).unwrap();
        let mut state = AdamaxState::new(&p);
        adamax_step(&mut p, &g, &mut state, &cfg).unwrap();
        for (i, (&start, &gi)) in [0.5, -1.0, 2.0].iter().zip(g.data()).enumerate() {
            let m = (1.0 - cfg.beta1) * gi;
            let u = gi.abs();
            let expected = start - cfg.lr / (1.0 - cfg.beta1) * m / (u + cfg.eps);
            assert!((p.data()[i] - expected).abs() < 1e-12);
            assert!((state.m[0].data()[i] - m).abs() < 1e-15);
            assert_eq!(state.u[0].data()[i], u);
        }
        assert_eq!(state.t, 1);
        assert!((p.data()[0] - (0.5 - 0.002)).abs() < 1e-9);

        let mut q = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let before = q.clone();
        let mut s = AdamaxState::new(&q);
        adamax_step(&mut q, &Matrix::zeros(1, 2), &mut s, &cfg).unwrap();
        assert_eq!(q, before);
        assert!(adamax_step(&mut q, &Matrix::zeros(2, 1), &mut s, &cfg).is_err());
    }

    #[test]
    fn adamax_minimizes_quadratic() {
        let cfg = AdamaxConfig { lr: 0.01, ..AdamaxConfig::default() };
        let mut theta = Matrix::zeros(1, 1);
        let mut state = AdamaxState::new(&theta);
        let mut reached = None;
        for step in 1..=2000 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * (theta.data()[0] - 3.0)]).unwrap();
            adamax_step(&mut theta, &g, &mut state, &cfg).unwrap();
            if reached.is_none() && (theta.data()[0] - 3.0).abs() < 1e-3 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "theta = {}", theta.data()[0]);
        assert!((theta.data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn metrics_hand_oracle() {
        // truth:     0 0 0 1 1 2
        // predicted: 0 0 1 1 2 2
        let e = metrics(&[0, 0, 0, 1, 1, 2], &[0, 0, 1, 1, 2, 2], 3).unwrap();
        assert_eq!(e.confusion, vec![vec![2, 1, 0], vec![0, 1, 1], vec![0, 0, 1]]);
        assert!((e.accuracy - 4.0 / 6.0).abs() < 1e-15);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&e.precision, &[1.0, 0.5, 0.5]));
        assert!(close(&e.recall, &[2.0 / 3.0, 0.5, 1.0]));
        assert!(close(&e.f1, &[0.8, 0.5, 2.0 / 3.0]));

        let perfect = metrics(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.f1, vec![1.0, 1.0, 0.0]);
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[0], &[3], 2).is_err());
    }

    #[test]
    fn mean_std_textbook() {
        let s = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]).std, 0.0);
    }

    #[test]
    fn fold_partition_laws() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let folds = stratified_folds(&labels, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.len(), 20);
            let ones = f.iter().filter(|&&i| labels[i] == 1).count();
            assert!((4..=6).contains(&ones), "{ones}");
        }
        assert_eq!(folds, stratified_folds(&labels, 5, 7).unwrap());
        assert_ne!(folds, stratified_folds(&labels, 5, 8).unwrap());
        assert!(stratified_folds(&[0, 0, 1], 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn folds_are_stratified(labels in proptest::collection::vec(0usize..3, 30..120), k in 2usize..6, seed in any::<u64>()) {
            let mut counts = [0usize; 3];
            labels.iter().for_each(|&l| counts[l] += 1);
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let folds = stratified_folds(&labels, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in &folds {
                f.iter().for_each(|&i| seen[i] += 1);
                for (c, &n) in counts.iter().enumerate() {
                    let in_fold = f.iter().filter(|&&i| labels[i] == c).count() as f64;
                    prop_assert!((in_fold - n as f64 / k as f64).abs() <= 1.0);
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }

        #[test]
        fn adamax_u_nonnegative(grads in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..30)) {
            let mut p = Matrix::zeros(2, 2);
            let mut s = AdamaxState::new(&p);
            for g in grads {
                let g = Matrix::from_vec(2, 2, g).unwrap();
                adamax_step(&mut p, &g, &mut s, &AdamaxConfig::default()).unwrap();
                prop_assert!(s.u[0].data().iter().all(|&u| u >= 0.0));
            }
        }
    }

    #[test]
    fn welch_references() {
        // Reference values computed independently with scipy.stats.ttest_ind(equal_var=False).
        let a = [0.71, 0.69, 0.73, 0.70, 0.72];
        let b = [0.64, 0.62, 0.66, 0.63, 0.65];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t - 7.0).abs() < 1e-9);
        assert!((r.p - 0.000_112_638_549_126_868_99).abs() < 1e-9);

        let r = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.5], &[2.0, 4.0, 1.0, 8.0, 9.0, 3.0]).unwrap();
        assert!((r.t + 0.904_953_868_536_000_6).abs() < 1e-12);
        assert!((r.p - 0.392_394_759_849_340_6).abs() < 1e-9);

        let same = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let flat = welch_t_test(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(flat.p, 1.0);
        let shifted = welch_t_test(&[1.0, 2.0, 3.0], &[101.0, 102.0, 103.0]).unwrap();
        assert!(shifted.p < 0.01);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn special_functions() {
        assert!((student_t_two_sided(2.0, 3.5) - 0.126_138_522_575_913_5).abs() < 1e-10);
        assert!((regularized_incomplete_beta(0.3, 2.5, 4.0) - 0.352_197_585_906_767_2).abs() < 1e-12);
        // Γ(n) = (n-1)!
        for (n, f) in [(1.0, 1.0), (5.0, 24.0), (10.0, 362_880.0f64)] {
            assert!((ln_gamma(n) - f.ln()).abs() < 1e-12);
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        // I_x(1, 1) = x
        for x in [0.1, 0.5, 0.9] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-13);
        }
        assert_eq!(student_t_two_sided(0.0, 4.0), 1.0);
    }

    fn synthetic_examples(docs: usize, focus_signal: bool) -> (Vec<Example>, ModelConfig) {
        let cfg = SynthConfig {
            num_documents: docs,
            sentences_per_document: 4,
            sentence_length: 5,
            vocab_size: 30,
            noise_rate: 0.0,
            focus_signal,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        let table = synthetic_embeddings(&cfg, 6, 3).unwrap();
        let inst = build_instances(&corpus, &cfg.label_map(), ContextMode::Adjacent).unwrap();
        let model_cfg = ModelConfig {
            embed_dim: 6,
            lstm_hidden: 4,
            kernel_sizes: vec![2, 3],
            conv_features: 4,
            fofe_dense_out: 4,
            ..ModelConfig::default()
        };
        (embed_instances(&table, &inst), model_cfg)
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let (ex, mcfg) = synthetic_examples(64, false);
        let cfg = TrainConfig { epochs: 8, batch_size: 16, lr: 0.01, ..TrainConfig::default() };
        let w = class_weights(&label_frequencies(&ex, 2)).unwrap();
        let run = || {
            let mut m = Model::init(ModelVariant::CLstmCnn, mcfg.clone()).unwrap();
            let out = train_fold(&mut m, &ex, &cfg, &w).unwrap();
            (m, out.epoch_losses)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert!(l1.last().unwrap() < &l1[0], "{l1:?}");
        assert_eq!(l1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), l2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(m1, m2);
        assert!(train_fold(&mut m1.clone(), &[], &cfg, &w).is_err());
    }

    #[test]
    fn weight_scaling_scales_loss_and_gradient() {
        let (ex, mcfg) = synthetic_examples(8, false);
        let m = Model::init(ModelVariant::CLstmCnn, mcfg).unwrap();
        let batch: Vec<&Example> = ex.iter().collect();
        let run = |w: &[f64]| m.loss_and_grads(&batch, w, &mut ChaCha8Rng::seed_from_u64(4), true).unwrap();
        let (l1, g1) = run(&[1.0, 2.0]);
        let (l3, g3) = run(&[3.0, 6.0]);
        assert!((l3 - 3.0 * l1).abs() < 1e-12 * l3.abs().max(1.0));
        for (a, b) in g1.to_flat().iter().zip(g3.to_flat()) {
            assert!((b - 3.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_validation_is_reproducible() {
        let (ex, mcfg) = synthetic_examples(40, false);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, folds: 4, ..TrainConfig::default() };
        let a = cross_validate(&ex, ModelVariant::CLstmCnn, &mcfg, &cfg).unwrap();
        let b = cross_validate(&ex, ModelVariant::CLstmCnn, &mcfg, &cfg).unwrap();
        let c = cross_validate(&ex, ModelVariant::CnnOnly, &mcfg, &cfg).unwrap();
        assert_eq!(a.folds, c.folds);
        assert_eq!(a.reports.len(), 4);
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
            assert_eq!(x.confusion, y.confusion);
            assert_eq!(x.epoch_losses, y.epoch_losses);
            let rows: Vec<usize> = x.confusion.iter().map(|r| r.iter().sum()).collect();
            let expected: Vec<usize> = (0..2)
                .map(|c| a.folds[x.fold].iter().filter(|&&i| ex[i].label == c).count())
                .collect();
            assert_eq!(rows, expected);
        }
        let too_many = TrainConfig { folds: 30, ..cfg };
        assert!(cross_validate(&ex, ModelVariant::CnnOnly, &mcfg, &too_many).is_err());
    }

    #[test]
    fn overfits_a_separable_set() {
        let (ex, mcfg) = synthetic_examples(32, true);
        let cfg = TrainConfig { batch_size: 8, lr: 0.01, ..TrainConfig::default() };
        let w = class_weights(&label_frequencies(&ex, 2)).unwrap();
        let mut m = Model::init(ModelVariant::LstmCnn, mcfg).unwrap();
        let mut trainer = Trainer::new(&m, &cfg, &w, 0).unwrap();
        let mut epochs = 0;
        while evaluate(&m, &ex).unwrap().accuracy < 1.0 {
            trainer.run_epoch(&mut m, &ex).unwrap();
            epochs += 1;
            assert!(epochs <= 200);
        }
    }
}
