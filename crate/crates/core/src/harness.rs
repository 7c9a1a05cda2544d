//! Optimization, evaluation and experiment orchestration.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, DatasetManifest, LabeledPair, Modality};
use crate::error::{Error, Result};
use crate::pipeline::{predict, EmotionLabel, MgcmaModel, PipelineConfig, Stage};
use crate::scalar::Scalar;
use crate::tensor::{ParameterStore, Tensor};

/// Environment variable capping how many folds train concurrently.
pub const THREADS_ENV: &str = "MGCMA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-5, batch size 4, width 768 / 12 heads / 6 blocks.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            pipeline: PipelineConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be positive".into()));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("need 0 <= beta < 1 and epsilon > 0".into()));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            detail: format!("{} parameters, {} gradients", store.len(), grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let id = crate::tensor::ParamId(i);
        if g.shape() != store.get(id).shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                detail: format!("gradient {:?} for parameter {:?}", g.shape(), store.get(id).shape()),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = store.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// WA, UA and the confusion matrix (rows: truth, columns: prediction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wa: f64,
    pub ua: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Classes with no test support; UA averages over the others.
    pub absent_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptyBatch("metrics"));
        }
        let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let mut recalls = Vec::new();
        let mut absent_classes = Vec::new();
        for (i, row) in confusion.iter().enumerate() {
            let support: u64 = row.iter().sum();
            if support == 0 {
                absent_classes.push(i);
            } else {
                recalls.push(row[i] as f64 / support as f64);
            }
        }
        if !absent_classes.is_empty() {
            log::warn!("classes {absent_classes:?} absent from the test set; UA covers the rest");
        }
        Ok(Self {
            wa: correct as f64 / total as f64,
            ua: recalls.iter().sum::<f64>() / recalls.len() as f64,
            confusion,
            absent_classes,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension {
                op: "metrics",
                detail: format!("{} labels, {} predictions", truth.len(), predicted.len()),
            });
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (t, p) in truth.iter().zip(predicted) {
            if *t >= num_classes || *p >= num_classes {
                return Err(Error::InvalidArgument(format!("class index out of range: {t}/{p}")));
            }
            confusion[*t][*p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn support(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Sums confusion matrices and recomputes the metrics.
    pub fn pooled(reports: &[MetricsReport]) -> Result<Self> {
        let n = reports.first().map_or(0, |r| r.confusion.len());
        let mut confusion = vec![vec![0u64; n]; n];
        for r in reports {
            if r.confusion.len() != n {
                return Err(Error::Dimension {
                    op: "pooled metrics",
                    detail: "class counts differ".into(),
                });
            }
            for (dst, src) in confusion.iter_mut().zip(&r.confusion) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Self::from_confusion(confusion)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_da: f64,
    pub l_ia: f64,
    pub l_ce: f64,
    pub total: f64,
    pub train_wa: f64,
    pub train_ua: f64,
}

pub fn log_to_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MgcmaModel<f64>,
    pub log: Vec<EpochLog>,
}

/// Fisher-Yates with `random_range`, for a permutation that only depends on
/// the ChaCha stream.
fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

fn check_pairs(pairs: &[LabeledPair<f64>], cfg: &PipelineConfig) -> Result<()> {
    for p in pairs {
        for seq in [&p.speech, &p.text] {
            if seq.dim() != cfg.model_dim {
                return Err(Error::DatasetMismatch(format!(
                    "{} has feature width {}, model_dim is {}",
                    seq.utterance_id,
                    seq.dim(),
                    cfg.model_dim
                )));
            }
        }
        if p.label.code() >= cfg.num_classes {
            return Err(Error::DatasetMismatch(format!(
                "label {} outside the model's {} classes",
                p.label, cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam on `pairs`, minimizing `l_da + l_ia + l_ce`.
pub fn train_on_pairs(pairs: &[LabeledPair<f64>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("train"));
    }
    check_pairs(pairs, &cfg.pipeline)?;
    let mut model = MgcmaModel::<f64>::new(cfg.pipeline.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.store());
    let adam_cfg = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let classes = cfg.pipeline.num_classes;
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(pairs.len(), &mut rng);
        let mut sums = [0.0f64; 4];
        let mut truth = Vec::with_capacity(pairs.len());
        let mut predicted = Vec::with_capacity(pairs.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledPair<f64>> = chunk.iter().map(|i| pairs[*i].clone()).collect();
            let (logits, bd, grads) = model.loss_and_gradients(&batch)?;
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([bd.l_da, bd.l_ia, bd.l_ce, bd.total]) {
                *s += v * w;
            }
            truth.extend(batch.iter().map(|p| p.label.code()));
            predicted.extend(predict(&logits)?);
            adam_step(model.store_mut(), &grads, &mut adam, &adam_cfg)?;
        }
        let n = pairs.len() as f64;
        let metrics = MetricsReport::from_predictions(&truth, &predicted, classes)?;
        let entry = EpochLog {
            epoch,
            l_da: sums[0] / n,
            l_ia: sums[1] / n,
            l_ce: sums[2] / n,
            total: sums[3] / n,
            train_wa: metrics.wa,
            train_ua: metrics.ua,
        };
        log::debug!("epoch {epoch}: total {:.5} train UA {:.4}", entry.total, entry.train_ua);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Trains on every record of `manifest`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_manifest(manifest, &cfg.pipeline)?;
    train_on_pairs(&manifest.load_all()?, cfg)
}

fn check_manifest(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<()> {
    if manifest.dim != cfg.model_dim {
        return Err(Error::DatasetMismatch(format!(
            "dataset dim {} differs from model_dim {}",
            manifest.dim, cfg.model_dim
        )));
    }
    Ok(())
}

/// Class predictions for `pairs`, in order.
pub fn predict_pairs<T: Scalar>(model: &MgcmaModel<T>, pairs: &[LabeledPair<T>]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let batch = crate::data::PairBatch::new(chunk.to_vec())?;
        let (logits, _) = model.forward(&batch)?;
        out.extend(predict(&logits)?);
    }
    Ok(out)
}

pub fn evaluate_pairs<T: Scalar>(model: &MgcmaModel<T>, pairs: &[LabeledPair<T>]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let truth: Vec<usize> = pairs.iter().map(|p| p.label.code()).collect();
    let predicted = predict_pairs(model, pairs)?;
    MetricsReport::from_predictions(&truth, &predicted, model.config().num_classes)
}

/// Metrics of `model` over every record of `manifest`.
pub fn evaluate(model: &MgcmaModel<f64>, manifest: &DatasetManifest) -> Result<MetricsReport> {
    check_manifest(manifest, model.config())?;
    evaluate_pairs(model, &manifest.load_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_session: u32,
    pub metrics: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Per-fold results plus metrics pooled over the summed confusion matrix
/// (canonical) and the plain mean of fold metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<FoldResult>,
    pub pooled: MetricsReport,
    pub mean_wa: f64,
    pub mean_ua: f64,
}

/// Fold concurrency from `MGCMA_THREADS` (default 1).
pub fn fold_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Leave-one-session-out cross-validation with `fold_threads()` workers.
pub fn cross_validate(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<CrossValidationReport> {
    cross_validate_with(manifest, cfg, fold_threads())
}

/// Fold `i` trains with seed `derive_seed(cfg.seed, i)`. Results do not
/// depend on `threads`.
pub fn cross_validate_with(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<CrossValidationReport> {
    cfg.validate()?;
    check_manifest(manifest, &cfg.pipeline)?;
    let folds = split_folds(manifest)?;
    let pairs = manifest.load_all::<f64>()?;
    let run_fold = |index: usize| -> Result<FoldResult> {
        let fold = &folds[index];
        let train_pairs: Vec<_> = fold.train.iter().map(|i| pairs[*i].clone()).collect();
        let test_pairs: Vec<_> = fold.test.iter().map(|i| pairs[*i].clone()).collect();
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, index as u64),
            ..cfg.clone()
        };
        let outcome = train_on_pairs(&train_pairs, &fold_cfg)?;
        let metrics = evaluate_pairs(&outcome.model, &test_pairs)?;
        log::info!(
            "fold {} (session {}): WA {:.4} UA {:.4}",
            index,
            fold.test_session,
            metrics.wa,
            metrics.ua
        );
        Ok(FoldResult {
            test_session: fold.test_session,
            metrics,
            log: outcome.log,
        })
    };
    let threads = threads.clamp(1, folds.len());
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(i));
        }
    } else {
        let indices: Vec<usize> = (0..folds.len()).collect();
        for group in indices.chunks(threads) {
            let done: Vec<(usize, Result<FoldResult>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|i| {
                        let run = &run_fold;
                        let i = *i;
                        scope.spawn(move || (i, run(i)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
            });
            for (i, r) in done {
                results[i] = Some(r);
            }
        }
    }
    let folds: Vec<FoldResult> = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<_>>()?;
    let metrics: Vec<MetricsReport> = folds.iter().map(|f| f.metrics.clone()).collect();
    let pooled = MetricsReport::pooled(&metrics)?;
    let k = folds.len() as f64;
    Ok(CrossValidationReport {
        mean_wa: metrics.iter().map(|m| m.wa).sum::<f64>() / k,
        mean_ua: metrics.iter().map(|m| m.ua).sum::<f64>() / k,
        folds,
        pooled,
    })
}

/// Ablation and stage-order systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    S0,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Self::S0,
        Self::S1,
        Self::S2,
        Self::S3,
        Self::S4,
        Self::S5,
        Self::S6,
        Self::S7,
        Self::S8,
        Self::S9,
    ];

    pub fn id(self) -> &'static str {
        ["S0", "S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9"][self as usize]
    }

    pub fn stage_order(self) -> Vec<Stage> {
        use Stage::{Dam, Iam, Tam};
        match self {
            Self::S0 => vec![Dam, Tam, Iam],
            Self::S1 => vec![Tam, Iam],
            Self::S2 => vec![Dam, Iam],
            Self::S3 => vec![Dam, Tam],
            Self::S4 => vec![],
            Self::S5 => vec![Dam, Iam, Tam],
            Self::S6 => vec![Iam, Dam, Tam],
            Self::S7 => vec![Iam, Tam, Dam],
            Self::S8 => vec![Tam, Dam, Iam],
            Self::S9 => vec![Tam, Iam, Dam],
        }
    }

    pub fn description(self) -> String {
        match self {
            Self::S0 => "MGCMA (DAM + TAM + IAM)".into(),
            Self::S1 => "w/o DAM".into(),
            Self::S2 => "w/o TAM".into(),
            Self::S3 => "w/o IAM".into(),
            Self::S4 => "w/o (DAM + TAM + IAM)".into(),
            _ => self
                .stage_order()
                .iter()
                .map(Stage::to_string)
                .collect::<Vec<_>>()
                .join(" + "),
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            stage_order: self.stage_order(),
            ..base.clone()
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: CrossValidationReport,
}

pub const ABLATION_CSV_HEADER: &str = "system,configuration,sequence,wa,ua,fold_mean_wa,fold_mean_ua";

/// Cross-validates every variant with the same seed and data.
pub fn run_ablations(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let variant_cfg = TrainConfig {
                pipeline: v.apply(&cfg.pipeline),
                ..cfg.clone()
            };
            log::info!("running {} ({})", v.id(), v.description());
            Ok(AblationRow {
                variant: *v,
                report: cross_validate(manifest, &variant_cfg)?,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let sequence = r.variant.apply(&PipelineConfig::default()).describe_stages();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant.id(),
            r.variant.description(),
            sequence,
            r.report.pooled.wa,
            r.report.pooled.ua,
            r.report.mean_wa,
            r.report.mean_ua
        );
    }
    out
}

pub const METRICS_CSV_HEADER: &str = "scope,wa,ua,support,absent_classes";

fn metrics_row(out: &mut String, scope: &str, m: &MetricsReport) {
    let absent: Vec<String> = m.absent_classes.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{scope},{:.6},{:.6},{},{}", m.wa, m.ua, m.support(), absent.join(";"));
}

/// One row per report: `scope,wa,ua,support,absent_classes`.
pub fn metrics_csv(rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (scope, m) in rows {
        metrics_row(&mut out, scope, m);
    }
    out
}

/// Confusion matrix as CSV with a `truth` column and one column per
/// predicted class.
pub fn confusion_csv(m: &MetricsReport) -> String {
    let mut out = String::from("truth");
    for c in 0..m.confusion.len() {
        let name = EmotionLabel::from_code(c).map(|l| l.name()).unwrap_or("?");
        let _ = write!(out, ",pred_{name}");
    }
    out.push('\n');
    for (c, row) in m.confusion.iter().enumerate() {
        let name = EmotionLabel::from_code(c).map(|l| l.name()).unwrap_or("?");
        out.push_str(name);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Where embeddings are read out of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Mean of the raw input features.
    Encoder,
    /// Mean of the sequences after all stages.
    PostAlignment,
    /// Unit-normalized post-alignment vectors.
    Pooled,
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "encoder" => Ok(Self::Encoder),
            "post_alignment" | "post-alignment" => Ok(Self::PostAlignment),
            "pooled" => Ok(Self::Pooled),
            other => Err(Error::InvalidArgument(format!(
                "unknown tap {other:?} (expected encoder, post_alignment or pooled)"
            ))),
        }
    }
}

/// CSV with one row per utterance and modality:
/// `utterance_id,modality,label,v0,...,v{D-1}`.
pub fn export_embeddings(model: &MgcmaModel<f64>, manifest: &DatasetManifest, tap: Tap) -> Result<String> {
    check_manifest(manifest, model.config())?;
    let d = model.config().model_dim;
    let mut out = String::from("utterance_id,modality,label");
    for i in 0..d {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for index in 0..manifest.len() {
        let pair = manifest.load_pair::<f64>(index)?;
        let taps = model.representation_taps(&pair)?;
        let (speech, text) = match tap {
            Tap::Encoder => taps.encoder,
            Tap::PostAlignment => taps.post_alignment,
            Tap::Pooled => taps.pooled,
        };
        for (modality, v) in [(Modality::Speech, speech), (Modality::Text, text)] {
            let _ = write!(out, "{},{},{}", pair.speech.utterance_id, modality.name(), pair.label);
            for x in v {
                let _ = write!(out, ",{x:e}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
