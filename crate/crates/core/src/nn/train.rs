//! Training loop and inference on preprocessed records.
//!
//! Every record is denoised and delineated once up front. Each epoch then
//! draws one crop per record (heuristic or uniform), computes features on
//! the crop, and runs minibatch Adam. Validation runs on whole records.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::weighted_bce_with_logits;
use super::{Adam, Model, ModelConfig, NnError, PlateauScheduler, Tensor};
use crate::augment::{
    mark_and_crop, pad_or_crop, present_weights_from_counts, random_crop, ClassWeights, DEFAULT_CROP_LEN,
};
use crate::dsp::denoise;
use crate::features::{extract_features, FeatureVector, Standardizer};
use crate::metrics::{confusion, macro_f1_present};
use crate::par;
use crate::qrs::{analyze, Fiducials, MarkedRegions};
use crate::record::{Dataset, EcgRecord, LabelVector, NUM_LABELS, NUM_LEADS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub crop_len: usize,
    /// Accept only crops covering marked irregular regions.
    pub heuristic_crop: bool,
    pub model: ModelConfig,
    /// Worker threads (0 = all cores).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 40,
            lr: 1e-4,
            weight_decay: 1e-6,
            plateau_factor: 5.0,
            plateau_patience: 5,
            seed: 0,
            crop_len: DEFAULT_CROP_LEN,
            heuristic_crop: true,
            model: ModelConfig::default(),
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.plateau_patience > 0
            && self.crop_len >= super::DOWNSAMPLING;
        if !positive || self.plateau_factor.is_nan() || self.plateau_factor <= 1.0 {
            return Err(NnError::Config(format!("{self:?}")));
        }
        self.model.validate()
    }
}

/// A denoised record with its beat analysis.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub record: EcgRecord,
    pub fiducials: Fiducials,
    pub regions: MarkedRegions,
    pub features: FeatureVector,
    pub labels: Option<LabelVector>,
}

impl Prepared {
    pub fn new(raw: &EcgRecord, labels: Option<LabelVector>) -> Result<Self, NnError> {
        let record = denoise(raw).map_err(|e| NnError::Preprocess(format!("{}: {e}", raw.id())))?;
        let (fiducials, regions) = match analyze(&record) {
            Ok(a) => (a.fiducials, a.regions),
            Err(e) => {
                log::warn!("{}: no beat analysis ({e}); using signal features only", record.id());
                let n = record.n_samples();
                (
                    Fiducials { n_samples: n, sample_rate_hz: record.sample_rate_hz(), beats: vec![] },
                    MarkedRegions::empty(n),
                )
            }
        };
        let features = extract_features(&record, &fiducials);
        Ok(Self { record, fiducials, regions, features, labels })
    }

    /// Training crop and the features measured on it.
    fn crop(&self, len: usize, heuristic: bool, rng: &mut ChaCha8Rng) -> (EcgRecord, FeatureVector) {
        let n = self.record.n_samples();
        if n <= len {
            let rec = pad_or_crop(&self.record, len);
            return (rec, extract_features(&self.record, &self.fiducials));
        }
        let w = if heuristic { mark_and_crop(&self.regions, len, rng) } else { random_crop(n, len, rng) }
            .expect("record longer than crop");
        let rec = self.record.window(w.start, len).expect("window inside record");
        let fid = self.fiducials.window(w.start, len);
        let feats = extract_features(&rec, &fid);
        (rec, feats)
    }
}

/// Denoises and analyses every record of a dataset, in parallel.
pub fn prepare(dataset: &Dataset) -> Result<Vec<Prepared>, NnError> {
    par::map_collect(dataset.records(), |r| Prepared::new(&r.record, Some(r.labels))).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    /// Parameters from the epoch with the best validation score.
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub weights: ClassWeights,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Writes the training log as CSV (`epoch,train_loss,val_macro_f1,lr`).
pub fn write_log<W: Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_macro_f1,lr")?;
    for e in log {
        writeln!(out, "{},{:.8},{:.6},{:e}", e.epoch, e.train_loss, e.val_macro_f1, e.lr)?;
    }
    Ok(())
}

fn signal_tensor(records: &[EcgRecord]) -> Tensor<f32> {
    let t = records[0].n_samples();
    let mut data = Vec::with_capacity(records.len() * NUM_LEADS * t);
    for r in records {
        data.extend_from_slice(r.signal());
    }
    Tensor::from_vec(&[records.len(), NUM_LEADS, t], data).expect("equal-length records")
}

fn target_tensor(labels: &[LabelVector]) -> Tensor<f32> {
    let data = labels.iter().flat_map(|l| l.flags().map(|f| f as u8 as f32)).collect();
    Tensor::from_vec(&[labels.len(), NUM_LABELS], data).unwrap()
}

/// Model probabilities for each record, evaluated on the whole record
/// (zero-padded up to `min_len`).
pub fn probabilities(
    model: &Model<f32>,
    records: &[Prepared],
    min_len: usize,
) -> Result<Vec<[f32; NUM_LABELS]>, NnError> {
    records
        .iter()
        .map(|p| {
            let rec = if p.record.n_samples() < min_len { pad_or_crop(&p.record, min_len) } else { p.record.clone() };
            let x = signal_tensor(std::slice::from_ref(&rec));
            let f = model.feature_tensor(std::slice::from_ref(&p.features));
            let probs = model.predict_proba(&x, Some(&f))?;
            Ok(std::array::from_fn(|i| probs.data()[i]))
        })
        .collect()
}

/// Thresholds probabilities into a valid label vector: abnormalities at or
/// above `threshold` win over Normal, and nothing above threshold means
/// Normal.
pub fn threshold_labels(probs: &[f32; NUM_LABELS], threshold: f32) -> LabelVector {
    let abnormal: Vec<_> =
        crate::record::Label::ABNORMALITIES.iter().copied().filter(|l| probs[l.index()] >= threshold).collect();
    if abnormal.is_empty() {
        LabelVector::normal()
    } else {
        LabelVector::from_abnormalities(abnormal)
    }
}

/// Predicted label vectors for prepared records at threshold 0.5.
pub fn evaluate(model: &Model<f32>, records: &[Prepared], min_len: usize) -> Result<Vec<LabelVector>, NnError> {
    Ok(probabilities(model, records, min_len)?.iter().map(|p| threshold_labels(p, 0.5)).collect())
}

fn score(model: &Model<f32>, records: &[Prepared], min_len: usize) -> Result<f64, NnError> {
    let preds = evaluate(model, records, min_len)?;
    let truths: Vec<LabelVector> = records.iter().map(|r| r.labels.expect("labelled record")).collect();
    Ok(macro_f1_present(&confusion(&preds, &truths).expect("aligned")))
}

/// Predicts one raw record.
pub fn predict(model: &Model<f32>, record: &EcgRecord, threshold: f32, min_len: usize) -> Result<LabelVector, NnError> {
    let p = Prepared::new(record, None)?;
    Ok(threshold_labels(&probabilities(model, &[p], min_len)?[0], threshold))
}

/// Trains on `train`, selecting the epoch with the best validation macro F1
/// (over the labels present). Deterministic for a fixed seed.
pub fn fit(train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput, NnError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptyData("training"));
    }
    if valid.is_empty() {
        return Err(NnError::EmptyData("validation"));
    }
    par::with_threads(cfg.threads, || {
        let train_p = prepare(train)?;
        let valid_p = prepare(valid)?;
        fit_prepared(&train_p, &valid_p, cfg)
    })
}

/// [`fit`] on records that are already preprocessed.
pub fn fit_prepared(train: &[Prepared], valid: &[Prepared], cfg: &TrainConfig) -> Result<TrainOutput, NnError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptyData("training"));
    }
    let labels: Vec<LabelVector> = train
        .iter()
        .map(|p| p.labels.ok_or_else(|| NnError::Config("unlabelled training record".into())))
        .collect::<Result<_, _>>()?;
    let mut counts = [0usize; NUM_LABELS];
    for l in &labels {
        for (c, f) in counts.iter_mut().zip(l.flags()) {
            *c += f as usize;
        }
    }
    if counts.contains(&0) {
        log::warn!(
            "classes without positives in training set; weighting the {} present ones",
            counts.iter().filter(|&&c| c > 0).count()
        );
    }
    let weights = present_weights_from_counts(&counts, labels.len()).map_err(|e| NnError::Config(e.to_string()))?;
    let w64 = weights.0;

    let mut model = Model::<f32>::new(cfg.model, cfg.seed)?;
    let fitted = Standardizer::fit(train.iter().map(|p| &p.features));
    // Keep statistics f32-exact so a saved checkpoint reproduces outputs.
    model.standardizer =
        Standardizer { mean: fitted.mean.map(|v| v as f32 as f64), std: fitted.std.map(|v| v as f32 as f64) };
    let mut adam = Adam::new(cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut log_rows = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = sched.lr;
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let items = par::map_collect(batch, |&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c409);
                rng.set_stream(((epoch as u64) << 32) | i as u64);
                train[i].crop(cfg.crop_len, cfg.heuristic_crop, &mut rng)
            });
            let (recs, feats): (Vec<EcgRecord>, Vec<FeatureVector>) = items.into_iter().unzip();
            let x = signal_tensor(&recs);
            let f = model.feature_tensor(&feats);
            let y = target_tensor(&batch.iter().map(|&i| labels[i]).collect::<Vec<_>>());

            model.zero_grad();
            let (logits, cache) = model.forward_train(&x, Some(&f))?;
            let (loss, dlogits) = weighted_bce_with_logits(&logits, &y, &w64)?;
            model.backward(&cache, &dlogits)?;
            adam.step(model.params_mut().into_iter().map(|(_, p)| p), lr)?;
            loss_sum += loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val = if valid.is_empty() { 0.0 } else { score(&model, valid, cfg.crop_len)? };
        log::info!("epoch {epoch}: loss {train_loss:.5} val macro-F1 {val:.4} lr {lr:e}");
        log_rows.push(EpochLog { epoch, train_loss, val_macro_f1: val, lr });
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch, model.clone()));
        }
        sched.step(val);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutput { model: best_model, adam, weights, log: log_rows, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Label;

    #[test]
    fn thresholding_rules() {
        assert!(threshold_labels(&[0.1; 9], 0.5).is_normal());
        let mut p = [0.1; 9];
        p[Label::Af.index()] = 0.9;
        assert_eq!(threshold_labels(&p, 0.5), LabelVector::from_abnormalities([Label::Af]));
        let mut p = [0.1; 9];
        p[Label::Normal.index()] = 0.9;
        p[Label::Pvc.index()] = 0.9;
        assert_eq!(threshold_labels(&p, 0.5), LabelVector::from_abnormalities([Label::Pvc]));
    }

    #[test]
    fn log_format() {
        let mut buf = Vec::new();
        write_log(&[EpochLog { epoch: 0, train_loss: 1.5, val_macro_f1: 0.25, lr: 1e-4 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_macro_f1,lr\n0,1.50000000,0.250000,1e-4\n");
    }
}
