//! Loss, SGD, the epoch loop and patient-level folds.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lvit::{self, LVitConfig, LVitParams};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Lower bound applied to a probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tiles whose gradients are summed together before the partial sums are
/// combined. Fixed so the reduction order never depends on the worker count.
pub const GRAD_CHUNK: usize = 8;

/// `-ln(max(probs[label], PROB_FLOOR))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::LabelOutOfRange(label))?;
    Ok(-libm::log(p.max(PROB_FLOOR)))
}

/// `p ← p − lr·g` for every parameter tensor.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(alloc::format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Runs independent jobs and returns their results in job order.
///
/// Implementations may run jobs concurrently; callers reduce the returned
/// vector sequentially so the arithmetic is identical for any executor.
pub trait Executor {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..jobs).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTile {
    pub tile: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: LVitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            learning_rate: 0.05,
            seed: 0,
            model: LVitConfig::full(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid(String::from("batch_size must be at least 1")));
        }
        if self.epochs == 0 {
            return Err(Error::invalid(String::from("epochs must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(String::from("learning_rate must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-tile loss over the epoch, measured before each batch update.
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LVitParams,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

/// Order in which tiles are visited during `epoch` (0-based).
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains a freshly initialized model (seeded with `cfg.seed`).
pub fn train_epochs<E: Executor>(
    data: &[LabeledTile],
    cfg: &TrainConfig,
    exec: &E,
    validation: Option<&[LabeledTile]>,
    on_epoch: impl FnMut(&EpochStats, &LVitParams),
) -> Result<TrainOutcome> {
    let params = LVitParams::init(&cfg.model, cfg.seed);
    train_from(params, data, cfg, exec, validation, on_epoch)
}

/// Continues training `params`.
pub fn train_from<E: Executor>(
    mut params: LVitParams,
    data: &[LabeledTile],
    cfg: &TrainConfig,
    exec: &E,
    validation: Option<&[LabeledTile]>,
    mut on_epoch: impl FnMut(&EpochStats, &LVitParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(bad) = data.iter().find(|s| s.label >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange(bad.label));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradient(&params, &cfg.model, data, batch, exec)?;
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            let mean: Vec<Tensor> = grads.into_iter().map(|g| g.map(|v| v * scale)).collect();
            sgd_step(params.params.tensors_mut(), &mean, cfg.learning_rate)?;
        }
        let val_accuracy = match validation {
            Some(v) if !v.is_empty() => Some(accuracy(&params, &cfg.model, v, exec)?),
            _ => None,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: total / data.len() as f64,
            val_accuracy,
        };
        on_epoch(&stats, &params);
        history.push(stats);
    }
    Ok(TrainOutcome { params, history })
}

/// Summed loss and summed gradients over `batch`.
fn batch_gradient<E: Executor>(
    params: &LVitParams,
    config: &LVitConfig,
    data: &[LabeledTile],
    batch: &[usize],
    exec: &E,
) -> Result<(f64, Vec<Tensor>)> {
    let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = exec.map(chunks.len(), |c| -> Result<(f64, Vec<Tensor>)> {
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for &i in chunks[c] {
            let (l, g) = lvit::loss_and_grads(&data[i].tile, data[i].label, params, config)?;
            loss += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        Ok((loss, acc.unwrap_or_default()))
    });
    let mut loss = 0.0;
    let mut sum: Vec<Tensor> = Vec::new();
    for part in partials {
        let (l, g) = part?;
        loss += l;
        if sum.is_empty() {
            sum = g;
        } else {
            sum.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g));
        }
    }
    Ok((loss, sum))
}

/// Class probabilities for every tile, in input order.
pub fn predict<E: Executor>(
    params: &LVitParams,
    config: &LVitConfig,
    tiles: &[Tensor],
    exec: &E,
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    exec.map(tiles.len(), |i| lvit::lvit_forward(&tiles[i], params, config))
        .into_iter()
        .collect()
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of tiles whose argmax prediction equals the label.
pub fn accuracy<E: Executor>(
    params: &LVitParams,
    config: &LVitConfig,
    data: &[LabeledTile],
    exec: &E,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let hits = exec
        .map(data.len(), |i| {
            lvit::lvit_forward(&data[i].tile, params, config).map(|p| argmax(&p) == data[i].label)
        })
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Assignment of ROIs to cross-validation folds such that every patient's
/// ROIs share one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan<P: Ord> {
    pub k: usize,
    /// Fold of each patient.
    pub patients: BTreeMap<P, usize>,
    /// Fold of each ROI, in input order.
    pub rois: Vec<usize>,
}

impl<P: Ord> FoldPlan<P> {
    /// ROI indices held out in `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.rois.len()).filter(|&i| self.rois[i] == fold).collect()
    }

    /// ROI indices used for training when `fold` is held out.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.rois.len()).filter(|&i| self.rois[i] != fold).collect()
    }

    /// Number of ROIs per fold.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.rois.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Splits ROIs into `k` folds by patient. `patient_of_roi[i]` is the patient
/// owning ROI `i`. Patients are sorted, shuffled with `seed`, then dealt to
/// the folds round-robin.
pub fn kfold_split<P: Ord + Clone>(
    patient_of_roi: &[P],
    k: usize,
    seed: u64,
) -> Result<FoldPlan<P>> {
    if k == 0 {
        return Err(Error::invalid(String::from("k must be at least 1")));
    }
    let mut unique: Vec<P> = patient_of_roi.to_vec();
    unique.sort();
    unique.dedup();
    if k > unique.len() {
        return Err(Error::invalid(alloc::format!(
            "{k} folds requested but only {} patients",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let patients: BTreeMap<P, usize> = unique
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, i % k))
        .collect();
    let rois = patient_of_roi.iter().map(|p| patients[p]).collect();
    Ok(FoldPlan { k, patients, rois })
}
