use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{backward, forward};
use super::{stem, QualityModel, RegressorConfig};
use crate::conditioning::{cosine_similarity_matrix, EmbeddingTable};
use crate::error::{Error, Result};
use crate::loss::{compositional_gradient, BatchTargets, LossBreakdown, LossConfig};
use crate::oracle::corpus::{derive_seed, Corpus, Split};
use crate::oracle::overlap::slice_dsc;
use crate::pairing::{optimal_pairs, PairingResult};
use crate::preprocess::{preprocess_pair, sample_slices};
use crate::scalar::Scalar;

/// One stem-pooled slice with its slice-level Dice target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f32>,
    pub class_id: u8,
    pub target: f64,
    pub volume_id: String,
    pub z: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub stem_pool: usize,
    pub samples: Vec<TrainingSample>,
}

impl TrainingSet {
    /// Samples `slices_per_record` slices of every record in `split`. Each
    /// target is the 2D Dice of the degraded and reference masks on that slice.
    pub fn build(corpus: &Corpus, split: Split, slices_per_record: usize, stem_pool: usize) -> Result<Self> {
        let records: Vec<_> = corpus.manifest.records_in(split).collect();
        if records.is_empty() {
            return Err(Error::Empty(format!("{split:?} split has no records")));
        }
        let per_record = records
            .par_iter()
            .map(|r| {
                let image = corpus.image(&r.image_ref)?;
                let degraded = corpus.mask(&r.degraded_ref)?.binary_for(r.class_id);
                let truth = corpus.mask(&r.ground_truth_ref)?.binary_for(r.class_id);
                let zs = match sample_slices(&degraded, r.class_id, slices_per_record) {
                    Err(Error::EmptyMask(_)) => return Ok(Vec::new()),
                    other => other?,
                };
                zs.into_iter()
                    .map(|z| {
                        let pair = preprocess_pair(image, &degraded, z, r.class_id)?;
                        Ok(TrainingSample {
                            input: stem(&pair, stem_pool),
                            class_id: r.class_id,
                            target: slice_dsc(&degraded, &truth, z)?,
                            volume_id: r.volume_id.clone(),
                            z,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stem_pool, samples: per_record.into_iter().flatten().collect() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub mse_term: f64,
    pub rank_term: f64,
    pub pairs: usize,
    pub lambda: f64,
    pub xi: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: QualityModel<S>,
    pub log: Vec<StepLog>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
}

impl<S> TrainOutcome<S> {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.log {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
    lr: S,
}

impl<S: Scalar> Adam<S> {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0, lr: S::lit(lr) }
    }

    fn step(&mut self, params: &mut [S], grad: &[S]) {
        let (b1, b2, eps) = (S::lit(0.9), S::lit(0.999), S::lit(1e-8));
        self.t += 1;
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

fn batch_pairing<S: Scalar>(vectors: &[Vec<S>]) -> Result<PairingResult<S>> {
    if vectors.len() < 2 {
        return Ok(PairingResult { pairs: vec![], leftover: (vectors.len() == 1).then_some(0), total_similarity: S::zero() });
    }
    optimal_pairs(&cosine_similarity_matrix(vectors)?)
}

/// Loss and summed parameter gradient for one batch. Per-sample gradients
/// are reduced in index order, so results do not depend on the thread count.
pub(crate) fn batch_gradient<S: Scalar>(
    model: &QualityModel<S>,
    inputs: &[&[S]],
    conds: &[Vec<S>],
    pair_vectors: &[Vec<S>],
    targets: &[S],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown<S>, Vec<S>)> {
    let caches = (0..inputs.len())
        .into_par_iter()
        .map(|i| forward(&model.layout, &model.params, inputs[i], &conds[i]))
        .collect::<Result<Vec<_>>>()?;
    let batch = BatchTargets {
        predicted: caches.iter().map(|c| c.output).collect(),
        actual: targets.to_vec(),
        pairing: batch_pairing(pair_vectors)?,
    };
    let (breakdown, d_pred) = compositional_gradient(&batch, loss_cfg)?;
    let per_sample: Vec<Vec<S>> = caches
        .par_iter()
        .zip(d_pred.par_iter())
        .map(|(c, &d)| {
            let mut g = vec![S::zero(); model.layout.total];
            if d != S::zero() {
                backward(&model.layout, &model.params, c, d, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![S::zero(); model.layout.total];
    for g in &per_sample {
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((breakdown, grad))
}

/// Trains a fresh model on `set`. Batches come from a per-epoch seeded
/// shuffle; each batch is paired by condition-embedding similarity. When
/// `checkpoint_dir` is given, `epoch_NNN.json` is written after every epoch.
pub fn train<S: Scalar>(
    set: &TrainingSet,
    table: &EmbeddingTable,
    cfg: &RegressorConfig,
    loss_cfg: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    loss_cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if set.stem_pool != cfg.stem_pool {
        return Err(Error::InvalidArgument(format!(
            "training set pooled by {} but config expects {}",
            set.stem_pool, cfg.stem_pool
        )));
    }
    let mut model = QualityModel::<S>::new(cfg.clone(), table.dim)?;
    let inputs: Vec<Vec<S>> = set.samples.iter().map(|s| s.input.iter().map(|&x| S::lit(x as f64)).collect()).collect();
    let mut pair_vecs = std::collections::BTreeMap::new();
    let mut cond_vecs = std::collections::BTreeMap::new();
    for s in &set.samples {
        if !pair_vecs.contains_key(&s.class_id) {
            pair_vecs.insert(s.class_id, table.vector::<S>(s.class_id)?);
            cond_vecs.insert(s.class_id, model.condition(table, s.class_id)?);
        }
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut adam = Adam::new(model.layout.total, cfg.learning_rate);
    let mut log = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xE0C, epoch as u64])));
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_inputs: Vec<&[S]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let classes: Vec<u8> = chunk.iter().map(|&i| set.samples[i].class_id).collect();
            let conds: Vec<Vec<S>> = classes.iter().map(|c| cond_vecs[c].clone()).collect();
            let pv: Vec<Vec<S>> = classes.iter().map(|c| pair_vecs[c].clone()).collect();
            let targets: Vec<S> = chunk.iter().map(|&i| S::lit(set.samples[i].target)).collect();
            let (b, grad) = batch_gradient(&model, &batch_inputs, &conds, &pv, &targets, loss_cfg)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at step {}", log.len())));
            }
            adam.step(&mut model.params, &grad);
            let total = b.total.as_f64();
            epoch_sum += total;
            batches += 1;
            log.push(StepLog {
                step: log.len(),
                epoch,
                total,
                mse_term: b.mse_term.as_f64(),
                rank_term: b.rank_term.as_f64(),
                pairs: b.pairs,
                lambda: loss_cfg.lambda,
                xi: loss_cfg.xi,
            });
        }
        let mean = epoch_sum / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        epoch_means.push(mean);
        if let Some(dir) = checkpoint_dir {
            model.to_checkpoint(loss_cfg, epoch).save(&dir.join(format!("epoch_{epoch:03}.json")))?;
        }
    }
    Ok(TrainOutcome { model, log, epoch_means })
}

/// Builds the training set from the corpus train split and trains.
pub fn train_corpus<S: Scalar>(
    corpus: &Corpus,
    table: &EmbeddingTable,
    cfg: &RegressorConfig,
    loss_cfg: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let set = TrainingSet::build(corpus, Split::Train, cfg.train_slices, cfg.stem_pool)?;
    train(&set, table, cfg, loss_cfg, checkpoint_dir)
}
