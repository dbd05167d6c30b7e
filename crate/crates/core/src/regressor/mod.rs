//! Conditioned Dice regressor: model definition, slice and volume inference,
//! checkpoints and the training loop.

pub mod network;
mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::EmbeddingTable;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::oracle::corpus::{derive_seed, Corpus, Split};
use crate::preprocess::{preprocess_pair, sample_slices, SlicePair, SLICE_SIZE};
use crate::record::QualityRecord;
use crate::scalar::Scalar;
use crate::volume::{Mask, Volume};

pub use network::{Dims, Layout, Segment};
pub use train::{train, train_corpus, StepLog, TrainOutcome, TrainingSample, TrainingSet};

pub const CHECKPOINT_FORMAT: &str = "segqc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Slices averaged per volume at inference.
pub const DEFAULT_SLICES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    /// Average-pooling factor applied to the 256x256 input before the encoder.
    pub stem_pool: usize,
    /// Output channels of each encoder block; the last one is `d_f`.
    pub channels: Vec<usize>,
    pub d_g: usize,
    pub attn_hidden: usize,
    /// Linear layers in the attention MLP.
    pub attn_layers: usize,
    /// When false the condition input is zeroed (unconditioned baseline).
    pub conditioned: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Slices sampled per corpus record for training.
    pub train_slices: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            stem_pool: 4,
            channels: vec![16, 32, 64, 128],
            d_g: 64,
            attn_hidden: 128,
            attn_layers: 2,
            conditioned: true,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 30,
            train_slices: 5,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn d_f(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn side(&self) -> Result<usize> {
        if self.stem_pool == 0 || SLICE_SIZE % self.stem_pool != 0 {
            return Err(Error::InvalidArgument(format!("stem_pool {} must divide {SLICE_SIZE}", self.stem_pool)));
        }
        Ok(SLICE_SIZE / self.stem_pool)
    }

    pub fn layout(&self, d_t: usize) -> Result<Layout> {
        Layout::new(
            &self.channels,
            Dims { side: self.side()?, d_t, d_g: self.d_g, attn_hidden: self.attn_hidden, attn_layers: self.attn_layers },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_slices == 0 {
            return Err(Error::InvalidArgument("batch_size and train_slices must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        self.layout(1).map(|_| ())
    }
}

/// Average-pools both channels of a 256x256 pair by `pool`.
pub fn stem(pair: &SlicePair, pool: usize) -> Vec<f32> {
    let side = SLICE_SIZE / pool;
    let mut out = vec![0f32; 2 * side * side];
    let norm = 1.0 / (pool * pool) as f32;
    for c in 0..2 {
        let plane = &pair.pixels[c * SlicePair::PLANE..(c + 1) * SlicePair::PLANE];
        for (u, row) in plane.chunks(SLICE_SIZE).enumerate() {
            let dst = &mut out[(c * side + u / pool) * side..][..side];
            for (v, &x) in row.iter().enumerate() {
                dst[v / pool] += x;
            }
        }
    }
    out.iter_mut().for_each(|x| *x *= norm);
    out
}

/// Trained (or freshly initialised) regressor parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel<S> {
    pub config: RegressorConfig,
    pub layout: Layout,
    pub params: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceEstimate {
    pub z: usize,
    pub class_id: u8,
    pub predicted_dsc: f64,
}

impl<S: Scalar> QualityModel<S> {
    pub fn new(config: RegressorConfig, d_t: usize) -> Result<Self> {
        config.validate()?;
        let layout = config.layout(d_t)?;
        let params = layout.init(derive_seed(&[config.seed, 0x1417]));
        Ok(Self { config, layout, params })
    }

    pub fn d_t(&self) -> usize {
        self.layout.d_t()
    }

    /// Condition input for `class_id`: the table vector, or zeros for an
    /// unconditioned model.
    pub fn condition(&self, table: &EmbeddingTable, class_id: u8) -> Result<Vec<S>> {
        let v = table.vector::<S>(class_id)?;
        if v.len() != self.d_t() {
            return Err(Error::LengthMismatch(v.len(), self.d_t()));
        }
        Ok(if self.config.conditioned { v } else { vec![S::zero(); v.len()] })
    }

    /// Prediction for a stem-pooled input.
    pub fn predict(&self, input: &[S], cond: &[S]) -> Result<S> {
        Ok(network::forward(&self.layout, &self.params, input, cond)?.output)
    }

    pub fn forward_pair(&self, pair: &SlicePair, cond: &[S]) -> Result<S> {
        let input: Vec<S> = stem(pair, self.config.stem_pool).into_iter().map(|x| S::lit(x as f64)).collect();
        self.predict(&input, cond)
    }

    pub fn estimate_slice(&self, pair: &SlicePair, table: &EmbeddingTable) -> Result<SliceEstimate> {
        let cond = self.condition(table, pair.class_id)?;
        let p = self.forward_pair(pair, &cond)?;
        Ok(SliceEstimate { z: pair.z_index, class_id: pair.class_id, predicted_dsc: p.as_f64() })
    }

    /// Mean of the predictions on `k` uniformly sampled slices (all
    /// occupied slices when fewer).
    pub fn estimate_volume(
        &self,
        image: &Volume,
        mask: &Mask,
        class_id: u8,
        table: &EmbeddingTable,
        k: usize,
    ) -> Result<QualityRecord> {
        let cond = self.condition(table, class_id)?;
        let zs = sample_slices(mask, class_id, k)?;
        let slices = zs
            .par_iter()
            .map(|&z| {
                let pair = preprocess_pair(image, mask, z, class_id)?;
                Ok((z, self.forward_pair(&pair, &cond)?.as_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QualityRecord::from_slices(image.id.clone(), class_id, slices))
    }

    /// Estimates every record of `split` (all records when `None`), carrying
    /// the manifest Dice as the actual value.
    pub fn estimate_corpus(
        &self,
        corpus: &Corpus,
        table: &EmbeddingTable,
        split: Option<Split>,
        k: usize,
    ) -> Result<Vec<QualityRecord>> {
        let records: Vec<_> = corpus.manifest.records.iter().filter(|r| split.map_or(true, |s| r.split == s)).collect();
        records
            .par_iter()
            .map(|r| {
                let image = corpus.image(&r.image_ref)?;
                let mask = corpus.mask(&r.degraded_ref)?;
                let mut rec = self.estimate_volume(image, mask, r.class_id, table, k)?;
                rec.volume_id = r.volume_id.clone();
                Ok(rec.with_actual(r.actual_dsc))
            })
            .collect()
    }

    pub fn to_checkpoint(&self, loss: &LossConfig, epoch: usize) -> Checkpoint {
        let params = self
            .layout
            .segments
            .iter()
            .map(|s| NamedParam {
                name: s.name.clone(),
                shape: s.shape.clone(),
                values: self.params[s.range()].iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            loss: *loss,
            d_t: self.d_t(),
            epoch,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let layout = ck.config.layout(ck.d_t)?;
        if layout.segments.len() != ck.params.len() {
            return Err(Error::CorruptHeader(format!(
                "checkpoint has {} tensors, config expects {}",
                ck.params.len(),
                layout.segments.len()
            )));
        }
        let mut params = vec![S::zero(); layout.total];
        for (seg, p) in layout.segments.iter().zip(&ck.params) {
            if seg.name != p.name || seg.shape != p.shape || p.values.len() != seg.len() {
                return Err(Error::CorruptHeader(format!("tensor {} does not match layout entry {}", p.name, seg.name)));
            }
            for (dst, &v) in params[seg.range()].iter_mut().zip(&p.values) {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("checkpoint tensor {}", p.name)));
                }
                *dst = S::lit(v);
            }
        }
        Ok(Self { config: ck.config.clone(), layout, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned config snapshot plus the flat named-parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RegressorConfig,
    pub loss: LossConfig,
    pub d_t: usize,
    pub epoch: usize,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RegressorConfig {
        RegressorConfig { stem_pool: 32, channels: vec![3, 4], d_g: 3, attn_hidden: 6, ..Default::default() }
    }

    #[test]
    fn stem_pools_each_channel() {
        let mut pixels = vec![0.0; 2 * SlicePair::PLANE];
        pixels[..SlicePair::PLANE].fill(0.5);
        pixels[SlicePair::PLANE..SlicePair::PLANE + SLICE_SIZE * 128].fill(1.0);
        let pair = SlicePair { pixels, class_id: 1, z_index: 0, volume_id: "v".into() };
        let s = stem(&pair, 128);
        assert_eq!(s, vec![0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = QualityModel::<f32>::new(tiny(), 5).unwrap();
        let ck = m.to_checkpoint(&LossConfig::default(), 0);
        let json = serde_json::to_vec(&ck).unwrap();
        let back: Checkpoint = serde_json::from_slice(&json).unwrap();
        assert_eq!(QualityModel::<f32>::from_checkpoint(&back).unwrap(), m);
        let mut bad = back.clone();
        bad.params[0].shape = vec![1];
        assert!(QualityModel::<f32>::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RegressorConfig { stem_pool: 3, ..tiny() }.validate().is_err());
        assert!(RegressorConfig { channels: vec![], ..tiny() }.validate().is_err());
        assert!(RegressorConfig { d_g: 0, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }
}
