//! Geometric CT-like phantoms: one ellipsoidal structure per class arranged on
//! a ring so that neighbouring structures touch, each with its own intensity
//! band.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{index, Mask, Shape, Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganPhantom {
    /// Mean intensity (HU).
    pub hu: f32,
    /// Semi-axes `(z, y, x)` in voxels before per-volume jitter.
    pub radii: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: Shape,
    pub spacing: Spacing,
    pub background_hu: f32,
    pub noise_sd: f32,
    /// Distance of the structure centres from the in-plane centre, in voxels.
    pub ring_radius: f64,
    /// Relative radius jitter per volume (0.15 = ±15%).
    pub size_jitter: f64,
    /// Centre jitter per volume, in voxels.
    pub position_jitter: f64,
    pub organs: Vec<OrganPhantom>,
}

impl PhantomConfig {
    /// Default layout for `n` classes: sizes grow with the class index and
    /// intensities are spread over [-40, 160] HU.
    pub fn for_classes(n: usize) -> Self {
        let organs = (0..n)
            .map(|k| {
                let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
                OrganPhantom { hu: (-40.0 + 200.0 * t) as f32, radii: [5.0 + 3.0 * t, 7.0 + 3.0 * t, 7.0 + 3.0 * t] }
            })
            .collect();
        Self {
            shape: [20, 56, 56],
            spacing: [2.5, 1.0, 1.0],
            background_hu: -120.0,
            noise_sd: 10.0,
            ring_radius: 10.0,
            size_jitter: 0.15,
            position_jitter: 1.5,
            organs,
        }
    }
}

/// Renders phantom `volume_index`; returns the image and the multi-class
/// reference label map.
pub fn render(cfg: &PhantomConfig, id: &str, seed: u64) -> (Volume, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nz, ny, nx] = cfg.shape;
    let n = cfg.organs.len();
    let rotation = rng.gen_range(-0.2..0.2);
    let placed: Vec<([f64; 3], [f64; 3], f32)> = cfg
        .organs
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let theta = std::f64::consts::TAU * k as f64 / n.max(1) as f64 + rotation;
            let ring = if n > 1 { cfg.ring_radius } else { 0.0 };
            let mut j = || rng.gen_range(-cfg.position_jitter..=cfg.position_jitter);
            let centre = [
                nz as f64 / 2.0 - 0.5 + j(),
                ny as f64 / 2.0 - 0.5 + ring * theta.sin() + j(),
                nx as f64 / 2.0 - 0.5 + ring * theta.cos() + j(),
            ];
            let scale = 1.0 + rng.gen_range(-cfg.size_jitter..=cfg.size_jitter);
            let hu = o.hu + rng.gen_range(-10.0..10.0f32);
            (centre, o.radii.map(|r| r * scale), hu)
        })
        .collect();

    let noise = Normal::new(0.0f32, cfg.noise_sd.max(0.0)).expect("finite noise sd");
    let mut labels = Mask::empty(format!("{id}_labels"), cfg.shape, None);
    let mut image = Volume::filled(id, cfg.shape, cfg.spacing, cfg.background_hu);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64, y as f64, x as f64];
                let mut best: Option<(f64, usize)> = None;
                for (k, (c, r, _)) in placed.iter().enumerate() {
                    let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
                    if d <= 1.0 && best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, k));
                    }
                }
                let i = index(cfg.shape, z, y, x);
                if let Some((_, k)) = best {
                    labels.data[i] = (k + 1) as u8;
                    image.data[i] = placed[k].2;
                }
                image.data[i] += noise.sample(&mut rng);
            }
        }
    }
    (image, labels)
}
