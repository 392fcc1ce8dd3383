//! Can a 256-wide bottleneck MLP carry a whole rasterized map?

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenes::{generate_synthetic_scene, GenParams};
use crate::error::{Error, Result};
use crate::mapcore::{BevGrid, MapClass, DEFAULT_GRID_H, DEFAULT_GRID_W};
use crate::ndgrad::{apply_mlp, AdamW, AdamWConfig, Graph, MlpSpec, ParamStore};
use crate::raster::{rasterize_scene, RasterMask, DEFAULT_THICKNESS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub bottleneck: usize,
    /// Hidden layers on each side of the bottleneck; 0 gives
    /// `flatten -> bottleneck -> flatten`.
    pub extra_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub overfit_steps: usize,
    pub overfit_lr: f64,
    pub map_h: usize,
    pub map_w: usize,
    pub generator: GenParams,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            seed: 0,
            train: 500,
            val: 100,
            bottleneck: 256,
            extra_hidden: Vec::new(),
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            overfit_steps: 150,
            overfit_lr: 3e-3,
            map_h: DEFAULT_GRID_H,
            map_w: DEFAULT_GRID_W,
            generator: GenParams::default(),
        }
    }
}

impl ReconConfig {
    fn spec(&self) -> MlpSpec {
        let d = MapClass::COUNT * self.map_h * self.map_w;
        let mut widths = vec![d];
        widths.extend(&self.extra_hidden);
        widths.push(self.bottleneck);
        widths.extend(self.extra_hidden.iter().rev());
        widths.push(d);
        MlpSpec { widths, hidden_activation: Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub train_size: usize,
    pub val_size: usize,
    pub bottleneck: usize,
    pub widths: Vec<usize>,
    /// Mean per-pixel BCE on the held-out rasters.
    pub val_bce: f64,
    /// BCE of the best single constant on the held-out rasters.
    pub constant_bce: f64,
    pub val_iou: f64,
    pub overfit_iou: f64,
    pub epoch_val_bce: Vec<f64>,
}

const RECON_TRAIN_BASE: u64 = 0x5EC0 << 40;
const RECON_VAL_BASE: u64 = 0x5EC1 << 40;

pub fn raster_set(base: u64, count: usize, cfg: &ReconConfig) -> Result<Vec<RasterMask>> {
    let grid = BevGrid::new(cfg.map_h, cfg.map_w, cfg.generator.extent)?;
    (0..count)
        .map(|k| rasterize_scene(&generate_synthetic_scene(base + k as u64, &cfg.generator)?, &grid, DEFAULT_THICKNESS))
        .collect()
}

fn batch_loss_step(spec: &MlpSpec, store: &mut ParamStore, opt: &mut AdamW, batch: &[&RasterMask], lr: f64) -> Result<f64> {
    let d = spec.d_in();
    let g = Graph::new();
    let flat: Vec<f64> = batch.iter().flat_map(|m| m.data.iter().copied()).collect();
    let x = g.constant(flat.clone(), &[batch.len(), d]);
    let logits = apply_mlp(store, "ae", spec, x)?;
    let loss = logits.bce_with_logits(&flat)?;
    g.backward(loss)?;
    opt.step(store, &g.param_grads(), lr)?;
    Ok(loss.item())
}

/// Per-pixel BCE and pooled foreground IoU at 0.5.
fn evaluate(spec: &MlpSpec, store: &ParamStore, set: &[RasterMask]) -> Result<(f64, f64)> {
    let (mut bce, mut inter, mut union) = (0.0, 0usize, 0usize);
    for chunk in set.chunks(32) {
        let g = Graph::new();
        let flat: Vec<f64> = chunk.iter().flat_map(|m| m.data.iter().copied()).collect();
        let x = g.constant(flat.clone(), &[chunk.len(), spec.d_in()]);
        let logits = apply_mlp(store, "ae", spec, x)?;
        bce += logits.bce_with_logits(&flat)?.item() * chunk.len() as f64;
        for (z, t) in logits.value().iter().zip(&flat) {
            let (p, t) = (*z > 0.0, *t > 0.5);
            inter += (p && t) as usize;
            union += (p || t) as usize;
        }
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((bce / set.len() as f64, iou))
}

/// Entropy of the held-out foreground rate, which no constant beats.
pub fn best_constant_bce(set: &[RasterMask]) -> f64 {
    let n: usize = set.iter().map(|m| m.data.len()).sum();
    let p = set.iter().flat_map(|m| m.data.iter()).sum::<f64>() / n as f64;
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

pub fn mlp_reconstruction_experiment(cfg: &ReconConfig) -> Result<ReconReport> {
    if cfg.train < 1 || cfg.val < 1 || cfg.batch_size < 1 {
        return Err(Error::invalid("reconstruction needs non-empty train and validation sets"));
    }
    let spec = cfg.spec();
    spec.validate()?;
    let train = raster_set(RECON_TRAIN_BASE, cfg.train, cfg)?;
    let val = raster_set(RECON_VAL_BASE, cfg.val, cfg)?;

    let mut store = ParamStore::new();
    spec.init(&mut store, "ae", cfg.seed);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_val_bce = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&RasterMask> = idx.iter().map(|i| &train[*i]).collect();
            batch_loss_step(&spec, &mut store, &mut opt, &batch, cfg.lr)?;
        }
        epoch_val_bce.push(evaluate(&spec, &store, &val)?.0);
    }
    let (val_bce, val_iou) = evaluate(&spec, &store, &val)?;

    let one = &train[0];
    let mut single = ParamStore::new();
    spec.init(&mut single, "ae", cfg.seed);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    for _ in 0..cfg.overfit_steps {
        batch_loss_step(&spec, &mut single, &mut opt, &[one], cfg.overfit_lr)?;
    }
    let (_, overfit_iou) = evaluate(&spec, &single, std::slice::from_ref(one))?;

    Ok(ReconReport {
        train_size: train.len(),
        val_size: val.len(),
        bottleneck: cfg.bottleneck,
        widths: spec.widths.clone(),
        val_bce,
        constant_bce: best_constant_bce(&val),
        val_iou,
        overfit_iou,
        epoch_val_bce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_baseline_is_entropy_of_rate() {
        let mut m = RasterMask::zeros(1, 2, 2);
        m.data[0] = 1.0;
        let want = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((best_constant_bce(&[m.clone()]) - want).abs() < 1e-15);
        // any other constant does worse
        for q in [0.1, 0.2, 0.3, 0.5] {
            let bce = -(0.25 * f64::ln(q) + 0.75 * f64::ln(1.0 - q));
            assert!(bce >= want);
        }
        assert_eq!(best_constant_bce(&[RasterMask::zeros(1, 2, 2)]), 0.0);
    }

    #[test]
    fn train_and_val_sets_are_disjoint() {
        let cfg = ReconConfig { train: 5, val: 5, ..Default::default() };
        let a = raster_set(RECON_TRAIN_BASE, 5, &cfg).unwrap();
        let b = raster_set(RECON_VAL_BASE, 5, &cfg).unwrap();
        assert!(a.iter().all(|m| !b.contains(m)));
    }

    #[test]
    fn layout_is_symmetric() {
        let cfg = ReconConfig { extra_hidden: vec![512], ..Default::default() };
        assert_eq!(cfg.spec().widths, vec![6144, 512, 256, 512, 6144]);
        assert_eq!(ReconConfig::default().spec().widths, vec![6144, 256, 6144]);
    }
}
