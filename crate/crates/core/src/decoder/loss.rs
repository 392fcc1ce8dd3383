use serde::{Deserialize, Serialize};

use super::{decoder_forward, hungarian_match, DecoderConfig, DecoderOutput, MatchResult};
use crate::error::{Error, Result};
use crate::grl::global_loss;
use crate::mapcore::MapScene;
use crate::ndgrad::{AdamW, Graph, ParamStore, Tensor};
use crate::raster::RasterMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetLossWeights {
    pub l1: f64,
    pub cls: f64,
    pub background: f64,
    /// Both cross-entropy terms; off leaves only the point regression.
    pub classification: bool,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        DetLossWeights { l1: 5.0, cls: 1.0, background: 1.0, classification: true }
    }
}

/// Weighted detection loss of one layer.
///
/// The L1 term averages `|dx| + |dy|` over the points of each matched pair
/// and then over pairs, using whichever ground-truth orientation is closer.
/// The two cross-entropy terms are means over matched and unmatched queries.
pub fn detection_loss<'g>(
    class_logits: Tensor<'g>,
    points: Tensor<'g>,
    gt: &MapScene,
    matching: &MatchResult,
    weights: &DetLossWeights,
) -> Result<Tensor<'g>> {
    let g = points.graph();
    let (n, l2) = match points.shape().as_slice() {
        [n, l2] => (*n, *l2),
        s => return Err(Error::shape("detection_loss", &[0, 0], s)),
    };
    let background = class_logits.shape()[1] - 1;
    let m = matching.assignment.len();
    if m != gt.instances.len() {
        return Err(Error::invalid(format!("match covers {m} of {} instances", gt.instances.len())));
    }
    let mut loss = g.scalar(0.0);
    if m > 0 {
        let pv = points.value();
        let mut target = Vec::with_capacity(m * l2);
        for (inst, &j) in gt.instances.iter().zip(&matching.assignment) {
            if inst.points.len() * 2 != l2 {
                return Err(Error::shape("detection_loss", &[l2 / 2, 2], &[inst.points.len(), 2]));
            }
            let row = &pv[j * l2..(j + 1) * l2];
            let fwd: Vec<f64> = inst.points.iter().flatten().copied().collect();
            let rev: Vec<f64> = inst.reversed_points().iter().flatten().copied().collect();
            let dist = |t: &[f64]| row.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
            target.extend(if dist(&rev) < dist(&fwd) { rev } else { fwd });
        }
        let matched = points.index_rows(&matching.assignment)?;
        let l1 = matched.sub(g.constant(target, &[m, l2]))?.abs().sum().scale(2.0 / (m * l2) as f64);
        loss = loss.add(l1.scale(weights.l1))?;
        if weights.classification {
            let classes: Vec<usize> = gt.instances.iter().map(|i| i.class_id.index()).collect();
            let ce = class_logits.index_rows(&matching.assignment)?.cross_entropy(&classes)?;
            loss = loss.add(ce.scale(weights.cls))?;
        }
    }
    let unmatched = matching.unmatched(n);
    if weights.classification && !unmatched.is_empty() {
        let ce = class_logits.index_rows(&unmatched)?.cross_entropy(&vec![background; unmatched.len()])?;
        loss = loss.add(ce.scale(weights.background))?;
    }
    Ok(loss)
}

/// `(global weight, detection weight)` of layer `k`. The reduced detection
/// weight applies only where the global head actually runs.
pub fn layer_weights(cfg: &DecoderConfig, k: usize) -> (f64, f64) {
    if cfg.is_applied(k) && cfg.grl_active() {
        (cfg.lambda_global, cfg.omega)
    } else {
        (0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub scene: MapScene,
    pub mask: RasterMask,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub layer: usize,
    pub global: Option<f64>,
    pub det: f64,
    /// This layer's weighted contribution to the total.
    pub total: f64,
}

pub struct SceneLoss<'g> {
    pub total: Tensor<'g>,
    pub layers: Vec<LayerLoss>,
    pub matches: Vec<MatchResult>,
    pub output: DecoderOutput<'g>,
}

/// Forward pass, per-layer matching and the weighted loss for one scene.
pub fn scene_loss<'g>(g: &'g Graph, cfg: &DecoderConfig, store: &ParamStore, sample: &TrainSample) -> Result<SceneLoss<'g>> {
    let output = decoder_forward(g, cfg, store, &sample.features)?;
    let mut total = g.scalar(0.0);
    let mut layers = Vec::with_capacity(output.layers.len());
    let mut matches = Vec::with_capacity(output.layers.len());
    for (k, out) in output.layers.iter().enumerate() {
        let matching = hungarian_match(&out.instances(), &sample.scene, &cfg.cost)?;
        let det = detection_loss(out.class_logits, out.points, &sample.scene, &matching, &cfg.det)?;
        let (wg, wd) = layer_weights(cfg, k);
        let mut contrib = det.scale(wd);
        let mut global = None;
        if let Some(logits) = out.global_logits {
            let lg = global_loss(logits, &sample.mask)?;
            global = Some(lg.item());
            if wg > 0.0 {
                contrib = contrib.add(lg.scale(wg))?;
            }
        }
        layers.push(LayerLoss { layer: k, global, det: det.item(), total: contrib.item() });
        total = total.add(contrib)?;
        matches.push(matching);
    }
    Ok(SceneLoss { total, layers, matches, output })
}

pub struct TrainState {
    pub store: ParamStore,
    pub opt: AdamW,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    /// Batch means per layer.
    pub layers: Vec<LayerLoss>,
    pub total: f64,
    pub grad_norm: f64,
}

/// Batch-mean loss, one backward pass and one optimizer update.
pub fn train_step(cfg: &DecoderConfig, state: &mut TrainState, batch: &[TrainSample], lr: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let g = Graph::new();
    let inv = 1.0 / batch.len() as f64;
    let mut total = g.scalar(0.0);
    let mut layers: Vec<LayerLoss> = Vec::new();
    for sample in batch {
        let sl = scene_loss(&g, cfg, &state.store, sample)?;
        total = total.add(sl.total.scale(inv))?;
        if layers.is_empty() {
            layers = sl.layers.iter().map(|l| LayerLoss { layer: l.layer, global: l.global.map(|_| 0.0), ..Default::default() }).collect();
        }
        for (acc, l) in layers.iter_mut().zip(&sl.layers) {
            acc.det += l.det * inv;
            acc.total += l.total * inv;
            if let (Some(a), Some(v)) = (acc.global.as_mut(), l.global) {
                *a += v * inv;
            }
        }
    }
    let value = total.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step, detail: format!("{layers:?}") });
    }
    g.backward(total)?;
    let grads = g.param_grads();
    if grads.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { step: state.step, detail: "non-finite gradient".into() });
    }
    let grad_norm = state.opt.step(&mut state.store, &grads, lr)?;
    let out = LossBreakdown { step: state.step, layers, total: value, grad_norm };
    state.step += 1;
    Ok(out)
}
