//! Toy DETR-style map decoder over a synthetic BEV feature grid, with the
//! global head and guidance step on the first `applied` layers.

mod loss;
mod matching;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grg::{grg_forward, GrgSpec, DEFAULT_WEAKEN};
use crate::grl::{grl_forward, GrlSpec, QuerySet};
use crate::harness::features::FeatureSpec;
use crate::mapcore::{BevGrid, Extent, MapClass, Point, DEFAULT_GRID_H, DEFAULT_GRID_W, DEFAULT_POINTS};
use crate::ndgrad::{apply_mlp, Graph, MlpSpec, ParamStore, Tensor};
use crate::raster::DEFAULT_THICKNESS;

pub use loss::{
    detection_loss, layer_weights, scene_loss, train_step, DetLossWeights, LayerLoss, LossBreakdown, SceneLoss,
    TrainSample, TrainState,
};
pub use matching::{cost_matrix, hungarian, hungarian_match, MatchCost, MatchResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    /// The global head and guidance run on layers `0..applied`.
    pub applied: usize,
    pub queries: usize,
    pub query_dim: usize,
    pub attn_dim: usize,
    pub ffn_hidden: usize,
    pub points: usize,
    pub extent: Extent,
    pub map_h: usize,
    pub map_w: usize,
    pub raster_thickness: f64,
    pub features: FeatureSpec,
    /// Decode points from per-point queries; the instance query is their mean.
    pub point_queries: bool,
    pub d_grl: usize,
    pub grl_h: usize,
    pub grl_w: usize,
    pub phi_hidden: usize,
    pub d_g: usize,
    pub grg_enabled: bool,
    pub weaken: f64,
    /// One fusion MLP for all applied layers instead of one per layer.
    pub share_fusion: bool,
    pub lambda_global: f64,
    /// Detection-loss weight on applied layers.
    pub omega: f64,
    pub det: DetLossWeights,
    pub cost: MatchCost,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 6,
            applied: 2,
            queries: 20,
            query_dim: 64,
            attn_dim: 32,
            ffn_hidden: 128,
            points: DEFAULT_POINTS,
            extent: Extent::default(),
            map_h: DEFAULT_GRID_H,
            map_w: DEFAULT_GRID_W,
            raster_thickness: DEFAULT_THICKNESS,
            features: FeatureSpec::default(),
            point_queries: true,
            d_grl: 128,
            grl_h: 8,
            grl_w: 4,
            phi_hidden: 32,
            d_g: 256,
            grg_enabled: true,
            weaken: DEFAULT_WEAKEN,
            share_fusion: false,
            lambda_global: 1.0,
            omega: 0.1,
            det: DetLossWeights::default(),
            cost: MatchCost::default(),
            init_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.applied > self.layers {
            return Err(Error::invalid(format!("applied layers {} exceed decoder depth {}", self.applied, self.layers)));
        }
        if self.layers == 0 {
            return Err(Error::invalid("decoder needs at least one layer"));
        }
        let dims = [self.queries, self.query_dim, self.attn_dim, self.ffn_hidden, self.d_grl, self.d_g];
        if dims.contains(&0) || self.points < 2 {
            return Err(Error::invalid(format!("decoder dimensions must be positive and points >= 2: {self:?}")));
        }
        let weights = [self.lambda_global, self.omega, self.det.l1, self.det.cls, self.det.background];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        self.features.validate()?;
        self.grl_spec().validate()?;
        self.grg_spec().validate()?;
        BevGrid::new(self.map_h, self.map_w, self.extent)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::new(self.map_h, self.map_w, self.extent)
    }

    /// Number of output classes including background.
    pub fn class_outputs(&self) -> usize {
        MapClass::COUNT + 1
    }

    pub fn background(&self) -> usize {
        MapClass::COUNT
    }

    /// Whether the global head runs at all.
    pub fn grl_active(&self) -> bool {
        self.lambda_global > 0.0 || self.grg_enabled
    }

    pub fn is_applied(&self, layer: usize) -> bool {
        layer < self.applied
    }

    pub fn grl_spec(&self) -> GrlSpec {
        GrlSpec {
            n: self.queries,
            query_dim: self.query_dim,
            d_grl: self.d_grl,
            h: self.grl_h,
            w: self.grl_w,
            phi_hidden: self.phi_hidden,
            classes: MapClass::COUNT,
            out_h: self.map_h,
            out_w: self.map_w,
        }
    }

    pub fn grg_spec(&self) -> GrgSpec {
        GrgSpec { weaken: self.weaken, ..GrgSpec::new(MapClass::COUNT * self.map_h * self.map_w, self.d_g, self.query_dim) }
    }

    fn ffn(&self) -> MlpSpec {
        MlpSpec { widths: vec![self.query_dim, self.ffn_hidden, self.query_dim], hidden_activation: Default::default() }
    }

    fn class_head(&self) -> MlpSpec {
        MlpSpec::linear(self.query_dim, self.class_outputs())
    }

    fn point_head(&self) -> MlpSpec {
        let out = if self.point_queries { 2 } else { 2 * self.points };
        MlpSpec { widths: vec![self.query_dim, self.query_dim, out], hidden_activation: Default::default() }
    }

    fn grg_prefix(&self, layer: usize) -> (String, String) {
        let enc = GrgSpec::prefix(layer);
        let fuse = if self.share_fusion { "grg.shared".to_string() } else { enc.clone() };
        (enc, fuse)
    }
}

/// Seeded parameters. Global-head and guidance parameters exist for every
/// layer so configurations with different `applied` share one layout.
pub fn init_params(cfg: &DecoderConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let seed = cfg.init_seed;
    let mut store = ParamStore::new();
    store.init_normal("query.embed", &[cfg.queries, cfg.query_dim], 1.0, seed);
    store.init_normal("point.embed", &[cfg.points, cfg.query_dim], 0.5, seed);
    let cf = cfg.features.channels();
    for k in 0..cfg.layers {
        store.init_he(&format!("layer{k}.wq"), &[cfg.query_dim, cfg.attn_dim], cfg.query_dim, seed);
        store.init_he(&format!("layer{k}.wk"), &[cf, cfg.attn_dim], cf, seed);
        store.init_normal(&format!("layer{k}.wv"), &[cf, cfg.query_dim], (1.0 / cf as f64).sqrt(), seed);
        let prefix = format!("layer{k}.ffn");
        cfg.ffn().init(&mut store, &prefix, seed);
        let last = MlpSpec::weight_name(&prefix, 1);
        store.values_mut(&last).unwrap().iter_mut().for_each(|v| *v *= 0.1);
    }
    cfg.class_head().init(&mut store, "head.cls", seed);
    cfg.point_head().init(&mut store, "head.pts", seed);
    let grl = cfg.grl_spec();
    let grg = cfg.grg_spec();
    for k in 0..cfg.layers {
        grl.init(&mut store, &GrlSpec::prefix(k), seed);
        grg.encoder.init(&mut store, &format!("{}.enc", GrgSpec::prefix(k)), seed);
        if !cfg.share_fusion {
            grg.fusion.init(&mut store, &format!("{}.fuse", GrgSpec::prefix(k)), seed);
        }
    }
    if cfg.share_fusion {
        grg.fusion.init(&mut store, "grg.shared.fuse", seed);
    }
    Ok(store)
}

pub struct LayerOutput<'g> {
    /// Query state after attention and FFN, before the point expansion.
    pub state: Tensor<'g>,
    pub queries: QuerySet<'g>,
    /// `[n, C + 1]` unnormalized, background last.
    pub class_logits: Tensor<'g>,
    /// `[n, 2 l]` meters, `x0, y0, x1, y1, ...`.
    pub points: Tensor<'g>,
    /// `[C, H, W]` global-map logits on applied layers.
    pub global_logits: Option<Tensor<'g>>,
}

pub struct DecoderOutput<'g> {
    pub layers: Vec<LayerOutput<'g>>,
}

/// Per-query head outputs: class logits `[n, C + 1]` and points `[n, 2 l]`.
pub fn predict_instances<'g>(
    cfg: &DecoderConfig,
    store: &ParamStore,
    queries: &QuerySet<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let g = queries.instance.graph();
    let n = queries.len();
    let logits = apply_mlp(store, "head.cls", &cfg.class_head(), queries.instance)?;
    let raw = match queries.points {
        Some(p) => apply_mlp(store, "head.pts", &cfg.point_head(), p)?,
        None => apply_mlp(store, "head.pts", &cfg.point_head(), queries.instance)?.reshape(&[n * cfg.points, 2])?,
    };
    let e = cfg.extent;
    let scale = g.constant(vec![e.width(), e.height()], &[2]);
    let offset = g.constant(vec![e.x_min, e.y_min], &[2]);
    let pts = raw.sigmoid().mul_row(scale)?.add_row(offset)?;
    Ok((logits, pts.reshape(&[n, 2 * cfg.points])?))
}

fn expand_points<'g>(cfg: &DecoderConfig, store: &ParamStore, state: Tensor<'g>) -> Result<Tensor<'g>> {
    let g = state.graph();
    let (n, l, d) = (cfg.queries, cfg.points, cfg.query_dim);
    let mut rep = vec![0.0; n * l * n];
    for i in 0..n {
        for j in 0..l {
            rep[(i * l + j) * n + i] = 1.0;
        }
    }
    let repeated = g.constant(rep, &[n * l, n]).matmul(state)?;
    let embed = g.param(store, "point.embed")?.reshape(&[l * d])?.repeat_rows(n).reshape(&[n * l, d])?;
    repeated.add(embed)
}

/// Runs all layers on `features` (`[C_f, H_f, W_f]`, treated as input).
pub fn decoder_forward<'g>(
    g: &'g Graph,
    cfg: &DecoderConfig,
    store: &ParamStore,
    features: &[f64],
) -> Result<DecoderOutput<'g>> {
    cfg.validate()?;
    let cf = cfg.features.channels();
    let p = cfg.features.positions();
    if features.len() != cf * p {
        return Err(Error::shape("decoder_forward", &[cf, cfg.features.h, cfg.features.w], &[features.len()]));
    }
    let bev = g.constant(features.to_vec(), &[cf, p]).transpose()?;
    let grl = cfg.grl_spec();
    let grg = cfg.grg_spec();
    let inv_sqrt = 1.0 / (cfg.attn_dim as f64).sqrt();
    let mut q = g.param(store, "query.embed")?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let keys = bev.matmul(g.param(store, &format!("layer{k}.wk"))?)?;
        let values = bev.matmul(g.param(store, &format!("layer{k}.wv"))?)?;
        let qa = q.matmul(g.param(store, &format!("layer{k}.wq"))?)?;
        let attn = qa.matmul(keys.transpose()?)?.scale(inv_sqrt).softmax_rows();
        q = q.add(attn.matmul(values)?)?;
        q = q.add(apply_mlp(store, &format!("layer{k}.ffn"), &cfg.ffn(), q)?)?;
        let state = q;
        let queries = if cfg.point_queries {
            QuerySet::with_points(k, expand_points(cfg, store, state)?, cfg.points)?
        } else {
            QuerySet::new(k, state)?
        };
        let (class_logits, points) = predict_instances(cfg, store, &queries)?;
        let mut global_logits = None;
        q = queries.instance;
        if cfg.is_applied(k) && cfg.grl_active() {
            let logits = grl_forward(store, &GrlSpec::prefix(k), &grl, queries.instance)?;
            if cfg.grg_enabled {
                let (enc, fuse) = cfg.grg_prefix(k);
                q = grg_forward_split(store, &enc, &fuse, &grg, queries.instance, logits)?;
            }
            global_logits = Some(logits);
        }
        layers.push(LayerOutput { state, queries, class_logits, points, global_logits });
    }
    Ok(DecoderOutput { layers })
}

fn grg_forward_split<'g>(
    store: &ParamStore,
    enc: &str,
    fuse: &str,
    spec: &GrgSpec,
    q: Tensor<'g>,
    logits: Tensor<'g>,
) -> Result<Tensor<'g>> {
    if enc == fuse {
        return grg_forward(store, enc, spec, q, logits);
    }
    let f = crate::grg::encode_global(store, enc, spec, logits.sigmoid())?;
    crate::grg::inject_global(store, fuse, spec, q, f)
}

/// Value-level prediction of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub class_logits: Vec<f64>,
    pub points: Vec<Point>,
}

impl PredInstance {
    pub fn probabilities(&self) -> Vec<f64> {
        crate::ndgrad::softmax(&self.class_logits)
    }

    /// Most likely non-background class and its probability.
    pub fn best_class(&self) -> (MapClass, f64) {
        let p = self.probabilities();
        let (i, s) = p[..MapClass::COUNT]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        (MapClass::from_index(i).expect("class index"), s)
    }
}

impl LayerOutput<'_> {
    pub fn instances(&self) -> Vec<PredInstance> {
        let logits = self.class_logits.to_vec();
        let pts = self.points.to_vec();
        let c = self.class_logits.shape()[1];
        let l2 = self.points.shape()[1];
        logits
            .chunks(c)
            .zip(pts.chunks(l2))
            .map(|(lg, p)| PredInstance { class_logits: lg.to_vec(), points: p.chunks(2).map(|xy| [xy[0], xy[1]]).collect() })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests;
