//! Global representation learning: decode the whole query set into one
//! rasterized map and supervise it with the rasterized ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::MapClass;
use crate::ndgrad::{apply_mlp, Graph, MlpSpec, ParamStore, Tensor};
use crate::raster::RasterMask;

/// Queries of one decoder layer. When point queries are present they are
/// laid out as `[n * l, C_q]`, query-major.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet<'g> {
    pub layer_index: usize,
    pub instance: Tensor<'g>,
    pub points: Option<Tensor<'g>>,
    pub points_per_instance: usize,
}

impl<'g> QuerySet<'g> {
    pub fn new(layer_index: usize, instance: Tensor<'g>) -> Result<Self> {
        if instance.shape().len() != 2 {
            return Err(Error::invalid(format!("instance queries must be [n, C_q], got {:?}", instance.shape())));
        }
        Ok(QuerySet { layer_index, instance, points: None, points_per_instance: 0 })
    }

    pub fn with_points(layer_index: usize, points: Tensor<'g>, l: usize) -> Result<Self> {
        let s = points.shape();
        if s.len() != 2 || l == 0 || !s[0].is_multiple_of(l) || s[0] == 0 {
            return Err(Error::invalid(format!("point queries {s:?} do not split into groups of {l}")));
        }
        let instance = pool_all_points(points, l)?;
        Ok(QuerySet { layer_index, instance, points: Some(points), points_per_instance: l })
    }

    pub fn len(&self) -> usize {
        self.instance.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.instance.shape()[1]
    }
}

/// Mean of one instance's point queries.
pub fn pool_point_queries<'g>(points: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    if points.is_empty() {
        return Err(Error::invalid("no point queries to pool"));
    }
    let d = points[0].numel();
    let rows: Vec<Tensor<'g>> = points.iter().map(|p| p.reshape(&[d])).collect::<Result<_>>()?;
    Tensor::stack(&rows)?.mean_rows()
}

/// Pools `[n * l, C]` point queries into `[n, C]` instance queries.
pub fn pool_all_points(points: Tensor<'_>, l: usize) -> Result<Tensor<'_>> {
    let s = points.shape();
    if s.len() != 2 || l == 0 || !s[0].is_multiple_of(l) {
        return Err(Error::invalid(format!("cannot pool {s:?} in groups of {l}")));
    }
    let n = s[0] / l;
    let mut pool = vec![0.0; n * n * l];
    for i in 0..n {
        pool[i * n * l + i * l..i * n * l + (i + 1) * l].fill(1.0 / l as f64);
    }
    points.graph().constant(pool, &[n, n * l]).matmul(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlSpec {
    /// Query count; also the input channel count of the conv stack.
    pub n: usize,
    pub query_dim: usize,
    /// Hidden width of the projection MLP.
    pub d_grl: usize,
    pub h: usize,
    pub w: usize,
    pub phi_hidden: usize,
    pub classes: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Default for GrlSpec {
    fn default() -> Self {
        GrlSpec { n: 20, query_dim: 64, d_grl: 128, h: 8, w: 4, phi_hidden: 32, classes: MapClass::COUNT, out_h: 64, out_w: 32 }
    }
}

impl GrlSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n, self.query_dim, self.d_grl, self.h, self.w, self.phi_hidden, self.classes];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("GRL dimensions must be positive: {self:?}")));
        }
        if self.out_h < self.h || self.out_w < self.w || (self.out_h > self.h && self.h < 2) || (self.out_w > self.w && self.w < 2) {
            return Err(Error::invalid(format!(
                "cannot upsample {}x{} to {}x{}",
                self.h, self.w, self.out_h, self.out_w
            )));
        }
        Ok(())
    }

    pub fn projection(&self) -> MlpSpec {
        MlpSpec { widths: vec![self.query_dim, self.d_grl, self.h * self.w], hidden_activation: Default::default() }
    }

    pub fn prefix(layer: usize) -> String {
        format!("grl.{layer}")
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        self.projection().init(store, &format!("{prefix}.proj"), seed);
        store.init_he(&format!("{prefix}.phi0.weight"), &[self.phi_hidden, self.n, 3, 3], self.n * 9, seed);
        store.init_zeros(&format!("{prefix}.phi0.bias"), &[self.phi_hidden]);
        store.init_he(&format!("{prefix}.phi1.weight"), &[self.classes, self.phi_hidden, 3, 3], self.phi_hidden * 9, seed);
        store.init_zeros(&format!("{prefix}.phi1.bias"), &[self.classes]);
    }
}

/// Projects each instance query to an `h x w` map and stacks them in
/// query order: `[n, C_q] -> [n, h, w]`.
pub fn project_and_stack<'g>(store: &ParamStore, prefix: &str, spec: &GrlSpec, q: Tensor<'g>) -> Result<Tensor<'g>> {
    let s = q.shape();
    if s.len() != 2 || s[1] != spec.query_dim {
        return Err(Error::shape("project_and_stack", &[s.first().copied().unwrap_or(0), spec.query_dim], &s));
    }
    let maps = apply_mlp(store, &format!("{prefix}.proj"), &spec.projection(), q)?;
    maps.reshape(&[s[0], spec.h, spec.w])
}

/// Conv stack at `h x w`, then bilinear upsampling to the BEV grid.
/// Returns logits `[C, H, W]`.
pub fn predict_global_map<'g>(store: &ParamStore, prefix: &str, spec: &GrlSpec, stack: Tensor<'g>) -> Result<Tensor<'g>> {
    let s = stack.shape();
    if s != [spec.n, spec.h, spec.w] {
        return Err(Error::shape("predict_global_map", &[spec.n, spec.h, spec.w], &s));
    }
    let g = stack.graph();
    let p = |name: &str| g.param(store, &format!("{prefix}.{name}"));
    let hidden = stack.conv2d(p("phi0.weight")?, Some(p("phi0.bias")?))?.relu();
    let small = hidden.conv2d(p("phi1.weight")?, Some(p("phi1.bias")?))?;
    small.upsample_bilinear(spec.out_h, spec.out_w)
}

/// Mean BCE between the predicted logits and the binary target mask.
pub fn global_loss<'g>(logits: Tensor<'g>, target: &RasterMask) -> Result<Tensor<'g>> {
    let s = logits.shape();
    if s != target.shape() {
        return Err(Error::shape("global_loss", &target.shape(), &s));
    }
    logits.bce_with_logits(&target.data)
}

/// Full head: instance queries to logits.
pub fn grl_forward<'g>(store: &ParamStore, prefix: &str, spec: &GrlSpec, q: Tensor<'g>) -> Result<Tensor<'g>> {
    let stack = project_and_stack(store, prefix, spec, q)?;
    predict_global_map(store, prefix, spec, stack)
}

/// Post-sigmoid map for inspection and PGM dumps.
pub fn logits_to_mask(logits: Tensor<'_>) -> Result<RasterMask> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected [C, H, W] logits, got {s:?}")));
    }
    Ok(RasterMask { channels: s[0], h: s[1], w: s[2], data: logits.sigmoid().to_vec() })
}

/// Per-query L2 norm of `dL_global / dq` at randomly initialized weights.
pub fn global_gradient_norms(spec: &GrlSpec, store: &ParamStore, queries: &[f64], target: &RasterMask) -> Result<Vec<f64>> {
    let g = Graph::new();
    let q = g.leaf(queries.to_vec(), &[spec.n, spec.query_dim], true);
    let logits = grl_forward(store, &GrlSpec::prefix(0), spec, q)?;
    g.backward(global_loss(logits, target)?)?;
    Ok(q.grad().chunks(spec.query_dim).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}
