//! Seeded synthetic road scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::{resample_polyline, Extent, MapClass, MapInstance, MapScene, Point, DEFAULT_POINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub extent: Extent,
    pub points: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Sampling weights for divider, crossing, boundary.
    pub class_mix: [f64; 3],
    /// Largest quadratic coefficient, in meters of lateral offset at the
    /// far ends of the extent.
    pub max_curvature: f64,
    /// Largest linear coefficient, same units.
    pub max_slope: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            extent: Extent::default(),
            points: DEFAULT_POINTS,
            min_instances: 2,
            max_instances: 8,
            class_mix: [0.45, 0.2, 0.35],
            max_curvature: 3.0,
            max_slope: 3.0,
        }
    }
}

impl GenParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        if !(e.width() > 0.0 && e.height() > 0.0) {
            return Err(Error::invalid("extent must have positive area"));
        }
        if self.points < 2 || self.min_instances > self.max_instances {
            return Err(Error::invalid(format!("invalid generator parameters {self:?}")));
        }
        if self.class_mix.iter().any(|w| !(*w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("class mix must be non-negative with positive sum"));
        }
        Ok(())
    }

    fn sample_class(&self, rng: &mut ChaCha8Rng) -> MapClass {
        let total: f64 = self.class_mix.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (i, w) in self.class_mix.iter().enumerate() {
            if u < *w {
                return MapClass::from_index(i).unwrap();
            }
            u -= w;
        }
        MapClass::Boundary
    }
}

/// Lengthwise curve `x = a + b t + c t^2` with `t = y / half_height`,
/// clipped laterally to the extent.
fn lengthwise(p: &GenParams, rng: &mut ChaCha8Rng, class: MapClass) -> Vec<Point> {
    let e = p.extent;
    let half_w = 0.5 * e.width();
    let cx = e.center()[0];
    let a = match class {
        MapClass::Boundary => {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            cx + side * rng.random_range(0.45 * half_w..0.9 * half_w)
        }
        _ => cx + rng.random_range(-0.7 * half_w..0.7 * half_w),
    };
    let b = rng.random_range(-p.max_slope..=p.max_slope);
    let c = rng.random_range(-p.max_curvature..=p.max_curvature);
    let half_h = 0.5 * e.height();
    let cy = e.center()[1];
    (0..=64)
        .map(|i| {
            let y = e.y_min + e.height() * i as f64 / 64.0;
            let t = (y - cy) / half_h;
            [(a + b * t + c * t * t).clamp(e.x_min, e.x_max), y]
        })
        .collect()
}

/// Closed outline of a transverse rectangle.
fn crossing(p: &GenParams, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let e = p.extent;
    let depth = rng.random_range(2.0..4.0);
    let yc = rng.random_range(e.y_min + 0.1 * e.height()..e.y_max - 0.1 * e.height());
    let width = rng.random_range(0.3 * e.width()..0.8 * e.width());
    let xc = rng.random_range(e.x_min + 0.5 * width..=e.x_max - 0.5 * width);
    let (x0, x1) = (xc - 0.5 * width, xc + 0.5 * width);
    let (y0, y1) = (yc - 0.5 * depth, yc + 0.5 * depth);
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
}

/// Deterministic scene for `seed`.
pub fn generate_synthetic_scene(seed: u64, p: &GenParams) -> Result<MapScene> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(p.min_instances..=p.max_instances);
    let mut instances = Vec::with_capacity(m);
    for _ in 0..m {
        let class = p.sample_class(&mut rng);
        let raw = match class {
            MapClass::PedCrossing => crossing(p, &mut rng),
            _ => lengthwise(p, &mut rng, class),
        };
        let mut pts = resample_polyline(&raw, p.points)?;
        // resampling can drift by an ulp past a clipped edge
        for q in pts.iter_mut() {
            q[0] = q[0].clamp(p.extent.x_min, p.extent.x_max);
            q[1] = q[1].clamp(p.extent.y_min, p.extent.y_max);
        }
        instances.push(MapInstance::new(class, pts));
    }
    let scene = MapScene::new(p.extent, instances);
    scene.validate(p.points)?;
    Ok(scene)
}
