//! Vectorized map data model and the distance primitives shared by
//! matching, rasterization and evaluation.
//!
//! Coordinates are meters in the ego frame. A [`BevGrid`] maps the metric
//! extent onto a pixel lattice whose cell centers coincide with the extent
//! corners: row index follows `y`, column index follows `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Default number of points per instance at desk scale.
pub const DEFAULT_POINTS: usize = 8;
pub const DEFAULT_GRID_H: usize = 64;
pub const DEFAULT_GRID_W: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MapClass {
    Divider = 0,
    PedCrossing = 1,
    Boundary = 2,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::Divider, MapClass::PedCrossing, MapClass::Boundary];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<MapClass> {
        MapClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::Divider => "divider",
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Boundary => "boundary",
        }
    }
}

impl TryFrom<u8> for MapClass {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        MapClass::from_index(v as usize).ok_or_else(|| format!("class_id {v} is not one of 0, 1, 2"))
    }
}

impl From<MapClass> for u8 {
    fn from(c: MapClass) -> u8 {
        c as u8
    }
}

/// Axis-aligned BEV rectangle, closed on all sides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for Extent {
    fn default() -> Self {
        Extent { x_min: -15.0, x_max: 15.0, y_min: -30.0, y_max: 30.0 }
    }
}

impl From<[f64; 4]> for Extent {
    fn from(a: [f64; 4]) -> Self {
        Extent { x_min: a[0], x_max: a[1], y_min: a[2], y_max: a[3] }
    }
}

impl From<Extent> for [f64; 4] {
    fn from(e: Extent) -> Self {
        [e.x_min, e.x_max, e.y_min, e.y_max]
    }
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        [0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)]
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn check(&self, p: Point) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfExtent {
                x: p[0],
                y: p[1],
                x_min: self.x_min,
                x_max: self.x_max,
                y_min: self.y_min,
                y_max: self.y_max,
            })
        }
    }

    pub fn count_outside(&self, points: &[Point]) -> usize {
        points.iter().filter(|p| !self.contains(**p)).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapInstance {
    pub class_id: MapClass,
    pub points: Vec<Point>,
}

impl MapInstance {
    pub fn new(class_id: MapClass, points: Vec<Point>) -> Self {
        MapInstance { class_id, points }
    }

    /// Checks the fixed point count and that every point lies in `extent`.
    pub fn validate(&self, extent: &Extent, points_per_instance: usize) -> Result<()> {
        if self.points.len() != points_per_instance {
            return Err(Error::invalid(format!(
                "instance has {} points, expected {}",
                self.points.len(),
                points_per_instance
            )));
        }
        self.points.iter().try_for_each(|p| extent.check(*p))
    }

    pub fn reversed_points(&self) -> Vec<Point> {
        self.points.iter().rev().copied().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapScene {
    pub extent: Extent,
    pub instances: Vec<MapInstance>,
}

impl MapScene {
    pub fn new(extent: Extent, instances: Vec<MapInstance>) -> Self {
        MapScene { extent, instances }
    }

    pub fn validate(&self, points_per_instance: usize) -> Result<()> {
        self.instances
            .iter()
            .try_for_each(|inst| inst.validate(&self.extent, points_per_instance))
    }

    pub fn instances_of(&self, class: MapClass) -> impl Iterator<Item = &MapInstance> {
        self.instances.iter().filter(move |i| i.class_id == class)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Pixel lattice over an extent. Pixel `(r, c)` has its center at
/// `y = y_min + r * dy`, `x = x_min + c * dx`, so the four extent corners
/// are exactly the four corner pixel centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    pub extent: Extent,
}

impl Default for BevGrid {
    fn default() -> Self {
        BevGrid { h: DEFAULT_GRID_H, w: DEFAULT_GRID_W, extent: Extent::default() }
    }
}

impl BevGrid {
    pub fn new(h: usize, w: usize, extent: Extent) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!("grid must be at least 2x2, got {h}x{w}")));
        }
        if !(extent.width() > 0.0 && extent.height() > 0.0) {
            return Err(Error::invalid("extent has non-positive area"));
        }
        Ok(BevGrid { h, w, extent })
    }

    fn row_scale(&self) -> f64 {
        (self.h - 1) as f64 / self.extent.height()
    }

    fn col_scale(&self) -> f64 {
        (self.w - 1) as f64 / self.extent.width()
    }

    /// Unchecked affine map; used for predicted points that may leave the extent.
    pub fn to_pixel_unchecked(&self, p: Point) -> [f64; 2] {
        [
            (p[1] - self.extent.y_min) * self.row_scale(),
            (p[0] - self.extent.x_min) * self.col_scale(),
        ]
    }

    pub fn pixel_to_world(&self, rc: [f64; 2]) -> Point {
        [
            self.extent.x_min + rc[1] / self.col_scale(),
            self.extent.y_min + rc[0] / self.row_scale(),
        ]
    }

    /// Meters per pixel along rows (y) and columns (x).
    pub fn pixel_size(&self) -> [f64; 2] {
        [1.0 / self.row_scale(), 1.0 / self.col_scale()]
    }
}

/// Fractional `(row, col)` of a metric point. Errors outside the extent.
pub fn world_to_pixel(p: Point, grid: &BevGrid) -> Result<[f64; 2]> {
    grid.extent.check(p)?;
    Ok(grid.to_pixel_unchecked(p))
}

pub fn pixel_to_world(rc: [f64; 2], grid: &BevGrid) -> Point {
    grid.pixel_to_world(rc)
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Resamples a polyline to `l` points equally spaced by arc length.
/// The first and last input points are reproduced exactly.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn resample_polyline(points: &[Point], l: usize) -> Result<Vec<Point>> {
    if points.len() < 2 {
        return Err(Error::DegeneratePolyline("fewer than two points"));
    }
    if l < 2 {
        return Err(Error::invalid(format!("resample count must be >= 2, got {l}")));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        acc += dist(w[0], w[1]);
        cumulative.push(acc);
    }
    let total = acc;
    if !(total > 0.0) {
        return Err(Error::DegeneratePolyline("all points coincide"));
    }

    let mut out = Vec::with_capacity(l);
    out.push(points[0]);
    let mut seg = 0;
    for k in 1..l - 1 {
        let s = total * k as f64 / (l - 1) as f64;
        while seg + 1 < points.len() - 1 && cumulative[seg + 1] < s {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 { (s - cumulative[seg]) / seg_len } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out.push(points[points.len() - 1]);
    Ok(out)
}

fn directed_mean_nn(from: &[Point], to: &[Point]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| dist(*a, *b)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / from.len() as f64
}

/// Symmetric Chamfer distance with equal halves of both directed
/// mean nearest-neighbor terms.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(0.5 * directed_mean_nn(a, b) + 0.5 * directed_mean_nn(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Point, b: Point, tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn resample_uniform_segment() {
        let out = resample_polyline(&[[0.0, 0.0], [10.0, 0.0]], 3).unwrap();
        assert_eq!(out, vec![[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]]);
        let out = resample_polyline(&[[0.0, 0.0], [0.0, 4.0]], 2).unwrap();
        assert_eq!(out, vec![[0.0, 0.0], [0.0, 4.0]]);
    }

    #[test]
    fn resample_bent_polyline_midpoint() {
        // length 7, midpoint at s = 3.5 lies 0.5 up the vertical leg
        let out = resample_polyline(&[[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]], 3).unwrap();
        assert!(close(out[1], [3.0, 0.5], 1e-12));
        assert_eq!(out[0], [0.0, 0.0]);
        assert_eq!(out[2], [3.0, 4.0]);
    }

    #[test]
    fn resample_rejects_degenerate() {
        assert!(matches!(
            resample_polyline(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]], 4),
            Err(Error::DegeneratePolyline(_))
        ));
        assert!(resample_polyline(&[[1.0, 1.0]], 4).is_err());
        assert!(resample_polyline(&[[0.0, 0.0], [1.0, 0.0]], 1).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![[0.0, 0.0], [2.0, 1.0], [-1.0, 5.0]];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        assert_eq!(chamfer_distance(&[[0.0, 0.0], [1.0, 0.0]], &[[0.0, 0.0]]).unwrap(), 0.25);
        assert!(matches!(chamfer_distance(&[], &a), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn world_to_pixel_anchors() {
        let grid = BevGrid::new(64, 32, Extent::default()).unwrap();
        let c = world_to_pixel(grid.extent.center(), &grid).unwrap();
        assert!(close(c, [31.5, 15.5], 1e-12));
        assert_eq!(world_to_pixel([-15.0, -30.0], &grid).unwrap(), [0.0, 0.0]);
        assert!(close(world_to_pixel([0.0, -30.0], &grid).unwrap(), [0.0, 15.5], 1e-12));
        assert!(matches!(world_to_pixel([15.1, 0.0], &grid), Err(Error::OutOfExtent { .. })));
        // closed extent
        assert!(world_to_pixel([15.0, 30.0], &grid).is_ok());
    }

    #[test]
    fn scene_json_layout() {
        let scene = MapScene::new(
            Extent::default(),
            vec![MapInstance::new(MapClass::Boundary, vec![[0.0, 1.5], [2.0, -3.0]])],
        );
        let json = scene.to_json().unwrap();
        assert_eq!(
            json,
            r#"{"extent":[-15.0,15.0,-30.0,30.0],"instances":[{"class_id":2,"points":[[0.0,1.5],[2.0,-3.0]]}]}"#
        );
        assert_eq!(MapScene::from_json(&json).unwrap(), scene);
        assert!(MapScene::from_json(r#"{"extent":[0,1,0,1],"instances":[{"class_id":7,"points":[]}]}"#).is_err());
    }

    #[test]
    fn instance_validation() {
        let e = Extent::default();
        let inst = MapInstance::new(MapClass::Divider, vec![[0.0, 0.0], [15.0, 30.0]]);
        assert!(inst.validate(&e, 2).is_ok());
        assert!(inst.validate(&e, 3).is_err());
        let out = MapInstance::new(MapClass::Divider, vec![[0.0, 0.0], [16.0, 0.0]]);
        assert!(out.validate(&e, 2).is_err());
    }

    fn point_set() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), 1..12)
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(a in point_set(), b in point_set()) {
            prop_assert_eq!(chamfer_distance(&a, &b).unwrap(), chamfer_distance(&b, &a).unwrap());
        }

        #[test]
        fn chamfer_rigid_invariance(a in point_set(), b in point_set(), theta in 0.0f64..std::f64::consts::TAU, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let (s, c) = theta.sin_cos();
            let tf = |p: &Point| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty];
            let ta: Vec<Point> = a.iter().map(tf).collect();
            let tb: Vec<Point> = b.iter().map(tf).collect();
            let d0 = chamfer_distance(&a, &b).unwrap();
            let d1 = chamfer_distance(&ta, &tb).unwrap();
            prop_assert!((d0 - d1).abs() <= 1e-9, "{} vs {}", d0, d1);
        }

        #[test]
        fn resample_gaps_are_equal(
            steps in prop::collection::vec((0.1f64..5.0, -5.0f64..5.0), 1..10),
            l in 2usize..30,
        ) {
            // strictly increasing x, so a point's segment is found from its x
            let mut pts = vec![[0.0, 0.0]];
            for (dx, dy) in &steps {
                let last = *pts.last().unwrap();
                pts.push([last[0] + dx, last[1] + dy]);
            }
            let out = resample_polyline(&pts, l).unwrap();
            prop_assert_eq!(out.len(), l);
            prop_assert_eq!(out[0], pts[0]);
            prop_assert_eq!(out[l - 1], pts[pts.len() - 1]);
            let total = polyline_length(&pts);
            let arc = |q: Point| {
                let mut s = 0.0;
                for w in pts.windows(2) {
                    if q[0] <= w[1][0] {
                        return s + dist(w[0], q);
                    }
                    s += dist(w[0], w[1]);
                }
                s
            };
            let positions: Vec<f64> = out.iter().map(|q| arc(*q)).collect();
            let step = total / (l - 1) as f64;
            for gap in positions.windows(2).map(|w| w[1] - w[0]) {
                prop_assert!((gap - step).abs() <= 1e-9 * step.max(1.0), "gap {} vs {}", gap, step);
            }
        }

        #[test]
        fn pixel_round_trip(x in -15.0f64..=15.0, y in -30.0f64..=30.0) {
            let grid = BevGrid::default();
            let rc = world_to_pixel([x, y], &grid).unwrap();
            let back = pixel_to_world(rc, &grid);
            prop_assert!((back[0] - x).abs() <= 1e-9 && (back[1] - y).abs() <= 1e-9);
        }
    }
}
