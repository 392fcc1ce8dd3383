//! Distance-threshold rasterization of vectorized scenes into per-class
//! binary BEV masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::{BevGrid, MapClass, MapInstance, MapScene};

pub const DEFAULT_THICKNESS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterOptions {
    /// Stroke width in pixels; a pixel is set when its center lies within
    /// half of this distance of the polyline.
    pub thickness: f64,
    /// Fill the interior of pedestrian crossings instead of stroking only
    /// their boundary polyline.
    #[serde(default)]
    pub fill_crossings: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions { thickness: DEFAULT_THICKNESS, fill_crossings: false }
    }
}

/// `C x H x W` mask stored row-major per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMask {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RasterMask {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        RasterMask { channels, h, w, data: vec![0.0; channels * h * w] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.h, self.w]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.h + r) * self.w + col]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Plain-text PGM (`P2`) of one channel. Values in `[0, 1]` are written
    /// as-is when `maxval == 1`, otherwise scaled and rounded to `0..=maxval`.
    pub fn channel_to_pgm(&self, c: usize, maxval: u32) -> String {
        let mut out = format!("P2\n{} {}\n{}\n", self.w, self.h, maxval);
        for row in self.channel(c).chunks(self.w) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v.clamp(0.0, 1.0) * maxval as f64).round() as u32).to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// All channels concatenated, each preceded by a `# channel <name>` comment.
    pub fn to_pgm(&self, maxval: u32) -> String {
        (0..self.channels)
            .map(|c| {
                let name = MapClass::from_index(c).map(|k| k.name()).unwrap_or("extra");
                format!("# channel {c} {name}\n{}", self.channel_to_pgm(c, maxval))
            })
            .collect()
    }
}

fn seg_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    q[0] * q[0] + q[1] * q[1]
}

fn pixel_polyline(inst: &MapInstance, grid: &BevGrid) -> Result<Vec<[f64; 2]>> {
    if inst.points.len() < 2 {
        return Err(Error::DegeneratePolyline("fewer than two points"));
    }
    if inst.points.iter().all(|p| *p == inst.points[0]) {
        return Err(Error::DegeneratePolyline("all points coincide"));
    }
    inst.points.iter().map(|p| crate::mapcore::world_to_pixel(*p, grid)).collect()
}

fn stroke(out: &mut [f64], pts: &[[f64; 2]], h: usize, w: usize, thickness: f64) {
    let r = 0.5 * thickness;
    let r2 = r * r;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let r_lo = (a[0].min(b[0]) - r).ceil().max(0.0) as usize;
        let r_hi = (a[0].max(b[0]) + r).floor().min((h - 1) as f64);
        let c_lo = (a[1].min(b[1]) - r).ceil().max(0.0) as usize;
        let c_hi = (a[1].max(b[1]) + r).floor().min((w - 1) as f64);
        if r_hi < 0.0 || c_hi < 0.0 {
            continue;
        }
        for row in r_lo..=r_hi as usize {
            for col in c_lo..=c_hi as usize {
                if seg_dist2([row as f64, col as f64], a, b) <= r2 {
                    out[row * w + col] = 1.0;
                }
            }
        }
    }
}

fn fill_polygon(out: &mut [f64], pts: &[[f64; 2]], h: usize, w: usize) {
    // even-odd rule over pixel centers
    for row in 0..h {
        for col in 0..w {
            let (py, px) = (row as f64, col as f64);
            let mut inside = false;
            let n = pts.len();
            for i in 0..n {
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                if (a[0] > py) != (b[0] > py) {
                    let x_cross = a[1] + (py - a[0]) / (b[0] - a[0]) * (b[1] - a[1]);
                    if px < x_cross {
                        inside = !inside;
                    }
                }
            }
            if inside {
                out[row * w + col] = 1.0;
            }
        }
    }
}

/// Single-channel `H x W` binary mask of one instance.
pub fn rasterize_instance(inst: &MapInstance, grid: &BevGrid, thickness: f64) -> Result<Vec<f64>> {
    rasterize_instance_with(inst, grid, &RasterOptions { thickness, ..Default::default() })
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn rasterize_instance_with(inst: &MapInstance, grid: &BevGrid, opts: &RasterOptions) -> Result<Vec<f64>> {
    if !(opts.thickness >= 1.0) {
        return Err(Error::invalid(format!("thickness must be >= 1 pixel, got {}", opts.thickness)));
    }
    let pts = pixel_polyline(inst, grid)?;
    let mut out = vec![0.0; grid.h * grid.w];
    stroke(&mut out, &pts, grid.h, grid.w, opts.thickness);
    if opts.fill_crossings && inst.class_id == MapClass::PedCrossing {
        fill_polygon(&mut out, &pts, grid.h, grid.w);
    }
    Ok(out)
}

/// `C x H x W` mask; channel `c` is the pixelwise maximum over all
/// instances of class `c`.
pub fn rasterize_scene(scene: &MapScene, grid: &BevGrid, thickness: f64) -> Result<RasterMask> {
    rasterize_scene_with(scene, grid, &RasterOptions { thickness, ..Default::default() })
}

pub fn rasterize_scene_with(scene: &MapScene, grid: &BevGrid, opts: &RasterOptions) -> Result<RasterMask> {
    let mut mask = RasterMask::zeros(MapClass::COUNT, grid.h, grid.w);
    for inst in &scene.instances {
        let single = rasterize_instance_with(inst, grid, opts)?;
        let channel = mask.channel_mut(inst.class_id.index());
        for (dst, v) in channel.iter_mut().zip(single) {
            *dst = dst.max(v);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapcore::Extent;

    fn grid() -> BevGrid {
        BevGrid::default()
    }

    #[test]
    fn full_row_segment_marks_only_that_row() {
        let g = grid();
        // row 10 sits at y = -30 + 10 * 60/63
        let y = -30.0 + 10.0 * 60.0 / 63.0;
        let inst = MapInstance::new(MapClass::Divider, vec![[-15.0, y], [15.0, y]]);
        let m = rasterize_instance(&inst, &g, 1.0).unwrap();
        for r in 0..g.h {
            for c in 0..g.w {
                assert_eq!(m[r * g.w + c], if r == 10 { 1.0 } else { 0.0 }, "pixel {r},{c}");
            }
        }
    }

    #[test]
    fn far_pixels_are_zero() {
        let g = grid();
        let inst = MapInstance::new(MapClass::Boundary, vec![[-15.0, -30.0], [-14.0, -29.0]]);
        let m = rasterize_instance(&inst, &g, 1.5).unwrap();
        assert!(m.iter().filter(|v| **v == 1.0).count() <= 6);
        assert_eq!(m[g.h * g.w - 1], 0.0);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let g = grid();
        let inst = MapInstance::new(MapClass::Divider, vec![[1.0, 1.0]; 4]);
        assert!(matches!(rasterize_instance(&inst, &g, 1.5), Err(Error::DegeneratePolyline(_))));
        let ok = MapInstance::new(MapClass::Divider, vec![[0.0, 0.0], [1.0, 1.0]]);
        assert!(rasterize_instance(&ok, &g, 0.5).is_err());
        let out = MapInstance::new(MapClass::Divider, vec![[0.0, 0.0], [20.0, 1.0]]);
        assert!(matches!(rasterize_instance(&out, &g, 1.5), Err(Error::OutOfExtent { .. })));
    }

    #[test]
    fn scene_channels() {
        let g = grid();
        let empty = rasterize_scene(&MapScene::default(), &g, 1.5).unwrap();
        assert!(empty.data.iter().all(|v| *v == 0.0));

        let d1 = MapInstance::new(MapClass::Divider, vec![[-5.0, -30.0], [-5.0, 30.0]]);
        let d2 = MapInstance::new(MapClass::Divider, vec![[-10.0, 0.0], [10.0, 0.0]]);
        let scene = MapScene::new(Extent::default(), vec![d1, d2]);
        let m = rasterize_scene(&scene, &g, 1.5).unwrap();
        assert!(m.is_binary());
        assert!(m.channel(0).contains(&1.0));
        assert!(m.channel(1).iter().all(|v| *v == 0.0));
        assert!(m.channel(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn filled_crossing_covers_interior() {
        let g = grid();
        let ring = vec![[-5.0, -2.0], [5.0, -2.0], [5.0, 2.0], [-5.0, 2.0], [-5.0, -2.0]];
        let inst = MapInstance::new(MapClass::PedCrossing, ring);
        let outline = rasterize_instance(&inst, &g, 1.5).unwrap();
        let filled =
            rasterize_instance_with(&inst, &g, &RasterOptions { thickness: 1.5, fill_crossings: true }).unwrap();
        let center = world_center_index(&g);
        assert_eq!(outline[center], 0.0);
        assert_eq!(filled[center], 1.0);
        assert!(outline.iter().zip(&filled).all(|(o, f)| f >= o));
    }

    fn world_center_index(g: &BevGrid) -> usize {
        let rc = crate::mapcore::world_to_pixel([0.0, 0.0], g).unwrap();
        rc[0].round() as usize * g.w + rc[1].round() as usize
    }

    #[test]
    fn pgm_dump_layout() {
        let mut m = RasterMask::zeros(1, 2, 3);
        m.data[4] = 1.0;
        assert_eq!(m.channel_to_pgm(0, 1), "P2\n3 2\n1\n0 0 0\n0 1 0\n");
        m.data[0] = 0.5;
        assert_eq!(m.channel_to_pgm(0, 255), "P2\n3 2\n255\n128 0 0\n0 255 0\n");
    }
}
