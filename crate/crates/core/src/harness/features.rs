//! Synthetic BEV features standing in for a camera-to-BEV encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::{BevGrid, MapClass, MapScene};
use crate::raster::{rasterize_scene_with, RasterOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub h: usize,
    pub w: usize,
    /// Gaussian noise added to the raster channels.
    pub noise: f64,
    /// Gaussian blur of the raster channels, in feature pixels; 0 disables it.
    pub blur: f64,
    /// Stroke width used when rasterizing at feature resolution.
    pub thickness: f64,
    /// Frequencies of the sin/cos positional channels.
    pub fourier: Vec<f64>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { h: 32, w: 16, noise: 0.3, blur: 0.7, thickness: 1.5, fourier: vec![1.0, 2.0, 4.0] }
    }
}

impl FeatureSpec {
    pub fn channels(&self) -> usize {
        MapClass::COUNT + 2 + 4 * self.fourier.len()
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w < 2 || self.noise < 0.0 || self.blur < 0.0 || self.thickness < 1.0 {
            return Err(Error::invalid(format!("invalid feature spec {self:?}")));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur with edge clamping.
pub fn blur_channel(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * data[y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

/// `[C_f, H_f, W_f]` row-major: blurred noisy class rasters, normalized
/// x/y coordinates, then sin/cos positional channels.
pub fn synthesize_bev_features(scene: &MapScene, spec: &FeatureSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let grid = BevGrid::new(spec.h, spec.w, scene.extent)?;
    let opts = RasterOptions { thickness: spec.thickness, fill_crossings: false };
    let mut raster = rasterize_scene_with(scene, &grid, &opts)?;
    let hw = spec.h * spec.w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for c in 0..MapClass::COUNT {
        let ch = raster.channel_mut(c);
        blur_channel(ch, spec.h, spec.w, spec.blur);
        if spec.noise > 0.0 {
            ch.iter_mut().for_each(|v| *v += spec.noise * normal.sample(&mut rng));
        }
    }
    let mut out = raster.data;
    out.reserve(hw * (spec.channels() - MapClass::COUNT));
    let coord = |i: usize, n: usize| 2.0 * i as f64 / (n - 1) as f64 - 1.0;
    let xs: Vec<f64> = (0..hw).map(|p| coord(p % spec.w, spec.w)).collect();
    let ys: Vec<f64> = (0..hw).map(|p| coord(p / spec.w, spec.h)).collect();
    out.extend_from_slice(&xs);
    out.extend_from_slice(&ys);
    for f in &spec.fourier {
        for axis in [&xs, &ys] {
            out.extend(axis.iter().map(|v| (std::f64::consts::PI * f * v).sin()));
            out.extend(axis.iter().map(|v| (std::f64::consts::PI * f * v).cos()));
        }
    }
    debug_assert_eq!(out.len(), spec.channels() * hw);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapcore::{Extent, MapInstance};

    fn scene() -> MapScene {
        MapScene::new(
            Extent::default(),
            vec![
                MapInstance::new(MapClass::Divider, vec![[-3.0, -30.0], [-2.0, 0.0], [-3.0, 30.0]]),
                MapInstance::new(MapClass::Boundary, vec![[10.0, -30.0], [10.0, 30.0]]),
            ],
        )
    }

    #[test]
    fn clean_features_are_the_raster() {
        let spec = FeatureSpec { noise: 0.0, blur: 0.0, ..Default::default() };
        let f = synthesize_bev_features(&scene(), &spec, 1).unwrap();
        assert_eq!(f.len(), spec.channels() * 512);
        let grid = BevGrid::new(32, 16, Extent::default()).unwrap();
        let r = crate::raster::rasterize_scene(&scene(), &grid, 1.5).unwrap();
        assert_eq!(&f[..3 * 512], r.data.as_slice());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let spec = FeatureSpec { noise: 0.1, ..Default::default() };
        let a = synthesize_bev_features(&scene(), &spec, 7).unwrap();
        let b = synthesize_bev_features(&scene(), &spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize_bev_features(&scene(), &spec, 8).unwrap());
    }

    #[test]
    fn snr_drops_with_noise() {
        let clean = synthesize_bev_features(&scene(), &FeatureSpec { noise: 0.0, ..Default::default() }, 0).unwrap();
        let signal: f64 = clean[..1536].iter().map(|v| v * v).sum::<f64>();
        let mut last = f64::INFINITY;
        for sigma in [0.05, 0.2, 0.8] {
            let mut noise_energy = 0.0;
            for seed in 0..100 {
                let spec = FeatureSpec { noise: sigma, ..Default::default() };
                let f = synthesize_bev_features(&scene(), &spec, seed).unwrap();
                noise_energy += f[..1536].iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            let snr = signal / (noise_energy / 100.0);
            assert!(snr < last, "sigma {sigma}: snr {snr} not below {last}");
            last = snr;
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let mut d = vec![0.4; 30];
        blur_channel(&mut d, 5, 6, 1.2);
        assert!(d.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }
}
