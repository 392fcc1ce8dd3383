//! Python bindings. Configs and reports cross the boundary as JSON strings;
//! scenes and decoders are wrapped as classes.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_config(json: Option<&str>) -> PyResult<mapgr::harness::ExperimentConfig> {
    match json {
        Some(s) => mapgr::harness::ExperimentConfig::from_json(s).map_err(err),
        None => Ok(Default::default()),
    }
}

fn variant(name: &str) -> PyResult<mapgr::harness::Variant> {
    mapgr::harness::Variant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| err(format!("unknown variant {name}; expected baseline, grl or grl_grg")))
}

#[pymodule(name = "mapgr")]
mod mapgr_py {
    use super::*;
    use mapgr::decoder::{decoder_forward, init_params, DecoderConfig};
    use mapgr::harness::{self, GenParams};
    use mapgr::mapcore::{self, BevGrid, MapClass, MapInstance, MapScene, Point};
    use mapgr::ndgrad::{Graph, ParamStore};

    /// `(query, matched, global_norm, det_norm, point_norm)`
    type AuditTuple = (usize, bool, Option<f64>, f64, f64);

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        m.add("CLASSES", MapClass::ALL.iter().map(|c| c.name()).collect::<Vec<_>>())?;
        m.add("THRESHOLDS_1", mapgr::eval::THRESHOLDS_1.to_vec())?;
        m.add("THRESHOLDS_2", mapgr::eval::THRESHOLDS_2.to_vec())
    }

    /// Vectorized map scene.
    #[pyclass(name = "Scene", from_py_object)]
    #[derive(Clone)]
    pub struct PyScene {
        inner: MapScene,
    }

    #[pymethods]
    impl PyScene {
        /// Build from `[(class_id, [[x, y], ...]), ...]` in the default extent.
        #[new]
        fn new(instances: Vec<(usize, Vec<Point>)>) -> PyResult<Self> {
            let instances = instances
                .into_iter()
                .map(|(c, pts)| Ok(MapInstance::new(MapClass::from_index(c).ok_or_else(|| err(format!("bad class {c}")))?, pts)))
                .collect::<PyResult<_>>()?;
            Ok(PyScene { inner: MapScene::new(Default::default(), instances) })
        }

        #[staticmethod]
        #[pyo3(signature = (seed, config_json=None))]
        fn generate(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
            let gen: GenParams = experiment_config(config_json)?.generator;
            Ok(PyScene { inner: harness::generate_synthetic_scene(seed, &gen).map_err(err)? })
        }

        #[staticmethod]
        fn from_json(s: &str) -> PyResult<Self> {
            Ok(PyScene { inner: MapScene::from_json(s).map_err(err)? })
        }

        fn to_json(&self) -> PyResult<String> {
            self.inner.to_json().map_err(err)
        }

        /// `[(class_name, points), ...]`
        fn instances(&self) -> Vec<(String, Vec<Point>)> {
            self.inner.instances.iter().map(|i| (i.class_id.name().to_string(), i.points.clone())).collect()
        }

        fn __len__(&self) -> usize {
            self.inner.instances.len()
        }

        /// Flat `C*H*W` binary mask and its shape.
        #[pyo3(signature = (h=64, w=32, thickness=1.5))]
        fn rasterize(&self, h: usize, w: usize, thickness: f64) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
            let grid = BevGrid::new(h, w, self.inner.extent).map_err(err)?;
            let m = mapgr::raster::rasterize_scene(&self.inner, &grid, thickness).map_err(err)?;
            Ok((m.data, (m.channels, m.h, m.w)))
        }

        fn __repr__(&self) -> String {
            format!("Scene({} instances)", self.inner.instances.len())
        }
    }

    /// Decoder with its parameters. Holds shared buffers, so it stays on
    /// the thread that created it.
    #[pyclass(name = "Decoder", unsendable)]
    pub struct PyDecoder {
        config: DecoderConfig,
        store: ParamStore,
    }

    #[pymethods]
    impl PyDecoder {
        #[new]
        #[pyo3(signature = (config_json=None, variant_name="grl_grg", seed=0))]
        fn new(config_json: Option<&str>, variant_name: &str, seed: u64) -> PyResult<Self> {
            let exp = experiment_config(config_json)?;
            let config = DecoderConfig { init_seed: seed, ..variant(variant_name)?.apply(&exp.decoder) };
            let store = init_params(&config).map_err(err)?;
            Ok(PyDecoder { config, store })
        }

        /// Load parameters written by `train` or `experiment`.
        fn load_checkpoint(&mut self, json: &str) -> PyResult<()> {
            self.store.load_checkpoint_json(json).map_err(err)
        }

        fn num_parameters(&self) -> usize {
            self.store.total_size()
        }

        fn config_json(&self) -> PyResult<String> {
            serde_json::to_string(&self.config).map_err(err)
        }

        /// Final-layer predictions as `(class_name, score, points)` for a
        /// scene's synthetic features.
        #[pyo3(signature = (scene, feature_seed=0))]
        fn predict(&self, scene: &PyScene, feature_seed: u64) -> PyResult<Vec<(String, f64, Vec<Point>)>> {
            let sample = harness::make_sample(scene.inner.clone(), &self.config, feature_seed).map_err(err)?;
            let g = Graph::new();
            let out = decoder_forward(&g, &self.config, &self.store, &sample.features).map_err(err)?;
            Ok(out
                .layers
                .last()
                .unwrap()
                .instances()
                .into_iter()
                .map(|p| {
                    let (c, s) = p.best_class();
                    (c.name().to_string(), s, p.points)
                })
                .collect())
        }

        /// Per-query `(query, matched, global_norm, det_norm, point_norm)`.
        #[pyo3(signature = (scene, feature_seed=0))]
        fn audit(&self, scene: &PyScene, feature_seed: u64) -> PyResult<Vec<AuditTuple>> {
            let sample = harness::make_sample(scene.inner.clone(), &self.config, feature_seed).map_err(err)?;
            let rows = harness::gradient_flow_audit(&self.config, &sample, &self.store).map_err(err)?;
            Ok(rows.into_iter().map(|r| (r.query, r.matched, r.global_norm, r.det_norm, r.point_norm)).collect())
        }
    }

    #[pyfunction]
    fn chamfer_distance(a: Vec<Point>, b: Vec<Point>) -> PyResult<f64> {
        mapcore::chamfer_distance(&a, &b).map_err(err)
    }

    #[pyfunction]
    fn resample_polyline(points: Vec<Point>, l: usize) -> PyResult<Vec<Point>> {
        mapcore::resample_polyline(&points, l).map_err(err)
    }

    /// Minimum-cost assignment of rows to distinct columns.
    #[pyfunction]
    fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        mapgr::decoder::hungarian(&cost).map_err(err)
    }

    /// Default experiment configuration as JSON.
    #[pyfunction]
    fn default_config() -> PyResult<String> {
        serde_json::to_string_pretty(&harness::ExperimentConfig::default()).map_err(err)
    }

    /// Score predictions against ground truth. `preds_json` holds one
    /// array of `{class_id, score, points}` per frame; `gt_json` the scenes.
    #[pyfunction]
    fn evaluate(preds_json: &str, gt_json: &str) -> PyResult<String> {
        let preds: Vec<Vec<mapgr::eval::ScoredInstance>> = serde_json::from_str(preds_json).map_err(err)?;
        let gts: Vec<MapScene> = serde_json::from_str(gt_json).map_err(err)?;
        if preds.len() != gts.len() {
            return Err(err("prediction and ground-truth frame counts differ"));
        }
        let frames: Vec<_> = preds.into_iter().zip(gts).map(|(preds, gt)| mapgr::eval::EvalFrame { preds, gt }).collect();
        mapgr::eval::EvalReport::from_frames("external", 0, &frames).and_then(|r| r.to_json()).map_err(err)
    }

    /// Train one variant on the first configured seed; returns the report
    /// JSON and the loss CSV.
    #[pyfunction]
    #[pyo3(signature = (config_json=None, variant_name="grl_grg"))]
    fn train(py: Python<'_>, config_json: Option<&str>, variant_name: &str) -> PyResult<(String, String)> {
        let exp = experiment_config(config_json)?;
        let v = variant(variant_name)?;
        py.detach(|| {
            let eval = harness::eval_set(&exp).map_err(err)?;
            let r = harness::run_variant(&exp, exp.seeds[0], v, &eval);
            Ok((r.report.to_json().map_err(err)?, r.loss_csv))
        })
    }

    /// All variants on all seeds; returns the summary CSV.
    #[pyfunction]
    #[pyo3(signature = (config_json=None))]
    fn run_experiment(py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
        let exp = experiment_config(config_json)?;
        py.detach(|| harness::run_experiment(&exp).map(|r| r.summary_csv()).map_err(err))
    }

    /// Bottleneck autoencoder experiment; returns the report JSON.
    #[pyfunction]
    #[pyo3(signature = (config_json=None))]
    fn reconstruction(py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
        let cfg: harness::ReconConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(err)?,
            None => Default::default(),
        };
        py.detach(|| {
            let r = harness::mlp_reconstruction_experiment(&cfg).map_err(err)?;
            serde_json::to_string(&r).map_err(err)
        })
    }
}
