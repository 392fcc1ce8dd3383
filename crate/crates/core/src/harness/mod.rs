//! Synthetic data, training runs, the three-variant comparison, the
//! gradient-flow audit and parameter sweeps.

pub mod features;
pub mod recon;
pub mod scenes;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{
    decoder_forward, detection_loss, hungarian_match, init_params, train_step, DecoderConfig, DetLossWeights,
    LossBreakdown, TrainSample, TrainState,
};
use crate::error::{Error, Result};
use crate::eval::{query_stability_mae, AuditSummary, EvalFrame, EvalReport};
use crate::grl::{global_loss, logits_to_mask};
use crate::mapcore::{MapScene, Point};
use crate::ndgrad::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::raster::rasterize_scene;

pub use features::{synthesize_bev_features, FeatureSpec};
pub use recon::{mlp_reconstruction_experiment, ReconConfig, ReconReport};
pub use scenes::{generate_synthetic_scene, GenParams};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MAPGR_OUT";

/// First seed of the reserved held-out range; training seeds are
/// `(seed << 32) | index` and never reach it for seeds below `2^30`.
pub const EVAL_SEED_BASE: u64 = 1 << 62;

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mapgr_out"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Grl,
    GrlGrg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Grl, Variant::GrlGrg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Grl => "grl",
            Variant::GrlGrg => "grl_grg",
        }
    }

    pub fn apply(self, base: &DecoderConfig) -> DecoderConfig {
        let lambda = if base.lambda_global > 0.0 { base.lambda_global } else { 1.0 };
        match self {
            Variant::Baseline => DecoderConfig { lambda_global: 0.0, grg_enabled: false, ..base.clone() },
            Variant::Grl => DecoderConfig { lambda_global: lambda, grg_enabled: false, ..base.clone() },
            Variant::GrlGrg => DecoderConfig { lambda_global: lambda, grg_enabled: true, ..base.clone() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub generator: GenParams,
    pub decoder: DecoderConfig,
    pub variants: Vec<Variant>,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    /// Evaluate every this many steps in addition to the end; 0 disables.
    pub eval_every: usize,
    pub eval_scenes: usize,
    /// Scenes used for the gradient audit summary in each report.
    pub audit_scenes: usize,
    pub save_checkpoints: bool,
    /// Parallel runs; each run is single-threaded.
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            generator: GenParams::default(),
            decoder: DecoderConfig::default(),
            variants: Variant::ALL.to_vec(),
            steps: 600,
            batch_size: 4,
            optimizer: AdamWConfig { lr: 5e-3, ..Default::default() },
            warmup_steps: 20,
            min_lr_ratio: 0.05,
            eval_every: 0,
            eval_scenes: 64,
            audit_scenes: 2,
            save_checkpoints: false,
            workers: 1,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.steps == 0 || self.batch_size == 0 || self.eval_scenes == 0 {
            return Err(Error::invalid("need at least one seed, step, batch element and eval scene"));
        }
        if self.seeds.iter().any(|s| *s >= 1 << 30) {
            return Err(Error::invalid("seeds must be below 2^30 to stay out of the held-out range"));
        }
        if self.generator.max_instances >= self.decoder.queries {
            return Err(Error::invalid("scenes must have fewer instances than queries"));
        }
        if self.generator.points != self.decoder.points || self.generator.extent != self.decoder.extent {
            return Err(Error::invalid("generator and decoder disagree on points or extent"));
        }
        self.generator.validate()?;
        self.decoder.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.optimizer.lr;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = peak * self.min_lr_ratio;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn make_sample(scene: MapScene, cfg: &DecoderConfig, feature_seed: u64) -> Result<TrainSample> {
    let mask = rasterize_scene(&scene, &cfg.grid()?, cfg.raster_thickness)?;
    let features = synthesize_bev_features(&scene, &cfg.features, feature_seed)?;
    Ok(TrainSample { scene, mask, features })
}

fn feature_seed(scene_seed: u64) -> u64 {
    scene_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Training batch `step` for `seed`; identical for every variant.
pub fn training_batch(cfg: &ExperimentConfig, seed: u64, step: usize) -> Result<Vec<TrainSample>> {
    (0..cfg.batch_size)
        .map(|b| {
            let s = (seed << 32) | (step * cfg.batch_size + b) as u64;
            make_sample(generate_synthetic_scene(s, &cfg.generator)?, &cfg.decoder, feature_seed(s))
        })
        .collect()
}

pub fn eval_set(cfg: &ExperimentConfig) -> Result<Vec<TrainSample>> {
    (0..cfg.eval_scenes)
        .map(|k| {
            let s = EVAL_SEED_BASE + k as u64;
            make_sample(generate_synthetic_scene(s, &cfg.generator)?, &cfg.decoder, feature_seed(s))
        })
        .collect()
}

pub const LOSS_CSV_HEADER: &str = "step,layer,L_global,L_det,total\n";

/// One row per layer plus an `all` row per step.
pub fn loss_csv_rows(b: &LossBreakdown) -> String {
    let mut out = String::new();
    for l in &b.layers {
        let g = l.global.map(|v| format!("{v:.12e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{:.12e},{:.12e}", b.step, l.layer, g, l.det, l.total);
    }
    let g: Option<f64> = b.layers.iter().filter_map(|l| l.global).reduce(|a, c| a + c);
    let det: f64 = b.layers.iter().map(|l| l.det).sum();
    let g = g.map(|v| format!("{v:.12e}")).unwrap_or_default();
    let _ = writeln!(out, "{},all,{},{:.12e},{:.12e}", b.step, g, det, b.total);
    out
}

pub struct TrainedModel {
    pub config: DecoderConfig,
    pub store: ParamStore,
    pub loss_csv: String,
    /// `(step, mAP2)` from periodic evaluation.
    pub curve: Vec<(usize, f64)>,
}

/// Trains one configuration on the seeded scene stream.
pub fn train_model(exp: &ExperimentConfig, decoder: &DecoderConfig, seed: u64, eval: &[TrainSample]) -> Result<TrainedModel> {
    let config = DecoderConfig { init_seed: seed, ..decoder.clone() };
    let mut state = TrainState { store: init_params(&config)?, opt: AdamW::new(exp.optimizer.clone()), step: 0 };
    let mut loss_csv = String::from(LOSS_CSV_HEADER);
    let mut curve = Vec::new();
    for step in 0..exp.steps {
        let batch = training_batch(exp, seed, step)?;
        let b = train_step(&config, &mut state, &batch, exp.lr_at(step))?;
        loss_csv.push_str(&loss_csv_rows(&b));
        if exp.eval_every > 0 && (step + 1) % exp.eval_every == 0 && step + 1 < exp.steps {
            curve.push((step + 1, evaluate_model(&config, &state.store, eval, "", seed)?.map2));
        }
    }
    Ok(TrainedModel { config, store: state.store, loss_csv, curve })
}

/// Final-layer predictions on every scene plus the stability series.
pub fn predict_frames(cfg: &DecoderConfig, store: &ParamStore, set: &[TrainSample]) -> Result<(Vec<EvalFrame>, Vec<f64>)> {
    let mut frames = Vec::with_capacity(set.len());
    let mut stability = vec![0.0; cfg.layers.saturating_sub(1)];
    for s in set {
        let g = Graph::new();
        let out = decoder_forward(&g, cfg, store, &s.features)?;
        let per_layer: Vec<Vec<Vec<Point>>> =
            out.layers.iter().map(|l| l.instances().into_iter().map(|p| p.points).collect()).collect();
        if per_layer.len() >= 2 {
            for (acc, v) in stability.iter_mut().zip(query_stability_mae(&per_layer)?) {
                *acc += v / set.len() as f64;
            }
        }
        frames.push(EvalFrame::from_predictions(&out.layers.last().unwrap().instances(), s.scene.clone()));
    }
    Ok((frames, stability))
}

pub fn evaluate_model(cfg: &DecoderConfig, store: &ParamStore, set: &[TrainSample], variant: &str, seed: u64) -> Result<EvalReport> {
    let (frames, stability) = predict_frames(cfg, store, set)?;
    let mut report = EvalReport::from_frames(variant, seed, &frames)?;
    report.stability_mae = stability;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub query: usize,
    pub matched: bool,
    /// Norm of the global-loss gradient; absent when the head is off.
    pub global_norm: Option<f64>,
    pub det_norm: f64,
    /// Detection loss with both classification terms removed.
    pub point_norm: f64,
}

fn row_norms(grad: &[f64], width: usize) -> Vec<f64> {
    grad.chunks(width).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Per-query gradient norms at the first decoder layer's query state.
pub fn gradient_flow_audit(cfg: &DecoderConfig, sample: &TrainSample, store: &ParamStore) -> Result<Vec<AuditRow>> {
    let norms = |which: u8| -> Result<(Vec<f64>, Vec<usize>)> {
        let g = Graph::new();
        let out = decoder_forward(&g, cfg, store, &sample.features)?;
        let l0 = &out.layers[0];
        let m = hungarian_match(&l0.instances(), &sample.scene, &cfg.cost)?;
        let loss = match which {
            0 => global_loss(l0.global_logits.expect("global head active"), &sample.mask)?,
            1 => detection_loss(l0.class_logits, l0.points, &sample.scene, &m, &cfg.det)?,
            _ => {
                let w = DetLossWeights { classification: false, ..cfg.det };
                detection_loss(l0.class_logits, l0.points, &sample.scene, &m, &w)?
            }
        };
        g.backward(loss)?;
        Ok((row_norms(&l0.state.grad(), cfg.query_dim), m.assignment))
    };
    let global = if cfg.grl_active() && cfg.applied > 0 { Some(norms(0)?.0) } else { None };
    let (det, assignment) = norms(1)?;
    let (point, _) = norms(2)?;
    Ok((0..cfg.queries)
        .map(|i| AuditRow {
            query: i,
            matched: assignment.contains(&i),
            global_norm: global.as_ref().map(|g| g[i]),
            det_norm: det[i],
            point_norm: point[i],
        })
        .collect())
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("query,matched,global_norm,det_norm,point_norm\n");
    for r in rows {
        let g = r.global_norm.map(|v| format!("{v:.6e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{:.6e},{:.6e}", r.query, r.matched as u8, g, r.det_norm, r.point_norm);
    }
    out
}

fn audit_summary(cfg: &DecoderConfig, store: &ParamStore, set: &[TrainSample]) -> Result<Option<AuditSummary>> {
    if !cfg.grl_active() || cfg.applied == 0 || set.is_empty() {
        return Ok(None);
    }
    let mut nonzero = 0usize;
    let mut total = 0usize;
    for s in set {
        for r in gradient_flow_audit(cfg, s, store)? {
            total += 1;
            nonzero += (r.global_norm.unwrap_or(0.0) > 1e-12) as usize;
        }
    }
    Ok(Some(AuditSummary { queries: cfg.queries, scenes: set.len(), fraction_nonzero_global: nonzero as f64 / total as f64 }))
}

/// Outcome of one (seed, variant) run.
pub struct RunResult {
    pub seed: u64,
    pub variant: Variant,
    pub report: EvalReport,
    pub loss_csv: String,
    pub curve: Vec<(usize, f64)>,
    /// Serialized parameters when checkpoints are requested.
    pub checkpoint: Option<String>,
    /// PGM dumps of the global map on the first held-out scene, per applied layer.
    pub global_maps: Vec<(usize, String)>,
}

pub fn run_variant(exp: &ExperimentConfig, seed: u64, variant: Variant, eval: &[TrainSample]) -> RunResult {
    let cfg = variant.apply(&exp.decoder);
    let result = (|| -> Result<RunResult> {
        let m = train_model(exp, &cfg, seed, eval)?;
        let mut report = evaluate_model(&m.config, &m.store, eval, variant.name(), seed)?;
        let n_audit = exp.audit_scenes.min(eval.len());
        report.gradient_audit = audit_summary(&m.config, &m.store, &eval[..n_audit])?;
        let mut global_maps = Vec::new();
        if let Some(first) = eval.first() {
            let g = Graph::new();
            let out = decoder_forward(&g, &m.config, &m.store, &first.features)?;
            for (k, l) in out.layers.iter().enumerate() {
                if let Some(logits) = l.global_logits {
                    global_maps.push((k, logits_to_mask(logits)?.to_pgm(255)));
                }
            }
        }
        Ok(RunResult {
            seed,
            variant,
            report,
            loss_csv: m.loss_csv,
            curve: m.curve,
            checkpoint: if exp.save_checkpoints { Some(m.store.to_checkpoint_json()?) } else { None },
            global_maps,
        })
    })();
    result.unwrap_or_else(|e| RunResult {
        seed,
        variant,
        report: EvalReport::failed(variant.name(), seed, e.to_string()),
        loss_csv: String::from(LOSS_CSV_HEADER),
        curve: Vec::new(),
        checkpoint: None,
        global_maps: Vec::new(),
    })
}

/// Runs `jobs` on up to `workers` threads and returns results in job order.
fn run_parallel<T: Send>(workers: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, jobs.max(1));
    if workers == 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if j >= jobs {
                            break done;
                        }
                        done.push((j, f(j)));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(j, _)| *j);
    out.into_iter().map(|(_, t)| t).collect()
}

pub struct ExperimentResult {
    /// Sorted by seed, then variant.
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.runs.iter().map(|r| &r.report).collect()
    }

    /// Mean mAP2 of a variant over its successful runs.
    pub fn mean_map2(&self, v: Variant) -> Option<f64> {
        let vals: Vec<f64> = self.runs.iter().filter(|r| r.variant == v && r.report.failed.is_none()).map(|r| r.report.map2).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("seed,variant,mAP1,mAP2,failed\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.seed,
                r.variant.name(),
                r.report.map1,
                r.report.map2,
                r.report.failed.is_some() as u8
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        for r in &self.runs {
            let d = dir.join(format!("{}_seed{}", r.variant.name(), r.seed));
            std::fs::create_dir_all(&d)?;
            std::fs::write(d.join("loss.csv"), &r.loss_csv)?;
            std::fs::write(d.join("report.json"), r.report.to_json()?)?;
            std::fs::write(d.join("report.csv"), r.report.to_csv())?;
            if !r.curve.is_empty() {
                let mut c = String::from("step,mAP2\n");
                r.curve.iter().for_each(|(s, m)| {
                    let _ = writeln!(c, "{s},{m:.6}");
                });
                std::fs::write(d.join("curve.csv"), c)?;
            }
            for (k, pgm) in &r.global_maps {
                std::fs::write(d.join(format!("global_map_layer{k}.pgm")), pgm)?;
            }
            if let Some(ckpt) = &r.checkpoint {
                std::fs::write(d.join("params.json"), ckpt)?;
            }
        }
        Ok(())
    }
}

/// Trains every configured variant for every seed on identical scene
/// streams and evaluates on the shared held-out set.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<ExperimentResult> {
    exp.validate()?;
    let mut jobs: Vec<(u64, Variant)> = Vec::new();
    let mut seeds = exp.seeds.clone();
    seeds.sort_unstable();
    let mut variants = exp.variants.clone();
    variants.sort_unstable();
    variants.dedup();
    for &s in &seeds {
        for &v in &variants {
            jobs.push((s, v));
        }
    }
    let runs = run_parallel(exp.workers, jobs.len(), |j| {
        let eval = eval_set(exp).expect("validated config yields a held-out set");
        run_variant(exp, jobs[j].0, jobs[j].1, &eval)
    });
    let result = ExperimentResult { runs };
    if let Some(dir) = &exp.out_dir {
        result.write(dir)?;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateParam {
    /// Number of applied layers.
    N,
    Dgrl,
    Omega,
    /// Gradient weakening coefficient.
    C,
}

impl std::str::FromStr for AblateParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Ok(AblateParam::N),
            "dgrl" => Ok(AblateParam::Dgrl),
            "omega" => Ok(AblateParam::Omega),
            "c" | "theta" => Ok(AblateParam::C),
            _ => Err(Error::invalid(format!("unknown sweep parameter {s}; expected N, dgrl, omega or c"))),
        }
    }
}

impl AblateParam {
    pub fn name(self) -> &'static str {
        match self {
            AblateParam::N => "N",
            AblateParam::Dgrl => "dgrl",
            AblateParam::Omega => "omega",
            AblateParam::C => "c",
        }
    }

    pub fn apply(self, base: &DecoderConfig, value: f64) -> Result<DecoderConfig> {
        let as_count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        let c = match self {
            AblateParam::N => DecoderConfig { applied: as_count()?, ..base.clone() },
            AblateParam::Dgrl => DecoderConfig { d_grl: as_count()?, ..base.clone() },
            AblateParam::Omega => DecoderConfig { omega: value, ..base.clone() },
            AblateParam::C => DecoderConfig { weaken: value, ..base.clone() },
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub param: String,
    pub value: f64,
    pub map1: f64,
    pub map2: f64,
    pub seeds: usize,
    pub failed: usize,
}

/// Full-method runs across one swept parameter, averaged over seeds.
pub fn ablate(exp: &ExperimentConfig, param: AblateParam, values: &[f64]) -> Result<Vec<AblateRow>> {
    exp.validate()?;
    let eval = eval_set(exp)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let decoder = param.apply(&exp.decoder, v)?;
        let sub = ExperimentConfig { decoder, ..exp.clone() };
        let runs: Vec<RunResult> = exp.seeds.iter().map(|&s| run_variant(&sub, s, Variant::GrlGrg, &eval)).collect();
        let ok: Vec<&EvalReport> = runs.iter().map(|r| &r.report).filter(|r| r.failed.is_none()).collect();
        let mean = |f: fn(&EvalReport) -> f64| if ok.is_empty() { 0.0 } else { ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64 };
        rows.push(AblateRow {
            param: param.name().into(),
            value: v,
            map1: mean(|r| r.map1),
            map2: mean(|r| r.map2),
            seeds: runs.len(),
            failed: runs.len() - ok.len(),
        });
    }
    Ok(rows)
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from("param,value,mAP1,mAP2,seeds,failed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{},{}", r.param, r.value, r.map1, r.map2, r.seeds, r.failed);
    }
    out
}

/// One-sided exact sign test: probability of at least `wins` positives
/// out of `n` non-tied pairs under a fair coin.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        p += c;
    }
    p / 2f64.powi(n as i32)
}
