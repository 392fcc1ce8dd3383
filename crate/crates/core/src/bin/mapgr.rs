use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mapgr::decoder::init_params;
use mapgr::eval::{EvalFrame, EvalReport, ScoredInstance};
use mapgr::harness::{
    ablate, ablate_csv, audit_csv, eval_set, generate_synthetic_scene, gradient_flow_audit, make_sample,
    mlp_reconstruction_experiment, output_root, run_experiment, run_variant, AblateParam, ExperimentConfig,
    ReconConfig, Variant, OUT_ENV,
};
use mapgr::mapcore::MapScene;

#[derive(Parser)]
#[command(name = "mapgr", version, about = "Global map representation experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write seeded synthetic scenes as JSON, one file per scene.
    GenScenes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment config whose generator settings to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one variant on the first configured seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "grl-grg")]
        variant: VariantArg,
    },
    /// Score predictions against ground truth.
    Eval {
        /// JSON array with one array of scored instances per frame.
        #[arg(long)]
        pred: PathBuf,
        /// JSON array of scenes, aligned with the predictions.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-query gradient norms at the first decoder layer.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene JSON; defaults to the first held-out scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "grl-grg")]
        variant: VariantArg,
    },
    /// Bottleneck autoencoder on rasterized maps.
    Recon {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sweep one parameter of the full method.
    Ablate {
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All variants on all seeds, with artifacts.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Baseline,
    Grl,
    GrlGrg,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Grl => Variant::Grl,
            VariantArg::GrlGrg => Variant::GrlGrg,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn experiment_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::from_json(&read(p)?)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| output_root().join(sub))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenScenes { seed, count, out, config } => {
            let cfg = experiment_config(&config)?;
            let dir = out_dir(out, "scenes");
            for k in 0..count {
                let s = seed + k as u64;
                write(&dir, &format!("scene_{s}.json"), &generate_synthetic_scene(s, &cfg.generator)?.to_json()?)?;
            }
        }
        Cmd::Train { config, out, variant } => {
            let cfg = experiment_config(&config)?;
            let dir = out_dir(out, "train");
            let eval = eval_set(&cfg)?;
            let r = run_variant(&ExperimentConfig { save_checkpoints: true, ..cfg.clone() }, cfg.seeds[0], variant.into(), &eval);
            write(&dir, "loss.csv", &r.loss_csv)?;
            write(&dir, "report.json", &r.report.to_json()?)?;
            write(&dir, "report.csv", &r.report.to_csv())?;
            if let Some(ckpt) = &r.checkpoint {
                write(&dir, "params.json", ckpt)?;
            }
            if let Some(e) = &r.report.failed {
                bail!("training failed: {e}");
            }
            println!("mAP1 {:.4} mAP2 {:.4}", r.report.map1, r.report.map2);
        }
        Cmd::Eval { pred, gt, out } => {
            let preds: Vec<Vec<ScoredInstance>> = serde_json::from_str(&read(&pred)?)?;
            let gts: Vec<MapScene> = serde_json::from_str(&read(&gt)?)?;
            if preds.len() != gts.len() {
                bail!("{} prediction frames but {} ground-truth scenes", preds.len(), gts.len());
            }
            let frames: Vec<EvalFrame> = preds.into_iter().zip(gts).map(|(preds, gt)| EvalFrame { preds, gt }).collect();
            let report = EvalReport::from_frames("external", 0, &frames)?;
            match out {
                Some(dir) => {
                    write(&dir, "report.json", &report.to_json()?)?;
                    write(&dir, "report.csv", &report.to_csv())?;
                }
                None => println!("{}", report.to_json()?),
            }
        }
        Cmd::Audit { config, scene, variant } => {
            let cfg = experiment_config(&config)?;
            let dec = Variant::from(variant).apply(&cfg.decoder);
            let dec = mapgr::decoder::DecoderConfig { init_seed: cfg.seeds[0], ..dec };
            let sample = match scene {
                Some(p) => {
                    let s = MapScene::from_json(&read(&p)?)?;
                    make_sample(s, &dec, 0)?
                }
                None => eval_set(&ExperimentConfig { eval_scenes: 1, ..cfg.clone() })?.remove(0),
            };
            let store = init_params(&dec)?;
            print!("{}", audit_csv(&gradient_flow_audit(&dec, &sample, &store)?));
        }
        Cmd::Recon { config } => {
            let cfg = match config {
                Some(p) => serde_json::from_str(&read(&p)?)?,
                None => ReconConfig::default(),
            };
            println!("{}", serde_json::to_string_pretty(&mlp_reconstruction_experiment(&cfg)?)?);
        }
        Cmd::Ablate { param, values, config, out } => {
            let cfg = experiment_config(&config)?;
            let p: AblateParam = param.parse()?;
            let csv = ablate_csv(&ablate(&cfg, p, &values)?);
            match out {
                Some(dir) => write(&dir, &format!("ablate_{}.csv", p.name()), &csv)?,
                None => print!("{csv}"),
            }
        }
        Cmd::Experiment { config, out } => {
            let mut cfg = experiment_config(&config)?;
            cfg.out_dir = Some(out.or(cfg.out_dir.take()).unwrap_or_else(|| output_root().join("experiment")));
            let r = run_experiment(&cfg)?;
            print!("{}", r.summary_csv());
            for v in Variant::ALL {
                if let Some(m) = r.mean_map2(v) {
                    println!("mean mAP2 {}: {m:.4}", v.name());
                }
            }
            eprintln!("artifacts in {} (root overridable via {OUT_ENV})", cfg.out_dir.unwrap().display());
        }
    }
    Ok(())
}
