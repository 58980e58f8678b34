use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use hgnet::checkpoint::{self, Checkpoint};
use hgnet::config::RunConfig;
use hgnet::dataset::{read_dataset, write_dataset};
use hgnet::features::prepare_scene;
use hgnet::graph::Graph;
use hgnet::model::HgNet;
use hgnet::nn::ParamStore;
use hgnet::render::render_bundle;
use hgnet::scenegen::simulate_scene;
use hgnet::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "hgnet", version, about = "Occupancy and backward-flow grid prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
    },
    /// Train a model and write checkpoints plus a JSON epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace feature-guided attention with plain cross-attention.
        #[arg(long = "no-fgat")]
        no_fgat: bool,
        /// Disable the temporal memory pathway.
        #[arg(long = "no-memory")]
        no_memory: bool,
    },
    /// Evaluate a checkpoint over a dataset and write a metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render predicted and ground-truth grids for one dataset scene.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn restore(path: &Path) -> anyhow::Result<(Checkpoint, RunConfig, ParamStore, HgNet)> {
    let ck = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = ck.config.clone();
    let mut store = ParamStore::new();
    let model = HgNet::new(&mut store, &cfg);
    ck.apply(&mut store).context("checkpoint does not match the model architecture")?;
    Ok((ck, cfg, store, model))
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { config, out, num } => {
            let cfg = RunConfig::load(&config)?;
            if num == 0 {
                bail!("--num must be positive");
            }
            let scfg = cfg.scene_config();
            let mut scenes = Vec::with_capacity(num);
            for i in 0..num {
                scenes.push(simulate_scene(cfg.seed.wrapping_add(i as u64), &scfg)?);
            }
            write_dataset(&out, &scenes, 64)?;
            println!("wrote {num} scenes to {}", out.display());
        }
        Cmd::Train { config, data, out, no_fgat, no_memory } => {
            let mut cfg = RunConfig::load(&config)?;
            if no_fgat {
                cfg.fgat_enabled = false;
            }
            if no_memory {
                cfg.memory_enabled = false;
            }
            cfg.dataset = data.display().to_string();
            let scenes = read_dataset(&data)?;
            if scenes.len() < 2 {
                bail!("need at least 2 scenes to split off a validation set");
            }
            // Hold out the trailing tenth (1..=200 scenes) for validation.
            let n_val = (scenes.len() / 10).clamp(1, 200);
            let (train_scenes, val_scenes) = scenes.split_at(scenes.len() - n_val);
            std::fs::create_dir_all(&out)?;
            let ckpt_path = out.join("model.ckpt");
            let result = train(&cfg, train_scenes, val_scenes, |log| {
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.6} (occ {:.3}, flow {:.3})  val auc_obs {:.4} iou_obs {:.4} auc_occl {:.4} epe {:.4}",
                    log.epoch,
                    log.lr,
                    log.train.total,
                    log.train.l_occ,
                    log.train.l_flow,
                    log.val.auc_observed,
                    log.val.soft_iou_observed,
                    log.val.auc_occluded,
                    log.val.epe
                );
            })?;
            checkpoint::save(
                &ckpt_path,
                &result.store,
                Some(&result.moments),
                cfg.epochs,
                &cfg,
            )?;
            std::fs::write(out.join("train_log.json"), serde_json::to_string_pretty(&result.logs)?)?;
            println!("saved {}", ckpt_path.display());
        }
        Cmd::Eval { ckpt, data, report } => {
            let (_, cfg, store, model) = restore(&ckpt)?;
            let scenes = read_dataset(&data)?;
            let rep = evaluate(&model, &store, &cfg, &scenes)?;
            if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&report, rep.to_json())?;
            std::fs::write(report.with_extension("txt"), rep.to_flat_text())?;
            print!("{}", rep.to_flat_text());
        }
        Cmd::Render { ckpt, scene, out } => {
            let (_, cfg, store, model) = restore(&ckpt)?;
            if cfg.dataset.is_empty() {
                bail!("checkpoint config records no dataset path to render from");
            }
            let scenes = read_dataset(Path::new(&cfg.dataset))?;
            let Some(sample) = scenes.get(scene) else {
                bail!("scene index {scene} out of range ({} scenes)", scenes.len());
            };
            let sc = prepare_scene(&cfg, sample);
            let g = Graph::new(&store, false, 0);
            let (bundle, _) = model.forward(&g, &sc, HgNet::ablations(&cfg))?;
            let mut files = render_bundle(
                &out,
                &format!("scene{scene}_pred"),
                &g.value(bundle.flow),
                &g.value(bundle.observed),
                &g.value(bundle.occluded),
            )?;
            files.extend(render_bundle(
                &out,
                &format!("scene{scene}_gt"),
                &sc.gt_flow,
                &sc.gt_observed,
                &sc.gt_occluded,
            )?);
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
