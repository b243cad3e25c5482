//! rwnet: projection, wavelet dumps, training runs, and mask explanations.

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use rwnet_core::autodiff::Tape;
use rwnet_core::config::RunConfig;
use rwnet_core::dataset::Dataset;
use rwnet_core::geometry::ViewDirection;
use rwnet_core::ioutil::{write_atomic, write_json_atomic};
use rwnet_core::model::{Backbone, ModelConfig, Role};
use rwnet_core::rde::{mc_objective, optimize_mask, MaskStore, RdeConfig};
use rwnet_core::rng::{fnv1a64, mix};
use rwnet_core::training::{
    evaluate, pretrain, run_ablation, train, AblationKind, FoldSplit, TrainConfig,
};
use rwnet_core::{
    dwt2, idwt2, load_point_cloud, normalize_unit_cube, project_six_views, CloudFormat,
    DatasetSpec,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "rwnet", version, about = "Few-shot 3D classification with wavelet-domain relevance masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a point cloud file into six orthographic depth PGMs.
    Project {
        input: PathBuf,
        /// off or xyz; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<String>,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose a PGM image into its four Haar sub-band PGMs.
    Dwt {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the reconstruction from the sub-bands.
        #[arg(long)]
        reconstruct: bool,
    },
    /// Pre-train the target model on unmasked projections.
    Pretrain { config: PathBuf },
    /// Mask-filtered training (runs pre-training first if no checkpoint exists).
    Train { config: PathBuf },
    /// Episodic evaluation of a trained run.
    Eval { config: PathBuf },
    /// Optimize and export the relevance mask for one sample.
    Explain {
        config: PathBuf,
        sample: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation matrix and write a CSV comparison.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Project {
            input,
            format,
            resolution,
            out,
        } => cmd_project(&input, format.as_deref(), resolution, &out),
        Command::Dwt {
            image,
            out,
            reconstruct,
        } => cmd_dwt(&image, &out, reconstruct),
        Command::Pretrain { config } => cmd_pretrain(&config),
        Command::Train { config } => cmd_train(&config),
        Command::Eval { config } => cmd_eval(&config),
        Command::Explain {
            config,
            sample,
            out,
        } => cmd_explain(&config, &sample, out.as_deref()),
        Command::Ablate {
            config,
            kind,
            seeds,
        } => cmd_ablate(&config, &kind, seeds),
    }
}

fn cloud_format(path: &Path, flag: Option<&str>) -> anyhow::Result<CloudFormat> {
    if let Some(f) = flag {
        return Ok(CloudFormat::from_str(f)?);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => Ok(CloudFormat::from_str(&ext.to_ascii_lowercase())?),
        None => bail!("cannot infer cloud format for {}; pass --format", path.display()),
    }
}

fn cmd_project(
    input: &Path,
    format: Option<&str>,
    resolution: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let format = cloud_format(input, format)?;
    let cloud = load_point_cloud(input, format)?;
    let normalized = normalize_unit_cube(&cloud)?;
    let views = project_six_views(&normalized, resolution)?;
    std::fs::create_dir_all(out)?;
    for dir in ViewDirection::ALL {
        let view = views.view(dir);
        let path = out.join(format!("view_{}.pgm", dir.name()));
        rwnet_core::pgm::write_depth_pgm(&path, view.size(), view.size(), view.values())?;
    }
    println!("wrote 6 views of {} at {resolution}x{resolution} to {}", views.sample_id, out.display());
    Ok(())
}

fn cmd_dwt(image: &Path, out: &Path, reconstruct: bool) -> anyhow::Result<()> {
    let (w, h, values) = rwnet_core::pgm::read_depth_pgm(image)?;
    if w != h {
        bail!("dwt needs a square image, got {w}x{h}");
    }
    let sb = dwt2(&values, w)?;
    std::fs::create_dir_all(out)?;
    let half = sb.half();
    for (i, name) in rwnet_core::SubBands::BAND_NAMES.iter().enumerate() {
        let path = out.join(format!("{name}.pgm"));
        rwnet_core::pgm::write_normalized_pgm(&path, half, half, sb.band(i))?;
    }
    if reconstruct {
        let recon = idwt2(&sb);
        rwnet_core::pgm::write_depth_pgm(&out.join("recon.pgm"), w, h, &recon)?;
    }
    println!("wrote sub-bands of {} to {}", image.display(), out.display());
    Ok(())
}

/// Per-run JSON summary; commands fill their own sections.
#[derive(Default, Serialize, Deserialize)]
struct RunSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrain_epoch_losses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_epoch_losses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    copies_at: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<EvalSection>,
}

#[derive(Serialize, Deserialize)]
struct EvalSection {
    mean_accuracy: f64,
    ci_half_width: f64,
    episodes: usize,
}

fn load_summary(run_dir: &Path) -> RunSummary {
    std::fs::read_to_string(run_dir.join("metrics.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn store_summary(run_dir: &Path, summary: &RunSummary) -> anyhow::Result<()> {
    write_json_atomic(&run_dir.join("metrics.json"), summary)?;
    Ok(())
}

struct RunContext {
    cfg: RunConfig,
    model_cfg: ModelConfig,
    rde_cfg: RdeConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    run_dir: PathBuf,
}

fn open_run(config_path: &Path) -> anyhow::Result<RunContext> {
    let cfg = RunConfig::load(config_path)?;
    let (model_cfg, rde_cfg, train_cfg, dataset_spec) = cfg.resolved();
    let dataset = Dataset::build(&dataset_spec, model_cfg.resolution)
        .context("building the dataset")?;
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::create_dir_all(run_dir.join("masks"))?;
    write_json_atomic(&run_dir.join("config.json"), &cfg)?;
    Ok(RunContext {
        cfg,
        model_cfg,
        rde_cfg,
        train_cfg,
        dataset,
        run_dir,
    })
}

fn split_of(ctx: &RunContext) -> anyhow::Result<FoldSplit> {
    Ok(FoldSplit::new(
        &ctx.dataset.classes(),
        ctx.train_cfg.folds,
        ctx.train_cfg.test_fold,
    )?)
}

fn cmd_pretrain(config_path: &Path) -> anyhow::Result<()> {
    let ctx = open_run(config_path)?;
    let split = split_of(&ctx)?;
    let mut qhat = Backbone::new(ctx.model_cfg.clone(), Role::Trainable)?;
    let losses = pretrain(&mut qhat, &ctx.dataset, &split, &ctx.train_cfg)?;
    let mut snapshot = qhat.clone();
    snapshot.freeze();
    snapshot.save(&ctx.run_dir.join("checkpoints").join("qhat_pretrained"))?;
    let mut summary = load_summary(&ctx.run_dir);
    summary.config = Some(serde_json::to_value(&ctx.cfg)?);
    summary.pretrain_epoch_losses = Some(losses);
    store_summary(&ctx.run_dir, &summary)?;
    println!("pretrained for {} epochs into {}", ctx.train_cfg.pretrain_epochs, ctx.run_dir.display());
    Ok(())
}

fn cmd_train(config_path: &Path) -> anyhow::Result<()> {
    let ctx = open_run(config_path)?;
    let split = split_of(&ctx)?;
    let pretrained_dir = ctx.run_dir.join("checkpoints").join("qhat_pretrained");
    let mut summary = load_summary(&ctx.run_dir);
    let qhat_pretrained = if pretrained_dir.join("manifest.json").exists() {
        Backbone::load(&pretrained_dir)?
    } else {
        let mut qhat = Backbone::new(ctx.model_cfg.clone(), Role::Trainable)?;
        let losses = pretrain(&mut qhat, &ctx.dataset, &split, &ctx.train_cfg)?;
        summary.pretrain_epoch_losses = Some(losses);
        qhat.freeze();
        qhat.save(&pretrained_dir)?;
        qhat
    };
    if qhat_pretrained.config() != &ctx.model_cfg {
        bail!(
            "pretrained checkpoint model config does not match the run config; \
             clear {} or fix the config",
            pretrained_dir.display()
        );
    }
    let mut q = qhat_pretrained.clone();
    q.set_trainable();
    let mut qhat = qhat_pretrained.clone();
    qhat.freeze();
    let mut store = MaskStore::new();
    let output = train(
        &mut q,
        &mut qhat,
        &mut store,
        &ctx.dataset,
        &split,
        &ctx.train_cfg,
        &ctx.rde_cfg,
    )?;
    q.save(&ctx.run_dir.join("checkpoints").join("q_final"))?;
    qhat.save(&ctx.run_dir.join("checkpoints").join("qhat_final"))?;
    store.write_densities_csv(&ctx.run_dir.join("masks").join("densities.csv"))?;
    summary.config = Some(serde_json::to_value(&ctx.cfg)?);
    summary.train_epoch_losses = Some(output.epoch_losses);
    summary.copies_at = Some(output.copies_at);
    store_summary(&ctx.run_dir, &summary)?;
    println!("trained for {} epochs into {}", ctx.train_cfg.train_epochs, ctx.run_dir.display());
    Ok(())
}

fn cmd_eval(config_path: &Path) -> anyhow::Result<()> {
    let ctx = open_run(config_path)?;
    let split = split_of(&ctx)?;
    let q_dir = ctx.run_dir.join("checkpoints").join("q_final");
    let qhat_dir = ctx.run_dir.join("checkpoints").join("qhat_final");
    if !q_dir.join("manifest.json").exists() {
        bail!("no trained checkpoint at {}; run `rwnet train` first", q_dir.display());
    }
    let q = Backbone::load(&q_dir)?;
    let qhat = Backbone::load(&qhat_dir)?;
    let mut store = MaskStore::new();
    let out = evaluate(
        &q,
        &qhat,
        &mut store,
        &ctx.dataset,
        &split,
        &ctx.train_cfg,
        &ctx.rde_cfg,
        ctx.train_cfg.eval_episodes,
    )?;
    let mut csv = String::from("episode,accuracy\n");
    for (i, acc) in out.per_episode.iter().enumerate() {
        csv.push_str(&format!("{},{acc}\n", i + 1));
    }
    write_atomic(&ctx.run_dir.join("episodes.csv"), csv.as_bytes())?;
    store.write_densities_csv(&ctx.run_dir.join("masks").join("densities.csv"))?;
    let mut summary = load_summary(&ctx.run_dir);
    summary.config = Some(serde_json::to_value(&ctx.cfg)?);
    summary.eval = Some(EvalSection {
        mean_accuracy: out.mean_accuracy,
        ci_half_width: out.ci_half_width,
        episodes: out.per_episode.len(),
    });
    store_summary(&ctx.run_dir, &summary)?;
    println!(
        "accuracy {:.4} +/- {:.4} over {} episodes",
        out.mean_accuracy,
        out.ci_half_width,
        out.per_episode.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainSidecar {
    sample_id: String,
    lambda: f64,
    steps: usize,
    final_mc_loss: f64,
    density: f64,
}

fn cmd_explain(config_path: &Path, sample: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let ctx = open_run(config_path)?;
    let format = cloud_format(sample, None)?;
    let cloud = load_point_cloud(sample, format)?;
    let normalized = normalize_unit_cube(&cloud)?;
    let views = project_six_views(&normalized, ctx.model_cfg.resolution)?;

    // The most recent frozen target available; a fresh seeded model otherwise.
    let checkpoints = ctx.run_dir.join("checkpoints");
    let target = [checkpoints.join("qhat_final"), checkpoints.join("qhat_pretrained")]
        .iter()
        .find(|d| d.join("manifest.json").exists())
        .map(|d| Backbone::load(d))
        .transpose()?
        .map(|mut b| {
            b.freeze();
            b
        })
        .unwrap_or(Backbone::new(ctx.model_cfg.clone(), Role::Frozen)?);

    let seed = mix(&[ctx.cfg.seed, 0xe8a, fnv1a64(views.sample_id.as_bytes())]);
    let mask = optimize_mask(&views, &target, &ctx.rde_cfg, None, seed)?;
    let objective = mc_objective(
        &views,
        &mask,
        &target,
        &ctx.rde_cfg,
        seed,
        ctx.rde_cfg.noise_draws.max(4),
    )?;

    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.run_dir.join("masks"));
    std::fs::create_dir_all(&out_dir)?;
    let half = mask.half();
    for (i, dir) in ViewDirection::ALL.iter().enumerate() {
        // 2x2 band mosaic: ll | lh over hl | hh, at full view resolution.
        let n = 2 * half;
        let mut mosaic = vec![0.0; n * n];
        let flat = &mask.views()[i];
        for band in 0..4 {
            let (row0, col0) = ((band / 2) * half, (band % 2) * half);
            for r in 0..half {
                for c in 0..half {
                    mosaic[(row0 + r) * n + col0 + c] = flat[(band * half + r) * half + c];
                }
            }
        }
        let path = out_dir.join(format!("mask_{}.pgm", dir.name()));
        rwnet_core::pgm::write_depth_pgm(&path, n, n, &mosaic)?;
    }
    let sidecar = ExplainSidecar {
        sample_id: views.sample_id.clone(),
        lambda: ctx.rde_cfg.lambda,
        steps: ctx.rde_cfg.steps,
        final_mc_loss: objective.objective(),
        density: mask.density(),
    };
    write_json_atomic(&out_dir.join(format!("{}_explain.json", views.sample_id)), &sidecar)?;
    println!(
        "mask density {:.4}, final loss {:.6}; artifacts in {}",
        sidecar.density,
        sidecar.final_mc_loss,
        out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(config_path: &Path, kind: &str, seeds: usize) -> anyhow::Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let ctx = open_run(config_path)?;
    let kind = AblationKind::from_str(kind)?;
    let table = run_ablation(
        kind,
        &ctx.model_cfg,
        &ctx.rde_cfg,
        &ctx.train_cfg,
        &ctx.dataset,
        seeds,
    )?;
    let csv = table.to_csv();
    let path = ctx.run_dir.join(format!("ablation_{}.csv", kind.name()));
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}
