use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;

use super::classifier::{load_real_at, split_real};
use super::records::{read_metrics, write_metrics, MetricsRow};
use crate::autodiff::{AdamW, Graph, Module};
use crate::checkpoint::{Checkpoint, ScheduleParams};
use crate::config::RunConfig;
use crate::data::ValueRange;
use crate::diffusion::{build_denoiser, denoise_loss, generate_dataset, make_linear_schedule, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng;

fn save_denoiser(
    path: &Path,
    net: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    opt: &AdamW<f32>,
    epoch: usize,
    best_loss: f64,
) -> Result<()> {
    let mut ck = Checkpoint {
        schedule: Some(ScheduleParams {
            steps: schedule.steps() as u32,
            beta_start: schedule.beta_start(),
            beta_end: schedule.beta_end(),
        }),
        ..Default::default()
    };
    ck.set_meta("kind", "denoiser");
    ck.set_meta("embed_dim", net.config().embed_dim);
    ck.set_meta("hidden", net.config().hidden);
    ck.set_meta("image_size", net.config().image_size);
    ck.set_meta("epoch", epoch);
    ck.set_meta("best_loss", best_loss);
    ck.set_meta("adamw_steps", opt.steps_taken());
    ck.push_all("param.", &net.params().named_values());
    ck.push_all("", &opt.state(net.params()));
    ck.save(path)
}

/// Rebuilds a denoiser and its noise schedule from a checkpoint. The
/// architecture comes from the checkpoint, not from the run config.
pub fn load_denoiser(path: &Path) -> Result<(Denoiser<f32>, NoiseSchedule, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.meta("kind")?;
    if kind != "denoiser" {
        return Err(Error::Checkpoint(format!("{}: holds a {kind}, not a denoiser", path.display())));
    }
    let sp = ck
        .schedule
        .ok_or_else(|| Error::Checkpoint(format!("{}: no noise schedule stored", path.display())))?;
    let schedule = make_linear_schedule(sp.steps as usize, sp.beta_start, sp.beta_end)?;
    let cfg = DenoiserConfig {
        embed_dim: ck.meta_parse("embed_dim")?,
        hidden: ck.meta_parse("hidden")?,
        image_size: ck.meta_parse("image_size")?,
        ..Default::default()
    };
    let mut net = build_denoiser::<f32>(&cfg, &mut rng::stream(0, "denoiser-init", 0))?;
    net.params_mut()
        .load_values(&ck.tensors_with_prefix("param.")?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((net, schedule, ck))
}

/// Trains the class-conditional denoiser on the training split at 32x32 in
/// `[-1, 1]`. Samples condition on their lowest class id.
///
/// Writes `metrics.csv` (empty validation cells), `checkpoints/best.ckpt`
/// whenever the epoch's train loss improves, `checkpoints/last.ckpt` every
/// epoch, and `resolved_config`. Returns the per-epoch train losses.
pub fn train_diffusion(cfg: &RunConfig, resume: bool) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dcfg = cfg.denoiser_config();
    let real = load_real_at(cfg, dcfg.image_size, ValueRange::Symmetric)?;
    let (train, _) = split_real(cfg, &real)?;
    let classes: Vec<usize> = train.labels.iter().map(|l| l[0]).collect();
    let schedule = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)?;
    cfg.write_resolved()?;
    let ckdir = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let metrics_path = cfg.out.join("metrics.csv");

    let mut net = build_denoiser::<f32>(&dcfg, &mut rng::stream(cfg.seed, "denoiser-init", 0))?;
    let mut opt = AdamW::default();
    let mut rows = Vec::new();
    let mut start = 0;
    let mut best = f64::INFINITY;
    if resume {
        let path = ckdir.join("last.ckpt");
        let (loaded, _, ck) = load_denoiser(&path)?;
        if loaded.config() != &dcfg {
            return Err(Error::Checkpoint(format!(
                "{}: denoiser shape differs from the configured one",
                path.display()
            )));
        }
        net = loaded;
        start = ck.meta_parse("epoch")?;
        best = ck.meta_parse("best_loss")?;
        let steps: u64 = ck.meta_parse("adamw_steps")?;
        if steps > 0 {
            opt.restore(net.params(), steps, &ck.tensors_with_prefix("")?)?;
        }
        rows = read_metrics(&metrics_path)?;
        rows.truncate(start);
        info!("resuming after epoch {start}");
    }

    let lr = cfg.diffusion.lr;
    for epoch in start + 1..=cfg.diffusion.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "diffusion-shuffle", e));
        let mut noise = rng::stream(cfg.seed, "diffusion-noise", e);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.diffusion.batch_size) {
            let x0 = train.batch(chunk)?;
            let ids: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            let mut g = Graph::new();
            let loss = denoise_loss(&mut g, &net, &x0, &ids, &schedule, &mut noise)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "denoiser loss" });
            }
            total += value * chunk.len() as f64;
            g.backward(loss)?;
            let params = net.params_mut();
            params.accumulate_grads(&g);
            opt.step(params, lr);
            params.zero_grad();
        }
        let train_loss = total / train.len() as f64;
        info!("epoch {epoch}: denoiser loss {train_loss:.5}");
        rows.push(MetricsRow {
            epoch,
            train_loss,
            val_loss: None,
            val_macro_f1: None,
            lr,
        });
        write_metrics(&metrics_path, &rows)?;
        if train_loss < best {
            best = train_loss;
            save_denoiser(&ckdir.join("best.ckpt"), &net, &schedule, &opt, epoch, best)?;
        }
        save_denoiser(&ckdir.join("last.ckpt"), &net, &schedule, &opt, epoch, best)?;
    }
    Ok(rows.iter().map(|r| r.train_loss).collect())
}

/// Samples `diffusion.per_class` images of every class from the denoiser at
/// `diffusion.checkpoint`, writing `generated/` and `generated.csv` under
/// `out`. Returns the number of images written.
pub fn generate(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let (net, schedule, _) = load_denoiser(&cfg.diffusion.checkpoint)?;
    cfg.write_resolved()?;
    let samples = generate_dataset(&net, &schedule, cfg.diffusion.per_class, &cfg.out, cfg.seed)?;
    info!("wrote {} generated samples to {}", samples.len(), cfg.out.display());
    Ok(samples.len())
}
