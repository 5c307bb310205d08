use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;

use super::records::{read_metrics, read_mix_stats, write_metrics, write_mix_stats, write_predictions, MetricsRow};
use crate::autodiff::{AdamW, Graph, Module, ParamId, ParamStore, Var};
use crate::backbone::{build_backbone, SplitNetwork};
use crate::checkpoint::Checkpoint;
use crate::config::{EvalSplit, MixMode, RunConfig};
use crate::data::{split_indices, Dataset, MultiChannelImage, ValueRange, NUM_CLASSES};
use crate::diffusion::upsample_bicubic;
use crate::error::{Error, Result};
use crate::losses::{arcface_inference_logits, arcface_logits, focal_rows, ArcMargin, FocalParams, LossKind};
use crate::metrics::{binarize, macro_f1, per_class_report, report_csv, LabelMatrix};
use crate::mixer::{pair_batches, sample_lambdas};
use crate::rng;
use crate::schedulers::{Direction, EarlyStopState, LrSchedule, PlateauState, StopDecision};
use crate::tensor::Tensor;

/// Resolution the denoiser generates at; synthetic images are upsampled
/// from here to the classifier input size.
const GENERATED_SIZE: usize = 32;

#[derive(Clone, Copy, Debug)]
enum Objective {
    Bce,
    Focal(FocalParams),
    Arc(ArcMargin),
}

/// Backbone plus head, with the ArcFace class centres when that loss is
/// configured. All parameters live in the backbone's store.
#[derive(Clone, Debug)]
pub struct Classifier {
    net: SplitNetwork<f32>,
    centers: Option<ParamId>,
    objective: Objective,
}

impl Classifier {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let mut net = build_backbone::<f32>(&cfg.backbone_config(), &mut rng::stream(cfg.seed, "init", 0))?;
        let objective = match cfg.loss.kind {
            LossKind::Bce => Objective::Bce,
            LossKind::Focal => Objective::Focal(cfg.loss.focal()?),
            LossKind::Arcface => Objective::Arc(cfg.loss.arc()?),
        };
        let centers = matches!(objective, Objective::Arc(_)).then(|| {
            let f = net.feature_dim();
            let bound = 1.0 / (f as f64).sqrt();
            let u = Uniform::new(-bound, bound).expect("valid range");
            let mut r = rng::stream(cfg.seed, "init", 1);
            let t = Tensor::from_fn(&[NUM_CLASSES, f], |_| u.sample(&mut r) as f32);
            net.params_mut().add("arcface.centers", t)
        });
        Ok(Self { net, centers, objective })
    }

    pub fn network(&self) -> &SplitNetwork<f32> {
        &self.net
    }

    /// Training-time logits. Under ArcFace the margin depends on `targets`.
    fn train_logits(&self, g: &mut Graph<f32>, features: Var, targets: &[f32]) -> Result<Var> {
        match (self.objective, self.centers) {
            (Objective::Arc(head), Some(c)) => {
                let centers = g.param(self.net.params(), c)?;
                arcface_logits(g, features, centers, &head, targets)
            }
            _ => self.net.logits(g, features),
        }
    }

    /// Label-free logits used for prediction.
    fn predict_logits(&self, g: &mut Graph<f32>, features: Var) -> Result<Var> {
        match (self.objective, self.centers) {
            (Objective::Arc(head), Some(c)) => {
                let centers = g.param(self.net.params(), c)?;
                arcface_inference_logits(g, features, centers, &head)
            }
            _ => self.net.logits(g, features),
        }
    }

    /// Per-sample losses `[B]`, each the mean over classes.
    fn loss_rows(&self, g: &mut Graph<f32>, logits: Var, targets: &[f32]) -> Result<Var> {
        match self.objective {
            Objective::Focal(p) => focal_rows(g, logits, targets, &p),
            Objective::Bce | Objective::Arc(_) => g.bce_rows(logits, targets),
        }
    }

    fn supervised_rows(&self, g: &mut Graph<f32>, x: Tensor<f32>, targets: &[f32]) -> Result<Var> {
        let xv = g.constant(x)?;
        let f = self.net.features(g, xv)?;
        let z = self.train_logits(g, f, targets)?;
        self.loss_rows(g, z, targets)
    }

    /// Validation loss and sigmoid probabilities over `ds`, without mixing.
    pub fn assess(&self, ds: &Dataset, batch_size: usize) -> Result<(f64, Tensor<f32>)> {
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(ds.len() * NUM_CLASSES);
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(batch_size) {
            let targets = ds.targets(chunk);
            let mut g = Graph::inference();
            let x = g.constant(ds.batch(chunk)?)?;
            let f = self.net.features(&mut g, x)?;
            let z = self.train_logits(&mut g, f, targets.data())?;
            let rows = self.loss_rows(&mut g, z, targets.data())?;
            total += g.value(rows).data().iter().map(|&v| v as f64).sum::<f64>();
            let zp = self.predict_logits(&mut g, f)?;
            let p = g.sigmoid(zp)?;
            probs.extend_from_slice(g.value(p).data());
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "validation loss" });
        }
        Ok((total / ds.len() as f64, Tensor::new(vec![ds.len(), NUM_CLASSES], probs)?))
    }
}

/// Outcome of a validation or evaluation pass.
#[derive(Clone, Debug)]
pub struct Assessment {
    pub loss: f64,
    pub predictions: LabelMatrix,
    pub macro_f1: f64,
}

fn assess(model: &Classifier, ds: &Dataset, cfg: &RunConfig) -> Result<Assessment> {
    let (loss, probs) = model.assess(ds, cfg.batch_size)?;
    let predictions = binarize(&probs, cfg.threshold)?;
    let macro_f1 = macro_f1(&predictions, &ds.label_matrix())?;
    Ok(Assessment { loss, predictions, macro_f1 })
}

fn write_reports(out: &Path, ds: &Dataset, a: &Assessment) -> Result<()> {
    write_predictions(&out.join("predictions.csv"), &ds.ids, &a.predictions)?;
    let report = per_class_report(&a.predictions, &ds.label_matrix())?;
    let path = out.join("per_class.csv");
    fs::write(&path, report_csv(&report)).map_err(|e| Error::io(&path, e))
}

/// Training corpus `{data}/train.csv` + `{data}/train/` at the classifier
/// input size.
pub fn load_real(cfg: &RunConfig) -> Result<Dataset> {
    load_real_at(cfg, cfg.input_size, ValueRange::Unit)
}

pub(crate) fn load_real_at(cfg: &RunConfig, size: usize, range: ValueRange) -> Result<Dataset> {
    if !cfg.data.is_dir() {
        return Err(Error::Corpus(format!("data directory {} not found", cfg.data.display())));
    }
    Dataset::load_hpa(&cfg.data, "train", size, range)
}

/// Generated set `{synthetic}/generated.csv`, upsampled to the input size.
pub fn load_synthetic(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.synthetic.as_os_str().is_empty() {
        return Err(Error::config(
            "mix modes need a generated set; run `generate` first and set `synthetic` to its output directory",
        ));
    }
    if !cfg.synthetic.join("generated.csv").is_file() {
        return Err(Error::config(format!(
            "no generated set at {} (expected generated.csv); run `generate` first",
            cfg.synthetic.display()
        )));
    }
    let mut ds = Dataset::load_hpa(&cfg.synthetic, "generated", GENERATED_SIZE, ValueRange::Unit)?;
    ds.images = ds
        .images
        .iter()
        .map(|img| upsample_bicubic(img, cfg.input_size))
        .collect::<Result<Vec<MultiChannelImage>>>()?;
    Ok(ds)
}

/// The seeded train/validation partition of the real corpus.
pub fn split_real(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let (tr, va) = split_indices(ds.len(), cfg.train_fraction, cfg.seed)?;
    Ok((ds.subset(&tr), ds.subset(&va)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_macro_f1: f64,
    pub stopped_early: bool,
}

struct TrainState {
    epoch: usize,
    best_epoch: usize,
    best_val_loss: f64,
    opt: AdamW<f32>,
    schedule: LrSchedule,
    stop: EarlyStopState,
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("checkpoints")
}

fn save_classifier(path: &Path, cfg: &RunConfig, model: &Classifier, st: &TrainState) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "classifier");
    ck.set_meta("depth", format!("{:?}", cfg.backbone.depth).to_lowercase());
    ck.set_meta("width", cfg.backbone.width);
    ck.set_meta("input_size", cfg.input_size);
    ck.set_meta("loss", format!("{:?}", cfg.loss.kind).to_lowercase());
    ck.set_meta("epoch", st.epoch);
    ck.set_meta("best_epoch", st.best_epoch);
    ck.set_meta("best_val_loss", st.best_val_loss);
    ck.set_meta("adamw_steps", st.opt.steps_taken());
    let p = st.schedule.plateau_state();
    ck.set_meta("plateau.best", p.best_metric);
    ck.set_meta("plateau.wait", p.epochs_since_improvement);
    ck.set_meta("plateau.lr", p.current_lr);
    ck.set_meta("stop.best", st.stop.best_metric);
    ck.set_meta("stop.wait", st.stop.epochs_since_improvement);
    let params = model.net.params();
    ck.push_all("param.", &params.named_values());
    ck.push_all("", &st.opt.state(params));
    ck.save(path)
}

/// Loads classifier weights from `path` into `model`, checking that the
/// checkpoint was written for the same architecture.
pub fn load_classifier_weights(path: &Path, cfg: &RunConfig, model: &mut Classifier) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let kind = ck.meta("kind")?;
    if kind != "classifier" {
        return Err(Error::Checkpoint(format!("{}: holds a {kind}, not a classifier", path.display())));
    }
    let depth = format!("{:?}", cfg.backbone.depth).to_lowercase();
    let found = (ck.meta("depth")?, ck.meta_parse::<f64>("width")?, ck.meta_parse::<usize>("input_size")?);
    if found != (depth.as_str(), cfg.backbone.width, cfg.input_size) {
        return Err(Error::Checkpoint(format!(
            "{}: written for backbone {} width {} input {}, configured {} width {} input {}",
            path.display(),
            found.0,
            found.1,
            found.2,
            depth,
            cfg.backbone.width,
            cfg.input_size
        )));
    }
    let values = ck.tensors_with_prefix::<f32>("param.")?;
    model
        .net
        .params_mut()
        .load_values(&values)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

fn restore_state(ck: &Checkpoint, model: &Classifier, cfg: &RunConfig) -> Result<TrainState> {
    let mut opt = AdamW::default();
    let moments = ck.tensors_with_prefix::<f32>("")?;
    if ck.meta_parse::<u64>("adamw_steps")? > 0 {
        opt.restore(model.net.params(), ck.meta_parse("adamw_steps")?, &moments)?;
    }
    let mut schedule = LrSchedule::new(cfg.schedule.kind, cfg.schedule.init_lr)?;
    let mut plateau = PlateauState::new(cfg.schedule.init_lr, Direction::Minimize);
    plateau.best_metric = ck.meta_parse("plateau.best")?;
    plateau.epochs_since_improvement = ck.meta_parse("plateau.wait")?;
    plateau.current_lr = ck.meta_parse("plateau.lr")?;
    schedule.set_plateau_state(plateau);
    let mut stop = EarlyStopState::new(cfg.early_stop_patience, Direction::Minimize);
    stop.best_metric = ck.meta_parse("stop.best")?;
    stop.epochs_since_improvement = ck.meta_parse("stop.wait")?;
    Ok(TrainState {
        epoch: ck.meta_parse("epoch")?,
        best_epoch: ck.meta_parse("best_epoch")?,
        best_val_loss: ck.meta_parse("best_val_loss")?,
        opt,
        schedule,
        stop,
    })
}

/// One optimisation step on a batch; returns the batch objective.
fn step(model: &mut Classifier, opt: &mut AdamW<f32>, lr: f64, g: &mut Graph<f32>, loss: Var) -> Result<f64> {
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    g.backward(loss)?;
    let params: &mut ParamStore<f32> = model.net.params_mut();
    params.accumulate_grads(g);
    opt.step(params, lr);
    params.zero_grad();
    Ok(value)
}

/// Mean training objective and, for mixing runs, the mean λ of the epoch.
fn train_epoch(
    cfg: &RunConfig,
    model: &mut Classifier,
    opt: &mut AdamW<f32>,
    lr: f64,
    epoch: usize,
    train: &Dataset,
    synthetic: Option<&Dataset>,
) -> Result<(f64, Option<f64>)> {
    let e = epoch as u64;
    let mut total = 0.0;
    let Some((syn, mode)) = synthetic.zip(cfg.mix.mode) else {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", e));
        for chunk in order.chunks(cfg.batch_size) {
            let targets = train.targets(chunk);
            let mut g = Graph::new();
            let rows = model.supervised_rows(&mut g, train.batch(chunk)?, targets.data())?;
            let loss = g.mean(rows)?;
            total += step(model, opt, lr, &mut g, loss)? * chunk.len() as f64;
        }
        return Ok((total / train.len() as f64, None));
    };
    let pairs = pair_batches(train.len(), syn.len(), &mut rng::stream(cfg.seed, "pairs", e))?;
    let lams = sample_lambdas(&mut rng::stream(cfg.seed, "lambda", e), cfg.mix.beta, pairs.len())?;
    for (chunk, lam) in pairs.chunks(cfg.batch_size).zip(lams.chunks(cfg.batch_size)) {
        let (ri, gi): (Vec<usize>, Vec<usize>) = chunk.iter().copied().unzip();
        let lam32: Vec<f32> = lam.iter().map(|&l| l as f32).collect();
        let (y_r, y_g) = (train.targets(&ri), syn.targets(&gi));
        let mut g = Graph::new();
        let loss = match mode {
            MixMode::Input => {
                let (x, y) = crate::mixer::mix_inputs(&train.batch(&ri)?, &syn.batch(&gi)?, &y_r, &y_g, lam)?;
                let rows = model.supervised_rows(&mut g, x, y.data())?;
                g.mean(rows)?
            }
            MixMode::Representation => {
                let xr = g.constant(train.batch(&ri)?)?;
                let xg = g.constant(syn.batch(&gi)?)?;
                let f_r = model.net.features(&mut g, xr)?;
                let f_g = model.net.features(&mut g, xg)?;
                let f_mix = g.lerp_rows(f_r, f_g, &lam32)?;
                let y = crate::mixer::lerp_rows(&y_r, &y_g, lam)?;
                let z = model.train_logits(&mut g, f_mix, y.data())?;
                let rows = model.loss_rows(&mut g, z, y.data())?;
                g.mean(rows)?
            }
            MixMode::Loss => {
                let l_r = model.supervised_rows(&mut g, train.batch(&ri)?, y_r.data())?;
                let l_g = model.supervised_rows(&mut g, syn.batch(&gi)?, y_g.data())?;
                let mixed = g.lerp_rows(l_r, l_g, &lam32)?;
                g.mean(mixed)?
            }
        };
        total += step(model, opt, lr, &mut g, loss)? * chunk.len() as f64;
    }
    Ok((total / train.len() as f64, Some(lams.iter().sum::<f64>() / lams.len() as f64)))
}

/// Trains the configured classifier. With `resume`, continues from
/// `{out}/checkpoints/last.ckpt`.
///
/// Writes `metrics.csv`, `checkpoints/{best,last}.ckpt`, `predictions.csv`
/// and `per_class.csv` for the best-validation weights, `mix_stats.csv` for
/// mixing runs, and `resolved_config`.
pub fn train_classifier(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    if !cfg.mode.is_classifier() {
        return Err(Error::config(format!("mode {:?} does not train a classifier", cfg.mode)));
    }
    let real = load_real(cfg)?;
    let synthetic = match cfg.mix.mode.filter(|_| cfg.mode.mix_mode().is_some()) {
        Some(_) => Some(load_synthetic(cfg)?),
        None => None,
    };
    let (train, val) = split_real(cfg, &real)?;
    info!("training on {} samples, validating on {}", train.len(), val.len());
    cfg.write_resolved()?;
    let ckdir = checkpoint_dir(cfg);
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let stats_path = cfg.out.join("mix_stats.csv");

    let mut model = Classifier::build(cfg)?;
    let mut rows = Vec::new();
    let mut mix_rows = Vec::new();
    let mut st = if resume {
        let ck = load_classifier_weights(&ckdir.join("last.ckpt"), cfg, &mut model)?;
        let st = restore_state(&ck, &model, cfg)?;
        rows = read_metrics(&metrics_path)?;
        rows.truncate(st.epoch);
        if synthetic.is_some() {
            mix_rows = read_mix_stats(&stats_path)?;
            mix_rows.truncate(st.epoch);
        }
        info!("resuming after epoch {}", st.epoch);
        st
    } else {
        TrainState {
            epoch: 0,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            opt: AdamW::default(),
            schedule: LrSchedule::new(cfg.schedule.kind, cfg.schedule.init_lr)?,
            stop: EarlyStopState::new(cfg.early_stop_patience, Direction::Minimize),
        }
    };

    let mut stopped_early = st.stop.epochs_since_improvement > st.stop.patience;
    let mut last_f1 = rows.last().and_then(|r| r.val_macro_f1).unwrap_or(0.0);
    while !stopped_early && st.epoch < cfg.epochs {
        let epoch = st.epoch + 1;
        let lr = st.schedule.lr(epoch);
        let (train_loss, mean_lam) = train_epoch(cfg, &mut model, &mut st.opt, lr, epoch, &train, synthetic.as_ref())?;
        let a = assess(&model, &val, cfg)?;
        st.schedule.observe(a.loss)?;
        stopped_early = st.stop.step(a.loss)? == StopDecision::Stop;
        st.epoch = epoch;
        last_f1 = a.macro_f1;
        info!(
            "epoch {epoch}: train {train_loss:.5} val {:.5} macro-F1 {:.4} lr {lr:e}",
            a.loss, a.macro_f1
        );
        rows.push(MetricsRow {
            epoch,
            train_loss,
            val_loss: Some(a.loss),
            val_macro_f1: Some(a.macro_f1),
            lr,
        });
        write_metrics(&metrics_path, &rows)?;
        if let Some(m) = mean_lam {
            mix_rows.push((epoch, m));
            write_mix_stats(&stats_path, &mix_rows)?;
        }
        if a.loss < st.best_val_loss {
            st.best_val_loss = a.loss;
            st.best_epoch = epoch;
            save_classifier(&ckdir.join("best.ckpt"), cfg, &model, &st)?;
        }
        save_classifier(&ckdir.join("last.ckpt"), cfg, &model, &st)?;
    }

    let mut best = Classifier::build(cfg)?;
    load_classifier_weights(&ckdir.join("best.ckpt"), cfg, &mut best)?;
    write_reports(&cfg.out, &val, &assess(&best, &val, cfg)?)?;
    Ok(TrainSummary {
        epochs_run: st.epoch,
        best_epoch: st.best_epoch,
        best_val_loss: st.best_val_loss,
        final_macro_f1: last_f1,
        stopped_early,
    })
}

/// Evaluates `cfg.checkpoint` on the validation split (or the whole corpus)
/// and writes `predictions.csv` and `per_class.csv` into `cfg.out`.
pub fn evaluate(cfg: &RunConfig) -> Result<Assessment> {
    cfg.validate()?;
    let mut model = Classifier::build(cfg)?;
    load_classifier_weights(&cfg.checkpoint, cfg, &mut model)?;
    let real = load_real(cfg)?;
    let ds = match cfg.eval_split {
        EvalSplit::Val => split_real(cfg, &real)?.1,
        EvalSplit::All => real,
    };
    let a = assess(&model, &ds, cfg)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    cfg.write_resolved()?;
    write_reports(&cfg.out, &ds, &a)?;
    info!("macro-F1 {:.4} over {} samples", a.macro_f1, ds.len());
    Ok(a)
}
