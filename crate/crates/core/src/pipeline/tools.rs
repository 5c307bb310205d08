use std::fs;

use log::info;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, Forward, GradCheckConfig, GradCheckReport, Graph, ParamStore, Var};
use crate::backbone::{build_backbone, BackboneConfig, Depth};
use crate::config::RunConfig;
use crate::data::{synth_corpus, SynthOptions, NUM_CLASSES};
use crate::diffusion::{build_denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::losses::{arcface_logits, bce_with_logits, focal_loss, ArcMargin, FocalParams};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Writes the procedural corpus in the HPA layout: `{out}/train.csv` and
/// `{out}/train/{id}_{channel}.png`. Returns the number of samples.
pub fn synth_data(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let opts = SynthOptions {
        multi_label: cfg.synth.multi_label,
        ..SynthOptions::single_label(cfg.synth.per_class, cfg.synth.size)
    };
    let ds = synth_corpus(cfg.seed, &opts)?;
    ds.write_hpa(&cfg.out.join("train"), &cfg.out.join("train.csv"))?;
    cfg.write_resolved()?;
    info!("wrote {} samples to {}", ds.len(), cfg.out.display());
    Ok(ds.len())
}

/// Relative-error bound every float64 check has to meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn gaussian(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn multi_hot(rows: usize, r: &mut Rng) -> Vec<f64> {
    (0..rows * NUM_CLASSES)
        .map(|_| if r.random_bool(0.2) { 1.0 } else { 0.0 })
        .collect()
}

/// Scalar probe `sum(w * net(x))` with a fixed random `w`.
fn probe<N: Forward<f64>>(net: &N, input: &Tensor<f64>, r: &mut Rng) -> Result<impl Fn(&N, &mut Graph<f64>) -> Result<Var>> {
    let mut g = Graph::inference();
    let x = g.constant(input.clone())?;
    let y = net.forward(&mut g, x)?;
    let w = gaussian(g.shape(y), r);
    let input = input.clone();
    Ok(move |n: &N, g: &mut Graph<f64>| {
        let x = g.constant(input.clone())?;
        let y = n.forward(g, x)?;
        let wv = g.constant(w.clone())?;
        let p = g.mul(y, wv)?;
        g.sum(p)
    })
}

/// Finite-difference checks of the denoiser, a two-block backbone and each
/// loss, in float64. Larger tensors are checked on a seeded sample of
/// entries.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut r = rng::stream(seed, "gradcheck", 0);
    let mut out = Vec::new();
    let cfg = GradCheckConfig {
        seed,
        step: 1e-4,
        ..GradCheckConfig::new(GRADCHECK_TOLERANCE)
    };

    let dcfg = DenoiserConfig {
        image_size: 6,
        embed_dim: 2,
        hidden: 4,
        ..Default::default()
    };
    let mut den = build_denoiser::<f64>(&dcfg, &mut r)?;
    let x = gaussian(&[2, 4, 6, 6], &mut r);
    let obj = probe(&den, &x, &mut r)?;
    out.push(("denoiser".to_string(), grad_check(&mut den, obj, &cfg.clone().sampled(48))?));

    let bcfg = BackboneConfig::new(Depth::Micro, 0.125, 32);
    let mut net = build_backbone::<f64>(&bcfg, &mut r)?;
    let x = gaussian(&[2, 4, 32, 32], &mut r);
    let obj = probe(&net, &x, &mut r)?;
    out.push(("micro backbone".to_string(), grad_check(&mut net, obj, &cfg.clone().sampled(24))?));

    let rows = 3;
    let mut logits = ParamStore::<f64>::new();
    let z = logits.add("logits", gaussian(&[rows, NUM_CLASSES], &mut r).map(|v| 2.0 * v));
    let y = multi_hot(rows, &mut r);
    let bce = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let zv = g.param(s, z)?;
        bce_with_logits(g, zv, &y)
    };
    out.push(("bce loss".to_string(), grad_check(&mut logits, bce, &cfg)?));
    let focal = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let zv = g.param(s, z)?;
        focal_loss(g, zv, &y, &FocalParams::default())
    };
    out.push(("focal loss".to_string(), grad_check(&mut logits, focal, &cfg)?));

    let mut arc = ParamStore::<f64>::new();
    let f = arc.add("features", gaussian(&[rows, 6], &mut r));
    let c = arc.add("centers", gaussian(&[NUM_CLASSES, 6], &mut r));
    let head = ArcMargin::new(4.0, 0.5)?;
    let arcface = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let fv = g.param(s, f)?;
        let cv = g.param(s, c)?;
        let logits = arcface_logits(g, fv, cv, &head, &y)?;
        bce_with_logits(g, logits, &y)
    };
    out.push(("arcface loss".to_string(), grad_check(&mut arc, arcface, &cfg)?));
    Ok(out)
}

/// Runs [`gradient_suite`], writes `{out}/gradcheck.txt` and fails when any
/// check exceeds the tolerance.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<(String, GradCheckReport)>> {
    cfg.validate()?;
    let suite = gradient_suite(cfg.seed)?;
    let mut text = String::new();
    for (name, report) in &suite {
        text.push_str(&format!("== {name}\n{report}\n\n"));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join("gradcheck.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    cfg.write_resolved()?;
    if let Some((name, _)) = suite.iter().find(|(_, r)| !r.passed()) {
        return Err(Error::GradCheck(format!("{name} exceeds tolerance; see {}", path.display())));
    }
    Ok(suite)
}
