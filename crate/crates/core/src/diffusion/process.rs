use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::autodiff::{Graph, Module, Var};
use crate::data::{write_manifest, write_sample_pngs, MultiChannelImage, ValueRange, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Element, Tensor};

/// Anything that predicts the noise component of a noised image batch.
pub trait EpsilonModel<T: Element> {
    fn predict_eps(&self, g: &mut Graph<T>, x_t: Var, class_ids: &[usize]) -> Result<Var>;

    /// Spatial resolution the model is trained at.
    fn resolution(&self) -> usize;

    fn classes(&self) -> usize;

    fn is_finite(&self) -> bool {
        true
    }
}

impl<T: Element> EpsilonModel<T> for Denoiser<T> {
    fn predict_eps(&self, g: &mut Graph<T>, x_t: Var, class_ids: &[usize]) -> Result<Var> {
        self.predict(g, x_t, class_ids)
    }

    fn resolution(&self) -> usize {
        self.config().image_size
    }

    fn classes(&self) -> usize {
        self.config().classes
    }

    fn is_finite(&self) -> bool {
        self.params().all_finite()
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`, elementwise.
pub fn q_sample<T: Element>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::dim(format!(
            "q_sample: eps shape {:?} differs from x0 shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| T::of(a * x.as_f64() + b * e.as_f64()))
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Per-sample timesteps and noise used by one loss evaluation.
#[derive(Clone, Debug)]
pub struct NoiseDraws<T> {
    pub steps: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Element> NoiseDraws<T> {
    /// For each sample: `t ~ U{1..T}`, then its `eps ~ N(0, 1)`.
    pub fn draw(shape: &[usize], schedule: &NoiseSchedule, rng: &mut Rng) -> Self {
        let per = shape[1..].iter().product::<usize>();
        let mut steps = Vec::with_capacity(shape[0]);
        let mut eps = Vec::with_capacity(shape[0] * per);
        for _ in 0..shape[0] {
            steps.push(rng.random_range(1..=schedule.steps()));
            eps.extend((0..per).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))));
        }
        Self {
            steps,
            eps: Tensor::new(shape.to_vec(), eps).expect("shape product"),
        }
    }
}

/// Noise-prediction MSE on a batch `x0` in `[-1, 1]`.
pub fn denoise_loss<T: Element, M: EpsilonModel<T>>(
    g: &mut Graph<T>,
    net: &M,
    x0: &Tensor<T>,
    class_ids: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    check_resolution(net, x0)?;
    let draws = NoiseDraws::draw(x0.shape(), schedule, rng);
    denoise_loss_with_draws(g, net, x0, class_ids, schedule, &draws)
}

pub fn denoise_loss_with_draws<T: Element, M: EpsilonModel<T>>(
    g: &mut Graph<T>,
    net: &M,
    x0: &Tensor<T>,
    class_ids: &[usize],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws<T>,
) -> Result<Var> {
    check_resolution(net, x0)?;
    if draws.steps.len() != x0.batch() {
        return Err(Error::dim("one timestep per sample required"));
    }
    let per = x0.len() / x0.batch();
    let mut noised = Vec::with_capacity(x0.len());
    for (b, &t) in draws.steps.iter().enumerate() {
        let row = |v: &Tensor<T>| Tensor::new(vec![per], v.data()[b * per..(b + 1) * per].to_vec());
        noised.extend(q_sample(&row(x0)?, t, &row(&draws.eps)?, schedule)?.into_data());
    }
    let x_t = g.constant(Tensor::new(x0.shape().to_vec(), noised)?)?;
    let pred = net.predict_eps(g, x_t, class_ids)?;
    let target = g.constant(draws.eps.clone())?;
    g.mse(pred, target)
}

fn check_resolution<T: Element, M: EpsilonModel<T>>(net: &M, x0: &Tensor<T>) -> Result<()> {
    let s = net.resolution();
    let [_, c, h, w] = x0.dims4("diffusion batch")?;
    if (c, h, w) != (CHANNELS, s, s) {
        return Err(Error::config(format!(
            "diffusion expects {CHANNELS}x{s}x{s} images, got {c}x{h}x{w}"
        )));
    }
    Ok(())
}

/// One class-conditional output of the reverse process, in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub image: MultiChannelImage,
    pub class_id: usize,
}

impl GeneratedSample {
    /// One-hot target over `classes` entries.
    pub fn label(&self, classes: usize) -> Vec<f32> {
        let mut v = vec![0.0; classes];
        v[self.class_id] = 1.0;
        v
    }
}

/// Ancestral sampling for one image, drawing all noise from `rng`.
pub fn sample<M: EpsilonModel<f32>>(
    net: &M,
    class_id: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<GeneratedSample> {
    let image = sample_batch(net, &[class_id], schedule, std::slice::from_mut(rng))?
        .pop()
        .expect("one image");
    Ok(GeneratedSample { image, class_id })
}

/// Ancestral sampling of several images at once. Image `i` draws its start
/// noise and every per-step noise from `rngs[i]` only, so the result for an
/// image does not depend on what else is in the batch.
pub fn sample_batch<M: EpsilonModel<f32>>(
    net: &M,
    class_ids: &[usize],
    schedule: &NoiseSchedule,
    rngs: &mut [Rng],
) -> Result<Vec<MultiChannelImage>> {
    if rngs.len() != class_ids.len() {
        return Err(Error::Usage("one rng stream per generated image required".into()));
    }
    if !net.is_finite() {
        return Err(Error::Generation("model parameters contain non-finite values".into()));
    }
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= net.classes()) {
        return Err(Error::Usage(format!("class id {bad} outside 0..{}", net.classes())));
    }
    let s = net.resolution();
    let per = CHANNELS * s * s;
    let mut x: Vec<f64> = Vec::with_capacity(class_ids.len() * per);
    for r in rngs.iter_mut() {
        x.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
    }
    for t in (1..=schedule.steps()).rev() {
        let input = Tensor::new(vec![class_ids.len(), CHANNELS, s, s], x.iter().map(|&v| v as f32).collect())?;
        let mut g = Graph::inference();
        let xv = g.constant(input)?;
        let eps = net.predict_eps(&mut g, xv, class_ids).map_err(|e| match e {
            Error::NonFinite { op } => Error::Generation(format!("non-finite noise prediction in `{op}`")),
            other => other,
        })?;
        let eps = g.value(eps).data();
        let c1 = 1.0 / schedule.alpha(t).sqrt();
        let c2 = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let sigma = schedule.beta(t).sqrt();
        for (b, r) in rngs.iter_mut().enumerate() {
            for i in b * per..(b + 1) * per {
                let z = if t > 1 { r.sample::<f64, _>(StandardNormal) } else { 0.0 };
                x[i] = c1 * (x[i] - c2 * eps[i] as f64) + sigma * z;
            }
        }
    }
    x.chunks(per)
        .map(|img| {
            let px = img.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
            MultiChannelImage::new(s, ValueRange::Symmetric, px)
        })
        .collect()
}

/// Seed stream of generated image `index` of `class_id`.
pub fn generation_stream(seed: u64, class_id: usize, index: usize, per_class: usize) -> Rng {
    rng::stream(seed, "generate", (class_id * per_class + index) as u64)
}

/// Samples `per_class` images for every class and writes
/// `{out_dir}/generated/{class}_{index}_{channel}.png` plus
/// `{out_dir}/generated.csv`.
pub fn generate_dataset<M: EpsilonModel<f32>>(
    net: &M,
    schedule: &NoiseSchedule,
    per_class: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<GeneratedSample>> {
    const CHUNK: usize = 16;
    if per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    let image_dir = out_dir.join("generated");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut samples = Vec::with_capacity(per_class * net.classes());
    let mut ids = Vec::with_capacity(samples.capacity());
    for class_id in 0..net.classes() {
        for start in (0..per_class).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(per_class)).collect();
            let mut rngs: Vec<Rng> = idx
                .iter()
                .map(|&i| generation_stream(seed, class_id, i, per_class))
                .collect();
            let images = sample_batch(net, &vec![class_id; idx.len()], schedule, &mut rngs)?;
            for (i, image) in idx.into_iter().zip(images) {
                let id = format!("{class_id}_{i}");
                write_sample_pngs(&image_dir, &id, &image)?;
                ids.push((id, [class_id]));
                samples.push(GeneratedSample { image, class_id });
            }
        }
    }
    write_manifest(
        &out_dir.join("generated.csv"),
        ids.iter().map(|(id, l)| (id.as_str(), l.as_slice())),
    )?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;

    struct Zero;

    impl EpsilonModel<f32> for Zero {
        fn predict_eps(&self, g: &mut Graph<f32>, x_t: Var, _: &[usize]) -> Result<Var> {
            let v = g.value(x_t).map(|_| 0.0);
            g.constant(v)
        }
        fn resolution(&self) -> usize {
            4
        }
        fn classes(&self) -> usize {
            28
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f64>::full(&[3], 0.5);
        let zero = Tensor::<f64>::zeros(&[3]);
        let out = q_sample(&x0, 4, &zero, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == s.alpha_bar(4).sqrt() * 0.5));
        let e = Tensor::<f64>::full(&[3], -1.5);
        let out = q_sample(&zero, 4, &e, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == (1.0 - s.alpha_bar(4)).sqrt() * -1.5));
        assert!(matches!(q_sample(&x0, 11, &zero, &s), Err(Error::Usage(_))));
    }

    #[test]
    fn single_step_zero_net_closed_form() {
        let s = make_linear_schedule(1, 0.3, 0.3).unwrap();
        let got = sample(&Zero, 3, &s, &mut rng::stream(9, "x", 0)).unwrap();
        let mut r = rng::stream(9, "x", 0);
        for &v in got.image.pixels() {
            let x1: f64 = r.sample(StandardNormal);
            assert_eq!(v, (x1 / 0.7f64.sqrt()).clamp(-1.0, 1.0) as f32);
        }
        assert_eq!(got.label(28).iter().sum::<f32>(), 1.0);
        assert_eq!(got.label(28)[3], 1.0);
    }

    #[test]
    fn batch_equals_singles() {
        let s = make_linear_schedule(5, 1e-3, 0.05).unwrap();
        let mut rngs: Vec<Rng> = (0..3).map(|i| rng::stream(1, "g", i)).collect();
        let batch = sample_batch(&Zero, &[0, 1, 2], &s, &mut rngs).unwrap();
        for i in 0..3 {
            let one = sample(&Zero, i, &s, &mut rng::stream(1, "g", i as u64)).unwrap();
            assert_eq!(one.image, batch[i]);
        }
    }

    #[test]
    fn wrong_resolution_is_config_error() {
        let s = make_linear_schedule(5, 1e-3, 0.05).unwrap();
        let mut g = Graph::new();
        let x0 = Tensor::<f32>::zeros(&[1, 4, 8, 8]);
        let r = denoise_loss(&mut g, &Zero, &x0, &[0], &s, &mut rng::stream(0, "l", 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
