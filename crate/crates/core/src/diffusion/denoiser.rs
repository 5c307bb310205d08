use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{ConvGeometry, Forward, Graph, Module, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 4,
            image_size: 32,
            embed_dim: 4,
            hidden: 32,
            classes: 28,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.embed_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("denoiser image size must be positive"));
        }
        Ok(())
    }
}

/// Three 3x3 convolutions over the image concatenated with a broadcast class
/// embedding. There is no timestep input.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    cfg: DenoiserConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: [(ParamId, ParamId); 3],
}

pub fn build_denoiser<T: Element>(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Denoiser<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let embedding = store.add(
        "embedding",
        Tensor::from_fn(&[cfg.classes, cfg.embed_dim], |_| {
            T::of(StandardNormal.sample(rng))
        }),
    );
    let widths = [
        (cfg.image_channels + cfg.embed_dim, cfg.hidden, 2.0),
        (cfg.hidden, cfg.hidden, 2.0),
        (cfg.hidden, cfg.image_channels, 1.0),
    ];
    let layers = std::array::from_fn(|i| {
        let (cin, cout, gain) = widths[i];
        let std = (gain / (cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let k = store.add(
            format!("conv{}.kernel", i + 1),
            Tensor::from_fn(&[cout, cin, 3, 3], |_| T::of(normal.sample(rng))),
        );
        let b = store.add(format!("conv{}.bias", i + 1), Tensor::zeros(&[cout]));
        (k, b)
    });
    Ok(Denoiser {
        cfg: cfg.clone(),
        params: store,
        embedding,
        layers,
    })
}

impl<T: Element> Denoiser<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Predicts the noise in `x_t` (`[B, 4, S, S]`) for the given classes.
    pub fn predict(&self, g: &mut Graph<T>, x_t: Var, class_ids: &[usize]) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.image_channels {
            return Err(Error::dim(format!(
                "denoiser expects [B, {}, H, W] input, got {shape:?}",
                self.cfg.image_channels
            )));
        }
        if class_ids.len() != shape[0] {
            return Err(Error::dim(format!(
                "{} class ids for a batch of {}",
                class_ids.len(),
                shape[0]
            )));
        }
        if let Some(&bad) = class_ids.iter().find(|&&c| c >= self.cfg.classes) {
            return Err(Error::Usage(format!("class id {bad} outside 0..{}", self.cfg.classes)));
        }
        let table = g.param(&self.params, self.embedding)?;
        let emb = g.embed_broadcast(table, class_ids, shape[2], shape[3])?;
        let mut h = g.concat_channels(x_t, emb)?;
        for (i, &(k, b)) in self.layers.iter().enumerate() {
            let kv = g.param(&self.params, k)?;
            let bv = g.param(&self.params, b)?;
            h = g.conv2d(h, kv, Some(bv), ConvGeometry::new(1, 1))?;
            if i < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn cast<U: Element>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            layers: self.layers,
        }
    }
}

impl<T: Element> Module<T> for Denoiser<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

/// Gradient-check entry point: the class of sample `b` is `b % classes`.
impl<T: Element> Forward<T> for Denoiser<T> {
    fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let ids: Vec<usize> = (0..g.shape(input)[0]).map(|b| b % self.cfg.classes).collect();
        self.predict(g, input, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn output_matches_input_size() {
        let net: Denoiser<f32> = build_denoiser(&DenoiserConfig::default(), &mut rng::stream(0, "d", 0)).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[2, 4, 32, 32])).unwrap();
        let y = net.predict(&mut g, x, &[0, 27]).unwrap();
        assert_eq!(g.shape(y), [2, 4, 32, 32]);
        let x = g.constant(Tensor::zeros(&[1, 4, 32, 32])).unwrap();
        assert!(net.predict(&mut g, x, &[28]).is_err());
    }
}
