//! Residual convolutional feature extractors for 4-channel images, split
//! into a feature extractor and a linear classification head.
//!
//! Topology follows the basic-block residual networks (18- and 34-layer
//! profiles) with two changes: every batch normalization is replaced by a
//! per-channel learnable affine map (scale initialised to 1, shift to 0),
//! and small inputs (at most 64 px) get a 3x3 stride-1 stem instead of the
//! 7x7 stride-2 one. There is no max-pool after the stem. Weights always
//! start from random initialization.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Forward, Graph, Module, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    /// Basic blocks per stage `[2, 2, 2, 2]`.
    R18,
    /// Basic blocks per stage `[3, 4, 6, 3]`.
    R34,
    /// Two stages of one block each; used for gradient verification.
    Micro,
}

impl Depth {
    pub fn stage_blocks(self) -> &'static [usize] {
        match self {
            Depth::R18 => &[2, 2, 2, 2],
            Depth::R34 => &[3, 4, 6, 3],
            Depth::Micro => &[1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: Depth,
    pub in_channels: usize,
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn new(depth: Depth, width_multiplier: f64, input_size: usize) -> Self {
        Self {
            depth,
            in_channels: 4,
            width_multiplier,
            num_classes: 28,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.width_multiplier.is_finite() || self.width_multiplier * 64.0 < 8.0 {
            return Err(Error::config(format!(
                "width multiplier {} gives fewer than 8 stem channels",
                self.width_multiplier
            )));
        }
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return Err(Error::config(format!(
                "input size {} must be at least 32 and a multiple of 32",
                self.input_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("channel and class counts must be positive"));
        }
        Ok(())
    }

    /// Channel width of each stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth.stage_blocks().len())
            .map(|s| ((64 << s) as f64 * self.width_multiplier).round() as usize)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths().last().expect("at least one stage")
    }

    fn large_stem(&self) -> bool {
        self.input_size > 64
    }
}

/// Bias-free convolution followed by a per-channel affine map.
#[derive(Clone, Debug)]
struct ConvUnit {
    kernel: ParamId,
    scale: ParamId,
    shift: ParamId,
    geom: ConvGeometry,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let kernel = Tensor::from_fn(&[cout, cin, k, k], |_| T::of(normal.sample(rng)));
        Self {
            kernel: store.add(format!("{name}.kernel"), kernel),
            scale: store.add(format!("{name}.scale"), Tensor::full(&[cout], T::one())),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[cout])),
            geom,
        }
    }

    fn forward<T: Element>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel)?;
        let y = g.conv2d(x, k, None, self.geom)?;
        let s = g.param(store, self.scale)?;
        let b = g.param(store, self.shift)?;
        g.channel_affine(y, s, b)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

impl BasicBlock {
    fn forward<T: Element>(&self, store: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(store, g, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(store, g, h)?;
        let skip = match &self.shortcut {
            Some(unit) => unit.forward(store, g, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        g.relu(y)
    }
}

/// Feature extractor plus linear head; `logits(x) == head(features(x))`.
#[derive(Clone, Debug)]
pub struct SplitNetwork<T> {
    cfg: BackboneConfig,
    params: ParamStore<T>,
    stem: ConvUnit,
    blocks: Vec<BasicBlock>,
    head_weight: ParamId,
    head_bias: ParamId,
}

pub fn build_backbone<T: Element>(cfg: &BackboneConfig, rng: &mut Rng) -> Result<SplitNetwork<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let widths = cfg.stage_widths();
    let stem = if cfg.large_stem() {
        ConvUnit::build(&mut store, rng, "stem", cfg.in_channels, widths[0], 7, ConvGeometry::truncating(2, 3))
    } else {
        ConvUnit::build(&mut store, rng, "stem", cfg.in_channels, widths[0], 3, ConvGeometry::new(1, 1))
    };
    let mut blocks = Vec::new();
    let mut cin = widths[0];
    for (s, (&n, &cout)) in cfg.depth.stage_blocks().iter().zip(&widths).enumerate() {
        for b in 0..n {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{}", s + 1, b + 1);
            let geom = if stride == 2 {
                ConvGeometry::truncating(2, 1)
            } else {
                ConvGeometry::new(1, 1)
            };
            let conv1 = ConvUnit::build(&mut store, rng, &format!("{name}.conv1"), cin, cout, 3, geom);
            let conv2 = ConvUnit::build(&mut store, rng, &format!("{name}.conv2"), cout, cout, 3, ConvGeometry::new(1, 1));
            let shortcut = (stride != 1 || cin != cout).then(|| {
                ConvUnit::build(
                    &mut store,
                    rng,
                    &format!("{name}.shortcut"),
                    cin,
                    cout,
                    1,
                    ConvGeometry::truncating(stride, 0),
                )
            });
            blocks.push(BasicBlock { conv1, conv2, shortcut });
            cin = cout;
        }
    }
    let f = cfg.feature_dim();
    let bound = 1.0 / (f as f64).sqrt();
    let uniform = Uniform::new(-bound, bound).expect("valid range");
    let head_weight = store.add(
        "head.weight",
        Tensor::from_fn(&[cfg.num_classes, f], |_| T::of(uniform.sample(rng))),
    );
    let head_bias = store.add(
        "head.bias",
        Tensor::from_fn(&[cfg.num_classes], |_| T::of(uniform.sample(rng))),
    );
    Ok(SplitNetwork {
        cfg: cfg.clone(),
        params: store,
        stem,
        blocks,
        head_weight,
        head_bias,
    })
}

impl<T: Element> SplitNetwork<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_bias
    }

    /// Image batch `[B, C, S, S]` to feature vectors `[B, F]`.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let expected = [self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::dim(format!(
                "backbone expects [B, {}, {}, {}] input, got {:?}",
                expected[0], expected[1], expected[2], shape
            )));
        }
        let h = self.stem.forward(&self.params, g, x)?;
        let mut h = g.relu(h)?;
        for block in &self.blocks {
            h = block.forward(&self.params, g, h)?;
        }
        g.global_avg_pool(h)
    }

    /// Feature vectors `[B, F]` to class logits `[B, classes]`.
    pub fn logits(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let w = g.param(&self.params, self.head_weight)?;
        let b = g.param(&self.params, self.head_bias)?;
        g.linear(features, w, Some(b))
    }

    /// Zeroes every convolution kernel and affine shift of the residual
    /// blocks (not the stem or shortcuts).
    pub fn zero_block_weights(&mut self) {
        let units: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.conv1.kernel, b.conv2.kernel, b.conv1.shift, b.conv2.shift])
            .collect();
        for id in units {
            self.params.value_mut(id).data_mut().fill(T::zero());
        }
    }

    /// Runs only the residual block at `index` on `x`.
    pub fn block_forward(&self, g: &mut Graph<T>, index: usize, x: Var) -> Result<Var> {
        self.blocks[index].forward(&self.params, g, x)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Builds a network of the same architecture around another parameter
    /// precision, sharing ids.
    pub fn cast<U: Element>(&self) -> SplitNetwork<U> {
        SplitNetwork {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }
}

impl<T: Element> Module<T> for SplitNetwork<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

impl<T: Element> Forward<T> for SplitNetwork<T> {
    fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let f = self.features(g, input)?;
        self.logits(g, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net(depth: Depth, width: f64) -> SplitNetwork<f32> {
        build_backbone(&BackboneConfig::new(depth, width, 32), &mut rng::stream(3, "init", 0)).unwrap()
    }

    #[test]
    fn feature_dims() {
        assert_eq!(BackboneConfig::new(Depth::R18, 1.0, 32).feature_dim(), 512);
        assert_eq!(BackboneConfig::new(Depth::R18, 0.25, 32).feature_dim(), 128);
        assert_eq!(BackboneConfig::new(Depth::R34, 0.25, 32).feature_dim(), 128);
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::new(Depth::R18, 0.1, 32).validate().is_err());
        assert!(BackboneConfig::new(Depth::R18, 0.25, 48).validate().is_err());
        assert!(BackboneConfig::new(Depth::R18, 0.25, 16).validate().is_err());
        assert!(BackboneConfig::new(Depth::R18, 0.125, 64).validate().is_ok());
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(net(Depth::R18, 0.25).params().value_bytes(), net(Depth::R18, 0.25).params().value_bytes());
    }

    #[test]
    fn r34_has_sixteen_blocks() {
        assert_eq!(net(Depth::R34, 0.125).num_blocks(), 16);
        assert_eq!(net(Depth::R18, 0.125).num_blocks(), 8);
    }

    #[test]
    fn output_shapes_and_identical_rows() {
        let n = net(Depth::R18, 0.25);
        let img = Tensor::<f32>::from_fn(&[4, 32, 32], |i| ((i * 7) % 13) as f32 / 13.0);
        let batch = Tensor::stack(&[img.clone(), img.clone(), img]).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(batch).unwrap();
        let f = n.features(&mut g, x).unwrap();
        assert_eq!(g.shape(f), [3, 128]);
        let rows: Vec<&[f32]> = g.value(f).data().chunks(128).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
        let z = n.logits(&mut g, f).unwrap();
        assert_eq!(g.shape(z), [3, 28]);
    }

    #[test]
    fn wrong_resolution_is_a_dimension_error() {
        let n = net(Depth::Micro, 0.125);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 4, 64, 64])).unwrap();
        assert!(matches!(n.features(&mut g, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn large_inputs_use_strided_stem() {
        let cfg = BackboneConfig::new(Depth::Micro, 0.125, 128);
        let n: SplitNetwork<f32> = build_backbone(&cfg, &mut rng::stream(0, "init", 0)).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 4, 128, 128], 0.5)).unwrap();
        let f = n.features(&mut g, x).unwrap();
        assert_eq!(g.shape(f), [1, 16]);
    }
}
