//! Split backbone, foreground map generator and the activation map
//! constraint (AMC) forward/backward wiring.
//!
//! The backbone is cut at a named stage boundary into an extractor `f1`
//! (producing the feature map `F`) and a head `f2` ending in a `C`-channel
//! map that is globally average pooled into per-category scores. A 3x3
//! convolution followed by a logistic squashing turns `F` into one foreground
//! map per category.
//!
//! During training the head is applied twice with the same parameters: once
//! to `F` and once to the background-masked features `M_bg * F`. The second
//! application only propagates gradients to its input, so the head weights are
//! never updated through the background score.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, CoreResult};
use crate::nn::{self, ConvParams, Layer, LayerCache};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor3};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageSpec {
    pub name: String,
    pub width: usize,
    /// Number of `conv3x3 + relu` pairs.
    pub convs: usize,
    /// Max-pooling factor applied at the end of the stage (1 = none).
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Name of the stage after which the generator is inserted.
    pub split_point: String,
    pub num_categories: usize,
    /// Apply a ReLU to the head's category map before pooling.
    pub head_relu: bool,
}

impl BackboneSpec {
    /// Four stages of two 3x3 convolutions and a 2x pool, split after the third.
    pub fn desk_default(num_categories: usize) -> Self {
        Self::with_widths(224, &[32, 64, 128, 256], "stage3", num_categories)
    }

    pub fn with_widths(input_size: usize, widths: &[usize], split_point: &str, num_categories: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            stages: widths
                .iter()
                .enumerate()
                .map(|(i, &width)| StageSpec {
                    name: format!("stage{}", i + 1),
                    width,
                    convs: 2,
                    downsample: 2,
                })
                .collect(),
            split_point: split_point.to_string(),
            num_categories,
            head_relu: true,
        }
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    /// Index of the last extractor stage.
    pub fn split_index(&self) -> CoreResult<usize> {
        self.stages
            .iter()
            .position(|s| s.name == self.split_point)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown split point `{}`; valid stages: {}",
                    self.split_point,
                    self.stage_names().join(", ")
                ))
            })
    }

    pub fn validate(&self) -> CoreResult<()> {
        if self.num_categories < 1 {
            return Err(CoreError::Config("num_categories must be at least 1".into()));
        }
        if self.stages.is_empty() {
            return Err(CoreError::Config("backbone needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(CoreError::Config("input size and channels must be positive".into()));
        }
        for s in &self.stages {
            if s.width == 0 || s.downsample == 0 {
                return Err(CoreError::Config(format!("stage `{}` has zero width or downsample", s.name)));
            }
        }
        let mut names: Vec<&str> = self.stage_names();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.stages.len() {
            return Err(CoreError::Config("stage names must be unique".into()));
        }
        self.split_index()?;
        let mut size = self.input_size;
        for s in &self.stages {
            size /= s.downsample;
            if size == 0 {
                return Err(CoreError::Config(format!(
                    "input size {} collapses to zero at stage `{}`",
                    self.input_size, s.name
                )));
            }
        }
        Ok(())
    }

    /// Cumulative stride of the extractor.
    pub fn feature_stride(&self) -> CoreResult<usize> {
        let split = self.split_index()?;
        Ok(self.stages[..=split].iter().map(|s| s.downsample).product())
    }

    /// Spatial size of `F` (floor division per pooling stage).
    pub fn feature_size(&self) -> CoreResult<usize> {
        let split = self.split_index()?;
        Ok(self.stages[..=split].iter().fold(self.input_size, |s, st| s / st.downsample))
    }

    pub fn feature_channels(&self) -> CoreResult<usize> {
        Ok(self.stages[self.split_index()?].width)
    }

    /// Spatial size of the head's category map.
    pub fn head_output_size(&self) -> usize {
        self.stages.iter().fold(self.input_size, |s, st| s / st.downsample)
    }
}

/// Which parameters a convolution belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Head,
    Generator,
}

/// All convolution parameters of a model, in a fixed order: extractor convs,
/// head convs, classifier, generator. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelParams<T> {
    pub convs: Vec<ConvParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(ConvParams::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(ConvParams::num_params).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.convs.iter().flat_map(ConvParams::iter)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.convs.iter_mut().flat_map(ConvParams::iter_mut)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the `f64` bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.iter() {
            for byte in v.as_f64().to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    out_channels: c.out_channels,
                    in_channels: c.in_channels,
                    kernel: c.kernel,
                    weight: c.weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    bias: c.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Per-category foreground maps, every entry strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMapSet<T> {
    maps: Tensor3<T>,
}

impl<T: Scalar> PredictionMapSet<T> {
    pub fn new(maps: Tensor3<T>) -> CoreResult<Self> {
        if !maps.data().iter().all(|&v| v > T::zero() && v < T::one()) {
            return Err(CoreError::Contract("prediction maps must lie in (0, 1)".into()));
        }
        Ok(Self { maps })
    }

    pub fn num_categories(&self) -> usize {
        self.maps.channels()
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    pub fn category(&self, c: usize) -> Tensor3<T> {
        self.maps.channel_tensor(c)
    }

    pub fn as_tensor(&self) -> &Tensor3<T> {
        &self.maps
    }
}

/// Where the background map is applied when computing the background score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskingLevel {
    /// Mask the extractor's feature map (default).
    #[default]
    Feature,
    /// Upsample the map to input resolution and mask the image.
    Image,
}

/// Everything one AMC forward pass produces for the losses.
#[derive(Debug, Clone)]
pub struct AmcOutputs<T> {
    pub maps: PredictionMapSet<T>,
    pub m_fg: Tensor3<T>,
    pub m_bg: Tensor3<T>,
    pub y: Vec<T>,
    pub y_bg: Vec<T>,
    pub y_fg: Vec<T>,
    pub s: T,
    pub s_bg: T,
    pub gt: usize,
}

/// Gradients of the objective with respect to the AMC outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcGrad<T> {
    pub d_y: Vec<T>,
    pub d_y_bg: Vec<T>,
    pub d_y_fg: Vec<T>,
    /// Gradient with respect to the mean of `M_fg`.
    pub d_area: T,
}

impl<T: Scalar> AmcGrad<T> {
    pub fn zeros(num_categories: usize) -> Self {
        Self {
            d_y: vec![T::zero(); num_categories],
            d_y_bg: vec![T::zero(); num_categories],
            d_y_fg: vec![T::zero(); num_categories],
            d_area: T::zero(),
        }
    }
}

enum BgTrace<T> {
    Feature {
        features: Tensor3<T>,
        caches: Vec<LayerCache<T>>,
    },
    Image {
        image: Tensor3<T>,
        caches: Vec<LayerCache<T>>,
    },
}

/// Intermediates kept by [`BasModel::amc_forward`] for the backward pass.
pub struct AmcTrace<T> {
    extractor: Vec<LayerCache<T>>,
    generator: nn::ConvCache<T>,
    maps: Tensor3<T>,
    head: Vec<LayerCache<T>>,
    head_out: Tensor3<T>,
    resized_fg: Tensor3<T>,
    m_bg: Tensor3<T>,
    bg: BgTrace<T>,
    bg_head_size: (usize, usize),
    gt: usize,
}

/// Single-pass inference products.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub features: FeatureMap<T>,
    pub maps: PredictionMapSet<T>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasModel<T> {
    spec: BackboneSpec,
    extractor: Vec<Layer>,
    head: Vec<Layer>,
    classifier: usize,
    generator: usize,
    masking: MaskingLevel,
    params: ModelParams<T>,
}

fn mul_plane<T: Scalar>(x: &Tensor3<T>, plane: &Tensor3<T>) -> Tensor3<T> {
    debug_assert_eq!(plane.channels(), 1);
    let n = x.plane_len();
    let p = plane.data();
    let data = x.data().iter().enumerate().map(|(i, &v)| v * p[i % n]).collect();
    Tensor3::from_vec(x.channels(), x.height(), x.width(), data).expect("shape")
}

// Sum over channels of `a * b`, giving a single plane.
fn channel_dot<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    let n = a.plane_len();
    let mut out = Tensor3::zeros(1, a.height(), a.width());
    let o = out.data_mut();
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        o[i % n] += x * y;
    }
    out
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> CoreResult<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numerical {
            what: what.to_string(),
            index: 0,
        })
    }
}

impl<T: Scalar> BasModel<T> {
    /// Deterministically initialized model for `spec`.
    pub fn build(spec: BackboneSpec, seed: u64) -> CoreResult<Self> {
        spec.validate()?;
        let split = spec.split_index()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut extractor = Vec::new();
        let mut head = Vec::new();
        let mut channels = spec.in_channels;
        for (i, stage) in spec.stages.iter().enumerate() {
            let layers = if i <= split { &mut extractor } else { &mut head };
            for _ in 0..stage.convs {
                layers.push(Layer::Conv(convs.len()));
                convs.push(ConvParams::kaiming(stage.width, channels, 3, &mut rng));
                layers.push(Layer::Relu);
                channels = stage.width;
            }
            if stage.downsample > 1 {
                layers.push(Layer::MaxPool(stage.downsample));
            }
        }
        let classifier = convs.len();
        head.push(Layer::Conv(classifier));
        convs.push(ConvParams::kaiming(spec.num_categories, channels, 1, &mut rng));
        if spec.head_relu {
            head.push(Layer::Relu);
        }
        let generator = convs.len();
        let feature_channels = spec.feature_channels()?;
        convs.push(ConvParams::gaussian(spec.num_categories, feature_channels, 3, 0.01, 0.0, &mut rng));
        Ok(Self {
            spec,
            extractor,
            head,
            classifier,
            generator,
            masking: MaskingLevel::Feature,
            params: ModelParams { convs },
        })
    }

    pub fn from_params(spec: BackboneSpec, params: ModelParams<T>) -> CoreResult<Self> {
        let mut model = Self::build(spec, 0)?;
        let expected: Vec<_> = model.params.convs.iter().map(|c| (c.out_channels, c.in_channels, c.kernel)).collect();
        let got: Vec<_> = params.convs.iter().map(|c| (c.out_channels, c.in_channels, c.kernel)).collect();
        if expected != got
            || params
                .convs
                .iter()
                .any(|c| c.weight.len() != c.out_channels * c.patch_len() || c.bias.len() != c.out_channels)
        {
            return Err(CoreError::Shape {
                expected: format!("{expected:?}"),
                got: format!("{got:?}"),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn with_masking(mut self, masking: MaskingLevel) -> Self {
        self.masking = masking;
        self
    }

    pub fn masking(&self) -> MaskingLevel {
        self.masking
    }

    pub fn set_masking(&mut self, masking: MaskingLevel) {
        self.masking = masking;
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn num_categories(&self) -> usize {
        self.spec.num_categories
    }

    pub fn generator_params(&self) -> &ConvParams<T> {
        &self.params.convs[self.generator]
    }

    pub fn generator_params_mut(&mut self) -> &mut ConvParams<T> {
        &mut self.params.convs[self.generator]
    }

    pub fn param_group(&self, conv_index: usize) -> ParamGroup {
        if conv_index == self.generator {
            ParamGroup::Generator
        } else if conv_index == self.classifier || self.head.contains(&Layer::Conv(conv_index)) {
            ParamGroup::Head
        } else {
            ParamGroup::Extractor
        }
    }

    fn check_image(&self, image: &Tensor3<T>) -> CoreResult<()> {
        let s = self.spec.input_size;
        image.ensure_shape(self.spec.in_channels, s, s)
    }

    fn check_gt(&self, gt: usize) -> CoreResult<()> {
        if gt >= self.spec.num_categories {
            return Err(CoreError::Contract(format!(
                "category {gt} out of range for {} categories",
                self.spec.num_categories
            )));
        }
        Ok(())
    }

    /// `f1`: image to feature map.
    pub fn extract(&self, image: &Tensor3<T>) -> CoreResult<FeatureMap<T>> {
        self.check_image(image)?;
        Ok(nn::forward(&self.extractor, &self.params.convs, image))
    }

    pub fn extract_batch(&self, images: &[Tensor3<T>]) -> CoreResult<Vec<FeatureMap<T>>> {
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                self.extract(img).map_err(|e| match e {
                    CoreError::Shape { expected, got } => CoreError::Shape {
                        expected,
                        got: format!("{got} at batch index {i}"),
                    },
                    other => other,
                })
            })
            .collect()
    }

    fn check_features(&self, features: &FeatureMap<T>) -> CoreResult<()> {
        let size = self.spec.feature_size()?;
        features.ensure_shape(self.spec.feature_channels()?, size, size)
    }

    /// Generator: 3x3 convolution and logistic squashing.
    pub fn generate_maps(&self, features: &FeatureMap<T>) -> CoreResult<PredictionMapSet<T>> {
        if features.channels() != self.generator_params().in_channels {
            return Err(CoreError::Shape {
                expected: format!("{} channels", self.generator_params().in_channels),
                got: format!("{} channels", features.channels()),
            });
        }
        let z = nn::conv2d(self.generator_params(), features);
        PredictionMapSet::new(z.map(nn::sigmoid))
    }

    /// `f2` up to (and including) the category map.
    pub fn head_map(&self, features: &FeatureMap<T>) -> CoreResult<Tensor3<T>> {
        self.check_features(features)?;
        Ok(nn::forward(&self.head, &self.params.convs, features))
    }

    /// `GAP(f2(F))`.
    pub fn head_logits(&self, features: &FeatureMap<T>) -> CoreResult<Vec<T>> {
        Ok(nn::global_average_pool(&self.head_map(features)?))
    }

    /// Category scores for a full image.
    pub fn image_logits(&self, image: &Tensor3<T>) -> CoreResult<Vec<T>> {
        self.head_logits(&self.extract(image)?)
    }

    pub fn infer(&self, image: &Tensor3<T>) -> CoreResult<Inference<T>> {
        let features = self.extract(image)?;
        let maps = self.generate_maps(&features)?;
        let logits = self.head_logits(&features)?;
        check_finite(&logits, "logits")?;
        Ok(Inference {
            features,
            maps,
            logits,
        })
    }

    /// Training forward pass for one image with ground-truth category `gt`.
    pub fn amc_forward(&self, image: &Tensor3<T>, gt: usize) -> CoreResult<(AmcOutputs<T>, AmcTrace<T>)> {
        self.amc_forward_impl(image, gt, &self.params)
    }

    /// Same as [`amc_forward`](Self::amc_forward) but evaluating the
    /// background path with `bg_params`. With `bg_params` held fixed this is
    /// exactly the function whose gradient `amc_backward` computes.
    pub fn amc_forward_frozen_bg(
        &self,
        image: &Tensor3<T>,
        gt: usize,
        bg_params: &ModelParams<T>,
    ) -> CoreResult<AmcOutputs<T>> {
        Ok(self.amc_forward_impl(image, gt, bg_params)?.0)
    }

    fn amc_forward_impl(
        &self,
        image: &Tensor3<T>,
        gt: usize,
        bg_params: &ModelParams<T>,
    ) -> CoreResult<(AmcOutputs<T>, AmcTrace<T>)> {
        self.check_image(image)?;
        self.check_gt(gt)?;
        let convs = &self.params.convs;
        let (features, extractor) = nn::forward_cached(&self.extractor, convs, image);
        let (z, generator) = nn::conv2d_cached(&convs[self.generator], &features);
        let maps = z.map(nn::sigmoid);
        let m_fg = maps.channel_tensor(gt);
        let m_bg = m_fg.map(|v| T::one() - v);

        let (head_out, head) = nn::forward_cached(&self.head, convs, &features);
        let y = nn::global_average_pool(&head_out);

        let (bg_out, bg) = match self.masking {
            MaskingLevel::Feature => {
                let f_bg = mul_plane(&features, &m_bg);
                let (out, caches) = nn::forward_cached(&self.head, &bg_params.convs, &f_bg);
                (out, BgTrace::Feature { features: features.clone(), caches })
            }
            MaskingLevel::Image => {
                let up = nn::resize_bilinear(&m_bg, image.height(), image.width());
                let i_bg = mul_plane(image, &up);
                let layers: Vec<Layer> = self.extractor.iter().chain(self.head.iter()).copied().collect();
                let (out, caches) = nn::forward_cached(&layers, &bg_params.convs, &i_bg);
                (out, BgTrace::Image { image: image.clone(), caches })
            }
        };
        let y_bg = nn::global_average_pool(&bg_out);

        let resized_fg = nn::resize_bilinear(&m_fg, head_out.height(), head_out.width());
        let y_fg = nn::global_average_pool(&mul_plane(&head_out, &resized_fg));

        check_finite(features.data(), "feature map")?;
        check_finite(&y, "class scores")?;
        check_finite(&y_bg, "background scores")?;
        check_finite(&y_fg, "foreground scores")?;

        let outputs = AmcOutputs {
            maps: PredictionMapSet { maps: maps.clone() },
            m_fg,
            m_bg: m_bg.clone(),
            s: y[gt],
            s_bg: y_bg[gt],
            y,
            y_bg,
            y_fg,
            gt,
        };
        let trace = AmcTrace {
            extractor,
            generator,
            maps,
            head,
            head_out,
            resized_fg,
            m_bg,
            bg,
            bg_head_size: (bg_out.height(), bg_out.width()),
            gt,
        };
        Ok((outputs, trace))
    }

    /// Back-propagates `grad` through one traced forward pass, accumulating
    /// parameter gradients into `sink`. The background path contributes to
    /// the generator and extractor but never to the head parameters.
    pub fn amc_backward(&self, trace: &AmcTrace<T>, grad: &AmcGrad<T>, sink: &mut ModelParams<T>) {
        let convs = &self.params.convs;
        let (hh, hw) = (trace.head_out.height(), trace.head_out.width());
        let (fh, fw) = (trace.maps.height(), trace.maps.width());

        // y = GAP(h), y_fg = GAP(r * h)
        let mut d_head = nn::global_average_pool_backward(&grad.d_y, hh, hw);
        let d_masked = nn::global_average_pool_backward(&grad.d_y_fg, hh, hw);
        let r = trace.resized_fg.data();
        let n = hh * hw;
        for (i, (dh, &dm)) in d_head.data_mut().iter_mut().zip(d_masked.data()).enumerate() {
            *dh += dm * r[i % n];
        }
        let d_resized = channel_dot(&d_masked, &trace.head_out);
        let mut d_fg = nn::resize_bilinear_backward(&d_resized, fh, fw);
        let area_grad = grad.d_area / T::from_usize(fh * fw).expect("plane size");
        d_fg.data_mut().iter_mut().for_each(|v| *v += area_grad);

        // Background path: input gradients only.
        let (bh, bw) = trace.bg_head_size;
        let d_bg_out = nn::global_average_pool_backward(&grad.d_y_bg, bh, bw);
        let mut d_features = Tensor3::zeros(convs[self.generator].in_channels, fh, fw);
        match &trace.bg {
            BgTrace::Feature { features, caches } => {
                let d_fbg = nn::backward(&self.head, convs, caches, d_bg_out, None);
                let d_bg = channel_dot(&d_fbg, features);
                d_features = mul_plane(&d_fbg, &trace.m_bg);
                for (a, b) in d_fg.data_mut().iter_mut().zip(d_bg.data()) {
                    *a -= *b;
                }
            }
            BgTrace::Image { image, caches } => {
                let layers: Vec<Layer> = self.extractor.iter().chain(self.head.iter()).copied().collect();
                let d_ibg = nn::backward(&layers, convs, caches, d_bg_out, None);
                let d_up = channel_dot(&d_ibg, image);
                let d_bg = nn::resize_bilinear_backward(&d_up, fh, fw);
                for (a, b) in d_fg.data_mut().iter_mut().zip(d_bg.data()) {
                    *a -= *b;
                }
            }
        }

        let d_from_head = nn::backward(&self.head, convs, &trace.head, d_head, Some(&mut sink.convs));
        for (a, b) in d_features.data_mut().iter_mut().zip(d_from_head.data()) {
            *a += *b;
        }

        // Generator: only the ground-truth channel receives gradient.
        let categories = trace.maps.channels();
        let mut d_z = Tensor3::zeros(categories, fh, fw);
        let m = trace.maps.channel(trace.gt);
        for (i, v) in d_z.channel_mut(trace.gt).iter_mut().enumerate() {
            *v = d_fg.data()[i] * m[i] * (T::one() - m[i]);
        }
        let d_from_gen = nn::conv2d_backward(
            &convs[self.generator],
            &trace.generator,
            &d_z,
            Some(&mut sink.convs[self.generator]),
        );
        for (a, b) in d_features.data_mut().iter_mut().zip(d_from_gen.data()) {
            *a += *b;
        }
        nn::backward(&self.extractor, convs, &trace.extractor, d_features, Some(&mut sink.convs));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_spec() -> BackboneSpec {
        let mut spec = BackboneSpec::with_widths(8, &[3, 4], "stage1", 3);
        for s in &mut spec.stages {
            s.convs = 1;
        }
        spec
    }

    fn random_image(seed: u64, size: usize) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(3, size, size, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_shape_law() {
        let spec = BackboneSpec::desk_default(200);
        assert_eq!(spec.feature_size().unwrap(), 28);
        assert_eq!(spec.feature_stride().unwrap(), 8);
        assert_eq!(spec.feature_channels().unwrap(), 128);
        let model = BasModel::<f32>::build(spec, 1).unwrap();
        assert_eq!(model.generator_params().out_channels, 200);
    }

    #[test]
    fn unknown_split_point_lists_stages() {
        let mut spec = BackboneSpec::desk_default(5);
        spec.split_point = "conv4_3".into();
        match BasModel::<f32>::build(spec, 0) {
            Err(CoreError::Config(msg)) => assert!(msg.contains("stage1, stage2, stage3, stage4"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = BasModel::<f32>::build(toy_spec(), 11).unwrap();
        let b = BasModel::<f32>::build(toy_spec(), 11).unwrap();
        let c = BasModel::<f32>::build(toy_spec(), 12).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn extract_shapes_and_errors() {
        let model = BasModel::<f64>::build(toy_spec(), 0).unwrap();
        let f = model.extract(&random_image(1, 8)).unwrap();
        assert_eq!(f.shape(), (3, 4, 4));
        assert!(matches!(model.extract(&random_image(1, 9)), Err(CoreError::Shape { .. })));
        let err = model.extract_batch(&[random_image(1, 8), random_image(2, 6)]).unwrap_err();
        assert!(format!("{err}").contains("batch index 1"));
    }

    #[test]
    fn zero_generator_gives_half() {
        let mut model = BasModel::<f64>::build(toy_spec(), 0).unwrap();
        let g = model.generator_params_mut();
        g.weight.iter_mut().for_each(|w| *w = 0.0);
        g.bias.iter_mut().for_each(|b| *b = 0.0);
        let f = model.extract(&random_image(3, 8)).unwrap();
        let maps = model.generate_maps(&f).unwrap();
        assert_eq!((maps.height(), maps.width(), maps.num_categories()), (4, 4, 3));
        assert!(maps.as_tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn coupled_maps_sum_to_one() {
        let model = BasModel::<f32>::build(toy_spec(), 4).unwrap();
        let (out, _) = model.amc_forward(&random_image(5, 8).cast(), 2).unwrap();
        for (a, b) in out.m_fg.data().iter().zip(out.m_bg.data()) {
            assert_eq!(a + b, 1.0);
        }
        assert_eq!(out.s, out.y[2]);
        assert_eq!(out.s_bg, out.y_bg[2]);
    }

    #[test]
    fn gt_out_of_range_is_contract_error() {
        let model = BasModel::<f64>::build(toy_spec(), 0).unwrap();
        assert!(matches!(model.amc_forward(&random_image(1, 8), 3), Err(CoreError::Contract(_))));
    }

    #[test]
    fn head_weights_shared_between_paths() {
        let mut model = BasModel::<f64>::build(toy_spec(), 6).unwrap();
        let img = random_image(7, 8);
        let (before, _) = model.amc_forward(&img, 0).unwrap();
        let classifier = model.classifier;
        model.params_mut().convs[classifier].bias[0] += 1.0;
        let (after, _) = model.amc_forward(&img, 0).unwrap();
        assert_ne!(after.y[0], before.y[0]);
        assert_ne!(after.y_bg[0], before.y_bg[0]);
    }

    #[test]
    fn param_groups() {
        let model = BasModel::<f32>::build(toy_spec(), 0).unwrap();
        let groups: Vec<_> = (0..model.params().convs.len()).map(|i| model.param_group(i)).collect();
        assert_eq!(
            groups,
            vec![ParamGroup::Extractor, ParamGroup::Head, ParamGroup::Head, ParamGroup::Generator]
        );
    }
}
