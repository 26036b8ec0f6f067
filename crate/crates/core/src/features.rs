//! Dense feature maps and the convolutional feature extractor.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MapExtent, Point};
use crate::nn::{Adam, Conv2d, ConvGrad, Tensor3};

/// `height × width × dim` features, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Image pixels per feature cell.
    pub stride: u32,
    pub data: Vec<f32>,
}

/// The four lattice neighbours of a fractional point and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Bilinear {
    pub cells: [(usize, usize); 4],
    pub weights: [f64; 4],
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize, stride: u32) -> Self {
        FeatureMap {
            height,
            width,
            dim,
            stride,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn extent(&self) -> MapExtent {
        MapExtent::new(self.height, self.width)
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn bilinear(&self, p: Point) -> Result<Bilinear> {
        if !self.extent().contains(p) {
            return Err(Error::Input(format!(
                "point ({}, {}) outside {}x{} feature map",
                p.x, p.y, self.height, self.width
            )));
        }
        let x0 = (p.x.floor() as usize).min(self.width - 1);
        let y0 = (p.y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        Ok(Bilinear {
            cells: [(x0, y0), (x1, y0), (x0, y1), (x1, y1)],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        })
    }

    /// Bilinearly interpolated feature vector at a fractional point.
    pub fn feature_at(&self, p: Point) -> Result<Vec<f64>> {
        let b = self.bilinear(p)?;
        Ok(self.gather(&b))
    }

    pub fn gather(&self, b: &Bilinear) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        for ((x, y), w) in b.cells.iter().zip(b.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(*x, *y)) {
                *o += w * *v as f64;
            }
        }
        out
    }
}

/// Gradient with respect to a [`FeatureMap`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrad {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrad {
    pub fn zeros_like(f: &FeatureMap) -> Self {
        FeatureGrad {
            height: f.height,
            width: f.width,
            dim: f.dim,
            data: vec![0.0; f.data.len()],
        }
    }

    #[inline]
    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Adds `grad` through the interpolation weights of `b`.
    pub fn scatter(&mut self, b: &Bilinear, grad: &[f64]) {
        for ((x, y), w) in b.cells.iter().zip(b.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, g) in self.cell_mut(*x, *y).iter_mut().zip(grad) {
                *o += w * g;
            }
        }
    }

    pub fn add_assign(&mut self, other: &FeatureGrad) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Anything that turns an image into a feature map at a known stride.
pub trait FeatureExtractor {
    fn stride(&self) -> u32;
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageTensor) -> Result<FeatureMap>;
}

/// Normalized `3 × h × w` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Tensor3);

impl ImageTensor {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor3::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.data[(c * h + y as usize) * w + x as usize] = (px[c] as f32 / 255.0 - 0.5) / 0.25;
            }
        }
        ImageTensor(t)
    }

    pub fn height(&self) -> usize {
        self.0.h
    }

    pub fn width(&self) -> usize {
        self.0.w
    }

    /// Mirror along the vertical axis.
    pub fn flipped(&self) -> Self {
        let t = &self.0;
        let mut out = Tensor3::zeros(t.c, t.h, t.w);
        for c in 0..t.c {
            for y in 0..t.h {
                for x in 0..t.w {
                    out.data[(c * t.h + y) * t.w + x] = t.data[(c * t.h + y) * t.w + (t.w - 1 - x)];
                }
            }
        }
        ImageTensor(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// 4 or 8.
    pub stride: u32,
    pub stem_width: usize,
    pub feature_dim: usize,
    /// One entry per 3×3 body layer.
    pub body_dilations: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            stride: 8,
            stem_width: 16,
            feature_dim: 32,
            body_dilations: vec![1, 2, 4, 1],
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 && self.stride != 8 {
            return Err(Error::Config(format!("stride must be 4 or 8, got {}", self.stride)));
        }
        if self.stem_width == 0 || self.feature_dim == 0 {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        if self.body_dilations.iter().any(|d| *d == 0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(())
    }
}

/// Strided 3×3 stem followed by 3×3 body layers, ReLU after every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvExtractor {
    pub config: ExtractorConfig,
    pub layers: Vec<Conv2d>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ExtractorTrace {
    input_hw: Vec<(usize, usize)>,
    cols: Vec<Vec<f32>>,
    outputs: Vec<Tensor3>,
}

#[derive(Debug, Clone)]
pub struct ExtractorGrad {
    pub layers: Vec<ConvGrad>,
}

impl ExtractorGrad {
    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(ConvGrad::clear);
    }
}

impl ConvExtractor {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_layers = if config.stride == 4 { 2 } else { 3 };
        let mut layers = Vec::new();
        let mut c_in = 3;
        for i in 0..stem_layers {
            let c_out = if i == 0 {
                (config.stem_width / 2).max(1)
            } else {
                config.stem_width
            };
            layers.push(Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng));
            c_in = c_out;
        }
        for &d in &config.body_dilations {
            layers.push(Conv2d::new(c_in, config.feature_dim, 3, 1, d, &mut rng));
            c_in = config.feature_dim;
        }
        Ok(ConvExtractor { config, layers })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.layers
            .iter()
            .fold((h, w), |(h, w), l| l.out_size(h, w))
    }

    pub fn zero_grad(&self) -> ExtractorGrad {
        ExtractorGrad {
            layers: self.layers.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.stride as usize;
        if image.height() < s || image.width() < s {
            return Err(Error::Input(format!(
                "image {}x{} is smaller than one stride-{s} cell",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, image: &ImageTensor) -> Result<(FeatureMap, ExtractorTrace)> {
        self.check_input(image)?;
        let mut trace = ExtractorTrace {
            input_hw: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = image.0.clone();
        for layer in &self.layers {
            let (mut y, cols) = layer.forward(&x);
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            trace.input_hw.push((x.h, x.w));
            trace.cols.push(cols);
            trace.outputs.push(y.clone());
            x = y;
        }
        Ok((to_hwd(&x, self.config.stride), trace))
    }

    /// Backpropagates a feature gradient, accumulating into `grad`.
    pub fn backward(&self, trace: &ExtractorTrace, dfeat: &FeatureGrad, grad: &mut ExtractorGrad) {
        let last = trace.outputs.last().expect("at least one layer");
        let mut g = Tensor3::zeros(last.c, last.h, last.w);
        for y in 0..last.h {
            for x in 0..last.w {
                for c in 0..last.c {
                    g.data[(c * last.h + y) * last.w + x] =
                        dfeat.data[(y * last.w + x) * last.c + c] as f32;
                }
            }
        }
        for i in (0..self.layers.len()).rev() {
            for (gv, ov) in g.data.iter_mut().zip(&trace.outputs[i].data) {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            }
            let dx = self.layers[i].backward(
                trace.input_hw[i],
                &trace.cols[i],
                &g,
                &mut grad.layers[i],
                i > 0,
            );
            match dx {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    pub fn apply(&mut self, adam: &mut Adam, grad: &ExtractorGrad, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            adam.update_f32(&mut layer.weight, &g.weight, scale);
            adam.update_f32(&mut layer.bias, &g.bias, scale);
        }
    }
}

impl FeatureExtractor for ConvExtractor {
    fn stride(&self) -> u32 {
        self.config.stride
    }

    fn dim(&self) -> usize {
        self.config.feature_dim
    }

    fn extract(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.check_input(image)?;
        let mut x = image.0.clone();
        for layer in &self.layers {
            let (mut y, _) = layer.forward(&x);
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            x = y;
        }
        Ok(to_hwd(&x, self.config.stride))
    }
}

fn to_hwd(t: &Tensor3, stride: u32) -> FeatureMap {
    let mut f = FeatureMap::zeros(t.h, t.w, t.c, stride);
    for c in 0..t.c {
        for y in 0..t.h {
            for x in 0..t.w {
                f.data[(y * t.w + x) * t.c + c] = t.data[(c * t.h + y) * t.w + x];
            }
        }
    }
    f
}

/// Runs an extractor on a decoded image.
pub fn extract_features(image: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<FeatureMap> {
    extractor.extract(&ImageTensor::from_rgb(image))
}
