//! A small three-scale convolutional detector with a hand-written backward
//! pass.
//!
//! Layout: a stem of stride-2 3x3 convolutions brings the image down to the
//! finest output map; one more stride-2 convolution per further map follows.
//! Every backbone convolution is followed by SiLU, which keeps the whole
//! network smooth for finite-difference auditing. Each output map gets a
//! 1x1 head emitting `(objectness logit, cx, cy, w, h)` per cell.
//!
//! Feature maps are channel-major: `data[(c * h + y) * w + x]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use crate::mining::SCALE_COUNT;
use crate::{Error, Result, Scalar};

/// Scale applied to mean-subtracted inputs.
pub const INPUT_GAIN: f64 = 4.0;

/// Values emitted per cell by each head.
pub const HEAD_OUTPUTS: usize = 5;

/// Architecture description: output grid plus backbone widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub grid: GridSpec,
    /// Output channels of each backbone convolution. Must hold
    /// `log2(finest stride) + 2` entries.
    pub channels: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            channels: vec![8, 16, 24, 24, 24],
        }
    }
}

impl ModelSpec {
    fn stem_layers(&self) -> Result<usize> {
        self.grid.validate()?;
        let strides: Vec<usize> = (0..SCALE_COUNT).map(|s| self.grid.stride(s)).collect();
        if !strides[0].is_power_of_two() || strides[0] < 2 {
            return Err(Error::config(format!(
                "finest stride {} must be a power of two >= 2",
                strides[0]
            )));
        }
        if strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::config(format!(
                "strides {strides:?} must double from one map to the next"
            )));
        }
        Ok(strides[0].trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let stem = self.stem_layers()?;
        let expected = stem + SCALE_COUNT - 1;
        if self.channels.len() != expected {
            return Err(Error::config(format!(
                "grid {:?} needs {expected} backbone widths, got {}",
                self.grid.cells,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    in_side: usize,
    out_side: usize,
    weight_at: usize,
    bias_at: usize,
}

impl Conv {
    fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, in_side: usize, at: &mut usize) -> Self {
        let pad = kernel / 2;
        let out_side = (in_side + 2 * pad - kernel) / stride + 1;
        let weight_at = *at;
        *at += out_c * in_c * kernel * kernel;
        let bias_at = *at;
        *at += out_c;
        Self { in_c, out_c, kernel, stride, pad, in_side, out_side, weight_at, bias_at }
    }

    fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn padded_side(&self) -> usize {
        self.in_side + 2 * self.pad
    }

    /// Copies `input` into a zero border of width `pad`.
    fn pad_input<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (n, p) = (self.in_side, self.padded_side());
        let mut out = vec![T::zero(); self.in_c * p * p];
        for c in 0..self.in_c {
            for y in 0..n {
                let src = &input[(c * n + y) * n..(c * n + y + 1) * n];
                let at = (c * p + y + self.pad) * p + self.pad;
                out[at..at + n].copy_from_slice(src);
            }
        }
        out
    }

    fn forward<T: Scalar>(&self, params: &[T], input: &[T]) -> Vec<T> {
        let (k, st, n_out, p) = (self.kernel, self.stride, self.out_side, self.padded_side());
        let padded = self.pad_input(input);
        let weights = &params[self.weight_at..self.bias_at];
        let mut out = vec![T::zero(); self.out_c * n_out * n_out];
        for (oc, plane) in out.chunks_exact_mut(n_out * n_out).enumerate() {
            plane.fill(params[self.bias_at + oc]);
            for ic in 0..self.in_c {
                let src = &padded[ic * p * p..(ic + 1) * p * p];
                let kern = &weights[(oc * self.in_c + ic) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let w = kern[ky * k + kx];
                        for oy in 0..n_out {
                            let row = &src[(oy * st + ky) * p + kx..];
                            let dst = &mut plane[oy * n_out..(oy + 1) * n_out];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += w * row[ox * st];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input when `want_input` is set.
    fn backward<T: Scalar>(
        &self,
        params: &[T],
        input: &[T],
        d_out: &[T],
        grad: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let (k, st, n_in, n_out, p) = (self.kernel, self.stride, self.in_side, self.out_side, self.padded_side());
        let padded = self.pad_input(input);
        let mut d_pad = want_input.then(|| vec![T::zero(); self.in_c * p * p]);
        for (oc, g_plane) in d_out.chunks_exact(n_out * n_out).enumerate() {
            grad[self.bias_at + oc] += g_plane.iter().copied().sum::<T>();
            for ic in 0..self.in_c {
                let src = &padded[ic * p * p..(ic + 1) * p * p];
                let w_base = self.weight_at + (oc * self.in_c + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w = params[w_base + ky * k + kx];
                        let mut acc = T::zero();
                        for oy in 0..n_out {
                            let at = (oy * st + ky) * p + kx;
                            let g_row = &g_plane[oy * n_out..(oy + 1) * n_out];
                            let row = &src[at..];
                            for (ox, &g) in g_row.iter().enumerate() {
                                acc += g * row[ox * st];
                            }
                            if let Some(d) = d_pad.as_mut() {
                                let d_row = &mut d[ic * p * p + at..];
                                for (ox, &g) in g_row.iter().enumerate() {
                                    d_row[ox * st] += g * w;
                                }
                            }
                        }
                        grad[w_base + ky * k + kx] += acc;
                    }
                }
            }
        }
        d_pad.map(|d| {
            let mut d_in = vec![T::zero(); self.in_c * n_in * n_in];
            for c in 0..self.in_c {
                for y in 0..n_in {
                    let at = (c * p + y + self.pad) * p + self.pad;
                    d_in[(c * n_in + y) * n_in..(c * n_in + y + 1) * n_in].copy_from_slice(&d[at..at + n_in]);
                }
            }
            d_in
        })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Raw head outputs for one map: `HEAD_OUTPUTS` channel-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub side: usize,
    pub raw: Vec<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn logit(&self, cell: usize) -> T {
        self.raw[cell]
    }

    pub fn objectness(&self, cell: usize) -> T {
        sigmoid(self.logit(cell))
    }

    pub fn offsets(&self, cell: usize) -> [T; 4] {
        let n = self.cells();
        std::array::from_fn(|k| self.raw[(k + 1) * n + cell])
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    input: Vec<T>,
    pre: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    pub heads: [HeadOutput<T>; SCALE_COUNT],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel<T> {
    spec: ModelSpec,
    backbone: Vec<Conv>,
    heads: [Conv; SCALE_COUNT],
    /// Backbone layer feeding each head.
    head_source: [usize; SCALE_COUNT],
    params: Vec<T>,
}

impl<T: Scalar> DetectorModel<T> {
    /// Builds the network with seeded He-uniform backbone weights,
    /// `1/sqrt(fan_in)` head weights and zero biases, so every cell starts
    /// near p = 0.5.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &model.backbone {
            let bound = (6.0 / conv.fan_in() as f64).sqrt();
            for w in &mut model.params[conv.weight_at..conv.bias_at] {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        for conv in &model.heads {
            let bound = (1.0 / conv.fan_in() as f64).sqrt();
            for w in &mut model.params[conv.weight_at..conv.bias_at] {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    /// Architecture with every parameter set to zero.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let stem = spec.stem_layers()?;
        let mut at = 0;
        let mut side = spec.grid.image_size;
        let mut in_c = 1;
        let mut backbone = Vec::with_capacity(spec.channels.len());
        for &out_c in &spec.channels {
            let conv = Conv::new(in_c, out_c, 3, 2, side, &mut at);
            side = conv.out_side;
            in_c = out_c;
            backbone.push(conv);
        }
        let head_source: [usize; SCALE_COUNT] = std::array::from_fn(|s| stem - 1 + s);
        let heads = std::array::from_fn(|s| {
            let src = &backbone[head_source[s]];
            Conv::new(src.out_c, HEAD_OUTPUTS, 1, 1, src.out_side, &mut at)
        });
        for (s, head) in heads.iter().enumerate() {
            debug_assert_eq!(head.out_side, spec.grid.cells[s]);
        }
        Ok(Self {
            spec,
            backbone,
            heads,
            head_source,
            params: vec![T::zero(); at],
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &GridSpec {
        &self.spec.grid
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::structural(format!(
                "model expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Parameter index range of each head (weights then biases).
    pub fn head_param_range(&self, scale: usize) -> std::ops::Range<usize> {
        let h = &self.heads[scale];
        h.weight_at..h.bias_at + h.out_c
    }

    /// Index of the objectness bias of the head at `scale`.
    pub fn objectness_bias_index(&self, scale: usize) -> usize {
        self.heads[scale].bias_at
    }

    /// Network input for 8-bit pixels: intensities in `[0, 1]` minus the
    /// image mean, times [`INPUT_GAIN`].
    pub fn input_from_pixels(pixels: &[u8]) -> Vec<T> {
        let n = pixels.len().max(1) as f64;
        let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
        let k = INPUT_GAIN / 255.0;
        pixels.iter().map(|&p| T::of((p as f64 - mean) * k)).collect()
    }

    pub fn forward(&self, input: &[T]) -> Result<ForwardPass<T>> {
        let side = self.spec.grid.image_size;
        if input.len() != side * side {
            return Err(Error::structural(format!(
                "model expects a {side}x{side} image ({} values), got {}",
                side * side,
                input.len()
            )));
        }
        let mut pre = Vec::with_capacity(self.backbone.len());
        let mut post: Vec<Vec<T>> = Vec::with_capacity(self.backbone.len());
        for (i, conv) in self.backbone.iter().enumerate() {
            let x = if i == 0 { input } else { &post[i - 1] };
            let z = conv.forward(&self.params, x);
            post.push(z.iter().map(|&v| silu(v)).collect());
            pre.push(z);
        }
        let heads = std::array::from_fn(|s| HeadOutput {
            side: self.heads[s].out_side,
            raw: self.heads[s].forward(&self.params, &post[self.head_source[s]]),
        });
        Ok(ForwardPass {
            input: input.to_vec(),
            pre,
            post,
            heads,
        })
    }

    /// Backpropagates head-output gradients (laid out like
    /// [`HeadOutput::raw`]) and adds the parameter gradient into `grad`.
    pub fn backward(&self, pass: &ForwardPass<T>, d_heads: &[Vec<T>; SCALE_COUNT], grad: &mut [T]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let mut d_post: Vec<Vec<T>> = pass.post.iter().map(|a| vec![T::zero(); a.len()]).collect();
        for (s, d_head) in d_heads.iter().enumerate() {
            let src = self.head_source[s];
            let d_in = self.heads[s]
                .backward(&self.params, &pass.post[src], d_head, grad, true)
                .expect("input gradient requested");
            for (acc, d) in d_post[src].iter_mut().zip(d_in) {
                *acc += d;
            }
        }
        for i in (0..self.backbone.len()).rev() {
            let d_pre: Vec<T> = d_post[i]
                .iter()
                .zip(&pass.pre[i])
                .map(|(&d, &z)| d * silu_grad(z))
                .collect();
            let input = if i == 0 { &pass.input } else { &pass.post[i - 1] };
            if let Some(d_in) = self.backbone[i].backward(&self.params, input, &d_pre, grad, i > 0) {
                for (acc, d) in d_post[i - 1].iter_mut().zip(d_in) {
                    *acc += d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, side: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn output_shapes_follow_the_grid() {
        let model = DetectorModel::<f64>::new(ModelSpec::default(), 1).unwrap();
        let pass = model.forward(&image(0, 64)).unwrap();
        let sides: Vec<usize> = pass.heads.iter().map(|h| h.side).collect();
        assert_eq!(sides, vec![8, 4, 2]);
        for h in &pass.heads {
            assert_eq!(h.raw.len(), HEAD_OUTPUTS * h.side * h.side);
        }
        assert!(model.param_count() <= 20_000, "{}", model.param_count());
    }

    #[test]
    fn fresh_model_predicts_about_one_half() {
        let model = DetectorModel::<f64>::new(ModelSpec::default(), 3).unwrap();
        let pass = model.forward(&image(1, 64)).unwrap();
        for h in &pass.heads {
            for c in 0..h.cells() {
                let p = h.objectness(c);
                assert!(p > 0.0 && p < 1.0);
                assert!((p - 0.5).abs() < 0.05, "{p}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DetectorModel::<f64>::new(ModelSpec::default(), 9).unwrap();
        let x = image(2, 64);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        for s in 0..SCALE_COUNT {
            assert_eq!(a.heads[s].raw, b.heads[s].raw);
        }
        assert_eq!(model, DetectorModel::new(ModelSpec::default(), 9).unwrap());
    }

    #[test]
    fn wrong_image_size_is_structural() {
        let model = DetectorModel::<f64>::new(ModelSpec::default(), 0).unwrap();
        assert!(matches!(model.forward(&[0.0; 10]), Err(Error::Structural(_))));
    }

    #[test]
    fn spec_validation() {
        let bad_width = ModelSpec { channels: vec![8, 8], ..ModelSpec::default() };
        assert!(matches!(bad_width.validate(), Err(Error::Config(_))));
        let odd_grid = ModelSpec {
            grid: GridSpec { image_size: 48, cells: [12, 4, 2] },
            channels: vec![8; 4],
        };
        assert!(odd_grid.validate().is_err());
        let small = ModelSpec {
            grid: GridSpec { image_size: 32, cells: [8, 4, 2] },
            channels: vec![4, 4, 4, 4],
        };
        assert!(small.validate().is_ok());
        assert!(DetectorModel::<f32>::new(small, 0).is_ok());
    }

    #[test]
    fn backward_matches_central_differences() {
        // A linear functional of the head outputs makes the check exact up
        // to truncation error.
        let spec = ModelSpec {
            grid: GridSpec { image_size: 32, cells: [8, 4, 2] },
            channels: vec![3, 4, 5, 5],
        };
        let mut model = DetectorModel::<f64>::new(spec, 4).unwrap();
        let x = image(5, 32);
        let pass = model.forward(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let weights: [Vec<f64>; SCALE_COUNT] =
            std::array::from_fn(|s| (0..pass.heads[s].raw.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let objective = |m: &DetectorModel<f64>| {
            let p = m.forward(&x).unwrap();
            (0..SCALE_COUNT)
                .map(|s| p.heads[s].raw.iter().zip(&weights[s]).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&pass, &weights, &mut grad);
        let h = 1e-6;
        for j in (0..model.param_count()).step_by(7) {
            let orig = model.params[j];
            model.params[j] = orig + h;
            let plus = objective(&model);
            model.params[j] = orig - h;
            let minus = objective(&model);
            model.params[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            assert!((grad[j] - numeric).abs() < 1e-6 * grad[j].abs().max(1.0), "param {j}: {} vs {numeric}", grad[j]);
        }
    }
}
