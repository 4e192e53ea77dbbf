//! Model builders: plain convolutional stacks, encoder-decoder U-Nets and
//! single-layer linear convolutions, plus receptive-field arithmetic,
//! parameter counting, and checkpoint IO.
//!
//! Building a model from a [`ModelSpec`] is a pure function of the spec: the
//! same spec (same seed) always yields identical parameters.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Shape, Tape, Tensor, Var};

/// Architecture family.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Family {
    /// `depth` same-padded k x k conv layers with ReLU between them.
    PlainCnn,
    /// Encoder-decoder with `depth` stride-2 levels, skip concatenations,
    /// nearest-neighbor upsampling, and a final 1x1 conv.
    UNet,
    /// A single bias-free conv layer.
    LinearConv,
}

/// Declarative architecture description.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Conv layers for PlainCnn; encoder levels for UNet; unused for LinearConv.
    pub depth: usize,
    /// Channel width (base width for UNet, doubled per level).
    pub width: usize,
    /// Odd square kernel size.
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn plain_cnn(depth: usize, width: usize, kernel_size: usize, in_channels: usize, out_channels: usize, seed: u64) -> Self {
        ModelSpec { family: Family::PlainCnn, depth, width, kernel_size, in_channels, out_channels, seed }
    }

    pub fn unet(depth: usize, width: usize, in_channels: usize, out_channels: usize, seed: u64) -> Self {
        ModelSpec { family: Family::UNet, depth, width, kernel_size: 3, in_channels, out_channels, seed }
    }

    pub fn linear_conv(kernel_size: usize, seed: u64) -> Self {
        ModelSpec { family: Family::LinearConv, depth: 1, width: 1, kernel_size, in_channels: 1, out_channels: 1, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("spec dimensions must be >= 1: {self:?}")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

/// An instantiated model: spec plus parameter tensors in declaration order.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// One conv layer inside a built architecture; indexes into `Model::params`.
#[derive(Clone, Copy, Debug)]
struct ConvRef {
    kernel: usize,
    bias: Option<usize>,
    stride: usize,
    pad: (usize, usize),
    relu: bool,
}

/// Result of recording a model's forward pass on a tape.
pub struct ForwardRecord {
    pub output: Var,
    /// One Var per parameter, aligned with the model's parameter order.
    pub param_vars: Vec<Var>,
}

/// Builds the model described by `spec` with fan-in-scaled uniform random
/// kernels (`+- sqrt(3 / (in_ch * k^2))`) and zero biases.
pub fn build(spec: ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params: Vec<(String, Tensor)> = Vec::new();
    let mut conv = |params: &mut Vec<(String, Tensor)>, name: &str, out_ch: usize, in_ch: usize, k: usize, with_bias: bool| {
        let bound = (3.0 / (in_ch * k * k) as f64).sqrt();
        let kernel = Tensor::rand_uniform(Shape::new(out_ch, in_ch, k, k), -bound, bound, &mut rng);
        params.push((format!("{name}.kernel"), kernel));
        if with_bias {
            params.push((format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_ch, 1, 1))));
        }
    };

    let k = spec.kernel_size;
    match spec.family {
        Family::LinearConv => {
            conv(&mut params, "conv", spec.out_channels, spec.in_channels, k, false);
        }
        Family::PlainCnn => {
            if spec.depth == 1 {
                conv(&mut params, "conv0", spec.out_channels, spec.in_channels, k, true);
            } else {
                conv(&mut params, "conv0", spec.width, spec.in_channels, k, true);
                for i in 1..spec.depth - 1 {
                    conv(&mut params, &format!("conv{i}"), spec.width, spec.width, k, true);
                }
                conv(&mut params, &format!("conv{}", spec.depth - 1), spec.out_channels, spec.width, k, true);
            }
        }
        Family::UNet => {
            let w = spec.width;
            for i in 0..spec.depth {
                let ch = w << i;
                let prev = if i == 0 { spec.in_channels } else { ch };
                conv(&mut params, &format!("enc{i}.conv"), ch, prev, k, true);
                conv(&mut params, &format!("enc{i}.down"), ch * 2, ch, k, true);
            }
            let bottom = w << spec.depth;
            conv(&mut params, "bottleneck", bottom, bottom, k, true);
            for i in (0..spec.depth).rev() {
                let ch = w << i;
                conv(&mut params, &format!("dec{i}.conv"), ch, ch * 2 + ch, k, true);
            }
            conv(&mut params, "head", spec.out_channels, w, 1, true);
        }
    }
    let (names, tensors) = params.into_iter().unzip();
    Ok(Model { spec, names, params: tensors })
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    pub fn num_param_tensors(&self) -> usize {
        self.params.len()
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape().numel()).sum()
    }

    fn conv_ref(&self, name: &str, stride: usize, relu: bool) -> ConvRef {
        let kernel = self
            .names
            .iter()
            .position(|n| *n == format!("{name}.kernel"))
            .unwrap_or_else(|| panic!("missing parameter {name}.kernel"));
        let bias = self.names.iter().position(|n| *n == format!("{name}.bias"));
        let k = self.params[kernel].shape().h;
        ConvRef { kernel, bias, stride, pad: ((k - 1) / 2, (k - 1) / 2), relu }
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.spec.in_channels {
            return Err(Error::shape("channels", self.spec.in_channels, shape.c, "model forward input"));
        }
        if self.spec.family == Family::UNet {
            let divisor = 1usize << self.spec.depth;
            if shape.h % divisor != 0 {
                return Err(Error::NotDivisible { dim: "height", size: shape.h, divisor, depth: self.spec.depth });
            }
            if shape.w % divisor != 0 {
                return Err(Error::NotDivisible { dim: "width", size: shape.w, divisor, depth: self.spec.depth });
            }
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf, in declaration order.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Records the forward pass using previously registered parameter leaves,
    /// so several pairs can share one parameter registration per tape.
    pub fn forward_recorded(&self, tape: &mut Tape, input: Var, param_vars: &[Var]) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        if param_vars.len() != self.params.len() {
            return Err(Error::shape("params", self.params.len(), param_vars.len(), "forward_recorded"));
        }
        let mut exec = TapeExec { tape, param_vars };
        self.run(&mut exec, input)
    }

    /// Records the forward pass on `tape`, registering every parameter as a
    /// leaf. Gradients land in those leaves after `tape.backward`.
    pub fn forward_on(&self, tape: &mut Tape, input: Var) -> Result<ForwardRecord> {
        let param_vars = self.register_params(tape);
        let output = self.forward_recorded(tape, input, &param_vars)?;
        Ok(ForwardRecord { output, param_vars })
    }

    /// Plain inference without gradient recording; bit-identical to the tape
    /// path because both run the same kernels in the same order.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let mut exec = DirectExec { params: &self.params };
        self.run(&mut exec, input.clone())
    }

    fn run<E: Exec>(&self, exec: &mut E, input: E::Value) -> Result<E::Value> {
        match self.spec.family {
            Family::LinearConv => exec.conv(input, self.conv_ref("conv", 1, false)),
            Family::PlainCnn => {
                let mut x = input;
                for i in 0..self.spec.depth {
                    let relu = i + 1 < self.spec.depth;
                    x = exec.conv(x, self.conv_ref(&format!("conv{i}"), 1, relu))?;
                }
                Ok(x)
            }
            Family::UNet => {
                let mut x = input;
                let mut skips = Vec::with_capacity(self.spec.depth);
                for i in 0..self.spec.depth {
                    x = exec.conv(x, self.conv_ref(&format!("enc{i}.conv"), 1, true))?;
                    skips.push(x.clone());
                    x = exec.conv(x, self.conv_ref(&format!("enc{i}.down"), 2, true))?;
                }
                x = exec.conv(x, self.conv_ref("bottleneck", 1, true))?;
                for i in (0..self.spec.depth).rev() {
                    x = exec.upsample2(x)?;
                    x = exec.concat(x, skips[i].clone())?;
                    x = exec.conv(x, self.conv_ref(&format!("dec{i}.conv"), 1, true))?;
                }
                exec.conv(x, self.conv_ref("head", 1, false))
            }
        }
    }

    /// Writes a self-describing little-endian checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(match self.spec.family {
            Family::PlainCnn => 0,
            Family::UNet => 1,
            Family::LinearConv => 2,
        });
        for v in [self.spec.depth, self.spec.width, self.spec.kernel_size, self.spec.in_channels, self.spec.out_channels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.spec.seed.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (pname, tensor) in self.names.iter().zip(&self.params) {
            let name = pname.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            let s = tensor.shape();
            for v in [s.n, s.c, s.h, s.w] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let family = match r.u8()? {
            0 => Family::PlainCnn,
            1 => Family::UNet,
            2 => Family::LinearConv,
            f => return Err(Error::Checkpoint(format!("unknown family tag {f}"))),
        };
        let depth = r.u32()? as usize;
        let width = r.u32()? as usize;
        let kernel_size = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let out_channels = r.u32()? as usize;
        let seed = r.u64()?;
        let spec = ModelSpec { family, depth, width, kernel_size, in_channels, out_channels, seed };

        // The spec fixes the parameter list; the payload must match it exactly.
        let reference = build(spec)?;
        let n_params = r.u32()? as usize;
        if n_params != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n_params} does not match spec ({} expected)",
                reference.params.len()
            )));
        }
        let mut names = Vec::with_capacity(n_params);
        let mut params = Vec::with_capacity(n_params);
        for (expect_name, expect_tensor) in reference.names.iter().zip(&reference.params) {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if name != *expect_name {
                return Err(Error::Checkpoint(format!("unexpected parameter {name} (expected {expect_name})")));
            }
            let shape = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            if shape != expect_tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {shape}, expected {}",
                    expect_tensor.shape()
                )));
            }
            let mut data = Vec::with_capacity(shape.numel());
            for _ in 0..shape.numel() {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
        }
        Ok(Model { spec, names, params })
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"MIMICKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Shared forward logic is written once against this executor; the tape
/// executor records operations, the direct executor evaluates eagerly.
trait Exec {
    type Value: Clone;
    fn conv(&mut self, x: Self::Value, c: ConvRef) -> Result<Self::Value>;
    fn upsample2(&mut self, x: Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value>;
}

struct TapeExec<'a, 'p> {
    tape: &'a mut Tape,
    param_vars: &'p [Var],
}

impl Exec for TapeExec<'_, '_> {
    type Value = Var;

    fn conv(&mut self, x: Var, c: ConvRef) -> Result<Var> {
        let out = self.tape.conv2d(x, self.param_vars[c.kernel], c.bias.map(|b| self.param_vars[b]), c.pad, c.stride)?;
        if c.relu {
            self.tape.relu(out)
        } else {
            Ok(out)
        }
    }

    fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.tape.upsample_nearest(x, 2)
    }

    fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.concat_channels(a, b)
    }
}

struct DirectExec<'a> {
    params: &'a [Tensor],
}

impl Exec for DirectExec<'_> {
    type Value = Tensor;

    fn conv(&mut self, x: Tensor, c: ConvRef) -> Result<Tensor> {
        let bias = c.bias.map(|b| self.params[b].data());
        let out = ops::conv2d(&x, &self.params[c.kernel], bias, c.pad, c.stride)?;
        Ok(if c.relu { ops::relu(&out) } else { out })
    }

    fn upsample2(&mut self, x: Tensor) -> Result<Tensor> {
        ops::upsample_nearest(&x, 2)
    }

    fn concat(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        ops::concat_channels(&a, &b)
    }
}

/// Theoretical receptive field of the architecture, by interval propagation
/// from a single output pixel back to the input. Skip branches in the UNet
/// cover strict subsets of the deep path's window, so walking the deep chain
/// suffices.
pub fn theoretical_receptive_field(spec: &ModelSpec) -> (usize, usize) {
    enum Step {
        Conv { k: i64, stride: i64, pad: i64 },
        Up { factor: i64 },
    }
    let k = spec.kernel_size as i64;
    let pad = (k - 1) / 2;
    let mut steps: Vec<Step> = Vec::new();
    match spec.family {
        Family::LinearConv => steps.push(Step::Conv { k, stride: 1, pad }),
        Family::PlainCnn => {
            for _ in 0..spec.depth {
                steps.push(Step::Conv { k, stride: 1, pad });
            }
        }
        Family::UNet => {
            for _ in 0..spec.depth {
                steps.push(Step::Conv { k, stride: 1, pad });
                steps.push(Step::Conv { k, stride: 2, pad });
            }
            steps.push(Step::Conv { k, stride: 1, pad });
            for _ in 0..spec.depth {
                steps.push(Step::Up { factor: 2 });
                steps.push(Step::Conv { k, stride: 1, pad });
            }
            steps.push(Step::Conv { k: 1, stride: 1, pad: 0 });
        }
    }
    let (mut lo, mut hi) = (0i64, 0i64);
    for step in steps.iter().rev() {
        match *step {
            Step::Conv { k, stride, pad } => {
                lo = lo * stride - pad;
                hi = hi * stride - pad + k - 1;
            }
            Step::Up { factor } => {
                lo = lo.div_euclid(factor);
                hi = hi.div_euclid(factor);
            }
        }
    }
    let rf = (hi - lo + 1) as usize;
    (rf, rf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_cnn_receptive_field_arithmetic() {
        for (depth, expect) in [(3usize, 7usize), (15, 31), (30, 61), (1, 3)] {
            let spec = ModelSpec::plain_cnn(depth, 8, 3, 1, 1, 0);
            assert_eq!(theoretical_receptive_field(&spec), (expect, expect), "depth {depth}");
            assert_eq!(expect, 1 + depth * 2);
        }
    }

    #[test]
    fn linear_conv_receptive_field_is_kernel() {
        let spec = ModelSpec::linear_conv(5, 0);
        assert_eq!(theoretical_receptive_field(&spec), (5, 5));
    }

    #[test]
    fn unet_receptive_field_is_odd_and_near_54() {
        let spec = ModelSpec::unet(3, 4, 1, 1, 0);
        let (rh, rw) = theoretical_receptive_field(&spec);
        assert_eq!(rh, rw);
        assert_eq!(rh % 2, 1);
        // Depth-3 stride-2 U-Net; interval propagation gives 53x53.
        assert_eq!(rh, 53);
    }

    #[test]
    fn identity_one_by_one_linear_conv() {
        let mut model = build(ModelSpec::linear_conv(1, 0)).unwrap();
        model.params_mut()[0].data_mut()[0] = 1.0;
        let x = Tensor::from_fn(Shape::image(1, 5, 7), |_, _, y, xx| (y * 7 + xx) as f64 * 0.01);
        let y = model.apply(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let spec = ModelSpec::plain_cnn(4, 6, 3, 1, 1, 99);
        let a = build(spec).unwrap();
        let b = build(spec).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = build(ModelSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn param_count_hand_examples() {
        let linear = build(ModelSpec::linear_conv(3, 0)).unwrap();
        assert_eq!(linear.param_count(), 9);

        let plain = build(ModelSpec::plain_cnn(2, 4, 3, 1, 1, 0)).unwrap();
        assert_eq!(plain.param_count(), (4 * 9 + 4) + (4 * 9 + 1));

        // Doubling the width scales interior-layer counts roughly 4x.
        let w8 = build(ModelSpec::plain_cnn(10, 8, 3, 1, 1, 0)).unwrap();
        let w16 = build(ModelSpec::plain_cnn(10, 16, 3, 1, 1, 0)).unwrap();
        let ratio = w16.param_count() as f64 / w8.param_count() as f64;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn all_zero_input_through_zero_bias_stack_is_zero() {
        let model = build(ModelSpec::plain_cnn(3, 4, 3, 1, 1, 5)).unwrap();
        let y = model.apply(&Tensor::zeros(Shape::image(1, 8, 8))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_direct_paths_agree_bitwise() {
        for spec in [
            ModelSpec::plain_cnn(3, 5, 3, 2, 2, 17),
            ModelSpec::unet(2, 3, 1, 1, 18),
            ModelSpec::linear_conv(3, 19),
        ] {
            let model = build(spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = Tensor::rand_uniform(Shape::image(spec.in_channels, 8, 8), 0.0, 1.0, &mut rng);
            let direct = model.apply(&x).unwrap();
            let mut tape = Tape::new();
            let vx = tape.leaf(&x);
            let rec = model.forward_on(&mut tape, vx).unwrap();
            assert_eq!(tape.value(rec.output).data(), direct.data());
        }
    }

    /// Depth-2 PlainCNN equals the explicit composition conv-relu-conv
    /// computed with the direct reference convolution.
    #[test]
    fn plain_cnn_matches_explicit_composition() {
        let spec = ModelSpec::plain_cnn(2, 3, 3, 1, 1, 23);
        let model = build(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(Shape::image(1, 9, 9), 0.0, 1.0, &mut rng);

        let ps = model.params();
        let (k0, b0, k1, b1) = (&ps[0], &ps[1], &ps[2], &ps[3]);
        let h1 = ops::tests::conv2d_direct(&x, k0, Some(b0.data()), (1, 1), 1);
        let h1 = h1.map(|v| v.max(0.0));
        let expect = ops::tests::conv2d_direct(&h1, k1, Some(b1.data()), (1, 1), 1);

        let got = model.apply(&x).unwrap();
        let scale = expect.data().iter().fold(1e-30_f64, |m, v| m.max(v.abs()));
        assert!(got.max_abs_diff(&expect).unwrap() / scale < 1e-12);
    }

    #[test]
    fn unet_preserves_shape_and_rejects_bad_divisibility() {
        let model = build(ModelSpec::unet(2, 3, 1, 1, 7)).unwrap();
        let ok = model.apply(&Tensor::zeros(Shape::image(1, 16, 24))).unwrap();
        assert_eq!(ok.shape(), Shape::image(1, 16, 24));
        let err = model.apply(&Tensor::zeros(Shape::image(1, 18, 24))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("divisible by 4"), "unexpected: {msg}");
    }

    #[test]
    fn forward_rejects_wrong_channel_count() {
        let model = build(ModelSpec::plain_cnn(2, 4, 3, 3, 3, 0)).unwrap();
        assert!(model.apply(&Tensor::zeros(Shape::image(1, 8, 8))).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build(ModelSpec::unet(2, 4, 3, 3, 31)).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(Shape::image(3, 8, 8), 0.0, 1.0, &mut rng);
        assert_eq!(model.apply(&x).unwrap().data(), loaded.apply(&x).unwrap().data());
    }

    #[test]
    fn checkpoint_corruption_is_an_error_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build(ModelSpec::plain_cnn(2, 3, 3, 1, 1, 1)).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncation.
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(m)) if m.contains("truncated")));

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(m)) if m.contains("magic")));

        // Future version.
        let mut vers = bytes.clone();
        vers[8] = 9;
        std::fs::write(&path, &vers).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    /// Changing one input pixel never reaches output pixels beyond Chebyshev
    /// distance (rf-1)/2 for a plain conv stack.
    #[test]
    fn plain_cnn_locality_is_exact() {
        let spec = ModelSpec::plain_cnn(3, 4, 3, 1, 1, 41);
        let model = build(spec).unwrap();
        let (rf, _) = theoretical_receptive_field(&spec);
        let radius = (rf - 1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::rand_uniform(Shape::image(1, 17, 17), 0.0, 1.0, &mut rng);
        let y0 = model.apply(&x).unwrap();
        let mut x2 = x.clone();
        *x2.at_mut(0, 0, 8, 8) += 0.25;
        let y1 = model.apply(&x2).unwrap();
        for yy in 0..17usize {
            for xx in 0..17usize {
                let d = (yy as i64 - 8).abs().max((xx as i64 - 8).abs()) as usize;
                let diff = (y1.at(0, 0, yy, xx) - y0.at(0, 0, yy, xx)).abs();
                if d > radius {
                    assert!(diff <= 1e-14, "leak at ({yy},{xx}): {diff}");
                }
            }
        }
    }
}
