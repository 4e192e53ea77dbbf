//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! A tape lives for one forward pass. Operations append nodes (inputs always
//! refer to earlier nodes, so recording order is a topological order), and
//! [`Tape::backward`] walks the nodes in exact reverse order, accumulating
//! gradients into per-node slots. Forward values are never modified by the
//! backward pass.

use std::sync::Arc;

use super::{ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Per-pixel loss mask shared between epochs without re-copying.
#[derive(Clone, Debug)]
pub(crate) struct LossMask {
    pub values: Arc<Vec<f64>>,
    /// Number of unmasked scalar elements (mask ones times channels times batch).
    pub count: f64,
}

/// A recorded primitive operation.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, pad: (usize, usize), stride: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    UpsampleNearest { x: Var, factor: usize },
    ConcatChannels { a: Var, b: Var },
    MseLoss { pred: Var, target: Var },
    MeanScalars { xs: Vec<Var> },
}

struct Node {
    op: Op,
    mask: Option<LossMask>,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, val: Tensor) -> Var {
        self.push_masked(op, None, val)
    }

    fn push_masked(&mut self, op: Op, mask: Option<LossMask>, val: Tensor) -> Var {
        self.nodes.push(Node { op, mask });
        self.vals.push(val);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("Var({}) does not belong to this tape (len {})", v.0, self.nodes.len())));
        }
        Ok(())
    }

    /// Record a leaf holding a copy of `t` (an input image or a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, Tensor { shape: t.shape(), data: t.data().to_vec(), grad: None })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient accumulated for `v` by the last `backward`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Zero-padded cross-correlation. `kernel` is (out_ch, in_ch, kh, kw) with
    /// odd kh, kw; `padding` must give "same" spatial size or be zero ("valid").
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: (usize, usize), stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        let ks = self.vals[kernel.0].shape();
        if ks.h % 2 == 0 || ks.w % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel must be odd, got {}x{}", ks.h, ks.w)));
        }
        if padding != (0, 0) && padding != ((ks.h - 1) / 2, (ks.w - 1) / 2) {
            return Err(Error::invalid(format!(
                "conv2d padding {padding:?} must be (0, 0) or the same-size padding ({}, {})",
                (ks.h - 1) / 2,
                (ks.w - 1) / 2
            )));
        }
        let bias_vals = match bias {
            Some(b) => {
                self.check(b)?;
                if self.vals[b.0].shape().numel() != ks.n {
                    return Err(Error::shape("out_channels", ks.n, self.vals[b.0].shape().numel(), "conv2d bias"));
                }
                Some(b)
            }
            None => None,
        };
        let out = ops::conv2d(
            &self.vals[x.0],
            &self.vals[kernel.0],
            bias_vals.map(|b| self.vals[b.0].data()),
            padding,
            stride,
        )?;
        Ok(self.push(Op::Conv2d { x, kernel, bias, pad: padding, stride }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::relu(&self.vals[x.0]);
        Ok(self.push(Op::Relu { x }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: impl Fn(Var, Var) -> Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.vals[a.0].zip(&self.vals[b.0], f)?;
        Ok(self.push(op(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.vals[x.0].map(|v| v * factor);
        Ok(self.push(Op::Scale { x, factor }, out))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        let out = ops::upsample_nearest(&self.vals[x.0], factor)?;
        Ok(self.push(Op::UpsampleNearest { x, factor }, out))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::concat_channels(&self.vals[a.0], &self.vals[b.0])?;
        Ok(self.push(Op::ConcatChannels { a, b }, out))
    }

    /// Mean squared error, optionally restricted to the pixels where `mask`
    /// is 1. The mask is a per-pixel (h, w) array broadcast over batch and
    /// channels; the divisor is the number of unmasked scalar elements.
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.check(pred)?;
        self.check(target)?;
        let ps = self.vals[pred.0].shape();
        let ts = self.vals[target.0].shape();
        if ps != ts {
            return Err(Error::shape("numel", ps.numel(), ts.numel(), format!("mse of {ps} vs {ts}")));
        }
        let mask = match mask {
            Some(m) => {
                let ms = m.shape();
                if ms.h != ps.h || ms.w != ps.w || ms.hw() != ms.numel() {
                    return Err(Error::shape("height", ps.h, ms.h, format!("loss mask {ms} vs prediction {ps}")));
                }
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid("loss mask entries must be 0 or 1"));
                }
                let ones: f64 = m.data().iter().sum();
                let count = ones * (ps.n * ps.c) as f64;
                if count == 0.0 {
                    return Err(Error::invalid("loss mask is all zeros"));
                }
                Some(LossMask { values: Arc::new(m.data().to_vec()), count })
            }
            None => None,
        };
        let p = self.vals[pred.0].data();
        let t = self.vals[target.0].data();
        let hw = ps.hw();
        let loss = match &mask {
            Some(m) => {
                let mut s = 0.0;
                for (i, (&pv, &tv)) in p.iter().zip(t).enumerate() {
                    let d = pv - tv;
                    s += m.values[i % hw] * d * d;
                }
                s / m.count
            }
            None => {
                let mut s = 0.0;
                for (&pv, &tv) in p.iter().zip(t) {
                    let d = pv - tv;
                    s += d * d;
                }
                s / ps.numel() as f64
            }
        };
        Ok(self.push_masked(
            Op::MseLoss { pred, target },
            mask,
            Tensor::scalar(loss),
        ))
    }

    /// Mean of scalar values (used to average the loss over several pairs).
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean_scalars needs at least one input"));
        }
        let mut s = 0.0;
        for &v in xs {
            self.check(v)?;
            if !self.vals[v.0].shape().is_scalar() {
                return Err(Error::NonScalarLoss(self.vals[v.0].shape().to_string()));
            }
            s += self.vals[v.0].data()[0];
        }
        let out = Tensor::scalar(s / xs.len() as f64);
        Ok(self.push(Op::MeanScalars { xs: xs.to_vec() }, out))
    }

    fn accum(grads: &mut [Option<Vec<f64>>], vals: &[Tensor], v: Var, contribution: &[f64]) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; vals[v.0].shape().numel()]);
        for (g, &c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from `loss`, which must be a scalar recorded on this tape.
    /// Gradients accumulate into the slots of every node that `loss` depends
    /// on; unreachable nodes keep an absent gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.vals[loss.0].shape().is_scalar() {
            return Err(Error::NonScalarLoss(self.vals[loss.0].shape().to_string()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g_out) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, kernel, bias, pad, stride } => {
                    let g_tensor = Tensor::new(self.vals[i].shape(), g_out.clone())?;
                    let dx = ops::conv2d_grad_input(&g_tensor, &self.vals[kernel.0], self.vals[x.0].shape(), pad, stride)?;
                    Self::accum(&mut self.grads, &self.vals, x, dx.data());
                    let dk = ops::conv2d_grad_kernel(&g_tensor, &self.vals[x.0], self.vals[kernel.0].shape(), pad, stride)?;
                    Self::accum(&mut self.grads, &self.vals, kernel, dk.data());
                    if let Some(b) = bias {
                        let db = ops::conv2d_grad_bias(&g_tensor);
                        Self::accum(&mut self.grads, &self.vals, b, &db);
                    }
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = self.vals[x.0]
                        .data()
                        .iter()
                        .zip(&g_out)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    Self::accum(&mut self.grads, &self.vals, x, &dx);
                }
                Op::Add { a, b } => {
                    Self::accum(&mut self.grads, &self.vals, a, &g_out);
                    Self::accum(&mut self.grads, &self.vals, b, &g_out);
                }
                Op::Sub { a, b } => {
                    Self::accum(&mut self.grads, &self.vals, a, &g_out);
                    let neg: Vec<f64> = g_out.iter().map(|&g| -g).collect();
                    Self::accum(&mut self.grads, &self.vals, b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g_out.iter().zip(self.vals[b.0].data()).map(|(&g, &bv)| g * bv).collect();
                    Self::accum(&mut self.grads, &self.vals, a, &da);
                    let db: Vec<f64> = g_out.iter().zip(self.vals[a.0].data()).map(|(&g, &av)| g * av).collect();
                    Self::accum(&mut self.grads, &self.vals, b, &db);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = g_out.iter().map(|&g| g * factor).collect();
                    Self::accum(&mut self.grads, &self.vals, x, &dx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let g_tensor = Tensor::new(self.vals[i].shape(), g_out.clone())?;
                    let dx = ops::upsample_nearest_grad(&g_tensor, self.vals[x.0].shape(), factor);
                    Self::accum(&mut self.grads, &self.vals, x, dx.data());
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
                    let hw = sa.hw();
                    let mut da = vec![0.0; sa.numel()];
                    let mut db = vec![0.0; sb.numel()];
                    let stride_out = (sa.c + sb.c) * hw;
                    for n in 0..sa.n {
                        let base = n * stride_out;
                        da[n * sa.c * hw..(n + 1) * sa.c * hw].copy_from_slice(&g_out[base..base + sa.c * hw]);
                        db[n * sb.c * hw..(n + 1) * sb.c * hw]
                            .copy_from_slice(&g_out[base + sa.c * hw..base + stride_out]);
                    }
                    Self::accum(&mut self.grads, &self.vals, a, &da);
                    Self::accum(&mut self.grads, &self.vals, b, &db);
                }
                Op::MseLoss { pred, target } => {
                    let g = g_out[0];
                    let p = self.vals[pred.0].data();
                    let t = self.vals[target.0].data();
                    let hw = self.vals[pred.0].shape().hw();
                    let (dp, dt): (Vec<f64>, Vec<f64>) = match &self.nodes[i].mask {
                        Some(m) => {
                            let mut dp = vec![0.0; p.len()];
                            let mut dt = vec![0.0; p.len()];
                            for (j, (&pv, &tv)) in p.iter().zip(t).enumerate() {
                                let d = g * 2.0 * m.values[j % hw] * (pv - tv) / m.count;
                                dp[j] = d;
                                dt[j] = -d;
                            }
                            (dp, dt)
                        }
                        None => {
                            let scale = g * 2.0 / p.len() as f64;
                            let dp: Vec<f64> = p.iter().zip(t).map(|(&pv, &tv)| scale * (pv - tv)).collect();
                            let dt: Vec<f64> = dp.iter().map(|&d| -d).collect();
                            (dp, dt)
                        }
                    };
                    Self::accum(&mut self.grads, &self.vals, pred, &dp);
                    Self::accum(&mut self.grads, &self.vals, target, &dt);
                }
                Op::MeanScalars { xs } => {
                    let share = [g_out[0] / xs.len() as f64];
                    for v in xs {
                        Self::accum(&mut self.grads, &self.vals, v, &share);
                    }
                }
            }
            self.grads[i] = Some(g_out);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn mse_of_identical_tensors_has_zero_gradients() {
        let a = rand_tensor(Shape::image(2, 5, 5), 1);
        let mut tape = Tape::new();
        let va = tape.leaf(&a);
        let vb = tape.leaf(&a);
        let loss = tape.mse(va, vb, None).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(va).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let a = rand_tensor(Shape::image(1, 3, 3), 2);
        let mut tape = Tape::new();
        let v = tape.leaf(&a);
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn backward_leaves_forward_values_unchanged() {
        let x = rand_tensor(Shape::image(1, 6, 6), 3);
        let k = rand_tensor(Shape::new(2, 1, 3, 3), 4);
        let t = rand_tensor(Shape::image(2, 6, 6), 5);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let vk = tape.leaf(&k);
        let vt = tape.leaf(&t);
        let y = tape.conv2d(vx, vk, None, (1, 1), 1).unwrap();
        let y = tape.relu(y).unwrap();
        let loss = tape.mse(y, vt, None).unwrap();
        let before: Vec<Vec<f64>> = (0..tape.len()).map(|i| tape.value(Var(i)).data().to_vec()).collect();
        tape.backward(loss).unwrap();
        for (i, snap) in before.iter().enumerate() {
            assert_eq!(tape.value(Var(i)).data(), snap.as_slice(), "node {i} changed");
        }
    }

    /// Single conv layer: the kernel gradient of the MSE loss equals the
    /// cross-correlation of the input with the output residual, scaled by
    /// 2/numel. Checked against that closed form computed by hand.
    #[test]
    fn single_conv_kernel_gradient_matches_closed_form() {
        let x = rand_tensor(Shape::image(1, 8, 8), 6);
        let k = rand_tensor(Shape::new(1, 1, 3, 3), 7);
        let t = rand_tensor(Shape::image(1, 8, 8), 8);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let vk = tape.leaf(&k);
        let vt = tape.leaf(&t);
        let y = tape.conv2d(vx, vk, None, (1, 1), 1).unwrap();
        let loss = tape.mse(y, vt, None).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(vk).unwrap();

        let y_val = tape.value(y);
        let n = y_val.shape().numel() as f64;
        for dy in 0..3usize {
            for dx in 0..3usize {
                let mut expect = 0.0;
                for oy in 0..8usize {
                    for ox in 0..8usize {
                        let iy = oy as isize + dy as isize - 1;
                        let ix = ox as isize + dx as isize - 1;
                        if iy >= 0 && iy < 8 && ix >= 0 && ix < 8 {
                            let resid = y_val.at(0, 0, oy, ox) - t.at(0, 0, oy, ox);
                            expect += 2.0 / n * resid * x.at(0, 0, iy as usize, ix as usize);
                        }
                    }
                }
                let g = got[dy * 3 + dx];
                assert!((g - expect).abs() < 1e-12, "tap ({dy},{dx}): {g} vs {expect}");
            }
        }
    }

    #[test]
    fn masked_mse_ignores_target_changes_inside_masked_region() {
        let x = rand_tensor(Shape::image(1, 6, 6), 9);
        let k = rand_tensor(Shape::new(1, 1, 3, 3), 10);
        let mut mask = Tensor::filled(Shape::image(1, 6, 6), 1.0);
        for i in 0..12 {
            mask.data_mut()[i] = 0.0;
        }
        let mut grads = Vec::new();
        for variant in 0..2 {
            let mut t = rand_tensor(Shape::image(1, 6, 6), 11);
            if variant == 1 {
                // Arbitrary changes inside the masked-out region only.
                for i in 0..12 {
                    t.data_mut()[i] = 42.0 + i as f64;
                }
            }
            let mut tape = Tape::new();
            let vx = tape.leaf(&x);
            let vk = tape.leaf(&k);
            let vt = tape.leaf(&t);
            let y = tape.conv2d(vx, vk, None, (1, 1), 1).unwrap();
            let loss = tape.mse(y, vt, Some(&mask)).unwrap();
            tape.backward(loss).unwrap();
            grads.push(tape.grad(vk).unwrap().to_vec());
        }
        assert_eq!(grads[0], grads[1]);
    }

    #[test]
    fn concat_routes_gradients_to_both_sides() {
        let a = rand_tensor(Shape::image(2, 4, 4), 12);
        let b = rand_tensor(Shape::image(3, 4, 4), 13);
        let t = rand_tensor(Shape::image(5, 4, 4), 14);
        let mut tape = Tape::new();
        let va = tape.leaf(&a);
        let vb = tape.leaf(&b);
        let vt = tape.leaf(&t);
        let cat = tape.concat_channels(va, vb).unwrap();
        let loss = tape.mse(cat, vt, None).unwrap();
        tape.backward(loss).unwrap();
        let n = t.shape().numel() as f64;
        let ga = tape.grad(va).unwrap();
        for i in 0..a.shape().numel() {
            let expect = 2.0 / n * (a.data()[i] - t.data()[i]);
            assert!((ga[i] - expect).abs() < 1e-14);
        }
        let gb = tape.grad(vb).unwrap();
        for i in 0..b.shape().numel() {
            let expect = 2.0 / n * (b.data()[i] - t.data()[i + a.shape().numel()]);
            assert!((gb[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_linearity_for_bias_free_convs() {
        let x = rand_tensor(Shape::image(2, 9, 9), 15);
        let y = rand_tensor(Shape::image(2, 9, 9), 16);
        let k = rand_tensor(Shape::new(3, 2, 3, 3), 17);
        let (alpha, beta) = (0.7, -1.3);
        let combo = x.zip(&y, |a, b| alpha * a + beta * b).unwrap();

        let mut tape = Tape::new();
        let vk = tape.leaf(&k);
        let vx = tape.leaf(&x);
        let vy = tape.leaf(&y);
        let vc = tape.leaf(&combo);
        let cx = tape.conv2d(vx, vk, None, (1, 1), 1).unwrap();
        let cy = tape.conv2d(vy, vk, None, (1, 1), 1).unwrap();
        let cc = tape.conv2d(vc, vk, None, (1, 1), 1).unwrap();
        let scale_x = tape.scale(cx, alpha).unwrap();
        let scale_y = tape.scale(cy, beta).unwrap();
        let sum = tape.add(scale_x, scale_y).unwrap();

        let lhs = tape.value(cc);
        let rhs = tape.value(sum);
        let scale = lhs.data().iter().fold(1e-30_f64, |m, v| m.max(v.abs()));
        assert!(lhs.max_abs_diff(rhs).unwrap() / scale < 1e-10);
    }
}
