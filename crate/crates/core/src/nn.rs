//! Minimal neural-network layers with hand-written backpropagation.
//!
//! Every layer exposes a pure `forward` and a `backward` that takes the same
//! input the forward saw, accumulates parameter gradients, and returns the
//! gradient with respect to the input. Models own their layers and cache the
//! intermediate activations they need between the two calls.
//!
//! Batched activations are stored `(batch, features)` for dense layers and
//! `(batch, channels, height, width)` for convolutional ones, row-major.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Momentum buffer for `sgd_step`; starts at zero.
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Stochastic-gradient update with classical momentum:
    /// `v = momentum * v + grad; value -= lr * v`. Momentum 0 recovers the
    /// plain gradient step.
    pub fn sgd_step(&mut self, lr: T, momentum: T) {
        self.velocity.scale(momentum);
        self.velocity.add_scaled(&self.grad, T::one());
        self.value.add_scaled(&self.velocity, -lr);
    }

    /// Reset the momentum buffer to zero (used when optimization restarts
    /// from restored parameters).
    pub fn reset_velocity(&mut self) {
        self.velocity.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for
/// dense and convolutional layers.
fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = T::cast(1.0 / (fan_in as f64).sqrt());
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::sample_uniform(rng, -bound, bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product mismatch in init")
}

/// Fully connected layer; weight is `(out_dim, in_dim)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "linear layer dims must be positive");
        Self {
            weight: Param::new(uniform_fan_in(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(uniform_fan_in(&[out_dim], in_dim, rng)),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x` is `(batch, in_dim)`; returns `(batch, out_dim)`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let batch = x.shape()[0];
        assert_eq!(x.shape(), &[batch, self.in_dim], "linear input shape");
        let mut y = Tensor::zeros(&[batch, self.out_dim]);
        for b in 0..batch {
            let xb = x.row(b);
            let yb = y.row_mut(b);
            for o in 0..self.out_dim {
                let w = self.weight.value.row(o);
                let mut acc = self.bias.value.data()[o];
                for (wi, xi) in w.iter().zip(xb) {
                    acc += *wi * *xi;
                }
                yb[o] = acc;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let batch = x.shape()[0];
        assert_eq!(dy.shape(), &[batch, self.out_dim], "linear grad shape");
        let mut dx = Tensor::zeros(&[batch, self.in_dim]);
        for b in 0..batch {
            let xb = x.row(b);
            let dyb = dy.row(b);
            let dxb = dx.row_mut(b);
            for o in 0..self.out_dim {
                let g = dyb[o];
                if g == T::zero() {
                    continue;
                }
                let w = self.weight.value.row(o);
                for (dxi, wi) in dxb.iter_mut().zip(w) {
                    *dxi += g * *wi;
                }
                let dw = self.weight.grad.row_mut(o);
                for (dwi, xi) in dw.iter_mut().zip(xb) {
                    *dwi += g * *xi;
                }
                self.bias.grad.data_mut()[o] += g;
            }
        }
        dx
    }
}

/// 3x3 convolution with stride 1 and zero padding 1, so spatial dims are
/// preserved. Weight is `(out_c, in_c, 3, 3)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_c: usize,
    out_c: usize,
}

const K: usize = 3;

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        assert!(in_c > 0 && out_c > 0, "conv layer channels must be positive");
        let fan_in = in_c * K * K;
        Self {
            weight: Param::new(uniform_fan_in(&[out_c, in_c, K, K], fan_in, rng)),
            bias: Param::new(uniform_fan_in(&[out_c], fan_in, rng)),
            in_c,
            out_c,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    fn check_input(&self, x: &Tensor<T>) -> (usize, usize, usize) {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be (B, C, H, W)");
        assert_eq!(s[1], self.in_c, "conv input channels");
        (s[0], s[2], s[3])
    }

    /// For a kernel offset `d` in `0..3` (logical shift `d - 1`), the output
    /// rows/cols `i` where `i + d - 1` lands inside `0..n`.
    fn valid_range(d: usize, n: usize) -> (usize, usize) {
        let lo = 1usize.saturating_sub(d);
        let hi = (n + 1 - d).min(n);
        (lo, hi)
    }

    /// `x` is `(batch, in_c, H, W)`; returns `(batch, out_c, H, W)`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (batch, h, w) = self.check_input(x);
        let mut y = Tensor::zeros(&[batch, self.out_c, h, w]);
        let plane = h * w;
        let xd = x.data();
        for b in 0..batch {
            for oc in 0..self.out_c {
                let y_base = (b * self.out_c + oc) * plane;
                y.data_mut()[y_base..y_base + plane].fill(self.bias.value.data()[oc]);
                for ic in 0..self.in_c {
                    let x_base = (b * self.in_c + ic) * plane;
                    for di in 0..K {
                        let (i_lo, i_hi) = Self::valid_range(di, h);
                        for dj in 0..K {
                            let wv =
                                self.weight.value.data()[((oc * self.in_c + ic) * K + di) * K + dj];
                            if wv == T::zero() {
                                continue;
                            }
                            let (j_lo, j_hi) = Self::valid_range(dj, w);
                            if j_lo >= j_hi {
                                continue;
                            }
                            for i in i_lo..i_hi {
                                let src = x_base + (i + di - 1) * w + (j_lo + dj - 1);
                                let dst = y_base + i * w + j_lo;
                                let n = j_hi - j_lo;
                                let (ys, xs) =
                                    (&mut y.data_mut()[dst..dst + n], &xd[src..src + n]);
                                for (a, &s) in ys.iter_mut().zip(xs) {
                                    *a += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (batch, h, w) = self.check_input(x);
        assert_eq!(dy.shape(), &[batch, self.out_c, h, w], "conv grad shape");
        let plane = h * w;
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..batch {
            for oc in 0..self.out_c {
                let dy_base = (b * self.out_c + oc) * plane;
                let mut bias_acc = T::zero();
                for v in &dy.data()[dy_base..dy_base + plane] {
                    bias_acc += *v;
                }
                self.bias.grad.data_mut()[oc] += bias_acc;
                for ic in 0..self.in_c {
                    let x_base = (b * self.in_c + ic) * plane;
                    for di in 0..K {
                        let (i_lo, i_hi) = Self::valid_range(di, h);
                        for dj in 0..K {
                            let widx = ((oc * self.in_c + ic) * K + di) * K + dj;
                            let wv = self.weight.value.data()[widx];
                            let (j_lo, j_hi) = Self::valid_range(dj, w);
                            if j_lo >= j_hi {
                                continue;
                            }
                            let mut w_acc = T::zero();
                            for i in i_lo..i_hi {
                                let src = x_base + (i + di - 1) * w + (j_lo + dj - 1);
                                let dst = dy_base + i * w + j_lo;
                                let n = j_hi - j_lo;
                                let dyr = &dy.data()[dst..dst + n];
                                // dL/dW: correlation of dy with the shifted input.
                                let xr = &x.data()[src..src + n];
                                for (&g, &s) in dyr.iter().zip(xr) {
                                    w_acc += g * s;
                                }
                                // dL/dx: dy scattered back through the kernel tap.
                                let dxr = &mut dx.data_mut()[src..src + n];
                                for (a, &g) in dxr.iter_mut().zip(dyr) {
                                    *a += wv * g;
                                }
                            }
                            self.weight.grad.data_mut()[widx] += w_acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`]; passes `dy` where the original input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward shape")
}

/// Elementwise `tanh(x)`.
pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Gradient of [`tanh`] expressed through its *output*: `dy * (1 - y^2)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(y.shape(), dy.shape());
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &g)| g * (T::one() - yv * yv))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("tanh_backward shape")
}

/// 2x2 average pooling with stride 2 on `(B, C, H, W)`; H and W must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "pool input must be (B, C, H, W)");
    let (h, w) = (s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "pool needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let quarter = T::cast(0.25);
    for bc in 0..s[0] * s[1] {
        let xp = &x.data()[bc * h * w..(bc + 1) * h * w];
        let yp = &mut y.data_mut()[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let top = 2 * i * w + 2 * j;
                let bot = top + w;
                yp[i * ow + j] =
                    (xp[top] + xp[top + 1] + xp[bot] + xp[bot + 1]) * quarter;
            }
        }
    }
    y
}

/// Gradient of [`avg_pool2`]: each output gradient spreads as `dy/4` over its
/// 2x2 window.
pub fn avg_pool2_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(dy.shape(), &[input_shape[0], input_shape[1], oh, ow]);
    let mut dx = Tensor::zeros(input_shape);
    let quarter = T::cast(0.25);
    for bc in 0..input_shape[0] * input_shape[1] {
        let dyp = &dy.data()[bc * oh * ow..(bc + 1) * oh * ow];
        let dxp = &mut dx.data_mut()[bc * h * w..(bc + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = dyp[i * ow + j] * quarter;
                let top = 2 * i * w + 2 * j;
                let bot = top + w;
                dxp[top] += g;
                dxp[top + 1] += g;
                dxp[bot] += g;
                dxp[bot + 1] += g;
            }
        }
    }
    dx
}

/// Weighted softmax cross-entropy over logit rows.
///
/// Returns the scalar loss `sum_b weights[b] * (-log softmax(z_b)[t_b])`
/// (accumulated in f64 for stable comparisons) together with `dL/dlogits`.
/// Callers express "mean over the batch" as `weights[b] = 1/B` and any other
/// partition weighting the same way.
pub fn softmax_ce_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    weights: &[T],
) -> (f64, Tensor<T>) {
    let batch = logits.shape()[0];
    let classes = logits.shape()[1];
    assert_eq!(targets.len(), batch, "one target per logit row");
    assert_eq!(weights.len(), batch, "one weight per logit row");
    let mut loss = 0.0f64;
    let mut dlogits = Tensor::zeros(logits.shape());
    for b in 0..batch {
        let t = targets[b];
        assert!(t < classes, "target {t} out of range for {classes} classes");
        let z = logits.row(b);
        let m = z.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let mut sum = T::zero();
        let dz = dlogits.row_mut(b);
        for (d, &v) in dz.iter_mut().zip(z) {
            let e = (v - m).exp();
            *d = e;
            sum += e;
        }
        // loss_b = log(sum exp(z - m)) - (z_t - m)
        loss += weights[b].as_f64() * (sum.as_f64().ln() - (z[t] - m).as_f64());
        let inv = T::one() / sum;
        for d in dz.iter_mut() {
            *d *= inv * weights[b];
        }
        dz[t] -= weights[b];
    }
    (loss, dlogits)
}

/// Per-row argmax of a `(batch, classes)` tensor; ties resolve to the lowest
/// index so predictions are deterministic.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let batch = logits.shape()[0];
    (0..batch)
        .map(|b| {
            let row = logits.row(b);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xs[i];
                xs[i] = orig + h;
                let up = f(&xs);
                xs[i] = orig - h;
                let down = f(&xs);
                xs[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-4);
            assert!(
                (a - n).abs() / denom < tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    /// L = sum(c .* y) for fixed pseudo-random coefficients, so dL/dy = c.
    fn probe_coeffs(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.45).collect()
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = stream(7, "test:linear");
        let layer = Linear::<f64>::new(5, 4, &mut rng);
        let x = Tensor::from_vec(
            &[3, 5],
            (0..15).map(|i| (i as f64) * 0.13 - 0.9).collect(),
        )
        .unwrap();
        let c = probe_coeffs(12);

        let loss_for_input = |xs: &[f64]| {
            let xt = Tensor::from_vec(&[3, 5], xs.to_vec()).unwrap();
            let y = layer.forward(&xt);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let mut l = layer.clone();
        let dy = Tensor::from_vec(&[3, 4], c.clone()).unwrap();
        let dx = l.backward(&x, &dy);
        assert_close(
            dx.data(),
            &numeric_grad(loss_for_input, x.data(), 1e-5),
            1e-6,
            "linear dx",
        );

        let loss_for_weights = |ws: &[f64]| {
            let mut probe = layer.clone();
            probe.weight.value = Tensor::from_vec(&[4, 5], ws.to_vec()).unwrap();
            let y = probe.forward(&x);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        assert_close(
            l.weight.grad.data(),
            &numeric_grad(loss_for_weights, layer.weight.value.data(), 1e-5),
            1e-6,
            "linear dW",
        );

        let loss_for_bias = |bs: &[f64]| {
            let mut probe = layer.clone();
            probe.bias.value = Tensor::from_vec(&[4], bs.to_vec()).unwrap();
            let y = probe.forward(&x);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        assert_close(
            l.bias.grad.data(),
            &numeric_grad(loss_for_bias, layer.bias.value.data(), 1e-5),
            1e-6,
            "linear db",
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(11, "test:conv");
        let layer = Conv2d::<f64>::new(2, 3, &mut rng);
        let n_in = 2 * 2 * 4 * 4;
        let x = Tensor::from_vec(
            &[2, 2, 4, 4],
            (0..n_in).map(|i| ((i * 29 + 3) % 23) as f64 / 23.0 - 0.5).collect(),
        )
        .unwrap();
        let c = probe_coeffs(2 * 3 * 4 * 4);

        let loss_for_input = |xs: &[f64]| {
            let xt = Tensor::from_vec(&[2, 2, 4, 4], xs.to_vec()).unwrap();
            let y = layer.forward(&xt);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let mut l = layer.clone();
        let dy = Tensor::from_vec(&[2, 3, 4, 4], c.clone()).unwrap();
        let dx = l.backward(&x, &dy);
        assert_close(
            dx.data(),
            &numeric_grad(loss_for_input, x.data(), 1e-5),
            1e-6,
            "conv dx",
        );

        let loss_for_weights = |ws: &[f64]| {
            let mut probe = layer.clone();
            probe.weight.value = Tensor::from_vec(&[3, 2, 3, 3], ws.to_vec()).unwrap();
            let y = probe.forward(&x);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        assert_close(
            l.weight.grad.data(),
            &numeric_grad(loss_for_weights, layer.weight.value.data(), 1e-5),
            1e-6,
            "conv dW",
        );

        let loss_for_bias = |bs: &[f64]| {
            let mut probe = layer.clone();
            probe.bias.value = Tensor::from_vec(&[3], bs.to_vec()).unwrap();
            let y = probe.forward(&x);
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        assert_close(
            l.bias.grad.data(),
            &numeric_grad(loss_for_bias, layer.bias.value.data(), 1e-5),
            1e-6,
            "conv db",
        );
    }

    #[test]
    fn pool_and_activations_match_finite_differences() {
        let x = Tensor::from_vec(
            &[1, 2, 4, 4],
            (0..32).map(|i| ((i * 13 + 5) % 19) as f64 / 19.0 - 0.5).collect(),
        )
        .unwrap();
        let c = probe_coeffs(1 * 2 * 2 * 2);
        let pool_loss = |xs: &[f64]| {
            let xt = Tensor::from_vec(&[1, 2, 4, 4], xs.to_vec()).unwrap();
            avg_pool2(&xt)
                .data()
                .iter()
                .zip(&c)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dy = Tensor::from_vec(&[1, 2, 2, 2], c.clone()).unwrap();
        let dx = avg_pool2_backward(&[1, 2, 4, 4], &dy);
        assert_close(
            dx.data(),
            &numeric_grad(pool_loss, x.data(), 1e-5),
            1e-6,
            "pool dx",
        );

        let c2 = probe_coeffs(32);
        let tanh_loss = |xs: &[f64]| {
            let xt = Tensor::from_vec(&[1, 2, 4, 4], xs.to_vec()).unwrap();
            tanh(&xt).data().iter().zip(&c2).map(|(a, b)| a * b).sum()
        };
        let y = tanh(&x);
        let dy2 = Tensor::from_vec(&[1, 2, 4, 4], c2.clone()).unwrap();
        let dxt = tanh_backward(&y, &dy2);
        assert_close(
            dxt.data(),
            &numeric_grad(tanh_loss, x.data(), 1e-5),
            1e-6,
            "tanh dx",
        );

        // ReLU checked away from the kink at zero.
        let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let relu_loss = |xs: &[f64]| {
            let xt = Tensor::from_vec(&[1, 2, 4, 4], xs.to_vec()).unwrap();
            relu(&xt).data().iter().zip(&c2).map(|(a, b)| a * b).sum()
        };
        let dxr = relu_backward(&xr, &dy2);
        assert_close(
            dxr.data(),
            &numeric_grad(relu_loss, xr.data(), 1e-5),
            1e-6,
            "relu dx",
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_class_count() {
        // Two samples with identical logits spread a uniform softmax over
        // both classes, so the mean loss is exactly ln 2.
        let logits = Tensor::from_vec(&[2, 2], vec![0.7f64, 0.7, -1.3, -1.3]).unwrap();
        let (loss, _) = softmax_ce_loss(&logits, &[0, 1], &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let z = vec![0.3f64, -0.2, 1.1, -0.7, 0.05, 0.4];
        let targets = [2usize, 0];
        let weights = [0.5f64, 0.5];
        let logits = Tensor::from_vec(&[2, 3], z.clone()).unwrap();
        let (_, dlogits) = softmax_ce_loss(&logits, &targets, &weights);
        let loss_fn = |zs: &[f64]| {
            let lt = Tensor::from_vec(&[2, 3], zs.to_vec()).unwrap();
            softmax_ce_loss(&lt, &targets, &weights).0
        };
        assert_close(
            dlogits.data(),
            &numeric_grad(loss_fn, &z, 1e-6),
            1e-6,
            "ce dlogits",
        );
    }

    #[test]
    fn cross_entropy_weights_scale_loss_and_grads() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3f64, -0.2, 1.1, -0.7, 0.05, 0.4]).unwrap();
        let (l1, g1) = softmax_ce_loss(&logits, &[2, 0], &[1.0, 1.0]);
        let (l2, g2) = softmax_ce_loss(&logits, &[2, 0], &[0.25, 0.25]);
        assert!((l1 * 0.25 - l2).abs() < 1e-12);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a * 0.25 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.5f32, 0.5, 0.1, 0.0, 0.3, 0.3]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }

    #[test]
    fn pool_of_constant_plane_is_constant() {
        let x = Tensor::filled(&[1, 1, 4, 4], 0.37f32);
        let y = avg_pool2(&x);
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }
}
