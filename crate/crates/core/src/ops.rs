//! Forward and backward kernels for the differentiable operation set.
//!
//! These are plain functions over [`Tensor`]s; [`crate::tape::Tape`] records
//! them and calls the `*_backward` halves during reverse traversal. Inner
//! products (convolution, dense) accumulate in `f64` and round once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflect-101 index mapping: `-1 -> 1`, `n -> n - 2`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    // Pads are validated to be < n, so a single reflection suffices; the
    // loop only guards callers that bypass `mirror_pad`.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn mirror_pad(input: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if pad_h >= h || pad_w >= w {
        return Err(Error::UnsupportedPadding {
            pad_h,
            pad_w,
            height: h,
            width: w,
        });
    }
    let (ph, pw) = (h + 2 * pad_h, w + 2 * pad_w);
    let src = input.data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for r in 0..ph {
        let sr = reflect_index(r as isize - pad_h as isize, h);
        for col in 0..pw {
            let sc = reflect_index(col as isize - pad_w as isize, w);
            let base = (sr * w + sc) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(vec![ph, pw, c], out)
}

/// Folds a gradient w.r.t. the padded tensor back onto the unpadded input.
pub fn mirror_pad_backward(
    grad_out: &[f32],
    input_shape: &[usize],
    pad_h: usize,
    pad_w: usize,
) -> Vec<f32> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ph, pw) = (h + 2 * pad_h, w + 2 * pad_w);
    let mut grad = vec![0.0f32; h * w * c];
    for r in 0..ph {
        let sr = reflect_index(r as isize - pad_h as isize, h);
        for col in 0..pw {
            let sc = reflect_index(col as isize - pad_w as isize, w);
            let dst = (sr * w + sc) * c;
            let src = (r * pw + col) * c;
            for k in 0..c {
                grad[dst + k] += grad_out[src + k];
            }
        }
    }
    grad
}

/// Valid cross-correlation of an already padded input.
///
/// `input` is `Hp x Wp x C`, `kernel` is `kh x kw x C x F` with odd sizes and
/// `bias` has `F` entries. The output is `(Hp - kh + 1) x (Wp - kw + 1) x F`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (hp, wp, c) = input.dims3()?;
    let (kh, kw, kc, f) = kernel_dims(kernel)?;
    if kc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels but kernel expects {kc}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d: kernel size {kh}x{kw} must be odd"
        )));
    }
    if bias.len() != f {
        return Err(Error::Shape(format!(
            "conv2d: bias has {} entries, kernel has {f} filters",
            bias.len()
        )));
    }
    if hp < kh || wp < kw {
        return Err(Error::Shape(format!(
            "conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}"
        )));
    }
    let (oh, ow) = (hp - kh + 1, wp - kw + 1);
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0f32; oh * ow * f];
    let mut acc = vec![0.0f64; f];
    for oy in 0..oh {
        for ox in 0..ow {
            for (a, &bv) in acc.iter_mut().zip(b) {
                *a = bv as f64;
            }
            for dy in 0..kh {
                for dx in 0..kw {
                    let xb = ((oy + dy) * wp + ox + dx) * c;
                    let kb = (dy * kw + dx) * c * f;
                    for ci in 0..c {
                        let xv = x[xb + ci] as f64;
                        let krow = &k[kb + ci * f..kb + ci * f + f];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv as f64;
                        }
                    }
                }
            }
            let ob = (oy * ow + ox) * f;
            for (o, &a) in out[ob..ob + f].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, f], out)
}

pub struct Conv2dGrads {
    pub input: Vec<f32>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    grad_out: &[f32],
    input: &Tensor,
    kernel: &Tensor,
    want_kernel: bool,
) -> Conv2dGrads {
    let (hp, wp, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, f) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let (oh, ow) = (hp - kh + 1, wp - kw + 1);
    let x = input.data();
    let k = kernel.data();
    let mut gx = vec![0.0f64; hp * wp * c];
    let mut gk = if want_kernel {
        vec![0.0f64; k.len()]
    } else {
        Vec::new()
    };
    let mut gb = vec![0.0f64; f];
    for oy in 0..oh {
        for ox in 0..ow {
            let gb_ = (oy * ow + ox) * f;
            let g = &grad_out[gb_..gb_ + f];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (acc, &gv) in gb.iter_mut().zip(g) {
                *acc += gv as f64;
            }
            for dy in 0..kh {
                for dx in 0..kw {
                    let xb = ((oy + dy) * wp + ox + dx) * c;
                    let kb = (dy * kw + dx) * c * f;
                    for ci in 0..c {
                        let krow = &k[kb + ci * f..kb + ci * f + f];
                        let mut s = 0.0f64;
                        for (&kv, &gv) in krow.iter().zip(g) {
                            s += kv as f64 * gv as f64;
                        }
                        gx[xb + ci] += s;
                        if want_kernel {
                            let xv = x[xb + ci] as f64;
                            let grow = &mut gk[kb + ci * f..kb + ci * f + f];
                            for (acc, &gv) in grow.iter_mut().zip(g) {
                                *acc += xv * gv as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Conv2dGrads {
        input: gx.into_iter().map(|v| v as f32).collect(),
        kernel: gk.into_iter().map(|v| v as f32).collect(),
        bias: gb.into_iter().map(|v| v as f32).collect(),
    }
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape() {
        &[kh, kw, c, f] => Ok((kh, kw, c, f)),
        other => Err(Error::Shape(format!(
            "conv2d: kernel must be kh x kw x C x F, found {other:?}"
        ))),
    }
}

pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avg_pool2: spatial size {h}x{w} must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let at = |r: usize, col: usize| x[(r * w + col) * c + k];
                let (r, col) = (2 * oy, 2 * ox);
                let s = at(r, col) + at(r, col + 1) + at(r + 1, col) + at(r + 1, col + 1);
                out[(oy * ow + ox) * c + k] = s * 0.25;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn avg_pool2_backward(grad_out: &[f32], input_shape: &[usize]) -> Vec<f32> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let ow = w / 2;
    let mut grad = vec![0.0f32; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let src = ((r / 2) * ow + col / 2) * c;
            let dst = (r * w + col) * c;
            for k in 0..c {
                grad[dst + k] = grad_out[src + k] * 0.25;
            }
        }
    }
    grad
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the upstream gradient only where the input was strictly positive.
pub fn relu_backward(grad_out: &[f32], input: &Tensor) -> Vec<f32> {
    grad_out
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// `output[j] = sum_i input[i] * weights[i][j] + bias[j]`, with `input`
/// flattened in row-major order.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = match weights.shape() {
        &[n, m] => (n, m),
        other => {
            return Err(Error::Shape(format!(
                "dense: weights must be N x M, found {other:?}"
            )))
        }
    };
    if input.len() != n {
        return Err(Error::Shape(format!(
            "dense: input has {} elements, weights expect {n}",
            input.len()
        )));
    }
    if bias.len() != m {
        return Err(Error::Shape(format!(
            "dense: bias has {} entries, expected {m}",
            bias.len()
        )));
    }
    let wd = weights.data();
    let mut acc: Vec<f64> = bias.data().iter().map(|&b| b as f64).collect();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &wd[i * m..(i + 1) * m];
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += xv as f64 * wv as f64;
        }
    }
    Tensor::new(vec![m], acc.into_iter().map(|v| v as f32).collect())
}

pub struct DenseGrads {
    pub input: Vec<f32>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn dense_backward(
    grad_out: &[f32],
    input: &Tensor,
    weights: &Tensor,
    want_weights: bool,
) -> DenseGrads {
    let m = weights.shape()[1];
    let wd = weights.data();
    let gi = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let row = &wd[i * m..(i + 1) * m];
            row.iter()
                .zip(grad_out)
                .map(|(&w, &g)| w as f64 * g as f64)
                .sum::<f64>() as f32
        })
        .collect();
    let gw = if want_weights {
        input
            .data()
            .iter()
            .flat_map(|&x| grad_out.iter().map(move |&g| x * g))
            .collect()
    } else {
        Vec::new()
    };
    DenseGrads {
        input: gi,
        weights: gw,
        bias: grad_out.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand_pcg::Pcg32;

    fn random(shape: &[usize], rng: &mut Pcg32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn reflect_101_row() {
        let row = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let padded = mirror_pad(&row, 0, 1).unwrap();
        assert_eq!(padded.data(), &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn zero_pad_is_identity() {
        let mut rng = Pcg32::new(1, 1);
        let x = random(&[4, 3, 2], &mut rng);
        assert_eq!(mirror_pad(&x, 0, 0).unwrap(), x);
    }

    #[test]
    fn ramp_pad_matches_index_oracle() {
        let x = Tensor::from_fn(&[3, 3, 1], |i| i as f32);
        let padded = mirror_pad(&x, 2, 2).unwrap();
        // reflect-101 on 0..3 with pad 2: -2 -> 2, -1 -> 1, 3 -> 1, 4 -> 0
        let map = [2usize, 1, 0, 1, 2, 1, 0];
        for r in 0..7 {
            for c in 0..7 {
                let expected = (map[r] * 3 + map[c]) as f32;
                assert_eq!(padded.data()[r * 7 + c], expected, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn oversized_pad_rejected() {
        let x = Tensor::zeros(&[2, 5, 1]);
        assert!(matches!(
            mirror_pad(&x, 2, 1),
            Err(Error::UnsupportedPadding { .. })
        ));
        assert!(mirror_pad(&x, 1, 5).is_err());
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut rng = Pcg32::new(2, 1);
        let x = random(&[4, 5, 1], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::full(&[4, 4, 1], 0.5);
        let padded = mirror_pad(&x, 1, 1).unwrap();
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&padded, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[4, 4, 1]);
        assert!(out.data().iter().all(|&v| (v - 4.5).abs() < 1e-6));
    }

    #[test]
    fn convolution_matches_nested_loop_oracle() {
        let mut rng = Pcg32::new(3, 7);
        let x = random(&[5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let padded = mirror_pad(&x, 1, 1).unwrap();
        let out = conv2d(&padded, &k, &b).unwrap();
        let p = padded.data();
        for oy in 0..5 {
            for ox in 0..5 {
                for f in 0..3 {
                    let mut s = b.data()[f] as f64;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            for c in 0..2 {
                                let xv = p[((oy + dy) * 7 + ox + dx) * 2 + c];
                                let kv = k.data()[((dy * 3 + dx) * 2 + c) * 3 + f];
                                s += xv as f64 * kv as f64;
                            }
                        }
                    }
                    let got = out.data()[(oy * 5 + ox) * 3 + f];
                    assert!((got as f64 - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn convolution_channel_mismatch() {
        let x = Tensor::zeros(&[3, 3, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 1]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);

        let c = Tensor::full(&[4, 6, 2], 0.3);
        let p = avg_pool2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2]);
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        assert!(avg_pool2(&Tensor::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn pooling_matches_window_oracle() {
        let mut rng = Pcg32::new(4, 1);
        let x = random(&[4, 4, 1], &mut rng);
        let out = avg_pool2(&x).unwrap();
        let d = x.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for r in 2 * oy..2 * oy + 2 {
                    for c in 2 * ox..2 * ox + 2 {
                        s += d[r * 4 + c];
                    }
                }
                assert!((out.data()[oy * 2 + ox] - s / 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&[1.0, 1.0, 1.0], &x);
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
        let neg = Tensor::full(&[4], -2.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&[1.0; 4], &neg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::full(&[2], 1.0);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(dense(&x, &w, &Tensor::zeros(&[2])).unwrap().data(), x.data());
        assert!(dense(&Tensor::zeros(&[3]), &w, &b).is_err());
    }

    #[test]
    fn dense_matches_matrix_product_oracle() {
        let mut rng = Pcg32::new(5, 3);
        let x = random(&[8], &mut rng);
        let w = random(&[8, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let out = dense(&x, &w, &b).unwrap();
        for j in 0..4 {
            let mut s = b.data()[j] as f64;
            for i in 0..8 {
                s += x.data()[i] as f64 * w.data()[i * 4 + j] as f64;
            }
            assert!((out.data()[j] as f64 - s).abs() < 1e-6);
        }
    }
}
