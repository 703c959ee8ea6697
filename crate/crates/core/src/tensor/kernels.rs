//! Raw f64 kernels behind the tape ops. All loops are sequential with a
//! fixed order so results are bit-reproducible across runs and transports.

/// c[m×n] = a[m×k] · b[k×n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += a_il * brow[j];
            }
        }
    }
    c
}

/// out[n×m] = xᵀ for x[m×n]
pub fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = x[i * n + j];
        }
    }
    t
}

/// Output spatial size of a cross-correlation.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Cross-correlation of x[N,C,H,W] with k[F,C,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    k: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of `conv2d` in its first argument: scatters g[N,F,H',W'] through
/// k[F,C,kh,kw] into an output of explicit size [N,C,out_h,out_w].
#[allow(clippy::too_many_arguments)]
pub fn tconv2d(
    g: &[f64],
    k: &[f64],
    n: usize,
    f: usize,
    gh: usize,
    gw: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * out_h * out_w];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..gh {
                for ox in 0..gw {
                    let gv = g[((ni * f + fi) * gh + oy) * gw + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= out_h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= out_w as isize {
                                    continue;
                                }
                                let kv = k[((fi * c + ci) * kh + ky) * kw + kx];
                                out[((ni * c + ci) * out_h + iy as usize) * out_w + ix as usize] +=
                                    gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel gradient of `conv2d`: dk[F,C,kh,kw] from x[N,C,H,W] and g[N,F,H',W'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_wgrad(
    x: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    gh: usize,
    gw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let mut dk = vec![0.0; f * c * kh * kw];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..gh {
                for ox in 0..gw {
                    let gv = g[((ni * f + fi) * gh + oy) * gw + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dk[((fi * c + ci) * kh + ky) * kw + kx] +=
                                    gv * x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + eˣ) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
