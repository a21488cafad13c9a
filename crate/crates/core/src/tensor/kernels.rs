// Raw loops behind the tape ops. Inputs are assumed shape-checked.

use super::Tensor;

/// `a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// `aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    matmul(a, &transpose(b))
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Normalized rows plus the per-row reciprocal standard deviations.
pub(crate) fn layer_norm_core(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut xhat = x.data().to_vec();
    let mut rstd = Vec::with_capacity(m);
    for row in xhat.chunks_mut(n).take(m) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (Tensor::from_parts(vec![m, n], xhat), rstd)
}

/// Geometry of a 3×3, stride-2, padding-1 convolution over an HWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(2)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(2)
    }
}

/// Unfold `x: (H·W)×Cin` into `(H'·W')×(9·Cin)` patches.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let kc = 9 * g.cin;
    let mut cols = vec![0.0; oh * ow * kc];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * kc;
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = (iy as usize * g.width + ix as usize) * g.cin;
                    let dst = base + (ky * 3 + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input map.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let kc = 9 * g.cin;
    let mut x = vec![0.0; g.height * g.width * g.cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * kc;
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.width + ix as usize) * g.cin;
                    let src = base + (ky * 3 + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.5, -1., 2., 3., 0., 1.]).unwrap();
        let tn = matmul_tn(&a, &b);
        let reference = matmul(&transpose(&a), &b);
        assert_eq!(tn, reference);
        let nt = matmul_nt(&a, &b);
        assert_eq!(nt, matmul(&a, &transpose(&b)));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { height: 5, width: 4, cin: 2 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
