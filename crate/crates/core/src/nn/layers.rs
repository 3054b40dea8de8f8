//! Forward and backward kernels for the layer kinds.
//!
//! All kernels take batched activations with the batch on the leading axis and
//! accumulate parameter gradients (`+=`) so contributions from several heads
//! can be summed into the same slots.

use super::tensor::{axpy, Tensor};

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.rows();
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    // transpose once so the inner loop runs over contiguous output columns
    let mut wt = vec![0.0; in_dim * out_dim];
    for o in 0..out_dim {
        for (k, &v) in w.row(o).iter().enumerate() {
            wt[k * out_dim + o] = v;
        }
    }
    let mut y = Tensor::zeros(&[n, out_dim]);
    for i in 0..n {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        yi.copy_from_slice(b.data());
        for (k, &xk) in xi.iter().enumerate() {
            if xk != 0.0 {
                axpy(xk, &wt[k * out_dim..(k + 1) * out_dim], yi);
            }
        }
    }
    y
}

/// Accumulates `dW += dyᵀ x`, `db += Σ dy`; returns `dx = dy W` when requested.
pub(crate) fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    need_dx: bool,
) -> Option<Tensor> {
    let n = x.rows();
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let mut dx = need_dx.then(|| Tensor::zeros(&[n, in_dim]));
    for i in 0..n {
        let xi = x.row(i);
        let dyi = dy.row(i);
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, xi, dw.row_mut(o));
            db.data_mut()[o] += g;
            if let Some(dx) = dx.as_mut() {
                axpy(g, w.row(o), dx.row_mut(i));
            }
        }
    }
    debug_assert_eq!(dw.shape(), &[out_dim, in_dim]);
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k) / self.stride + 1
    }
}

/// Valid (unpadded) strided 2-D cross-correlation. `w` is `[out_c, in_c, k, k]`.
pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Tensor {
    let n = x.rows();
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = Tensor::zeros(&[n, g.out_c, oh, ow]);
    let wd = w.data();
    for s in 0..n {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for oc in 0..g.out_c {
            let bias = b.data()[oc];
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = bias;
                    for ic in 0..g.in_c {
                        for kr in 0..g.k {
                            let xrow = (ic * g.in_h + r * g.stride + kr) * g.in_w + c * g.stride;
                            let wrow = ((oc * g.in_c + ic) * g.k + kr) * g.k;
                            for kc in 0..g.k {
                                acc += wd[wrow + kc] * xs[xrow + kc];
                            }
                        }
                    }
                    ys[(oc * oh + r) * ow + c] = acc;
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
    g: ConvGeom,
    need_dx: bool,
) -> Option<Tensor> {
    let n = x.rows();
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let wd = w.data();
    for s in 0..n {
        let xs = x.row(s);
        let dys = dy.row(s);
        for oc in 0..g.out_c {
            for r in 0..oh {
                for c in 0..ow {
                    let grad = dys[(oc * oh + r) * ow + c];
                    if grad == 0.0 {
                        continue;
                    }
                    db.data_mut()[oc] += grad;
                    for ic in 0..g.in_c {
                        for kr in 0..g.k {
                            let xrow = (ic * g.in_h + r * g.stride + kr) * g.in_w + c * g.stride;
                            let wrow = ((oc * g.in_c + ic) * g.k + kr) * g.k;
                            axpy(grad, &xs[xrow..xrow + g.k], &mut dw.data_mut()[wrow..wrow + g.k]);
                            if let Some(dx) = dx.as_mut() {
                                let dxs = dx.row_mut(s);
                                axpy(grad, &wd[wrow..wrow + g.k], &mut dxs[xrow..xrow + g.k]);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient passes where the layer input was strictly positive.
pub(crate) fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}
