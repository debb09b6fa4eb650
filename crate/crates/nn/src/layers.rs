use rand::Rng;

use crate::float::{gemm, Float};
use crate::mat::Mat;
use crate::param::{GradStore, Param, ParamBuilder};

/// Initialization scale for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Affine map `y = x W + b`, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        pb.push(name);
        let weight = pb.normal("weight", &[in_dim, out_dim], INIT_STD);
        let bias = pb.constant("bias", &[out_dim], 0.0);
        pb.pop();
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.in_dim, "{}: input width", self.weight.name);
        let mut out = Mat::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.bias.value);
        }
        let w = crate::float::View::new(&self.weight.value, 0, self.in_dim, self.out_dim, self.out_dim);
        gemm(T::one(), x.view(), w, T::one(), &mut out.data, 0, self.out_dim);
        out
    }

    /// Returns `dL/dx`; accumulates parameter gradients when `grads` is given.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grads: Option<&mut GradStore<T>>) -> Mat<T> {
        if let Some(g) = grads {
            let gw = g.get_mut(&self.weight);
            gemm(T::one(), x.view().t(), dy.view(), T::one(), gw, 0, self.out_dim);
            let gb = g.get_mut(&self.bias);
            for r in 0..dy.rows {
                for (acc, v) in gb.iter_mut().zip(dy.row(r)) {
                    *acc += *v;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, self.in_dim);
        let w = crate::float::View::new(&self.weight.value, 0, self.in_dim, self.out_dim, self.out_dim);
        gemm(T::one(), dy.view(), w.t(), T::zero(), &mut dx.data, 0, self.in_dim);
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub shift: Param<T>,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    /// Normalized input before gain/shift.
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        pb.push(name);
        let gain = pb.constant("gain", &[dim], 1.0);
        let shift = pb.constant("shift", &[dim], 0.0);
        pb.pop();
        LayerNorm { gain, shift, dim, eps: 1e-5 }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        assert_eq!(x.cols, self.dim);
        let n = T::lit(self.dim as f64);
        let eps = T::lit(self.eps);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for i in 0..self.dim {
                yr[i] = xh[i] * self.gain.value[i] + self.shift.value[i];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Mat<T>, grads: Option<&mut GradStore<T>>) -> Mat<T> {
        let n = T::lit(self.dim as f64);
        if let Some(g) = grads {
            {
                let gg = g.get_mut(&self.gain);
                for r in 0..dy.rows {
                    for ((acc, &d), &xh) in gg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                        *acc += d * xh;
                    }
                }
            }
            let gs = g.get_mut(&self.shift);
            for r in 0..dy.rows {
                for (acc, &d) in gs.iter_mut().zip(dy.row(r)) {
                    *acc += d;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for i in 0..self.dim {
                let dxh = dyr[i] * self.gain.value[i];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[i];
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            let rs = cache.rstd[r];
            let dxr = dx.row_mut(r);
            for i in 0..self.dim {
                let dxh = dyr[i] * self.gain.value[i];
                dxr[i] = (dxh - mean_dxh - xh[i] * mean_dxh_xh) * rs;
            }
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gain);
        f(&self.shift);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: &Mat<T>) -> Mat<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let data = x.data.iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
    Mat::from_vec(x.rows, x.cols, data)
}

/// Backward of [`gelu`] given its input `x`.
pub fn gelu_backward<T: Float>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three_a = T::lit(3.0 * GELU_A);
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &d)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}
