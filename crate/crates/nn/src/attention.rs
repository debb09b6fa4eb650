use rand::Rng;

use crate::float::{gemm, Float, View};
use crate::layers::Linear;
use crate::mat::Mat;
use crate::param::{GradStore, Param, ParamBuilder};

/// Bidirectional multi-head self-attention over fixed-length sequences.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    qkv: Mat<T>,
    /// Softmax probabilities, `batch x heads x seq x seq`.
    probs: Vec<T>,
    ctx: Mat<T>,
    batch: usize,
    seq: usize,
}

impl<T: Float> SelfAttention<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        pb.push(name);
        let qkv = Linear::new(pb, "qkv", width, 3 * width);
        let proj = Linear::new(pb, "proj", width, width);
        pb.pop();
        SelfAttention { qkv, proj, heads, width }
    }

    pub fn param_count(width: usize) -> usize {
        Linear::<T>::param_count(width, 3 * width) + Linear::<T>::param_count(width, width)
    }

    pub fn forward(&self, x: &Mat<T>, batch: usize, seq: usize) -> (Mat<T>, AttentionCache<T>) {
        assert_eq!(x.rows, batch * seq);
        let w = self.width;
        let dh = w / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut probs = vec![T::zero(); batch * self.heads * seq * seq];
        let mut ctx = Mat::zeros(batch * seq, w);
        for b in 0..batch {
            for h in 0..self.heads {
                let base = b * seq * 3 * w;
                let q = View::new(&qkv.data, base + h * dh, seq, dh, 3 * w);
                let k = View::new(&qkv.data, base + w + h * dh, seq, dh, 3 * w);
                let v = View::new(&qkv.data, base + 2 * w + h * dh, seq, dh, 3 * w);
                let p_off = (b * self.heads + h) * seq * seq;
                gemm(scale, q, k.t(), T::zero(), &mut probs, p_off, seq);
                softmax_rows(&mut probs[p_off..p_off + seq * seq], seq);
                let p = View::new(&probs, p_off, seq, seq, seq);
                gemm(T::one(), p, v, T::zero(), &mut ctx.data, b * seq * w + h * dh, w);
            }
        }
        let y = self.proj.forward(&ctx);
        (y, AttentionCache { qkv, probs, ctx, batch, seq })
    }

    pub fn backward(
        &self,
        x: &Mat<T>,
        cache: &AttentionCache<T>,
        dy: &Mat<T>,
        mut grads: Option<&mut GradStore<T>>,
    ) -> Mat<T> {
        let (batch, seq) = (cache.batch, cache.seq);
        let w = self.width;
        let dh = w / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let dctx = self.proj.backward(&cache.ctx, dy, grads.as_deref_mut());
        let mut dqkv = Mat::zeros(batch * seq, 3 * w);
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..self.heads {
                let base = b * seq * 3 * w;
                let q = View::new(&cache.qkv.data, base + h * dh, seq, dh, 3 * w);
                let k = View::new(&cache.qkv.data, base + w + h * dh, seq, dh, 3 * w);
                let v = View::new(&cache.qkv.data, base + 2 * w + h * dh, seq, dh, 3 * w);
                let p_off = (b * self.heads + h) * seq * seq;
                let p = View::new(&cache.probs, p_off, seq, seq, seq);
                let dc = View::new(&dctx.data, b * seq * w + h * dh, seq, dh, w);
                // dV = P^T dctx
                gemm(T::one(), p.t(), dc, T::zero(), &mut dqkv.data, base + 2 * w + h * dh, 3 * w);
                // dP = dctx V^T
                gemm(T::one(), dc, v.t(), T::zero(), &mut dp, 0, seq);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                let probs = &cache.probs[p_off..p_off + seq * seq];
                for r in 0..seq {
                    let pr = &probs[r * seq..(r + 1) * seq];
                    let dr = &mut dp[r * seq..(r + 1) * seq];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                let ds = View::new(&dp, 0, seq, seq, seq);
                gemm(T::one(), ds, k, T::zero(), &mut dqkv.data, base + h * dh, 3 * w);
                gemm(T::one(), ds.t(), q, T::zero(), &mut dqkv.data, base + w + h * dh, 3 * w);
            }
        }
        self.qkv.backward(x, &dqkv, grads)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.qkv.visit(f);
        self.proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// In-place numerically stable softmax over each row of a `rows x n` block.
pub fn softmax_rows<T: Float>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
