use rand::Rng;

use crate::attention::{AttentionCache, SelfAttention};
use crate::float::Float;
use crate::layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear, INIT_STD};
use crate::mat::Mat;
use crate::param::{GradStore, Param, ParamBuilder};

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Sequence length; sets the size of the learned positional table.
    pub seq: usize,
}

impl StackConfig {
    /// Exact parameter count of a [`TransformerStack`] with this shape.
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let hidden = w * self.mlp_ratio;
        let block = 2 * LayerNorm::<f32>::param_count(w)
            + SelfAttention::<f32>::param_count(w)
            + Linear::<f32>::param_count(w, hidden)
            + Linear::<f32>::param_count(hidden, w);
        self.seq * w + self.depth * block + LayerNorm::<f32>::param_count(w)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1_out: Mat<T>,
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2_out: Mat<T>,
    ln2: LayerNormCache<T>,
    fc1_out: Mat<T>,
    act: Mat<T>,
}

impl<T: Float> Block<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &StackConfig) -> Self {
        pb.push(name);
        let ln1 = LayerNorm::new(pb, "ln1", cfg.width);
        let attn = SelfAttention::new(pb, "attn", cfg.width, cfg.heads);
        let ln2 = LayerNorm::new(pb, "ln2", cfg.width);
        let fc1 = Linear::new(pb, "fc1", cfg.width, cfg.width * cfg.mlp_ratio);
        let fc2 = Linear::new(pb, "fc2", cfg.width * cfg.mlp_ratio, cfg.width);
        pb.pop();
        Block { ln1, attn, ln2, fc1, fc2 }
    }

    pub fn forward(&self, x: &Mat<T>, batch: usize, seq: usize) -> (Mat<T>, BlockCache<T>) {
        let (ln1_out, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&ln1_out, batch, seq);
        let mid = x.add(&a);
        let (ln2_out, ln2) = self.ln2.forward(&mid);
        let fc1_out = self.fc1.forward(&ln2_out);
        let act = gelu(&fc1_out);
        let m = self.fc2.forward(&act);
        let out = mid.add(&m);
        (out, BlockCache { ln1_out, ln1, attn, ln2_out, ln2, fc1_out, act })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Mat<T>, mut grads: Option<&mut GradStore<T>>) -> Mat<T> {
        let d_act = self.fc2.backward(&cache.act, dy, grads.as_deref_mut());
        let d_fc1 = gelu_backward(&cache.fc1_out, &d_act);
        let d_ln2 = self.fc1.backward(&cache.ln2_out, &d_fc1, grads.as_deref_mut());
        let mut d_mid = self.ln2.backward(&cache.ln2, &d_ln2, grads.as_deref_mut());
        d_mid.add_assign(dy);
        let d_ln1 = self.attn.backward(&cache.ln1_out, &cache.attn, &d_mid, grads.as_deref_mut());
        let mut dx = self.ln1.backward(&cache.ln1, &d_ln1, grads);
        dx.add_assign(&d_mid);
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Learned positional embedding, a stack of blocks and a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack<T> {
    pub cfg: StackConfig,
    pub pos: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct StackCache<T> {
    /// Input to each block; `hidden[0]` is the embedding output. Length `depth + 1`
    /// with the last entry the pre-norm output of the final block.
    pub hidden: Vec<Mat<T>>,
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
    batch: usize,
}

impl<T: Float> TransformerStack<T> {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: StackConfig) -> Self {
        pb.push(name);
        let pos = pb.normal("pos", &[cfg.seq, cfg.width], INIT_STD);
        let blocks = (0..cfg.depth).map(|i| Block::new(pb, &format!("blocks.{i}"), &cfg)).collect();
        let ln_f = LayerNorm::new(pb, "ln_f", cfg.width);
        pb.pop();
        TransformerStack { cfg, pos, blocks, ln_f }
    }

    /// Adds positional embeddings to `x` (`batch*seq x width`) and runs the stack.
    pub fn forward(&self, x: &Mat<T>, batch: usize) -> (Mat<T>, StackCache<T>) {
        let seq = self.cfg.seq;
        assert_eq!(x.rows, batch * seq, "stack expects {} rows", batch * seq);
        assert_eq!(x.cols, self.cfg.width);
        let mut h = x.clone();
        for r in 0..h.rows {
            let p = &self.pos.value[(r % seq) * self.cfg.width..(r % seq + 1) * self.cfg.width];
            for (v, &pv) in h.row_mut(r).iter_mut().zip(p) {
                *v += pv;
            }
        }
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, batch, seq);
            hidden.push(h);
            caches.push(cache);
            h = next;
        }
        let (out, ln_f) = self.ln_f.forward(&h);
        hidden.push(h);
        (out, StackCache { hidden, blocks: caches, ln_f, batch })
    }

    /// Backward through the stack; the returned gradient is with respect to
    /// the input `x` (the positional add is an identity for `x`).
    pub fn backward(&self, cache: &StackCache<T>, dy: &Mat<T>, mut grads: Option<&mut GradStore<T>>) -> Mat<T> {
        let mut d = self.ln_f.backward(&cache.ln_f, dy, grads.as_deref_mut());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(bc, &d, grads.as_deref_mut());
        }
        if let Some(g) = grads {
            let seq = self.cfg.seq;
            let w = self.cfg.width;
            let gp = g.get_mut(&self.pos);
            for r in 0..cache.batch * seq {
                let s = r % seq;
                for (acc, &v) in gp[s * w..(s + 1) * w].iter_mut().zip(d.row(r)) {
                    *acc += v;
                }
            }
        }
        d
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.pos);
        for b in &self.blocks {
            b.visit(f);
        }
        self.ln_f.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.pos);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_f.visit_mut(f);
    }
}
