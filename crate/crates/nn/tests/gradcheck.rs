//! Finite-difference checks of every hand-written backward pass, in f64.

use lqae_nn::attention::SelfAttention;
use lqae_nn::layers::{gelu, gelu_backward, LayerNorm, Linear};
use lqae_nn::transformer::{StackConfig, TransformerStack};
use lqae_nn::{AdamW, AdamWConfig, GradStore, Mat, Param, ParamBuilder, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn weighted_sum(y: &Mat<f64>, w: &Mat<f64>) -> f64 {
    y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    let rel = (analytic - numeric).abs() / denom;
    assert!(rel < 1e-5, "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})");
}

struct Wrap<'a>(&'a mut TransformerStack<f64>);

impl Parameters<f64> for Wrap<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.0.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.0.visit_mut(f)
    }
}

#[test]
fn linear_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = ChaCha8Rng::seed_from_u64(1);
    let mut pb = ParamBuilder::new(&mut init);
    let mut lin: Linear<f64> = Linear::new(&mut pb, "lin", 5, 3);
    lin.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_mat(&mut rng, 4, 5);
    let w = random_mat(&mut rng, 4, 3);
    struct L<'a>(&'a Linear<f64>);
    impl Parameters<f64> for L<'_> {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            self.0.visit(f)
        }
        fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
    }
    let mut grads = GradStore::for_params(&L(&lin));
    let dx = lin.backward(&x, &w, Some(&mut grads));
    let h = 1e-6;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num = (weighted_sum(&lin.forward(&xp), &w) - weighted_sum(&lin.forward(&xm), &w)) / (2.0 * h);
        assert_close(dx.data[i], num, "linear dx");
    }
    let gw = grads.get(&lin.weight).to_vec();
    for (i, &g) in gw.iter().enumerate() {
        let orig = lin.weight.value[i];
        lin.weight.value[i] = orig + h;
        let fp = weighted_sum(&lin.forward(&x), &w);
        lin.weight.value[i] = orig - h;
        let fm = weighted_sum(&lin.forward(&x), &w);
        lin.weight.value[i] = orig;
        assert_close(g, (fp - fm) / (2.0 * h), "linear dW");
    }
}

#[test]
fn layer_norm_and_gelu_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut init = ChaCha8Rng::seed_from_u64(3);
    let mut pb = ParamBuilder::new(&mut init);
    let mut ln: LayerNorm<f64> = LayerNorm::new(&mut pb, "ln", 6);
    ln.gain.value.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    let x = random_mat(&mut rng, 3, 6);
    let w = random_mat(&mut rng, 3, 6);
    let (_, cache) = ln.forward(&x);
    let dx = ln.backward(&cache, &w, None);
    let dg = gelu_backward(&x, &w);
    let h = 1e-6;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num = (weighted_sum(&ln.forward(&xp).0, &w) - weighted_sum(&ln.forward(&xm).0, &w)) / (2.0 * h);
        assert_close(dx.data[i], num, "layer norm dx");
        let num = (weighted_sum(&gelu(&xp), &w) - weighted_sum(&gelu(&xm), &w)) / (2.0 * h);
        assert_close(dg.data[i], num, "gelu dx");
    }
}

#[test]
fn attention_input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut init = ChaCha8Rng::seed_from_u64(5);
    let mut pb = ParamBuilder::new(&mut init);
    let mut attn: SelfAttention<f64> = SelfAttention::new(&mut pb, "attn", 8, 2);
    // Larger weights so the softmax is far from uniform.
    attn.qkv.weight.value.iter_mut().for_each(|v| *v *= 25.0);
    let (batch, seq) = (2, 3);
    let x = random_mat(&mut rng, batch * seq, 8);
    let w = random_mat(&mut rng, batch * seq, 8);
    let (_, cache) = attn.forward(&x, batch, seq);
    let dx = attn.backward(&x, &cache, &w, None);
    let h = 1e-6;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num = (weighted_sum(&attn.forward(&xp, batch, seq).0, &w)
            - weighted_sum(&attn.forward(&xm, batch, seq).0, &w))
            / (2.0 * h);
        assert_close(dx.data[i], num, "attention dx");
    }
}

#[test]
fn stack_gradients_for_inputs_and_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut init = ChaCha8Rng::seed_from_u64(7);
    let cfg = StackConfig { width: 8, depth: 2, heads: 2, mlp_ratio: 2, seq: 3 };
    let mut pb = ParamBuilder::new(&mut init);
    let mut stack: TransformerStack<f64> = TransformerStack::new(&mut pb, "s", cfg);
    stack.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
    let batch = 2;
    let x = random_mat(&mut rng, batch * cfg.seq, cfg.width);
    let w = random_mat(&mut rng, batch * cfg.seq, cfg.width);
    let mut grads = GradStore::for_params(&Wrap(&mut stack));
    let (_, cache) = stack.forward(&x, batch);
    let dx = stack.backward(&cache, &w, Some(&mut grads));
    let h = 1e-6;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num = (weighted_sum(&stack.forward(&xp, batch).0, &w) - weighted_sum(&stack.forward(&xm, batch).0, &w))
            / (2.0 * h);
        assert_close(dx.data[i], num, "stack dx");
    }
    let mut names = Vec::new();
    stack.visit(&mut |p| names.push((p.id, p.numel(), p.name.clone())));
    for (id, n, name) in names {
        for i in (0..n).step_by(7) {
            let set = |s: &mut TransformerStack<f64>, delta: f64| {
                s.visit_mut(&mut |p| {
                    if p.id == id {
                        p.value[i] += delta
                    }
                })
            };
            set(&mut stack, h);
            let fp = weighted_sum(&stack.forward(&x, batch).0, &w);
            set(&mut stack, -2.0 * h);
            let fm = weighted_sum(&stack.forward(&x, batch).0, &w);
            set(&mut stack, h);
            assert_close(grads.by_id(id)[i], (fp - fm) / (2.0 * h), &name);
        }
    }
    assert_eq!(Wrap(&mut stack).param_count(), cfg.param_count());
}

#[test]
fn adamw_with_zero_learning_rate_leaves_parameters_bit_identical() {
    let mut init = ChaCha8Rng::seed_from_u64(8);
    let cfg = StackConfig { width: 8, depth: 1, heads: 2, mlp_ratio: 2, seq: 3 };
    let mut pb = ParamBuilder::new(&mut init);
    let mut stack: TransformerStack<f32> = TransformerStack::new(&mut pb, "s", cfg);
    let before = stack.clone();
    struct W32<'a>(&'a mut TransformerStack<f32>);
    impl Parameters<f32> for W32<'_> {
        fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
            self.0.visit(f)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
            self.0.visit_mut(f)
        }
    }
    let mut grads = GradStore::for_params(&W32(&mut stack));
    let x = Mat::from_fn(6, 8, |r, c| (r * 8 + c) as f32 * 0.01);
    let (_, cache) = stack.forward(&x, 2);
    stack.backward(&cache, &x, Some(&mut grads));
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &W32(&mut stack));
    opt.update(&mut W32(&mut stack), &grads, 0.0);
    let mut a = Vec::new();
    before.visit(&mut |p| a.extend(p.value.iter().map(|v| v.to_bits())));
    let mut b = Vec::new();
    stack.visit(&mut |p| b.extend(p.value.iter().map(|v| v.to_bits())));
    assert_eq!(a, b);
    assert_eq!(opt.step, 1);
}
