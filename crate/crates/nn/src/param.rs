use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;
use crate::mat::Mat;

/// A named parameter tensor. Gradients live outside the parameter, in a
/// [`GradStore`] indexed by `id`, so frozen modules can run their backward pass
/// through `&self` without owning any gradient state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<T: Float> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// View of a 2-D parameter as a matrix (cloned).
    pub fn as_mat(&self) -> Mat<T> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("parameter {} has rank {}", self.name, s.len()),
        };
        Mat::from_vec(r, c, self.value.clone())
    }
}

/// Hands out sequential parameter ids and initial values.
pub struct ParamBuilder<'r, R: Rng> {
    next_id: usize,
    prefix: Vec<String>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder { next_id: 0, prefix: Vec::new(), rng }
    }

    /// Continues numbering after an existing parameter set.
    pub fn starting_at(rng: &'r mut R, first_id: usize) -> Self {
        ParamBuilder { next_id: first_id, prefix: Vec::new(), rng }
    }

    pub fn next_id(&self) -> usize {
        self.next_id
    }

    pub fn push(&mut self, scope: &str) {
        self.prefix.push(scope.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn make<T: Float>(&mut self, name: &str, shape: &[usize], value: Vec<T>, decay: bool) -> Param<T> {
        let id = self.next_id;
        self.next_id += 1;
        Param { id, name: self.full_name(name), shape: shape.to_vec(), value, decay }
    }

    pub fn normal<T: Float>(&mut self, name: &str, shape: &[usize], std: f64) -> Param<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        self.make(name, shape, value, shape.len() >= 2)
    }

    pub fn constant<T: Float>(&mut self, name: &str, shape: &[usize], v: f64) -> Param<T> {
        let n: usize = shape.iter().product();
        self.make(name, shape, vec![T::lit(v); n], false)
    }
}

/// Visitor access to every parameter of a module, in a fixed order.
pub trait Parameters<T: Float> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn param_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        self.visit(&mut |p| ids.push(p.id));
        ids
    }
}

/// Gradient buffers indexed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct GradStore<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Float> GradStore<T> {
    pub fn for_params(params: &dyn Parameters<T>) -> Self {
        let mut grads: Vec<Vec<T>> = Vec::new();
        params.visit(&mut |p| {
            if grads.len() <= p.id {
                grads.resize(p.id + 1, Vec::new());
            }
            grads[p.id] = vec![T::zero(); p.numel()];
        });
        GradStore { grads }
    }

    pub fn get(&self, p: &Param<T>) -> &[T] {
        &self.grads[p.id]
    }

    pub fn get_mut(&mut self, p: &Param<T>) -> &mut [T] {
        let g = &mut self.grads[p.id];
        assert_eq!(g.len(), p.numel(), "gradient buffer for {} has wrong size", p.name);
        g
    }

    pub fn by_id(&self, id: usize) -> &[T] {
        &self.grads[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.grads[id]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Global L2 norm, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Scales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(T::lit(max_norm / norm));
        }
        norm
    }
}
