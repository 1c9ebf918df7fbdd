//! Named parameter storage and the per-pass session that binds parameters into
//! a graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{projection, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owner of all trainable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.tensors[id.0].data()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of a parameter, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(Error::ParamShape {
                name: self.names[id.0].clone(),
                expected: t.shape().to_vec(),
                found: vec![values.len()],
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &GradBuffer) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    /// Gradient of a parameter, zeros if none has been accumulated.
    pub fn grad_or_zero(&self, id: ParamId) -> Vec<f64> {
        let t = &self.tensors[id.0];
        t.grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

/// Per-parameter gradients produced by one pass, aligned with a store.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer(pub Vec<Option<Vec<f64>>>);

impl GradBuffer {
    pub fn empty(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            match (mine, theirs) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (slot @ None, Some(b)) => *slot = Some(b.clone()),
                _ => {}
            }
        }
    }

    /// True when every present entry is exactly zero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|v| *v == 0.0))
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform matrix stored as `[fan_in, fan_out]`.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.glorot_shaped(&[fan_in, fan_out], fan_in, fan_out)
    }

    pub fn glorot_shaped(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![1.0; n])
    }
}

/// A graph plus lazily bound parameters for one forward/backward pass.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    /// Inference session: parameters are constants and nothing is recorded.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::build(store, false, None)
    }

    /// Training session: parameters require gradients. Dropout is active only
    /// when a seed is given.
    pub fn training(store: &'a ParamStore, dropout_seed: Option<u64>) -> Self {
        Self::build(store, true, dropout_seed)
    }

    fn build(store: &'a ParamStore, track: bool, dropout_seed: Option<u64>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track,
            dropout_rng: dropout_seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.track
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let src = self.store.get(id);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec())
            .with_requires_grad(self.track);
        let v = self.graph.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Inverted dropout; identity outside seeded training sessions.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.graph.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.graph.constant(Tensor::from_parts(shape, mask));
        self.graph.mul(x, m)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of all parameters touched by this session.
    pub fn grads(&self) -> GradBuffer {
        GradBuffer(
            self.bound
                .iter()
                .map(|v| v.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
                .collect(),
        )
    }
}

/// Finite-difference check of a parameterized computation: every data input
/// and every parameter entry of `store` is perturbed. Returns the maximum of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check_params<F>(store: &ParamStore, inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut session = Session::training(store, None);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| session.graph.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut session, &vars)?;
    let shape = session.graph.shape(out).to_vec();
    let r = projection(session.value(out).numel());
    let r_var = session.constant(Tensor::from_parts(shape, r.clone()));
    let prod = session.graph.mul(out, r_var)?;
    let loss = session.graph.sum(prod)?;
    session.backward(loss)?;
    let param_grads = session.grads();
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            session
                .graph
                .grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut s = Session::inference(store);
        let vs: Vec<Var> = inputs.iter().map(|t| s.constant(t.clone())).collect();
        let out = f(&mut s, &vs)?;
        Ok(s.value(out).data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let compare = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * step);
        (analytic - numeric).abs() / numeric.abs().max(1.0)
    };

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = param_grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for j in 0..store.get(id).numel() {
            let orig = store.data(id)[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(compare(analytic[j], plus, minus));
        }
    }
    let mut work_inputs = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work_inputs[i].data_mut()[j] = orig + step;
            let plus = eval(store, &work_inputs)?;
            work_inputs[i].data_mut()[j] = orig - step;
            let minus = eval(store, &work_inputs)?;
            work_inputs[i].data_mut()[j] = orig;
            worst = worst.max(compare(input_grads[i][j], plus, minus));
        }
    }
    Ok(worst)
}
