//! Parameter storage and the network blocks the predictor is assembled from:
//! linear embeddings, LSTM, scaled dot-product attention, MLPs and max-pool
//! over agents.
//!
//! Blocks only hold parameter names and dimensions. Values live in a
//! [`ParamStore`]; a forward pass binds the store onto a [`Tape`] and looks
//! parameters up by name, which keeps checkpoints a flat name → tensor table.

use bat_autodiff::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CoreError, Result};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform in `±1/sqrt(fan_in)`, drawn from a stream keyed by `(seed, name)`
    /// so a parameter's initial value does not depend on what else exists.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("length matches shape"));
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Like [`ParamStore::bind`] but `name` is replaced by an existing var.
    /// Used to differentiate with respect to one parameter in isolation.
    pub fn bind_with(&self, tape: &mut Tape, name: &str, var: Var) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| {
                    let bound = if k == name { var } else { tape.constant(v.clone()) };
                    (k.clone(), bound)
                })
                .collect(),
        }
    }
}

/// Parameter vars of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Tanh,
    /// Row-wise softmax.
    Softmax,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Identity => x,
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Tanh => tape.tanh(x),
            Activation::Softmax => tape.softmax(x, 1)?,
        })
    }
}

/// `x W + b` on `[rows x in]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.init_uniform(&self.weight(), &[self.input, self.output], self.input, seed);
        store.init_uniform(&self.bias(), &[self.output], self.input, seed);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.get(&self.weight())?)?;
        Ok(tape.add_row(h, p.get(&self.bias())?)?)
    }
}

/// Linear layer followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embed {
    pub linear: Linear,
    pub activation: Activation,
}

impl Embed {
    pub fn new(name: impl Into<String>, input: usize, output: usize, activation: Activation) -> Self {
        Self {
            linear: Linear::new(name, input, output),
            activation,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.linear.register(store, seed);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let z = self.linear.forward(tape, p, x)?;
        self.activation.apply(tape, z)
    }
}

/// Chain of embeddings; dimensions must chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Embed>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]` with one activation per layer.
    pub fn new(name: &str, dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(CoreError::InvalidInput(format!(
                "mlp {name}: {} dims for {} activations",
                dims.len(),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (d, &a))| Embed::new(format!("{name}.{i}"), d[0], d[1], a))
            .collect();
        Ok(Self { layers })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.output)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for l in &self.layers {
            l.register(store, seed);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

/// Single-layer LSTM. Gates are packed `[i, f, g, o]` along the columns of
/// `w_x: [in x 4h]`, `w_h: [h x 4h]` and `b: [4h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn w_x(&self) -> String {
        format!("{}.w_x", self.name)
    }

    pub fn w_h(&self) -> String {
        format!("{}.w_h", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.input + self.hidden;
        let g = 4 * self.hidden;
        store.init_uniform(&self.w_x(), &[self.input, g], fan_in, seed);
        store.init_uniform(&self.w_h(), &[self.hidden, g], fan_in, seed);
        store.init_uniform(&self.bias(), &[g], fan_in, seed);
    }

    /// Input contribution `x W_x` for a `[rows x in]` block; can be computed
    /// once for many steps.
    pub fn project_input(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.matmul(x, p.get(&self.w_x())?)?)
    }

    /// One step from a precomputed input projection. `state = None` is the
    /// zero initial state.
    pub fn step_projected(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_proj: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        let mut z = tape.add_row(x_proj, p.get(&self.bias())?)?;
        if let Some((h_prev, _)) = state {
            let rec = tape.matmul(h_prev, p.get(&self.w_h())?)?;
            z = tape.add(z, rec)?;
        }
        let i = tape.slice(z, 1, 0, h)?;
        let i = tape.sigmoid(i);
        let g = tape.slice(z, 1, 2 * h, 3 * h)?;
        let g = tape.tanh(g);
        let o = tape.slice(z, 1, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.slice(z, 1, h, 2 * h)?;
            let f = tape.sigmoid(f);
            let kept = tape.mul(f, c_prev)?;
            c = tape.add(kept, c)?;
        }
        let squashed = tape.tanh(c);
        let h_new = tape.mul(o, squashed)?;
        Ok((h_new, c))
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let proj = self.project_input(tape, p, x)?;
        self.step_projected(tape, p, proj, Some((h_prev, c_prev)))
    }

    /// Hidden state after every step, from a zero initial state.
    pub fn unroll_projected(&self, tape: &mut Tape, p: &Bound, projected: &[Var]) -> Result<Vec<Var>> {
        let mut state = None;
        let mut out = Vec::with_capacity(projected.len());
        for &x in projected {
            let s = self.step_projected(tape, p, x, state)?;
            out.push(s.0);
            state = Some(s);
        }
        Ok(out)
    }

    /// Final hidden state of `sequence`, each element `[rows x in]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, sequence: &[Var]) -> Result<Var> {
        if sequence.is_empty() {
            return Err(CoreError::InvalidInput(format!("{}: empty sequence", self.name)));
        }
        let projected = sequence
            .iter()
            .map(|&x| self.project_input(tape, p, x))
            .collect::<Result<Vec<_>>>()?;
        let hs = self.unroll_projected(tape, p, &projected)?;
        Ok(*hs.last().expect("nonempty"))
    }
}

/// Single-head scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub name: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub proj_dim: usize,
}

/// Result of attending with one query.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[n x 1]`, sums to one.
    pub weights: Var,
    /// `[n x proj]`: each projected value scaled by its weight.
    pub weighted: Var,
    /// `[1 x proj]`: sum of `weighted`.
    pub context: Var,
}

impl Attention {
    pub fn new(name: impl Into<String>, query_dim: usize, key_dim: usize, proj_dim: usize) -> Self {
        Self {
            name: name.into(),
            query_dim,
            key_dim,
            proj_dim,
        }
    }

    pub fn w_q(&self) -> String {
        format!("{}.w_q", self.name)
    }

    pub fn w_k(&self) -> String {
        format!("{}.w_k", self.name)
    }

    pub fn w_v(&self) -> String {
        format!("{}.w_v", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.init_uniform(&self.w_q(), &[self.query_dim, self.proj_dim], self.query_dim, seed);
        store.init_uniform(&self.w_k(), &[self.key_dim, self.proj_dim], self.key_dim, seed);
        store.init_uniform(&self.w_v(), &[self.key_dim, self.proj_dim], self.key_dim, seed);
    }

    pub fn project_queries(&self, tape: &mut Tape, p: &Bound, q: Var) -> Result<Var> {
        Ok(tape.matmul(q, p.get(&self.w_q())?)?)
    }

    pub fn project_keys(&self, tape: &mut Tape, p: &Bound, k: Var) -> Result<Var> {
        Ok(tape.matmul(k, p.get(&self.w_k())?)?)
    }

    pub fn project_values(&self, tape: &mut Tape, p: &Bound, v: Var) -> Result<Var> {
        Ok(tape.matmul(v, p.get(&self.w_v())?)?)
    }

    /// Attention of one projected query `[1 x proj]` over projected keys and
    /// values `[n x proj]`.
    pub fn attend_projected(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Attended> {
        let n = tape.shape(k)[0];
        if n == 0 {
            return Err(CoreError::InvalidInput(format!("{}: no keys", self.name)));
        }
        let qt = tape.transpose(q)?;
        let scores = tape.matmul(k, qt)?;
        let scores = tape.scale(scores, 1.0 / (self.proj_dim as f64).sqrt());
        let weights = tape.softmax(scores, 0)?;
        let ones = tape.constant(Tensor::ones(&[1, self.proj_dim]));
        let spread = tape.matmul(weights, ones)?;
        let weighted = tape.mul(spread, v)?;
        let context = tape.sum(weighted, 0)?;
        Ok(Attended {
            weights,
            weighted,
            context,
        })
    }

    /// `query: [1 x query_dim]`, `keys` and `values`: `[n x key_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, keys: Var, values: Var) -> Result<Attended> {
        let q = self.project_queries(tape, p, query)?;
        let k = self.project_keys(tape, p, keys)?;
        let v = self.project_values(tape, p, values)?;
        self.attend_projected(tape, q, k, v)
    }
}

/// Elementwise max over the rows of `[n x dim]`; `None` (no agents) gives a
/// zero `[1 x dim]` row.
pub fn max_pool_agents(tape: &mut Tape, vectors: Option<Var>, dim: usize) -> Result<Var> {
    match vectors {
        None => Ok(tape.constant(Tensor::zeros(&[1, dim]))),
        Some(v) => {
            let shape = tape.shape(v);
            if shape.len() != 2 || shape[1] != dim {
                return Err(CoreError::InvalidInput(format!(
                    "max_pool_agents: expected [n x {dim}], got {shape:?}"
                )));
            }
            if shape[0] == 0 {
                return Ok(tape.constant(Tensor::zeros(&[1, dim])));
            }
            Ok(tape.max(v, 0)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bat_autodiff::grad_check_sampled;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zeroed(store: &mut ParamStore) {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Max relative error of d(sum(w * f))/d(param) over every parameter and
    /// `x`, across `draws` seeded parameter/input draws.
    fn check_block<F>(register: impl Fn(&mut ParamStore, u64), x_shape: &[usize], draws: u64, f: F) -> f64
    where
        F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
    {
        let mut worst: f64 = 0.0;
        for draw in 0..draws {
            let mut store = ParamStore::new();
            register(&mut store, draw);
            let x = random(x_shape, 1000 + draw);
            let objective = |tape: &mut Tape, p: &Bound, x: Var| -> Result<Var> {
                let y = f(tape, p, x)?;
                let w = tape.constant(random(tape.shape(y), 77));
                let prod = tape.mul(y, w)?;
                Ok(tape.sum_all(prod))
            };
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in &names {
                let value = store.get(name).unwrap().clone();
                let idx: Vec<usize> = (0..value.len()).collect();
                let err = grad_check_sampled(
                    |tape: &mut Tape, v: Var| -> Result<Var> {
                        let p = store.bind_with(tape, name, v);
                        let xv = tape.constant(x.clone());
                        objective(tape, &p, xv)
                    },
                    &value,
                    1e-5,
                    &idx,
                )
                .unwrap();
                worst = worst.max(err);
            }
            let idx: Vec<usize> = (0..x.len()).collect();
            let err = grad_check_sampled(
                |tape: &mut Tape, v: Var| -> Result<Var> {
                    let bound = store.bind(tape);
                    objective(tape, &bound, v)
                },
                &x,
                1e-5,
                &idx,
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn init_is_bounded_and_name_keyed() {
        let mut a = ParamStore::new();
        a.init_uniform("x.w", &[16, 8], 16, 3);
        assert!(a.get("x.w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
        let mut b = ParamStore::new();
        b.init_uniform("other", &[2], 2, 3);
        b.init_uniform("x.w", &[16, 8], 16, 3);
        assert_eq!(a.get("x.w"), b.get("x.w"));
        let mut c = ParamStore::new();
        c.init_uniform("x.w", &[16, 8], 16, 4);
        assert_ne!(a.get("x.w"), c.get("x.w"));
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let lstm = Lstm::new("l", 3, 5);
        let mut store = ParamStore::new();
        lstm.register(&mut store, 0);
        zeroed(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(&[2, 3], 1));
        let z = tape.constant(Tensor::zeros(&[2, 5]));
        let (h, c) = lstm.step(&mut tape, &p, x, z, z).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_sequence_equals_step() {
        let lstm = Lstm::new("l", 3, 4);
        let mut store = ParamStore::new();
        lstm.register(&mut store, 9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(&[2, 3], 2));
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        let (h, _) = lstm.step(&mut tape, &p, x, z, z).unwrap();
        let e = lstm.encode(&mut tape, &p, &[x]).unwrap();
        assert_eq!(tape.value(h), tape.value(e));
        assert!(lstm.encode(&mut tape, &p, &[]).is_err());
    }

    #[test]
    fn lstm_rows_are_independent_and_bounded() {
        let lstm = Lstm::new("l", 2, 64);
        let mut store = ParamStore::new();
        lstm.register(&mut store, 1);
        let seq_a = random(&[6, 2], 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        // Rows [a, b] and [b, a]: outputs swap.
        let steps = 6;
        let mk = |tape: &mut Tape, flip: bool| -> Vec<Var> {
            (0..steps)
                .map(|t| {
                    let a = seq_a.row_slice(t);
                    let b = [a[1] * 3.0, -a[0]];
                    let rows: [&[f64]; 2] = if flip { [&b, a] } else { [a, &b] };
                    tape.constant(Tensor::from_rows(&rows).unwrap())
                })
                .collect()
        };
        let s1 = mk(&mut tape, false);
        let s2 = mk(&mut tape, true);
        let h1 = lstm.encode(&mut tape, &p, &s1).unwrap();
        let h2 = lstm.encode(&mut tape, &p, &s2).unwrap();
        let (v1, v2) = (tape.value(h1), tape.value(h2));
        assert_eq!(v1.shape(), &[2, 64]);
        assert_eq!(v1.row_slice(0), v2.row_slice(1));
        assert_eq!(v1.row_slice(1), v2.row_slice(0));
        assert!(v1.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn attention_weight_cases() {
        let att = Attention::new("a", 4, 3, 5);
        let mut store = ParamStore::new();
        att.register(&mut store, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(random(&[1, 4], 5));
        let same = tape.constant(Tensor::from_rows(&[[0.3, -0.2, 0.9]; 4]).unwrap());
        let out = att.forward(&mut tape, &p, q, same, same).unwrap();
        for &w in tape.value(out.weights).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let one = tape.constant(random(&[1, 3], 6));
        let out = att.forward(&mut tape, &p, q, one, one).unwrap();
        assert_eq!(tape.value(out.weights).data(), &[1.0]);
        let many = tape.constant(random(&[7, 3], 8));
        let out = att.forward(&mut tape, &p, q, many, many).unwrap();
        let total: f64 = tape.value(out.weights).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(att.forward(&mut tape, &p, q, empty, empty).is_err());
    }

    #[test]
    fn max_pool_cases() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap());
        let m = max_pool_agents(&mut tape, Some(v), 2).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.constant(Tensor::row(&[4.0, -1.0]));
        let m = max_pool_agents(&mut tape, Some(s), 2).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, -1.0]);
        let m = max_pool_agents(&mut tape, None, 3).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0; 3]);
        assert!(max_pool_agents(&mut tape, Some(s), 3).is_err());
    }

    #[test]
    fn embed_cases() {
        let e = Embed::new("e", 3, 4, Activation::Softmax);
        let mut store = ParamStore::new();
        e.register(&mut store, 0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random(&[5, 3], 1));
        let y = e.forward(&mut tape, &p, x).unwrap();
        for r in 0..5 {
            assert!((tape.value(y).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let mut zero = store.clone();
        zero.get_mut("e.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias = zero.get("e.b").unwrap().clone();
        let leaky = Embed::new("e", 3, 4, Activation::LeakyRelu(0.1));
        let mut tape = Tape::new();
        let p = zero.bind(&mut tape);
        let x = tape.constant(random(&[1, 3], 1));
        let y = leaky.forward(&mut tape, &p, x).unwrap();
        let expected: Vec<f64> = bias.data().iter().map(|&b| if b > 0.0 { b } else { 0.1 * b }).collect();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    /// Central differences at eps=1e-5 carry ~1e-11 absolute roundoff, which
    /// exceeds 1e-4 relative on the occasional gradient component near 1e-8.
    const TOL: f64 = 1e-3;

    #[test]
    fn blocks_pass_gradient_checks() {
        let lstm = Lstm::new("l", 3, 4);
        let err = check_block(|s, seed| lstm.register(s, seed), &[2, 3], 20, |tape, p, x| {
            let h0 = tape.constant(random(&[2, 4], 40));
            let c0 = tape.constant(random(&[2, 4], 41));
            let (h, c) = lstm.step(tape, p, x, h0, c0)?;
            Ok(tape.concat(&[h, c], 1)?)
        });
        assert!(err < TOL, "lstm step {err:e}");

        let err = check_block(|s, seed| lstm.register(s, seed), &[2, 3], 20, |tape, p, x| {
            let neg = tape.scale(x, -0.5);
            lstm.encode(tape, p, &[x, neg, x])
        });
        assert!(err < TOL, "lstm encode {err:e}");

        let att = Attention::new("a", 3, 3, 4);
        let err = check_block(|s, seed| att.register(s, seed), &[3, 3], 20, |tape, p, x| {
            let q = tape.slice(x, 0, 0, 1)?;
            let out = att.forward(tape, p, q, x, x)?;
            Ok(tape.concat(&[out.weighted, out.context], 0)?)
        });
        assert!(err < TOL, "attention {err:e}");

        let mlp = Mlp::new("m", &[3, 5, 2], &[Activation::LeakyRelu(0.1), Activation::Tanh]).unwrap();
        let err = check_block(|s, seed| mlp.register(s, seed), &[4, 3], 20, |tape, p, x| mlp.forward(tape, p, x));
        assert!(err < TOL, "mlp {err:e}");

        let emb = Embed::new("e", 3, 4, Activation::Softmax);
        let err = check_block(|s, seed| emb.register(s, seed), &[2, 3], 20, |tape, p, x| emb.forward(tape, p, x));
        assert!(err < TOL, "softmax embed {err:e}");

        let err = check_block(|_, _| {}, &[4, 3], 20, |tape, _, x| max_pool_agents(tape, Some(x), 3));
        assert!(err < TOL, "max pool {err:e}");
    }

    #[test]
    fn unknown_parameter_is_reported() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::row(&[1.0]));
        let err = Linear::new("missing", 1, 1).forward(&mut tape, &p, x).unwrap_err();
        assert!(matches!(err, CoreError::UnknownParameter(ref n) if n == "missing.w"));
    }
}
