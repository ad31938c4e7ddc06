//! Named parameters, initialization and forward-time parameter binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
///
/// Values are kept representable in single precision so that checkpoints
/// (which store f32) restore bit-identical models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

pub(crate) fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as Real;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(invalid("param_store", format!("duplicate parameter name {name}")));
        }
        round_to_f32(&mut value);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count grouped by the first `depth` dot-separated name segments.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = vec![];
        for (name, t) in self.iter() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.len(),
                None => out.push((key, t.len())),
            }
        }
        out
    }
}

/// Scoped parameter creation with a shared RNG.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child scope `prefix.name`.
    pub fn pp(&mut self, name: impl AsRef<str>) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: Real) -> Result<ParamId> {
        let t = if bound > 0.0 {
            Tensor::rand_uniform(shape, -bound, bound, self.rng)
        } else {
            Tensor::zeros(shape)
        };
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::ones(shape))
    }

    /// Replace an already created parameter's value.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) {
        round_to_f32(&mut value);
        *self.store.get_mut(id) = value;
    }

    pub fn gen_range(&mut self, lo: Real, hi: Real) -> Real {
        self.rng.gen_range(lo..hi)
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Ctx {
    tape: Tape,
    vars: Vec<Var>,
}

impl Ctx {
    /// Bind every parameter as a leaf; `train` decides whether they take gradients.
    pub fn new(store: &ParamStore, tape: &Tape, train: bool) -> Self {
        let vars = store
            .values()
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect();
        Self {
            tape: tape.clone(),
            vars,
        }
    }

    /// Bind with one parameter replaced by a caller-provided variable.
    pub fn with_override(store: &ParamStore, tape: &Tape, id: ParamId, var: Var) -> Self {
        let mut ctx = Self::new(store, tape, false);
        ctx.vars[id.0] = var;
        ctx
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn p(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradient per parameter in store order; unreached parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zero(v)).collect()
    }
}

/// Affine map over the last axis with weight `[in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform ±1/√in initialization; zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = init.pp(name);
        let bound = 1.0 / (in_dim as Real).sqrt();
        let weight = s.uniform("weight", &[in_dim, out_dim], bound)?;
        let bias = if bias { Some(s.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_parameter_count_is_mn_plus_n() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let lin = Linear::new(&mut init.pp("block"), "proj", 7, 5, true).unwrap();
        assert_eq!(lin.param_count(), 7 * 5 + 5);
        assert_eq!(store.numel(), 40);
        assert!(store.find("block.proj.weight").is_some());
        assert!(store.find("block.proj.bias").is_some());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn stored_values_are_single_precision_representable() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[1], 0.1)).unwrap();
        let v = store.get(id).item();
        assert_eq!(v, v as f32 as Real);
    }
}
