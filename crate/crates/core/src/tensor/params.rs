use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub trainable: bool,
}

impl<F> Param<F> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Flat registry of every named parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<F>, trainable: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter {name}: shape/value mismatch");
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, shape, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// `(total, trainable)` scalar counts.
    pub fn count(&self) -> (usize, usize) {
        let total = self.params.iter().map(Param::numel).sum();
        let trainable = self.params.iter().filter(|p| p.trainable).map(Param::numel).sum();
        (total, trainable)
    }

    /// Same parameters converted to another precision.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| G::of(v.f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Weight initialisation schemes. Values are always drawn as `f64` and then
/// cast, so `f32` and `f64` models built from the same seed agree.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    Fan(usize),
    /// Uniform in `±sqrt(6/fan_in)` (He, for ReLU layers).
    He(usize),
    Normal(f64),
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            Init::He(fan_in) => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }
}

/// Hierarchical parameter factory: `pp("stage1").pp("conv")` yields names
/// like `backbone.stage1.conv.weight`.
pub struct ParamBuilder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a, F: Float> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new(), trainable: true }
    }

    pub fn pp<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, F> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamBuilder { store: self.store, rng: self.rng, prefix, trainable: self.trainable }
    }

    /// Parameters created through the returned builder are excluded from optimisation.
    pub fn frozen<'b>(&'b mut self) -> ParamBuilder<'b, F> {
        ParamBuilder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), trainable: false }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n = shape.iter().product();
        let values = init.sample(n, self.rng).into_iter().map(F::of).collect();
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.add(full, shape.to_vec(), values, self.trainable)
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}
