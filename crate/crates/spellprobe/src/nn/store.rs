//! Flat f64 parameter storage with named tensor layout.
//!
//! All model parameters live in one contiguous `data` vector with a
//! parallel `grad` vector, so the optimizer is a single dense loop and
//! checkpoints are a walk over the layout.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, ParamId>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            specs: Vec::new(),
            by_name: HashMap::new(),
            data: Vec::new(),
            grad: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate tensor name {name:?}"
        );
        let len: usize = shape.iter().product();
        let spec = TensorSpec {
            name: name.clone(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        };
        let id = ParamId(self.specs.len());
        self.specs.push(spec);
        self.by_name.insert(name, id);
        self.data.resize(self.data.len() + len, 0.0);
        self.grad.resize(self.data.len(), 0.0);
        id
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    // -- slice accessors ---------------------------------------------------

    pub fn param(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn grad_slice(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.grad[s.offset..s.offset + s.len]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        &mut self.grad[s.offset..s.offset + s.len]
    }

    // -- ndarray views -----------------------------------------------------

    fn dims2(&self, id: ParamId) -> (usize, usize) {
        let s = &self.specs[id.0];
        assert_eq!(s.shape.len(), 2, "{} is not 2-d", s.name);
        (s.shape[0], s.shape[1])
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.param(id))
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let dims = self.dims2(id);
        ArrayView2::from_shape(dims, self.param(id)).unwrap()
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.param_mut(id))
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2(id);
        ArrayViewMut2::from_shape(dims, self.param_mut(id)).unwrap()
    }

    pub fn grad1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.grad_mut(id))
    }

    pub fn grad2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2(id);
        ArrayViewMut2::from_shape(dims, self.grad_mut(id)).unwrap()
    }

    // -- initialization ----------------------------------------------------

    pub fn init_normal<R: Rng>(&mut self, id: ParamId, sd: f64, rng: &mut R) {
        let normal = Normal::new(0.0, sd).unwrap();
        for v in self.param_mut(id) {
            *v = normal.sample(rng);
        }
    }

    pub fn init_const(&mut self, id: ParamId, value: f64) {
        self.param_mut(id).fill(value);
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
