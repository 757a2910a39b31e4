//! Flat, named parameter storage shared by every trainable module.

use std::fmt;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Trainable module a tensor belongs to; the unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleGroup {
    Encoder,
    FusionConnector,
    Lm,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 3] = [ModuleGroup::Encoder, ModuleGroup::FusionConnector, ModuleGroup::Lm];

    pub fn name(self) -> &'static str {
        match self {
            ModuleGroup::Encoder => "encoder",
            ModuleGroup::FusionConnector => "fusion_connector",
            ModuleGroup::Lm => "lm",
        }
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: ModuleGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How a freshly registered tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        group: ModuleGroup,
        shape: &[usize],
        init: Init,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        self.tensors.push(Tensor { name: name.into(), group, shape: shape.to_vec(), data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn num_scalars_in(&self, group: ModuleGroup) -> usize {
        self.tensors.iter().filter(|t| t.group == group).map(Tensor::numel).sum()
    }

    pub fn m(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id.0];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
    }

    pub fn v(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id.0].data[..])
    }

    /// Zero-filled buffer with the same layout, for gradients.
    pub fn zeros_like(&self) -> Grads {
        Grads {
            shapes: self.tensors.iter().map(|t| t.shape.clone()).collect(),
            data: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Copy of every tensor belonging to `group`, for freeze checks.
    pub fn snapshot(&self, group: ModuleGroup) -> Vec<Vec<f64>> {
        self.tensors.iter().filter(|t| t.group == group).map(|t| t.data.clone()).collect()
    }

    /// Flat (tensor, element) address of scalar `index` in registration order.
    pub fn locate(&self, mut index: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if index < t.numel() {
                return (ParamId(i), index);
            }
            index -= t.numel();
        }
        panic!("scalar index out of range");
    }

    pub fn scalar_mut(&mut self, id: ParamId, offset: usize) -> &mut f64 {
        &mut self.tensors[id.0].data[offset]
    }

    /// Layout check: same names, groups and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.shape == b.shape)
    }

    pub(crate) fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }
}

/// Gradient buffers laid out exactly like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn m_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let shape = (self.shapes[id.0][0], self.shapes[id.0][1]);
        ArrayViewMut2::from_shape(shape, &mut self.data[id.0]).expect("rank-2 gradient")
    }

    pub fn v_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[id.0][..])
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scalar(&self, id: ParamId, offset: usize) -> f64 {
        self.data[id.0][offset]
    }
}
