use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::kernels::ConvSpec;
use super::tensor::Tensor;

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces all tensors; names and shapes must match.
    pub fn load(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<(), String> {
        if names != self.names.as_slice() {
            return Err("parameter names differ from the architecture".into());
        }
        for (have, new) in self.tensors.iter().zip(&tensors) {
            if have.shape() != new.shape() {
                return Err(format!("shape {:?} != {:?}", new.shape(), have.shape()));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He/Kaiming normal for ReLU fan-in.
    He,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let std = match init {
            Init::Normal(s) => s,
            Init::He => (2.0 / (cin * k * k) as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("std > 0");
        let w: Vec<f32> = (0..cout * cin * k * k).map(|_| normal.sample(rng) as f32).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, k, k], w).expect("weight shape"),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1])));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: NodeId) -> NodeId {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.g.conv(x, w, b, self.spec)
    }
}

/// A graph plus the parameter store one network draws its leaves from.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    tag: usize,
    store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, tag: usize, store: &'a ParamStore) -> Self {
        Ctx { g, tag, store }
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.g.param(self.tag, index, self.store.get(index))
    }
}
