use crate::error::{ensure_arg, Result};

/// Dense `f32` tensor in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: f32) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        ensure_arg!(
            data.len() == shape.iter().product::<usize>(),
            "{} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one `(n, c)` plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Value of a single-element tensor.
    pub fn to_scalar(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "not a scalar: {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        ensure_arg!(!items.is_empty(), "cannot stack zero tensors");
        let s = items[0].shape;
        ensure_arg!(s[0] == 1, "stack expects single-item tensors");
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            ensure_arg!(t.shape == s, "shape mismatch {:?} vs {:?}", t.shape, s);
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [items.len(), s[1], s[2], s[3]],
            data,
        })
    }

    /// Splits along the batch axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.n())
            .map(|n| Tensor {
                shape: [1, self.shape[1], self.shape[2], self.shape[3]],
                data: self.item(n).to_vec(),
            })
            .collect()
    }
}
