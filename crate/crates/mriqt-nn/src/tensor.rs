//! Dense row-major f64 tensor. Shapes follow the [B, C, H, W, D] layout for
//! volumetric activations; weights and vectors use whatever rank fits.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length vs shape {shape:?}");
        Self { data, shape }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            data: vec![v; n],
            shape,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            data: vec![v],
            shape: vec![1],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() needs a single-element tensor");
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape to {shape:?}");
        self.shape = shape;
        self
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Splits [B, C, ...] shape into (batch, channels, spatial voxel count).
pub fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "need at least [B, C] dims, got {shape:?}");
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    (shape[0], shape[1], spatial)
}
