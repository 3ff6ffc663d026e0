//! Dense layers on top of the graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    Scaled,
    /// Weights ~ N(0, 1/fan_in), bias ~ N(0, std).
    ScaledWithBias(f64),
    Zeros,
}

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let (w, b) = match init {
            Init::Zeros => (vec![0.0; in_dim * out_dim], vec![0.0; out_dim]),
            Init::Scaled | Init::ScaledWithBias(_) => {
                let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).unwrap();
                let w = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
                let b = match init {
                    Init::ScaledWithBias(std) => {
                        let n = Normal::new(0.0, std).unwrap();
                        (0..out_dim).map(|_| n.sample(rng)).collect()
                    }
                    _ => vec![0.0; out_dim],
                };
                (w, b)
            }
        };
        let w = store.add(
            format!("{name}.w"),
            Tensor::matrix(in_dim, out_dim, w).expect("positive dims"),
        );
        let b = store.add(format!("{name}.b"), Tensor::row_vector(b));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row_bias(xw, b)
    }
}

/// Stack of linear layers with LeakyReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the layer widths including input and output.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        Self::with_inits(store, name, dims, &vec![Init::Scaled; dims.len() - 1], rng)
    }

    pub fn with_inits(store: &mut ParamStore, name: &str, dims: &[usize], inits: &[Init], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2 && inits.len() == dims.len() - 1);
        let layers = dims
            .windows(2)
            .zip(inits)
            .enumerate()
            .map(|(i, (w, &init))| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}
