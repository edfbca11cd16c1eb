//! Small fixed-topology coordinate MLPs (sine or ReLU), their exact gradients,
//! and the Adam optimizer used to fit them.
//!
//! A network is `L` activated hidden layers followed by a linear projection:
//!
//! ```text
//! h_0 = act(W_0 c + b_0)
//! h_l = act(W_l h_{l-1} + b_l),  l = 1..L-1
//! y   = W_L h_{L-1} + b_L
//! ```
//!
//! with `act(z) = sin(omega0 * z)` for sine networks and `max(z, 0)` for ReLU
//! networks. Batches are flat row-major slices: `n x in_dim` coordinates in,
//! `n x out_dim` values out.

mod adam;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use net::{SirenNet, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Relu,
    /// ReLU network fed with a sinusoidal positional encoding of its inputs.
    ReluPe { n_frequencies: usize },
}

impl Activation {
    pub fn name(&self) -> String {
        match self {
            Activation::Sine => "sine".to_owned(),
            Activation::Relu => "relu".to_owned(),
            Activation::ReluPe { n_frequencies } => format!("relu_pe(L={n_frequencies})"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    /// Accepts `sine`, `relu`, `relu_pe` (three octaves) and `relu_pe:N`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" | "siren" => Ok(Activation::Sine),
            "relu" => Ok(Activation::Relu),
            "relu_pe" => Ok(Activation::ReluPe { n_frequencies: 3 }),
            other => other
                .strip_prefix("relu_pe:")
                .and_then(|n| n.parse().ok())
                .map(|n_frequencies| Activation::ReluPe { n_frequencies })
                .ok_or_else(|| Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_hidden_layers: usize,
    pub out_dim: usize,
    pub omega0: f64,
    pub activation: Activation,
}

impl SirenConfig {
    pub fn sine(in_dim: usize, hidden_dim: usize, n_hidden_layers: usize, out_dim: usize) -> Self {
        SirenConfig {
            in_dim,
            hidden_dim,
            n_hidden_layers,
            out_dim,
            omega0: 30.0,
            activation: Activation::Sine,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_dim", self.in_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_hidden_layers", self.n_hidden_layers),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Config(format!(
                "omega0 must be positive, got {}",
                self.omega0
            )));
        }
        if let Activation::ReluPe { n_frequencies: 0 } = self.activation {
            return Err(Error::Config("relu_pe needs n_frequencies >= 1".into()));
        }
        Ok(())
    }

    /// Width of the first layer's input after positional encoding.
    pub fn encoded_dim(&self) -> usize {
        match self.activation {
            Activation::ReluPe { n_frequencies } => self.in_dim * (1 + 2 * n_frequencies),
            _ => self.in_dim,
        }
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.n_hidden_layers + 1);
        shapes.push((self.hidden_dim, self.encoded_dim()));
        for _ in 1..self.n_hidden_layers {
            shapes.push((self.hidden_dim, self.hidden_dim));
        }
        shapes.push((self.out_dim, self.hidden_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }

    /// Half-width of the uniform weight initialization for layer `layer`.
    pub fn init_bound(&self, layer: usize) -> f64 {
        let (_, fan_in) = self.layer_shapes()[layer];
        if layer == 0 {
            1.0 / fan_in as f64
        } else {
            let omega = match self.activation {
                Activation::Sine => self.omega0,
                _ => 1.0,
            };
            (6.0 / fan_in as f64).sqrt() / omega
        }
    }
}
