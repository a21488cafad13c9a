//! Parameter initialization and the two layers everything else is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ModelParams, Tape, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Seeded source of initial weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Glorot-uniform `fan_in×fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }
}

pub fn init_linear(params: &mut ModelParams, init: &mut Init, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    params.insert(format!("{prefix}/w"), init.xavier(fan_in, fan_out))?;
    params.insert(format!("{prefix}/b"), Tensor::zeros(&[fan_out]))
}

/// Projection without bias.
pub fn init_matrix(params: &mut ModelParams, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    params.insert(name.to_string(), init.xavier(fan_in, fan_out))
}

pub fn init_layer_norm(params: &mut ModelParams, prefix: &str, width: usize) -> Result<()> {
    params.insert(format!("{prefix}/gamma"), Tensor::filled(&[width], 1.0))?;
    params.insert(format!("{prefix}/beta"), Tensor::zeros(&[width]))
}

/// `x · W + b` with parameters `{prefix}/w` and `{prefix}/b`.
pub fn linear(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}/w"))?;
    let b = tape.param(params, &format!("{prefix}/b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn layer_norm(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{prefix}/gamma"))?;
    let b = tape.param(params, &format!("{prefix}/beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}
