//! Location-only GMM attention with monotone, additive means.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GmmConfig {
    pub mixtures: usize,
    /// Floor added to every softplus-produced scale, in token units.
    pub sigma_min: f64,
    /// Mean step per decoder frame at initialisation (sets the Δ bias).
    pub initial_step: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            mixtures: 5,
            sigma_min: 0.05,
            initial_step: 0.5,
        }
    }
}

/// Keeps `softplus` strictly positive where it would underflow to zero.
pub const DELTA_MIN: f64 = 1e-6;

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixtures == 0 {
            return Err(Error::Config("GMM attention needs at least one mixture".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        if !(self.initial_step > DELTA_MIN) {
            return Err(Error::Config(format!(
                "initial_step must exceed {DELTA_MIN}, got {}",
                self.initial_step
            )));
        }
        Ok(())
    }
}

/// Mixture means and the previous context vector, both `[1×·]`.
#[derive(Debug, Clone, Copy)]
pub struct GmmState {
    pub mu: Var,
    pub context: Var,
}

#[derive(Debug, Clone)]
pub struct GmmAttention {
    pub config: GmmConfig,
    pub params: Linear,
}

/// Per-step outputs. `weights` is `[1×T_text]`, `context` `[1×d]`.
#[derive(Debug, Clone, Copy)]
pub struct GmmStep {
    pub weights: Var,
    pub context: Var,
    pub state: GmmState,
}

impl GmmAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, query_dim: usize, config: GmmConfig) -> Result<Self> {
        config.validate()?;
        let m = config.mixtures;
        let params = Linear::new(pb, name, query_dim, 3 * m)?;
        let b = params.b.expect("linear with bias");
        // softplus⁻¹ of the initial step, net of the floor
        let target = config.initial_step - DELTA_MIN;
        let delta_bias = target + libm::log(-libm::expm1(-target));
        let bias = pb.store_mut().get_mut(b).data_mut();
        bias[m..2 * m].iter_mut().for_each(|x| *x = delta_bias);
        Ok(Self { config, params })
    }

    pub fn initial_state(&self, g: &mut Graph<'_>, memory_dim: usize) -> GmmState {
        GmmState {
            mu: g.zeros(&[1, self.config.mixtures]),
            context: g.zeros(&[1, memory_dim]),
        }
    }

    /// One decoder step. `query` is `[1×q]`, `memory` `[T_text×d]`.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        memory: Var,
        state: &GmmState,
        step_index: usize,
    ) -> Result<GmmStep> {
        let m = self.config.mixtures;
        let raw = self.params.forward(g, query)?;
        if !g.value(raw).iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite mixture parameters at decoder step {step_index}"
            )));
        }
        let w_hat = g.slice_cols(raw, 0, m)?;
        let d_hat = g.slice_cols(raw, m, m)?;
        let s_hat = g.slice_cols(raw, 2 * m, m)?;
        let w = g.softmax_rows(w_hat)?;
        let delta = g.softplus(d_hat);
        let delta = g.affine(delta, 1.0, DELTA_MIN);
        let sigma = g.softplus(s_hat);
        let sigma = g.affine(sigma, 1.0, self.config.sigma_min);
        let mu = g.add(state.mu, delta)?;
        let len = g.dims(memory).0;
        let weights = g.gmm_density(w, mu, sigma, len)?;
        let context = g.matmul(weights, memory)?;
        Ok(GmmStep {
            weights,
            context,
            state: GmmState { mu, context },
        })
    }
}
