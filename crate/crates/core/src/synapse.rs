//! Synaptic currents and voltage-dependent gating.
//!
//! Forward (F-type) synapses are voltage independent: the current is the
//! weighted sum of presynaptic PSCs. Error-carrying (E-type) synapses on the
//! apical dendrite are scaled by a sigmoidal gate `B(u)` of the postsynaptic
//! membrane potential. The reversal-potential factor is treated as constant
//! and folded into the weights, so it never appears explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

/// Parameters of the magnesium-block style gate `B(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingParams {
    pub g_max: f64,
    pub k: f64,
    pub n: f64,
    pub u0: f64,
    /// Extracellular magnesium concentration in mM.
    pub mg: f64,
}

impl Default for GatingParams {
    /// Fit that overlays `B` on the surrogate derivative for `theta = 1`.
    fn default() -> Self {
        Self {
            g_max: 109.45,
            k: 1.18,
            n: 124.33,
            u0: 1.0,
            mg: 1.0,
        }
    }
}

impl GatingParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.g_max > 0.0 && self.k > 0.0 && self.n > 0.0 && self.mg > 0.0 && self.u0.is_finite();
        if ok {
            Ok(())
        } else {
            Err(invalid("gating parameters g_max, k, n, mg must be positive"))
        }
    }
}

/// `g_max / (1 + exp(-k (u - u0)) * mg * n)`, increasing in `u`, bounded by `g_max`.
#[inline]
pub fn gating_b(u: f64, p: &GatingParams) -> f64 {
    p.g_max / (1.0 + (-p.k * (u - p.u0)).exp() * p.mg * p.n)
}

/// `B` reflected about the threshold so it peaks at `u = theta`.
#[inline]
pub fn gating_b_mirrored(u: f64, p: &GatingParams, theta: f64) -> f64 {
    if u <= theta {
        gating_b(u, p)
    } else {
        gating_b(2.0 * theta - u, p)
    }
}

/// Surrogate spike derivative `1 / (1 + |u - 1|)^2`.
#[inline]
pub fn surrogate_sigma_prime(u: f64) -> f64 {
    let d = 1.0 + (u - 1.0).abs();
    1.0 / (d * d)
}

/// The function that scales error currents arriving at a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gate {
    /// Voltage-independent synapse, `B = 1`.
    Unity,
    /// Plain sigmoidal gate.
    Sigmoid(GatingParams),
    /// Sigmoidal gate mirrored about `theta`.
    Mirrored { params: GatingParams, theta: f64 },
    /// The surrogate derivative itself in place of `B`.
    SigmaPrime,
}

impl Gate {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Gate::Unity => 1.0,
            Gate::Sigmoid(p) => gating_b(u, p),
            Gate::Mirrored { params, theta } => gating_b_mirrored(u, params, *theta),
            Gate::SigmaPrime => surrogate_sigma_prime(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynapseKind {
    /// Basal, feature-carrying.
    FType,
    /// Apical, error-carrying.
    EType,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynapseConfig {
    pub kind: SynapseKind,
    pub gating: GatingParams,
    /// Always true: the driving-force factor is folded into the weights.
    pub e_syn_absorbed: bool,
}

impl SynapseConfig {
    pub fn f_type() -> Self {
        Self {
            kind: SynapseKind::FType,
            gating: GatingParams::default(),
            e_syn_absorbed: true,
        }
    }

    pub fn e_type(gating: GatingParams) -> Self {
        Self {
            kind: SynapseKind::EType,
            gating,
            e_syn_absorbed: true,
        }
    }

    /// Conductance scale at membrane potential `u`.
    pub fn gate(&self, u: f64) -> f64 {
        match self.kind {
            SynapseKind::FType => 1.0,
            SynapseKind::EType => gating_b(u, &self.gating),
        }
    }
}

/// Forward current into one cell: `sum_j w_j a_j`.
pub fn f_type_current(presyn_psc: &[f64], weights_row: &[f64]) -> Result<f64> {
    check_dim("F-type current", weights_row.len(), presyn_psc.len())?;
    Ok(presyn_psc.iter().zip(weights_row).map(|(a, w)| a * w).sum())
}
