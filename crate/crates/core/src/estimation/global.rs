//! Tiling of agent-vs-market fits into the global kernel matrix.

use crate::linalg::Vector;
use crate::model::{
    recover_baselines, BasisDictionary, BranchingSummary, HawkesModel, KernelMatrix, ModelError, PiecewiseBaseline,
};
use crate::types::{agent_components, AgentId, Component, EventType, N_TYPES};

use super::{AgentFitResult, EstimationError};

/// One agent position in the global model; `fit` is `None` for an agent
/// absent (or unfitted) that day.
#[derive(Debug, Clone, Copy)]
pub struct FitSlot<'a> {
    pub agent: AgentId,
    pub fit: Option<&'a AgentFitResult>,
}

/// Stitched model and its branching quantities.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    /// Constant baselines equal to the recovered mean exogenous rates.
    pub model: HawkesModel,
    pub summary: BranchingSummary,
    /// Components whose recovered exogenous rate is negative.
    pub negative_baselines: Vec<Component>,
    pub absent: Vec<AgentId>,
}

impl GlobalModel {
    pub fn agents(&self) -> Vec<AgentId> {
        self.model.components().iter().step_by(N_TYPES).map(|c| c.agent).collect()
    }

    /// Recovered mean exogenous rates.
    pub fn mu_bar(&self) -> Vector {
        self.model.baseline().time_averages()
    }
}

/// Kernel matrix over `slots`: an agent's own block on the diagonal, its
/// market block against every other present agent, zeros for absent agents.
pub fn stitch_kernels(slots: &[FitSlot<'_>]) -> Result<(KernelMatrix, Vec<f64>), EstimationError> {
    let reference = slots.iter().find_map(|s| s.fit).ok_or(EstimationError::NoFits)?;
    for s in slots.iter().filter_map(|s| s.fit) {
        if s.decays != reference.decays {
            return Err(EstimationError::IncompatibleFits(format!(
                "agent {} uses a different decay dictionary",
                s.agent
            )));
        }
        if s.horizon != reference.horizon {
            return Err(EstimationError::IncompatibleFits(format!("agent {} has a different horizon", s.agent)));
        }
    }
    let basis = BasisDictionary::new(reference.decays.clone())?;
    let dim = slots.len() * N_TYPES;
    let mut kernels = KernelMatrix::zeros(dim, basis);
    let mut jumps = vec![0.0; dim];

    for (i, si) in slots.iter().enumerate() {
        for k in EventType::ALL {
            jumps[i * N_TYPES + k.index()] = match si.fit {
                Some(f) => f.delta_hat[k.index()],
                None => match k {
                    EventType::PriceUp => 1.0,
                    EventType::PriceDown => -1.0,
                    _ => 0.0,
                },
            };
        }
        let Some(fi) = si.fit else { continue };
        for (j, sj) in slots.iter().enumerate() {
            if sj.fit.is_none() {
                continue;
            }
            let block = if i == j { &fi.self_coeffs } else { &fi.market_coeffs };
            for t in 0..N_TYPES {
                for s in 0..N_TYPES {
                    kernels
                        .cell_mut(i * N_TYPES + t, j * N_TYPES + s)
                        .copy_from_slice(&block[t][s]);
                }
            }
        }
    }
    Ok((kernels, jumps))
}

/// Builds the global model from per-slot fits and empirical mean intensities
/// `lambda` (slot-major, 8 types per slot).
pub fn assemble_global(slots: &[FitSlot<'_>], lambda: &Vector) -> Result<GlobalModel, EstimationError> {
    let dim = slots.len() * N_TYPES;
    if lambda.len() != dim {
        return Err(EstimationError::DimensionMismatch { expected: dim, found: lambda.len() });
    }
    let (kernels, jumps) = stitch_kernels(slots)?;
    let horizon = slots.iter().find_map(|s| s.fit).map(|f| f.horizon).ok_or(EstimationError::NoFits)?;
    let phi = crate::model::integrate_kernels(&kernels);

    let recovered = recover_baselines(lambda, &phi)?;
    let summary = match BranchingSummary::from_phi(phi.clone(), &recovered.values) {
        Ok(s) => s,
        Err(ModelError::Unstable { spectral_radius }) => {
            return Err(EstimationError::UnstableGlobal { spectral_radius, phi: Box::new(phi) })
        }
        Err(e) => return Err(e.into()),
    };
    let agents: Vec<AgentId> = slots.iter().map(|s| s.agent).collect();
    let components = agent_components(&agents);
    let negative_baselines = recovered.negative.iter().map(|i| components[*i]).collect();
    let baseline = PiecewiseBaseline::constant(recovered.values.as_slice(), horizon)?;
    let model = HawkesModel::new(components, kernels, baseline, jumps)?;
    let absent = slots.iter().filter(|s| s.fit.is_none()).map(|s| s.agent).collect();
    Ok(GlobalModel { model, summary, negative_baselines, absent })
}
