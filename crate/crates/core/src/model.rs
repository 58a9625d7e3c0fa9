//! The two-stage model: architecture, parameter layout and branch forwards.

use fas_autodiff::{BnMode, CTensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::layers::{
    cfl_final, cfl_forward, cgal_forward, virtual_node_forward, CflLayer, CgalLayer, Forward,
    LayerBuilder, VirtualActivation,
};
use crate::params::{ComplexBnState, Initializer, ParamStore};

/// How a steering angle becomes the complex stage-1 node feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaEmbedding {
    /// `θ + 0i`.
    #[default]
    Raw,
    /// `e^{iθ}`.
    Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Attention layers of the ξ, ξ_max, power and α branches.
    pub gal_layers: [usize; 4],
    /// Fully-connected layers of the same branches, the last one linear.
    pub fl_layers: [usize; 4],
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the hidden fully-connected layers.
    pub fl_width: usize,
    pub bn_mode: BnMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub leaky_slope: f64,
    pub virtual_activation: VirtualActivation,
    pub theta_embedding: ThetaEmbedding,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            gal_layers: [2; 4],
            fl_layers: [2; 4],
            heads: 4,
            head_dim: 16,
            fl_width: 64,
            bn_mode: BnMode::Complex,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            leaky_slope: 0.01,
            virtual_activation: VirtualActivation::SplitRelu,
            theta_embedding: ThetaEmbedding::Raw,
        }
    }
}

impl ArchConfig {
    /// Narrower network used for CPU-scale runs: 4 heads of width 8.
    pub fn desk() -> Self {
        Self {
            head_dim: 8,
            fl_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FasError::Config(m));
        if self.heads == 0 || self.head_dim == 0 || self.fl_width == 0 {
            return bad("heads, head_dim and fl_width must be positive".into());
        }
        if self.gal_layers[0] == 0 || self.gal_layers[1] == 0 {
            return bad("stage-1 branches need at least one attention layer".into());
        }
        if self.fl_layers.contains(&0) {
            return bad("every branch needs at least one fully-connected layer".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("bn_momentum {} outside (0, 1)", self.bn_momentum));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return bad("bn_eps must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be nonnegative".into());
        }
        Ok(())
    }
}

pub const BRANCH_NAMES: [&str; 4] = ["stage1/xi", "stage1/xi_max", "stage2/power", "stage2/alpha"];
pub const XI: usize = 0;
pub const XI_MAX: usize = 1;
pub const POWER: usize = 2;
pub const ALPHA: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub name: String,
    pub gals: Vec<CgalLayer>,
    /// Hidden layers followed by the linear output layer.
    pub fls: Vec<CflLayer>,
}

/// Learnable parameters of both stages plus batch-norm running statistics.
/// The layout depends on the architecture and `N` only, never on `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageModel {
    pub arch: ArchConfig,
    pub n_antennas: usize,
    pub seed: u64,
    pub params: ParamStore,
    pub bn: Vec<ComplexBnState>,
    pub branches: Vec<Branch>,
}

impl TwoStageModel {
    /// Builds and initializes the model for `n_antennas` antennas.
    pub fn new(arch: &ArchConfig, n_antennas: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if n_antennas == 0 {
            return Err(FasError::Config("n_antennas must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut builder = LayerBuilder {
            store: &mut params,
            bn: &mut bn,
            init: Initializer::new(seed),
            bn_mode: arch.bn_mode,
            bn_momentum: arch.bn_momentum,
            bn_eps: arch.bn_eps,
        };
        let width = arch.heads * arch.head_dim;
        let outputs = [n_antennas - 1, 1, 1, 1];
        let mut branches = Vec::with_capacity(4);
        for (i, name) in BRANCH_NAMES.iter().enumerate() {
            let graph_level = i < 2;
            let mut in_dim = if graph_level { 1 } else { n_antennas };
            let mut virtual_dim = 1;
            let mut gals = Vec::new();
            for g in 0..arch.gal_layers[i] {
                let virtual_in = graph_level.then_some((virtual_dim, arch.virtual_activation));
                let layer = builder.cgal(
                    &format!("{name}/gal{g}"),
                    in_dim,
                    arch.heads,
                    arch.head_dim,
                    virtual_in,
                );
                in_dim = width;
                virtual_dim = width;
                gals.push(layer);
            }
            let mut fl_in = if graph_level { virtual_dim } else { in_dim };
            let mut fls = Vec::new();
            for f in 0..arch.fl_layers[i] {
                let last = f + 1 == arch.fl_layers[i];
                let out = if last { outputs[i] } else { arch.fl_width };
                fls.push(builder.cfl(&format!("{name}/fl{f}"), fl_in, out, !last));
                fl_in = out;
            }
            branches.push(Branch {
                name: name.to_string(),
                gals,
                fls,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            n_antennas,
            seed,
            params,
            bn,
            branches,
        })
    }

    /// Length of the flattened real-pair parameter vector.
    pub fn num_parameters(&self) -> usize {
        self.params.num_real()
    }

    /// Folds batch statistics gathered during a training forward into the
    /// running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, fas_autodiff::BnStats)]) {
        for (i, stats) in updates {
            self.bn[*i].update(stats);
        }
    }

    pub fn forward<'a>(
        &'a self,
        tape: &'a mut fas_autodiff::Tape,
        training: bool,
        trainable: bool,
    ) -> Forward<'a> {
        Forward::new(
            tape,
            &self.params,
            &self.bn,
            training,
            trainable,
            self.arch.leaky_slope,
        )
    }
}

fn ensure_finite(fwd: &Forward, v: Var, stage: &str, layer: usize) -> Result<()> {
    if fwd.tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(FasError::NonFinite {
            stage: stage.to_string(),
            layer,
        })
    }
}

fn fl_stack(fwd: &mut Forward, branch: &Branch, mut x: Var, first_index: usize) -> Result<Var> {
    let n = branch.fls.len();
    for (f, layer) in branch.fls.iter().enumerate() {
        x = if f + 1 == n {
            cfl_final(fwd, layer, x)?
        } else {
            cfl_forward(fwd, layer, x)?
        };
        ensure_finite(fwd, x, &branch.name, first_index + f)?;
    }
    Ok(x)
}

/// Graph-level branch: attention layers with a virtual node, then the
/// fully-connected stack on the final virtual feature. `v0` is
/// `[B, K, in]`; the result is `[B, out]`.
pub fn graph_branch_forward(fwd: &mut Forward, branch: &Branch, v0: Var) -> Result<Var> {
    let b = fwd.tape.shape(v0)[0];
    let mut v = v0;
    let mut virt = fwd.tape.constant(CTensor::zeros(&[b, 1]));
    for (g, layer) in branch.gals.iter().enumerate() {
        let updated = cgal_forward(fwd, layer, v)?;
        ensure_finite(fwd, updated, &branch.name, g)?;
        virt = virtual_node_forward(fwd, layer, updated, virt)?;
        ensure_finite(fwd, virt, &branch.name, g)?;
        v = updated;
    }
    fl_stack(fwd, branch, virt, branch.gals.len())
}

/// Node-level branch: attention layers then the fully-connected stack on
/// every node. `v0` is `[B, K, in]`; the result is `[B, K, out]`.
pub fn node_branch_forward(fwd: &mut Forward, branch: &Branch, v0: Var) -> Result<Var> {
    let mut v = v0;
    for (g, layer) in branch.gals.iter().enumerate() {
        v = cgal_forward(fwd, layer, v)?;
        ensure_finite(fwd, v, &branch.name, g)?;
    }
    fl_stack(fwd, branch, v, branch.gals.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_depends_on_n_only() {
        let arch = ArchConfig::default();
        let a = TwoStageModel::new(&arch, 4, 1).unwrap();
        let b = TwoStageModel::new(&arch, 4, 2).unwrap();
        let c = TwoStageModel::new(&arch, 8, 1).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert_ne!(a.num_parameters(), c.num_parameters());
        assert_eq!(a.bn.len(), 4);
    }

    #[test]
    fn rejects_bad_architecture() {
        let mut arch = ArchConfig::default();
        arch.fl_layers[2] = 0;
        assert!(TwoStageModel::new(&arch, 4, 0).is_err());
        let mut arch = ArchConfig::default();
        arch.gal_layers[0] = 0;
        assert!(arch.validate().is_err());
        let mut arch = ArchConfig::default();
        arch.gal_layers[3] = 0;
        arch.validate().unwrap();
    }
}
