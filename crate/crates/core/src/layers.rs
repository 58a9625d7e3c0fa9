//! Complex graph attention, virtual-node, fully-connected and batch-norm
//! layers, recorded on an autodiff tape.

use fas_autodiff::{BnMode, BnRunning, BnStats, CTensor, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FasError, Result};
use crate::params::{ComplexBnState, Initializer, ParamId, ParamStore};

/// Activation applied to the aggregated virtual-node feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualActivation {
    /// ReLU on real and imaginary parts separately.
    #[default]
    SplitRelu,
    /// ReLU of the real part; the imaginary part is dropped.
    RealRelu,
}

/// State shared by every layer during one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: Vec<Var>,
    bn: &'a [ComplexBnState],
    training: bool,
    slope: f64,
    /// Batch statistics gathered in training mode, keyed by BN state index.
    pub bn_updates: Vec<(usize, BnStats)>,
}

impl<'a> Forward<'a> {
    /// Binds `store` to `tape`. In training mode batch norm uses batch
    /// statistics; parameters are trainable leaves iff `trainable`.
    pub fn new(
        tape: &'a mut Tape,
        store: &ParamStore,
        bn: &'a [ComplexBnState],
        training: bool,
        trainable: bool,
        slope: f64,
    ) -> Self {
        let params = store.bind(tape, trainable);
        Self {
            tape,
            params,
            bn,
            training,
            slope,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn training(&self) -> bool {
        self.training
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalHead {
    pub w: ParamId,
    pub w_res: ParamId,
    /// Attention vector of length `2·d_head`.
    pub attn: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualHead {
    /// `W̄`, applied to updated node features.
    pub w: ParamId,
    /// `W̃`, applied to the previous virtual feature.
    pub w_res: ParamId,
    /// `ā`, length `d_head`.
    pub attn: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualNode {
    pub in_dim: usize,
    pub heads: Vec<VirtualHead>,
    pub activation: VirtualActivation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgalLayer {
    pub in_dim: usize,
    pub head_dim: usize,
    pub heads: Vec<GalHead>,
    pub virtual_node: Option<VirtualNode>,
}

impl CgalLayer {
    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRef {
    pub scale: ParamId,
    pub shift: ParamId,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CflLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub bn: Option<BnRef>,
}

/// Allocates layer parameters in a [`ParamStore`].
pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub bn: &'a mut Vec<ComplexBnState>,
    pub init: Initializer,
    pub bn_mode: BnMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl LayerBuilder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = self.init.kaiming(&[rows, cols], rows);
        self.store.add(name, t)
    }

    pub fn cgal(
        &mut self,
        prefix: &str,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        virtual_in: Option<(usize, VirtualActivation)>,
    ) -> CgalLayer {
        let gal_heads = (0..heads)
            .map(|z| {
                let p = format!("{prefix}/head{z}");
                let w = self.weight(format!("{p}/W"), in_dim, head_dim);
                let w_res = self.weight(format!("{p}/W_res"), in_dim, head_dim);
                let a = self.init.kaiming(&[2 * head_dim], 2 * head_dim);
                let attn = self.store.add(format!("{p}/a"), a);
                GalHead { w, w_res, attn }
            })
            .collect();
        let out_dim = heads * head_dim;
        let virtual_node = virtual_in.map(|(vin, activation)| VirtualNode {
            in_dim: vin,
            heads: (0..heads)
                .map(|z| {
                    let p = format!("{prefix}/virtual/head{z}");
                    let w = self.weight(format!("{p}/W"), out_dim, head_dim);
                    let w_res = self.weight(format!("{p}/W_res"), vin, head_dim);
                    let a = self.init.kaiming(&[head_dim], head_dim);
                    let attn = self.store.add(format!("{p}/a"), a);
                    VirtualHead { w, w_res, attn }
                })
                .collect(),
            activation,
        });
        CgalLayer {
            in_dim,
            head_dim,
            heads: gal_heads,
            virtual_node,
        }
    }

    /// Fully-connected layer; non-final layers carry a batch norm.
    pub fn cfl(&mut self, prefix: &str, in_dim: usize, out_dim: usize, with_bn: bool) -> CflLayer {
        let w = self.weight(format!("{prefix}/W"), in_dim, out_dim);
        let b = self
            .store
            .add(format!("{prefix}/b"), CTensor::zeros(&[out_dim]));
        let bn = with_bn.then(|| {
            let g = std::f64::consts::FRAC_1_SQRT_2;
            let mut scale = CTensor::zeros(&[2, out_dim]);
            for h in 0..out_dim {
                scale.data_mut()[h] = fas_autodiff::C64::new(g, g);
            }
            let scale = self.store.add(format!("{prefix}/bn/scale"), scale);
            let shift = self
                .store
                .add(format!("{prefix}/bn/shift"), CTensor::zeros(&[out_dim]));
            self.bn.push(ComplexBnState::new(
                format!("{prefix}/bn"),
                out_dim,
                self.bn_momentum,
                self.bn_eps,
                self.bn_mode,
            ));
            BnRef {
                scale,
                shift,
                state: self.bn.len() - 1,
            }
        });
        CflLayer {
            in_dim,
            out_dim,
            w,
            b,
            bn,
        }
    }
}

fn last_dim(tape: &Tape, v: Var) -> usize {
    *tape.shape(v).last().unwrap_or(&0)
}

fn expect_dim(tape: &Tape, v: Var, dim: usize, what: &str) -> Result<()> {
    let got = last_dim(tape, v);
    if got != dim {
        return Err(FasError::Dimension(format!(
            "{what} expects width {dim}, got {got}"
        )));
    }
    Ok(())
}

fn head_attention(fwd: &mut Forward, head: &GalHead, v: Var, d: usize) -> Result<(Var, Var)> {
    let shape = fwd.tape.shape(v).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let hz = fwd.tape.matmul(v, fwd.param(head.w))?;
    let a = fwd.tape.reshape(fwd.param(head.attn), &[2 * d, 1])?;
    let a1 = fwd.tape.narrow(a, 0, 0, d)?;
    let a2 = fwd.tape.narrow(a, 0, d, d)?;
    let s1 = fwd.tape.matmul(hz, a1)?;
    let s2 = fwd.tape.matmul(hz, a2)?;
    let s2 = fwd.tape.reshape(s2, &[b, 1, k])?;
    let e = fwd.tape.add(s1, s2)?;
    let e = fwd.tape.re(e)?;
    let e = fwd.tape.leaky_relu_real(e, fwd.slope)?;
    let att = fwd.tape.softmax_real(e)?;
    Ok((att, hz))
}

/// Multi-head complex graph attention over the fully connected user graph.
/// `v` is `[B, K, in_dim]`; the result is `[B, K, Z·d_head]`.
pub fn cgal_forward(fwd: &mut Forward, layer: &CgalLayer, v: Var) -> Result<Var> {
    expect_dim(fwd.tape, v, layer.in_dim, "graph attention layer")?;
    let mut outs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let (att, hz) = head_attention(fwd, head, v, layer.head_dim)?;
        let msg = fwd.tape.matmul(att, hz)?;
        let res = fwd.tape.matmul(v, fwd.param(head.w_res))?;
        let sum = fwd.tape.add(msg, res)?;
        outs.push(fwd.tape.crelu(sum)?);
    }
    Ok(fwd.tape.concat(&outs, 2)?)
}

/// Attention matrices `[B, K, K]` of every head.
pub fn cgal_attention(fwd: &mut Forward, layer: &CgalLayer, v: Var) -> Result<Vec<CTensor>> {
    expect_dim(fwd.tape, v, layer.in_dim, "graph attention layer")?;
    let mut out = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let (att, _) = head_attention(fwd, head, v, layer.head_dim)?;
        out.push(fwd.tape.value(att).clone());
    }
    Ok(out)
}

fn virtual_weights(fwd: &mut Forward, head: &VirtualHead, updated: Var) -> Result<(Var, Var)> {
    let shape = fwd.tape.shape(updated).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let hv = fwd.tape.matmul(updated, fwd.param(head.w))?;
    let d = last_dim(fwd.tape, hv);
    let a = fwd.tape.reshape(fwd.param(head.attn), &[d, 1])?;
    let logits = fwd.tape.matmul(hv, a)?;
    let logits = fwd.tape.re(logits)?;
    let logits = fwd.tape.leaky_relu_real(logits, fwd.slope)?;
    let logits = fwd.tape.reshape(logits, &[b, k])?;
    let beta = fwd.tape.softmax_real(logits)?;
    Ok((beta, hv))
}

/// Virtual-node update from the already updated node features
/// `[B, K, V_g]` and the previous virtual feature `[B, V_{g−1}]`.
pub fn virtual_node_forward(
    fwd: &mut Forward,
    layer: &CgalLayer,
    updated: Var,
    previous: Var,
) -> Result<Var> {
    let vn = layer
        .virtual_node
        .as_ref()
        .ok_or_else(|| FasError::Dimension("layer has no virtual node".into()))?;
    expect_dim(fwd.tape, updated, layer.out_dim(), "virtual node")?;
    expect_dim(fwd.tape, previous, vn.in_dim, "virtual node residual")?;
    let shape = fwd.tape.shape(updated).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let mut outs = Vec::with_capacity(vn.heads.len());
    for head in &vn.heads {
        let (beta, hv) = virtual_weights(fwd, head, updated)?;
        let beta = fwd.tape.reshape(beta, &[b, 1, k])?;
        let agg = fwd.tape.matmul(beta, hv)?;
        let d = last_dim(fwd.tape, agg);
        let agg = fwd.tape.reshape(agg, &[b, d])?;
        let res = fwd.tape.matmul(previous, fwd.param(head.w_res))?;
        let sum = fwd.tape.add(agg, res)?;
        let out = match vn.activation {
            VirtualActivation::SplitRelu => fwd.tape.crelu(sum)?,
            VirtualActivation::RealRelu => {
                let r = fwd.tape.re(sum)?;
                fwd.tape.crelu(r)?
            }
        };
        outs.push(out);
    }
    Ok(fwd.tape.concat(&outs, 1)?)
}

/// Virtual-node attention weights `β` of every head, `[B, K]` each.
pub fn virtual_attention(
    fwd: &mut Forward,
    layer: &CgalLayer,
    updated: Var,
) -> Result<Vec<CTensor>> {
    let vn = layer
        .virtual_node
        .as_ref()
        .ok_or_else(|| FasError::Dimension("layer has no virtual node".into()))?;
    let mut out = Vec::new();
    for head in &vn.heads {
        let (beta, _) = virtual_weights(fwd, head, updated)?;
        out.push(fwd.tape.value(beta).clone());
    }
    Ok(out)
}

/// Complex batch norm over every leading row, with batch statistics in
/// training mode and running statistics otherwise.
pub fn complex_batchnorm(fwd: &mut Forward, bn: &BnRef, x: Var) -> Result<Var> {
    let state = &fwd.bn[bn.state];
    let (scale, shift) = (fwd.param(bn.scale), fwd.param(bn.shift));
    if fwd.training {
        let (y, stats) = fwd
            .tape
            .batch_norm(x, scale, shift, state.mode, state.eps, None)?;
        if let Some(stats) = stats {
            fwd.bn_updates.push((bn.state, stats));
        }
        Ok(y)
    } else {
        let running = BnRunning {
            mean: &state.mean,
            cov: &state.cov,
        };
        let (y, _) = fwd
            .tape
            .batch_norm(x, scale, shift, state.mode, state.eps, Some(running))?;
        Ok(y)
    }
}

fn affine(fwd: &mut Forward, layer: &CflLayer, x: Var) -> Result<Var> {
    expect_dim(fwd.tape, x, layer.in_dim, "fully-connected layer")?;
    let y = fwd.tape.matmul(x, fwd.param(layer.w))?;
    Ok(fwd.tape.add(y, fwd.param(layer.b))?)
}

/// `CReLU(xW + b)` followed by the layer's batch norm.
pub fn cfl_forward(fwd: &mut Forward, layer: &CflLayer, x: Var) -> Result<Var> {
    let y = affine(fwd, layer, x)?;
    let y = fwd.tape.crelu(y)?;
    match &layer.bn {
        Some(bn) => complex_batchnorm(fwd, bn, y),
        None => Ok(y),
    }
}

/// Linear output layer `xW + b`.
pub fn cfl_final(fwd: &mut Forward, layer: &CflLayer, x: Var) -> Result<Var> {
    affine(fwd, layer, x)
}
