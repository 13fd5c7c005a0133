//! The catalog of candidate operation blocks and their materialization.
//!
//! Space `S` holds exactly seven blocks: four `linear + batch_norm +
//! activation` variants (ReLU, Hardswish, SiLU, ELU), two 1-d poolings
//! followed by batch norm, and the identity. The ablation space `S'` drops
//! the two pooling blocks. Batch norm follows every linear and pooling
//! operation except in the predictor's final layer, which is a bare block.

use crate::autograd::ops::{self, Activation, BnState, PoolKind};
use crate::autograd::{ForwardCtx, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The seven candidate operations, in canonical catalog order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "lin_bn_relu")]
    LinBnRelu,
    #[serde(rename = "lin_bn_hardswish")]
    LinBnHardswish,
    #[serde(rename = "lin_bn_silu")]
    LinBnSilu,
    #[serde(rename = "lin_bn_elu")]
    LinBnElu,
    #[serde(rename = "max_pool_3_bn")]
    MaxPool3Bn,
    #[serde(rename = "avg_pool_3_bn")]
    AvgPool3Bn,
    #[serde(rename = "identity")]
    Identity,
}

impl OperationKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperationKind::LinBnRelu => "lin_bn_relu",
            OperationKind::LinBnHardswish => "lin_bn_hardswish",
            OperationKind::LinBnSilu => "lin_bn_silu",
            OperationKind::LinBnElu => "lin_bn_elu",
            OperationKind::MaxPool3Bn => "max_pool_3_bn",
            OperationKind::AvgPool3Bn => "avg_pool_3_bn",
            OperationKind::Identity => "identity",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            OperationKind::LinBnRelu
                | OperationKind::LinBnHardswish
                | OperationKind::LinBnSilu
                | OperationKind::LinBnElu
        )
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, OperationKind::MaxPool3Bn | OperationKind::AvgPool3Bn)
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            OperationKind::LinBnRelu => Some(Activation::Relu),
            OperationKind::LinBnHardswish => Some(Activation::Hardswish),
            OperationKind::LinBnSilu => Some(Activation::Silu),
            OperationKind::LinBnElu => Some(Activation::Elu),
            _ => None,
        }
    }

    fn pool_kind(&self) -> Option<PoolKind> {
        match self {
            OperationKind::MaxPool3Bn => Some(PoolKind::Max),
            OperationKind::AvgPool3Bn => Some(PoolKind::Avg),
            _ => None,
        }
    }
}

/// Which search space a run draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceVariant {
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S_prime")]
    SPrime,
}

impl SpaceVariant {
    pub fn name(&self) -> &'static str {
        match self {
            SpaceVariant::S => "S",
            SpaceVariant::SPrime => "S_prime",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(SpaceVariant::S),
            "S_prime" => Ok(SpaceVariant::SPrime),
            other => Err(Error::Config(format!("unknown search space '{other}'"))),
        }
    }
}

const FULL_CATALOG: [OperationKind; 7] = [
    OperationKind::LinBnRelu,
    OperationKind::LinBnHardswish,
    OperationKind::LinBnSilu,
    OperationKind::LinBnElu,
    OperationKind::MaxPool3Bn,
    OperationKind::AvgPool3Bn,
    OperationKind::Identity,
];

/// The ordered, stable operation catalog for a space variant.
pub fn catalog(variant: SpaceVariant) -> Vec<OperationKind> {
    match variant {
        SpaceVariant::S => FULL_CATALOG.to_vec(),
        SpaceVariant::SPrime => FULL_CATALOG
            .iter()
            .copied()
            .filter(|k| !k.is_pool())
            .collect(),
    }
}

struct LinearParams {
    weight: Tensor,
    bias: Tensor,
}

struct BnParams {
    gamma: Tensor,
    beta: Tensor,
    state: BnState,
}

/// One concrete, parameterized operation block.
pub struct LayerBlock {
    pub kind: OperationKind,
    pub dim_in: usize,
    pub dim_out: usize,
    /// False only for blocks sitting in the predictor's final layer; those
    /// are bare (no batch norm, and linear kinds also drop the activation).
    pub bn_enabled: bool,
    linear: Option<LinearParams>,
    bn: Option<BnParams>,
}

/// Builds a block for one layer position. Identity and pooling kinds are
/// shape-preserving, so they require `dim_in == dim_out`.
pub fn instantiate_block(
    kind: OperationKind,
    dim_in: usize,
    dim_out: usize,
    is_predictor_final: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LayerBlock> {
    if !kind.is_linear() && dim_in != dim_out {
        return Err(Error::ShapeMismatch {
            op: "instantiate_block",
            left: vec![dim_in],
            right: vec![dim_out],
        });
    }
    let bn_enabled = !is_predictor_final;
    let linear = if kind.is_linear() {
        // fan-in uniform init, zero bias
        let bound = 1.0 / (dim_in as f32).sqrt();
        let weight: Vec<f32> = (0..dim_in * dim_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Some(LinearParams {
            weight: Tensor::param(&[dim_in, dim_out], weight)?,
            bias: Tensor::param(&[dim_out], vec![0.0; dim_out])?,
        })
    } else {
        None
    };
    let bn = if bn_enabled && kind != OperationKind::Identity {
        Some(BnParams {
            gamma: Tensor::param(&[dim_out], vec![1.0; dim_out])?,
            beta: Tensor::param(&[dim_out], vec![0.0; dim_out])?,
            state: BnState::new(dim_out),
        })
    } else {
        None
    };
    Ok(LayerBlock {
        kind,
        dim_in,
        dim_out,
        bn_enabled,
        linear,
        bn,
    })
}

impl LayerBlock {
    /// Applies the block: linear -> BN -> activation, pool -> BN, or
    /// identity, honoring `bn_enabled`.
    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim_in {
            return Err(Error::ShapeMismatch {
                op: "block_forward",
                left: shape,
                right: vec![0, self.dim_in],
            });
        }
        match self.kind {
            OperationKind::Identity => Ok(x.clone()),
            kind if kind.is_linear() => {
                let lin = self.linear.as_ref().expect("linear kinds carry weights");
                let mut y = ops::linear(ctx.tape, x, &lin.weight, &lin.bias)?;
                if let Some(bn) = &self.bn {
                    y = ops::batchnorm1d(ctx.tape, &y, &bn.gamma, &bn.beta, &bn.state, ctx.mode)?;
                    let act = kind.activation().expect("linear kinds have an activation");
                    y = ops::activation(ctx.tape, &y, act)?;
                }
                Ok(y)
            }
            kind => {
                let pool = kind.pool_kind().expect("remaining kinds are pools");
                let mut y = ops::pool1d(ctx.tape, x, pool)?;
                if let Some(bn) = &self.bn {
                    y = ops::batchnorm1d(ctx.tape, &y, &bn.gamma, &bn.beta, &bn.state, ctx.mode)?;
                }
                Ok(y)
            }
        }
    }

    /// Trainable parameters, in a stable order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if let Some(lin) = &self.linear {
            out.push(lin.weight.clone());
            out.push(lin.bias.clone());
        }
        if let Some(bn) = &self.bn {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        }
        out
    }

    /// Named parameters for checkpointing, prefixed with `prefix.`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(lin) = &self.linear {
            out.push((format!("{prefix}.w"), lin.weight.clone()));
            out.push((format!("{prefix}.b"), lin.bias.clone()));
        }
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.beta"), bn.beta.clone()));
        }
        out
    }

    /// Running-stat buffers for checkpointing, as (name, state) pairs.
    pub fn bn_state(&self) -> Option<&BnState> {
        self.bn.as_ref().map(|b| &b.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::seeding;

    #[test]
    fn catalog_sizes_and_order() {
        let s = catalog(SpaceVariant::S);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], OperationKind::LinBnRelu);
        assert_eq!(s[6], OperationKind::Identity);

        let sp = catalog(SpaceVariant::SPrime);
        assert_eq!(sp.len(), 5);
        assert!(sp.iter().all(|k| !k.is_pool()));
        // S' is a subsequence of S
        let mut it = s.iter();
        assert!(sp.iter().all(|k| it.any(|sk| sk == k)));
        assert_eq!(catalog(SpaceVariant::S), catalog(SpaceVariant::S));
    }

    #[test]
    fn identity_block_is_parameterless_passthrough() {
        let mut rng = seeding::rng(0, "block", 0);
        let block = instantiate_block(OperationKind::Identity, 64, 64, false, &mut rng).unwrap();
        assert!(block.params().is_empty());
        let x = Tensor::constant(&[2, 64], (0..128).map(|i| i as f32).collect()).unwrap();
        let y = block.forward(&ForwardCtx::eval(), &x).unwrap();
        assert!(x.bitwise_eq(&y));
    }

    #[test]
    fn predictor_final_blocks_drop_bn() {
        let mut rng = seeding::rng(0, "block", 1);
        let block = instantiate_block(OperationKind::LinBnRelu, 64, 64, true, &mut rng).unwrap();
        assert!(!block.bn_enabled);
        assert!(block.bn_state().is_none());
        // only weight and bias remain trainable
        assert_eq!(block.params().len(), 2);
    }

    #[test]
    fn pool_with_width_change_is_rejected() {
        let mut rng = seeding::rng(0, "block", 2);
        assert!(matches!(
            instantiate_block(OperationKind::AvgPool3Bn, 64, 32, false, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            instantiate_block(OperationKind::Identity, 8, 4, false, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lin_bn_relu_on_whitened_batch_is_relu() {
        let mut rng = seeding::rng(0, "block", 3);
        let mut block = instantiate_block(OperationKind::LinBnRelu, 2, 2, false, &mut rng).unwrap();
        // force W=I, b=0 so the linear stage is a passthrough
        let lin = block.linear.as_mut().unwrap();
        lin.weight.set_values(&[1.0, 0.0, 0.0, 1.0]);
        lin.bias.set_values(&[0.0, 0.0]);
        // batch with exactly zero mean and unit (biased) variance per column
        let x = Tensor::constant(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let ctx = ForwardCtx {
            tape: None,
            mode: Mode::Train,
        };
        let y = block.forward(&ctx, &x).unwrap();
        let want = [1.0f32, 0.0, 0.0, 1.0]; // ReLU(x)
        for (got, want) in y.to_vec().iter().zip(want) {
            assert!((got - want).abs() < 1e-4, "{:?}", y.to_vec());
        }
    }

    #[test]
    fn max_pool_block_with_bn_bypassed_is_pool1d() {
        let mut rng = seeding::rng(0, "block", 4);
        let block = instantiate_block(OperationKind::MaxPool3Bn, 3, 3, false, &mut rng).unwrap();
        // eval mode with untouched running stats (mean 0, var 1) makes the
        // BN stage a near-identity
        let x = Tensor::constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = block.forward(&ForwardCtx::eval(), &x).unwrap();
        let pooled = ops::pool1d(None, &x, PoolKind::Max).unwrap();
        for (got, want) in y.to_vec().iter().zip(pooled.to_vec()) {
            assert!((got - want).abs() < 1e-4);
        }
    }
}
