//! Gate prediction: project each input to a one-channel map, compare the
//! two maps jointly, and reweight the inputs with the resulting masks.

use super::params::{BlockSpec, ConvBlock, ParamSet, Session};
use super::{ModelError, Result};
use crate::tensor::Var;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateModule {
    /// `C_v → 1`, BN, ReLU.
    pub proj_v: ConvBlock,
    /// `C_h → 1`, BN, ReLU.
    pub proj_h: ConvBlock,
    /// `2 → 2`, BN, ReLU.
    pub cmp: ConvBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateOutput {
    pub o: Var,
    pub mask_v: Var,
    pub mask_h: Var,
}

impl GateModule {
    pub fn new(params: &mut ParamSet, prefix: &str, c_v: usize, c_h: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GateModule {
            proj_v: ConvBlock::new(params, &format!("{prefix}.proj_v"), BlockSpec::conv_bn_relu(c_v, 1, 1, 1), rng)?,
            proj_h: ConvBlock::new(params, &format!("{prefix}.proj_h"), BlockSpec::conv_bn_relu(c_h, 1, 1, 1), rng)?,
            cmp: ConvBlock::new(params, &format!("{prefix}.cmp"), BlockSpec::conv_bn_relu(2, 2, 1, 1), rng)?,
        })
    }

    /// Makes the comparison stage emit the constants `(m_v, m_h)` at every
    /// pixel regardless of input: zero conv, BN shift set to the constant.
    /// Exact in both BN modes as long as the running mean is zero.
    pub fn set_constant_masks(&self, params: &mut ParamSet, m_v: f64, m_h: f64) {
        assert!(m_v >= 0.0 && m_h >= 0.0, "masks pass through a ReLU");
        params.get_mut(self.cmp.weight).data_mut().fill(0.0);
        params.get_mut(self.cmp.bias).data_mut().fill(0.0);
        let bn = self.cmp.bn.expect("comparison block has batch norm");
        params.get_mut(bn.beta).data_mut().copy_from_slice(&[m_v, m_h]);
        params.get_mut(bn.running_mean).data_mut().fill(0.0);
    }

    pub fn param_count(&self, params: &ParamSet) -> u64 {
        [self.proj_v, self.proj_h, self.cmp]
            .iter()
            .map(|b| {
                let mut ids = vec![b.weight, b.bias];
                if let Some(bn) = b.bn {
                    ids.extend([bn.gamma, bn.beta]);
                }
                ids.iter().map(|id| params.get(*id).numel() as u64).sum::<u64>()
            })
            .sum()
    }
}

/// `O = M_v' ⊗ X_v + M_h' ⊗ X_h` with masks predicted from both inputs.
pub fn gate_forward(s: &mut Session, params: &ParamSet, gate: &GateModule, xv: Var, xh: Var) -> Result<GateOutput> {
    let (sv, sh) = (s.tape.shape(xv), s.tape.shape(xh));
    if sv != sh {
        return Err(ModelError::Tensor(crate::tensor::TensorError::Shape(format!(
            "gate inputs differ: vertical {sv}, horizontal {sh}"
        ))));
    }
    let mv = s.conv_block(params, &gate.proj_v, xv)?;
    let mh = s.conv_block(params, &gate.proj_h, xh)?;
    let mc = s.tape.concat_channels(&[mv, mh])?;
    let m = s.conv_block(params, &gate.cmp, mc)?;
    let parts = s.tape.split_channels(m, &[1, 1])?;
    let (mask_v, mask_h) = (parts[0], parts[1]);
    let ov = s.tape.mul_channel_broadcast(xv, mask_v)?;
    let oh = s.tape.mul_channel_broadcast(xh, mask_h)?;
    let o = s.tape.add(ov, oh)?;
    Ok(GateOutput { o, mask_v, mask_h })
}
