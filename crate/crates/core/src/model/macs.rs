//! Analytic parameter and multiply-accumulate counts.

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// Multiply-accumulates of one batch-1 forward pass, by term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub embed: u64,
    /// Per layer.
    pub in_proj: u64,
    pub conv: u64,
    pub ssm_proj: u64,
    pub scan: u64,
    pub out_proj: u64,
    pub head: u64,
    pub total: u64,
}

pub fn mac_breakdown(cfg: &ModelConfig) -> MacBreakdown {
    let v = cfg.vim_dims();
    let u = |x: usize| x as u64;
    let (t, d, e) = (u(cfg.tokens()), u(v.d_model), u(v.d_inner));
    let (kw, r, ns) = (u(v.conv_width), u(v.dt_rank), u(v.d_state));
    let embed = 2 * u(cfg.seq_patches) * u(cfg.patch_dim()) * d;
    let in_proj = t * d * 2 * e;
    let conv = 2 * t * e * kw;
    let ssm_proj = 2 * t * e * (r + 2 * ns);
    let scan = 2 * t * e * ns * 2;
    let out_proj = t * e * d;
    let head = d * u(cfg.head_out);
    let layer = in_proj + conv + ssm_proj + scan + out_proj;
    MacBreakdown {
        embed,
        in_proj,
        conv,
        ssm_proj,
        scan,
        out_proj,
        head,
        total: embed + u(cfg.layers) * layer + head,
    }
}

pub fn count_macs(cfg: &ModelConfig) -> u64 {
    mac_breakdown(cfg).total
}

/// Closed-form count of backbone and head scalars.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let v = cfg.vim_dims();
    let (d, e) = (v.d_model, v.d_inner);
    let embed = cfg.patch_dim() * d + d + cfg.tokens() * d;
    let direction = e * (v.conv_width + 2 * v.dt_rank + 3 * v.d_state + 3);
    let layer = 2 * d + 3 * d * e + 2 * direction;
    let head = 2 * d + d * cfg.head_out + cfg.head_out;
    embed + cfg.layers * layer + head
}
