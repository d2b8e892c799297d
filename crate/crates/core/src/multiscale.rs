//! Multiscale graph construction (pooling) and cross-scale fusion (unpooling).
//!
//! Every coarse scale is derived from scale 0 directly. Spatial pooling is
//! learned and recomputed from the current input on each forward pass; temporal
//! pooling is fixed frame averaging.

use crate::conv::{channel_map, frame_mix, joint_mix, temporal_graph_conv};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Vertex counts per spatial scale and frame counts per temporal scale.
///
/// Spatial scale `r` keeps `⌈M / 2^r⌉` joints; temporal scale `r` keeps
/// `⌊T / (r+1)⌋` frames, averaging groups of `r + 1` consecutive frames and
/// trimming any trailing remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    spatial: Vec<usize>,
    temporal: Vec<usize>,
    frames: usize,
}

impl ScaleSpec {
    pub fn new(
        joints: usize,
        frames: usize,
        spatial_scales: usize,
        temporal_scales: usize,
    ) -> Result<Self> {
        if spatial_scales == 0 || temporal_scales == 0 {
            return Err(Error::Config("at least one scale is required".into()));
        }
        let spatial = (0..spatial_scales)
            .map(|r| joints.div_ceil(1 << r))
            .collect();
        let temporal = (0..temporal_scales).map(|r| frames / (r + 1)).collect();
        Self::from_counts(spatial, temporal, frames)
    }

    pub fn from_counts(spatial: Vec<usize>, temporal: Vec<usize>, frames: usize) -> Result<Self> {
        let strictly_decreasing = |v: &[usize]| v.windows(2).all(|w| w[0] > w[1]);
        if spatial.is_empty() || temporal.is_empty() {
            return Err(Error::Config("empty scale list".into()));
        }
        if !strictly_decreasing(&spatial) || spatial[spatial.len() - 1] == 0 {
            return Err(Error::Config(format!(
                "spatial scale sizes must be positive and strictly decreasing: {spatial:?}"
            )));
        }
        if temporal[0] != frames
            || !strictly_decreasing(&temporal)
            || temporal[temporal.len() - 1] == 0
        {
            return Err(Error::Config(format!(
                "temporal scale lengths must start at {frames} and strictly decrease: {temporal:?}"
            )));
        }
        Ok(ScaleSpec {
            spatial,
            temporal,
            frames,
        })
    }

    pub fn joints(&self) -> usize {
        self.spatial[0]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn temporal(&self) -> &[usize] {
        &self.temporal
    }
}

/// `Ψ_{0→r} = softmax_rows(S_0 [ReLU(V *_{T_0} X)]_{13} W_{0→r})`, an `M×M_r`
/// row-stochastic assignment of joints to coarse components.
pub fn spatial_pool_operator(
    tape: &mut Tape,
    x: Var,
    s0: Var,
    t0: Var,
    embed_filter: Var,
    weights: Var,
    hops: usize,
) -> Result<Var> {
    let h = temporal_graph_conv(tape, x, t0, embed_filter, hops)?;
    let h = tape.relu(h)?;
    let merged = tape.merge_dims_13(h)?;
    let (rows_needed, sw) = (tape.shape(merged)[1], tape.shape(weights).to_vec());
    if sw.len() != 2 || sw[0] != rows_needed {
        return Err(Error::dim(
            "spatial_pool_operator",
            format!("W is {sw:?} but merged features have width {rows_needed}"),
        ));
    }
    let mixed = tape.matmul(s0, merged)?;
    let logits = tape.matmul(mixed, weights)?;
    tape.softmax_rows(logits)
}

/// Coarse features `Ψᵀ X[t]` per frame and coarse graph `Ψᵀ S_0 Ψ`.
pub fn downscale_spatial(tape: &mut Tape, x: Var, s0: Var, psi: Var) -> Result<(Var, Var)> {
    let psi_t = tape.transpose(psi)?;
    let xr = joint_mix(tape, psi_t, x)?;
    let left = tape.matmul(psi_t, s0)?;
    let sr = tape.matmul(left, psi)?;
    Ok((xr, sr))
}

fn group_size(frames: usize, coarse: usize, op: &'static str) -> Result<usize> {
    if coarse == 0 || coarse > frames {
        return Err(Error::dim(
            op,
            format!("cannot pool {frames} frames into {coarse}"),
        ));
    }
    Ok(frames / coarse)
}

/// Fixed `T×T_r` averaging operator: frame `i` contributes `1/k` to coarse
/// frame `⌊i/k⌋` with `k = ⌊T/T_r⌋`; frames past `k·T_r` are trimmed. Every
/// column sums to one.
pub fn temporal_pool_operator(frames: usize, coarse: usize) -> Result<Tensor> {
    let k = group_size(frames, coarse, "temporal_pool_operator")?;
    let w = 1.0 / k as f64;
    Ok(Tensor::from_fn(&[frames, coarse], |i| {
        if i[0] < k * coarse && i[0] / k == i[1] {
            w
        } else {
            0.0
        }
    }))
}

/// `Φᵀ X[:, s]` per joint and `Φᵀ T_0 Φ`.
pub fn downscale_temporal(tape: &mut Tape, x: Var, t0: Var, phi: Var) -> Result<(Var, Var)> {
    let phi_t = tape.transpose(phi)?;
    let xr = frame_mix(tape, phi_t, x)?;
    let left = tape.matmul(phi_t, t0)?;
    let tr = tape.matmul(left, phi)?;
    Ok((xr, tr))
}

/// Weights that embed both scales before their affinities are compared.
#[derive(Clone, Copy, Debug)]
pub struct UnpoolVars {
    pub fine_filter: Var,
    pub coarse_filter: Var,
    pub fine_proj: Var,
    pub coarse_proj: Var,
}

fn embed(
    tape: &mut Tape,
    x: Var,
    graph: Var,
    t0: Var,
    filter: Var,
    proj: Var,
    hops: usize,
) -> Result<Var> {
    let h = temporal_graph_conv(tape, x, t0, filter, hops)?;
    let h = tape.relu(h)?;
    let merged = tape.merge_dims_13(h)?;
    let mixed = tape.matmul(graph, merged)?;
    tape.matmul(mixed, proj)
}

/// `Ψ_{r→0}`: softmax over coarse components of the inner products between
/// fine-joint and coarse-component embeddings. Shape `M×M_r`.
#[allow(clippy::too_many_arguments)]
pub fn spatial_unpool_operator(
    tape: &mut Tape,
    x0: Var,
    xr: Var,
    s0: Var,
    sr: Var,
    t0: Var,
    vars: &UnpoolVars,
    hops: usize,
) -> Result<Var> {
    let y0 = embed(tape, x0, s0, t0, vars.fine_filter, vars.fine_proj, hops)?;
    let yr = embed(tape, xr, sr, t0, vars.coarse_filter, vars.coarse_proj, hops)?;
    let yr_t = tape.transpose(yr)?;
    let logits = tape.matmul(y0, yr_t)?;
    tape.softmax_rows(logits)
}

/// One coarse scale's contribution to spatial fusion.
#[derive(Clone, Copy, Debug)]
pub struct CoarseSpatial {
    pub features: Var,
    pub unpool: Var,
    pub weights: Var,
}

/// `X_0[t] + Σ_r Ψ_{r→0} X_r[t] W_{r→0}` for every frame.
pub fn cross_scale_spatial_fuse(tape: &mut Tape, x0: Var, coarse: &[CoarseSpatial]) -> Result<Var> {
    let d = *tape.shape(x0).last().unwrap();
    let mut terms = vec![x0];
    for c in coarse {
        let sw = tape.shape(c.weights);
        if sw != [d, d] {
            return Err(Error::dim(
                "cross_scale_spatial_fuse",
                format!("fusion weights {sw:?} for {d} features"),
            ));
        }
        let lifted = joint_mix(tape, c.unpool, c.features)?;
        terms.push(channel_map(tape, lifted, c.weights)?);
    }
    tape.add_all(&terms)
}

/// `T×T_r` 0/1 operator that repeats each coarse frame over its group of
/// `k = ⌊T/T_r⌋` positions (the frame first, then its copies). Trimmed trailing
/// positions repeat the last coarse frame.
pub fn duplicate_operator(frames: usize, coarse: usize) -> Result<Tensor> {
    let k = group_size(frames, coarse, "duplicate_operator")?;
    Ok(Tensor::from_fn(&[frames, coarse], |i| {
        if (i[0] / k).min(coarse - 1) == i[1] {
            1.0
        } else {
            0.0
        }
    }))
}

/// Adds every coarse sequence, stretched back to `T` frames by duplication.
pub fn cross_scale_temporal_fuse(tape: &mut Tape, x0: Var, coarse: &[Var]) -> Result<Var> {
    let frames = tape.shape(x0)[0];
    let mut terms = vec![x0];
    for &xr in coarse {
        let dup = duplicate_operator(frames, tape.shape(xr)[0])?;
        let dup = tape.constant(dup);
        terms.push(frame_mix(tape, dup, xr)?);
    }
    tape.add_all(&terms)
}
