//! Multiscale spatio-temporal graph computational unit.
//!
//! A unit is a spatial block followed by a temporal block (or the reverse),
//! plus a residual connection. Each block convolves every scale of its axis and
//! fuses the coarse results back into scale 0.

use rand::Rng;

use crate::config::{ConvOrder, ModelConfig};
use crate::conv::{channel_map, ss_gc, st_gc};
use crate::error::{Error, Result};
use crate::graphs::{init_spatial, init_temporal_cyclic, SkeletonSpec};
use crate::init::{filter_bank, glorot_bound, uniform};
use crate::multiscale::{
    cross_scale_spatial_fuse, cross_scale_temporal_fuse, downscale_spatial, downscale_temporal,
    spatial_pool_operator, spatial_unpool_operator, temporal_pool_operator, CoarseSpatial,
    ScaleSpec, UnpoolVars,
};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything a unit needs to know about the problem that is not a width.
#[derive(Clone, Debug)]
pub struct UnitShape {
    pub skeleton: SkeletonSpec,
    pub scales: ScaleSpec,
    pub spatial_hops: usize,
    pub temporal_hops: usize,
    pub embed_dim: usize,
    pub order: ConvOrder,
}

impl UnitShape {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Ok(UnitShape {
            skeleton: cfg.skeleton()?,
            scales: ScaleSpec::new(
                cfg.joints,
                cfg.obs_len,
                cfg.spatial_scales,
                cfg.temporal_scales,
            )?,
            spatial_hops: cfg.spatial_hops,
            temporal_hops: cfg.temporal_hops,
            embed_dim: cfg.embed_dim,
            order: cfg.conv_order,
        })
    }
}

#[derive(Clone, Debug)]
struct PoolIds {
    embed: ParamId,
    weights: ParamId,
}

#[derive(Clone, Debug)]
struct UnpoolIds {
    fine_filter: ParamId,
    coarse_filter: ParamId,
    fine_proj: ParamId,
    coarse_proj: ParamId,
    fuse: ParamId,
}

#[derive(Clone, Debug)]
struct SpatialBlock {
    pools: Vec<PoolIds>,
    filters: Vec<ParamId>,
    unpools: Vec<UnpoolIds>,
}

#[derive(Clone, Debug)]
struct TemporalBlock {
    filters: Vec<ParamId>,
}

/// Intermediate operators of one forward pass, kept for losses and export.
#[derive(Clone, Debug, Default)]
pub struct UnitTrace {
    /// `Ψ_{0→r}` for `r = 1..R_s`.
    pub pool: Vec<Var>,
    /// `Ψ_{r→0}` for `r = 1..R_s`.
    pub unpool: Vec<Var>,
    /// `Ψᵀ S_0 Ψ` for `r = 1..R_s`.
    pub coarse_graphs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MstGcu {
    pub d_in: usize,
    pub d_out: usize,
    pub spatial_graph: ParamId,
    pub temporal_graph: ParamId,
    spatial: SpatialBlock,
    temporal: TemporalBlock,
    residual: Option<ParamId>,
    shape: UnitShape,
}

fn max_row_sum(g: &Tensor) -> f64 {
    g.data()
        .chunks(g.cols())
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(1.0, f64::max)
}

/// Spatial filter bank whose hop-`ℓ` slice is shrunk by `gain^-ℓ`.
fn hop_scaled_bank(
    rng: &mut impl Rng,
    hops: usize,
    d_in: usize,
    d_out: usize,
    gain: f64,
) -> Tensor {
    let mut bank = filter_bank(rng, hops + 1, d_in, d_out);
    let per = d_in * d_out;
    for (l, slice) in bank.data_mut().chunks_mut(per).enumerate() {
        let k = gain.powi(-(l as i32));
        slice.iter_mut().for_each(|v| *v *= k);
    }
    bank
}

fn spatial_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    graph: ParamId,
    prefix: &str,
    shape: &UnitShape,
    d_in: usize,
    d_out: usize,
) -> SpatialBlock {
    let (lt, ls, e) = (shape.temporal_hops, shape.spatial_hops, shape.embed_dim);
    let frames = shape.scales.frames();
    let counts = shape.scales.spatial();
    let mut block = SpatialBlock {
        pools: Vec::new(),
        filters: Vec::new(),
        unpools: Vec::new(),
    };
    // Unnormalized graphs amplify by up to their largest row sum per hop; a
    // coarse graph sums roughly M/M_r fine rows.
    let fine_gain = max_row_sum(store.get(graph));
    for (r, &mr) in counts.iter().enumerate() {
        let gain = fine_gain * counts[0] as f64 / mr as f64;
        block.filters.push(store.add(
            format!("{prefix}.spatial.u{r}"),
            hop_scaled_bank(rng, ls, d_in, d_out, gain),
            ParamKind::Weight,
        ));
        if r == 0 {
            continue;
        }
        block.pools.push(PoolIds {
            embed: store.add(
                format!("{prefix}.spatial.pool{r}.embed"),
                filter_bank(rng, 2 * lt + 1, d_in, e),
                ParamKind::Weight,
            ),
            weights: store.add(
                format!("{prefix}.spatial.pool{r}.w"),
                uniform(rng, &[frames * e, mr], glorot_bound(frames * e, mr)),
                ParamKind::Weight,
            ),
        });
        let proj_bound = glorot_bound(frames * e, e);
        block.unpools.push(UnpoolIds {
            fine_filter: store.add(
                format!("{prefix}.spatial.unpool{r}.fine"),
                filter_bank(rng, 2 * lt + 1, d_out, e),
                ParamKind::Weight,
            ),
            coarse_filter: store.add(
                format!("{prefix}.spatial.unpool{r}.coarse"),
                filter_bank(rng, 2 * lt + 1, d_out, e),
                ParamKind::Weight,
            ),
            fine_proj: store.add(
                format!("{prefix}.spatial.unpool{r}.fine_proj"),
                uniform(rng, &[frames * e, e], proj_bound),
                ParamKind::Weight,
            ),
            coarse_proj: store.add(
                format!("{prefix}.spatial.unpool{r}.coarse_proj"),
                uniform(rng, &[frames * e, e], proj_bound),
                ParamKind::Weight,
            ),
            fuse: store.add(
                format!("{prefix}.spatial.unpool{r}.fuse"),
                uniform(
                    rng,
                    &[d_out, d_out],
                    glorot_bound(d_out, d_out) / counts.len() as f64,
                ),
                ParamKind::Weight,
            ),
        });
    }
    block
}

fn temporal_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    shape: &UnitShape,
    d_in: usize,
    d_out: usize,
) -> TemporalBlock {
    let lt = shape.temporal_hops;
    let scales = shape.scales.temporal().len();
    // Coarse branches are summed into scale 0 unweighted; start them small.
    let filters = (0..scales)
        .map(|r| {
            let mut bank = filter_bank(rng, 2 * lt + 1, d_in, d_out);
            if r > 0 {
                bank.data_mut().iter_mut().for_each(|v| *v /= scales as f64);
            }
            store.add(format!("{prefix}.temporal.v{r}"), bank, ParamKind::Weight)
        })
        .collect();
    TemporalBlock { filters }
}

impl MstGcu {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        shape: &UnitShape,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let spatial_graph = store.add(
            format!("{prefix}.s0"),
            init_spatial(&shape.skeleton)?.adjacency,
            ParamKind::Graph,
        );
        let t0 = init_temporal_cyclic(shape.scales.frames())?;
        let temporal_graph = store.add_masked(format!("{prefix}.t0"), t0.adjacency, t0.trainable);
        let (spatial, temporal) = match shape.order {
            ConvOrder::SpatialFirst => (
                spatial_block(store, rng, spatial_graph, prefix, shape, d_in, d_out),
                temporal_block(store, rng, prefix, shape, d_out, d_out),
            ),
            ConvOrder::TemporalFirst => {
                let t = temporal_block(store, rng, prefix, shape, d_in, d_out);
                (
                    spatial_block(store, rng, spatial_graph, prefix, shape, d_out, d_out),
                    t,
                )
            }
        };
        let residual = (d_in != d_out).then(|| {
            store.add(
                format!("{prefix}.residual"),
                uniform(rng, &[d_in, d_out], glorot_bound(d_in, d_out)),
                ParamKind::Weight,
            )
        });
        Ok(MstGcu {
            d_in,
            d_out,
            spatial_graph,
            temporal_graph,
            spatial,
            temporal,
            residual,
            shape: shape.clone(),
        })
    }

    fn spatial_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        trace: &mut UnitTrace,
    ) -> Result<Var> {
        let (s0, t0) = (p[self.spatial_graph], p[self.temporal_graph]);
        let (ls, lt) = (self.shape.spatial_hops, self.shape.temporal_hops);
        let b = &self.spatial;
        let y0 = ss_gc(tape, x, s0, p[b.filters[0]], ls)?;
        let mut coarse = Vec::with_capacity(b.pools.len());
        for (i, pool) in b.pools.iter().enumerate() {
            let psi = spatial_pool_operator(tape, x, s0, t0, p[pool.embed], p[pool.weights], lt)?;
            let (xr, sr) = downscale_spatial(tape, x, s0, psi)?;
            let yr = ss_gc(tape, xr, sr, p[b.filters[i + 1]], ls)?;
            let u = &b.unpools[i];
            let vars = UnpoolVars {
                fine_filter: p[u.fine_filter],
                coarse_filter: p[u.coarse_filter],
                fine_proj: p[u.fine_proj],
                coarse_proj: p[u.coarse_proj],
            };
            let psi_up = spatial_unpool_operator(tape, y0, yr, s0, sr, t0, &vars, lt)?;
            trace.pool.push(psi);
            trace.unpool.push(psi_up);
            trace.coarse_graphs.push(sr);
            coarse.push(CoarseSpatial {
                features: yr,
                unpool: psi_up,
                weights: p[u.fuse],
            });
        }
        cross_scale_spatial_fuse(tape, y0, &coarse)
    }

    fn temporal_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let t0 = p[self.temporal_graph];
        let lt = self.shape.temporal_hops;
        let filters = &self.temporal.filters;
        let y0 = st_gc(tape, x, t0, p[filters[0]], lt)?;
        let frames = self.shape.scales.frames();
        let mut coarse = Vec::with_capacity(filters.len() - 1);
        for (r, &tr) in self.shape.scales.temporal().iter().enumerate().skip(1) {
            let phi = tape.constant(temporal_pool_operator(frames, tr)?);
            let (xr, graph_r) = downscale_temporal(tape, x, t0, phi)?;
            coarse.push(st_gc(tape, xr, graph_r, p[filters[r]], lt)?);
        }
        cross_scale_temporal_fuse(tape, y0, &coarse)
    }

    /// Maps `T×M×D_in` to `T×M×D_out`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, UnitTrace)> {
        let s = tape.shape(x).to_vec();
        let (frames, joints) = (self.shape.scales.frames(), self.shape.scales.joints());
        if s != [frames, joints, self.d_in] {
            return Err(Error::dim(
                "mstgcu",
                format!("input {s:?}, expected [{frames}, {joints}, {}]", self.d_in),
            ));
        }
        let mut trace = UnitTrace::default();
        let y = match self.shape.order {
            ConvOrder::SpatialFirst => {
                let h = self.spatial_forward(tape, p, x, &mut trace)?;
                self.temporal_forward(tape, p, h)?
            }
            ConvOrder::TemporalFirst => {
                let h = self.temporal_forward(tape, p, x)?;
                self.spatial_forward(tape, p, h, &mut trace)?
            }
        };
        let skip = match self.residual {
            Some(w) => channel_map(tape, x, p[w])?,
            None => x,
        };
        Ok((tape.add(y, skip)?, trace))
    }
}
