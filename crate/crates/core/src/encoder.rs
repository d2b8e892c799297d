//! Encoder: difference features, a stem graph convolution, the MST-GCU stack
//! and temporal average pooling into a per-joint state matrix.

use rand::Rng;

use crate::config::ModelConfig;
use crate::conv::{frame_mix, spatial_graph_conv};
use crate::error::{Error, Result, ResultExt};
use crate::graphs::init_spatial;
use crate::init::filter_bank;
use crate::mstgcu::{MstGcu, UnitShape, UnitTrace};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `T×T` backward difference with a zero first row.
fn difference_matrix(frames: usize) -> Tensor {
    Tensor::from_fn(&[frames, frames], |i| match (i[0], i[1]) {
        (0, _) => 0.0,
        (t, s) if t == s => 1.0,
        (t, s) if t == s + 1 => -1.0,
        _ => 0.0,
    })
}

/// Concatenates `Δ⁰X, …, Δ^βX` along channels. Every order above zero is zero
/// at the first frame.
pub fn diff_features(tape: &mut Tape, x: Var, order: usize) -> Result<Var> {
    let frames = match *tape.shape(x) {
        [t, _, _] => t,
        ref s => {
            return Err(Error::dim(
                "diff_features",
                format!("expected T×M×C, got {s:?}"),
            ))
        }
    };
    let delta = tape.constant(difference_matrix(frames));
    let mut parts = vec![x];
    for _ in 0..order {
        let prev = *parts.last().unwrap();
        parts.push(frame_mix(tape, delta, prev)?);
    }
    if parts.len() == 1 {
        return Ok(x);
    }
    tape.concat_last(&parts)
}

/// Value-level [`diff_features`].
pub fn diff_features_value(x: &Tensor, order: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = diff_features(&mut tape, v, order)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem_graph: ParamId,
    pub stem_filter: ParamId,
    pub units: Vec<MstGcu>,
    diff_order: usize,
    spatial_hops: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `M×D_h` motion state.
    pub state: Var,
    pub traces: Vec<UnitTrace>,
}

impl Encoder {
    pub fn build(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let shape = UnitShape::from_config(cfg)?;
        let stem_graph = store.add(
            "encoder.stem.s",
            init_spatial(&shape.skeleton)?.adjacency,
            ParamKind::Graph,
        );
        let stem_filter = store.add(
            "encoder.stem.u",
            filter_bank(rng, 2, cfg.input_channels(), cfg.layer_dims[0]),
            ParamKind::Weight,
        );
        let mut units = Vec::with_capacity(cfg.layer_dims.len());
        let mut d_in = cfg.layer_dims[0];
        for (i, &d_out) in cfg.layer_dims.iter().enumerate() {
            units.push(MstGcu::build(
                store,
                rng,
                &format!("encoder.unit{i}"),
                &shape,
                d_in,
                d_out,
            )?);
            d_in = d_out;
        }
        Ok(Encoder {
            stem_graph,
            stem_filter,
            units,
            diff_order: cfg.diff_order,
            spatial_hops: 1,
        })
    }

    /// Every primitive rejects non-finite output, so a NaN aborts the pass with
    /// the failing layer named in the error.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, observed: Var) -> Result<Encoded> {
        let feats = diff_features(tape, observed, self.diff_order).context(|| "encoder input")?;
        let mut h = spatial_graph_conv(
            tape,
            feats,
            p[self.stem_graph],
            p[self.stem_filter],
            self.spatial_hops,
        )
        .context(|| "encoder stem")?;
        let mut traces = Vec::with_capacity(self.units.len());
        for (i, unit) in self.units.iter().enumerate() {
            let (out, trace) = unit
                .forward(tape, p, h)
                .context(|| format!("encoder unit {i}"))?;
            h = out;
            traces.push(trace);
        }
        let [frames, m, d] = [tape.shape(h)[0], tape.shape(h)[1], tape.shape(h)[2]];
        let mean = tape.constant(Tensor::filled(&[1, frames], 1.0 / frames as f64));
        let pooled = frame_mix(tape, mean, h)?;
        let state = tape.reshape(pooled, &[m, d])?;
        Ok(Encoded { state, traces })
    }
}
