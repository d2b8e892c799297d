//! GA-GRU decoder: a GRU whose input and state rows are rescaled by per-joint
//! attention scores before the gates, emitting pose displacements
//! autoregressively.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::diff_features;
use crate::error::{Error, Result};
use crate::graphs::init_spatial;
use crate::init::{glorot_bound, uniform};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rollouts abort once any state or pose entry exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Row-wise affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.w"),
                uniform(rng, &[d_in, d_out], glorot_bound(d_in, d_out)),
                ParamKind::Weight,
            ),
            bias: store.add(
                format!("{name}.b"),
                Tensor::zeros(&[d_out]),
                ParamKind::Bias,
            ),
        }
    }

    /// All-zero map; the untrained decoder then repeats the last pose.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.w"),
                Tensor::zeros(&[d_in, d_out]),
                ParamKind::Weight,
            ),
            bias: store.add(
                format!("{name}.b"),
                Tensor::zeros(&[d_out]),
                ParamKind::Bias,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_row(y, p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub graph: ParamId,
    pub w: ParamId,
    pub u: ParamId,
}

/// `score = σ(ReLU(A z W) U)`, one scalar per joint; returns `(score ⊙ z, score)`.
pub fn attention_gate(tape: &mut Tape, z: Var, graph: Var, w: Var, u: Var) -> Result<(Var, Var)> {
    let az = tape.matmul(graph, z)?;
    let h = tape.matmul(az, w)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, u)?;
    if tape.shape(logits)[1] != 1 {
        return Err(Error::dim(
            "attention_gate",
            format!("U must map to one column, got {:?}", tape.shape(u)),
        ));
    }
    let score = tape.sigmoid(logits)?;
    Ok((tape.scale_rows(z, score)?, score))
}

/// `u ⊙ h + (1 − u) ⊙ c`.
pub fn blend_state(tape: &mut Tape, u: Var, h: Var, c: Var) -> Result<Var> {
    let keep = tape.mul(u, h)?;
    let inv = tape.one_minus(u)?;
    let fresh = tape.mul(inv, c)?;
    tape.add(keep, fresh)
}

#[derive(Clone, Debug)]
pub struct GaGru {
    pub input_attention: Attention,
    pub state_attention: Attention,
    r_in: Linear,
    r_h: Linear,
    u_in: Linear,
    u_h: Linear,
    c_in: Linear,
    c_h: Linear,
    readout_hidden: Linear,
    readout_out: Linear,
    attention: bool,
    diff_order: usize,
}

impl GaGru {
    pub fn build(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let dh = cfg.state_dim();
        let di = cfg.input_channels();
        let skeleton = init_spatial(&cfg.skeleton()?)?.adjacency;
        let mut attention = |name: &str, d: usize| Attention {
            graph: store.add(
                format!("decoder.{name}.a"),
                skeleton.clone(),
                ParamKind::Graph,
            ),
            w: store.add(
                format!("decoder.{name}.w"),
                uniform(rng, &[d, dh], glorot_bound(d, dh)),
                ParamKind::Weight,
            ),
            u: store.add(
                format!("decoder.{name}.u"),
                uniform(rng, &[dh, 1], glorot_bound(dh, 1)),
                ParamKind::Weight,
            ),
        };
        let input_attention = attention("att_in", di);
        let state_attention = attention("att_h", dh);
        let half = (dh / 2).max(1);
        Ok(GaGru {
            input_attention,
            state_attention,
            r_in: Linear::build(store, rng, "decoder.r_in", di, dh),
            r_h: Linear::build(store, rng, "decoder.r_h", dh, dh),
            u_in: Linear::build(store, rng, "decoder.u_in", di, dh),
            u_h: Linear::build(store, rng, "decoder.u_h", dh, dh),
            c_in: Linear::build(store, rng, "decoder.c_in", di, dh),
            c_h: Linear::build(store, rng, "decoder.c_h", dh, dh),
            readout_hidden: Linear::build(store, rng, "decoder.readout1", dh, half),
            readout_out: Linear::zeros(store, "decoder.readout2", half, cfg.channels),
            attention: cfg.attention,
            diff_order: cfg.diff_order,
        })
    }

    fn attend(&self, tape: &mut Tape, p: &Bound, z: Var, a: &Attention) -> Result<Var> {
        if !self.attention {
            return Ok(z);
        }
        Ok(attention_gate(tape, z, p[a.graph], p[a.w], p[a.u])?.0)
    }

    /// One gated state update from input features `M×C(β+1)`.
    pub fn cell(&self, tape: &mut Tape, p: &Bound, input: Var, h: Var) -> Result<Var> {
        let ia = self.attend(tape, p, input, &self.input_attention)?;
        let ha = self.attend(tape, p, h, &self.state_attention)?;
        let gate = |tape: &mut Tape, a: &Linear, b: &Linear| -> Result<Var> {
            let x = a.forward(tape, p, ia)?;
            let y = b.forward(tape, p, ha)?;
            let s = tape.add(x, y)?;
            tape.sigmoid(s)
        };
        let r = gate(tape, &self.r_in, &self.r_h)?;
        let u = gate(tape, &self.u_in, &self.u_h)?;
        let ci = self.c_in.forward(tape, p, ia)?;
        let ch = self.c_h.forward(tape, p, ha)?;
        let ch = tape.mul(r, ch)?;
        let c = tape.add(ci, ch)?;
        let c = tape.tanh(c)?;
        blend_state(tape, u, h, c)
    }

    /// Two-layer readout `M×D_h → M×C`.
    pub fn readout(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let z = self.readout_hidden.forward(tape, p, h)?;
        let z = tape.tanh(z)?;
        self.readout_out.forward(tape, p, z)
    }

    /// Emits `steps` poses. `history` holds the last `β+1` observed frames
    /// (oldest first); each step feeds the difference features of the newest
    /// frame in the rolling buffer. With `teacher`, ground-truth frames replace
    /// emitted ones in the buffer.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        p: &Bound,
        history: &[Var],
        h0: Var,
        steps: usize,
        teacher: Option<Var>,
    ) -> Result<Var> {
        if steps == 0 {
            return Err(Error::Config("rollout needs at least one step".into()));
        }
        if history.len() != self.diff_order + 1 {
            return Err(Error::dim(
                "rollout",
                format!(
                    "{} history frames for order {}",
                    history.len(),
                    self.diff_order
                ),
            ));
        }
        let mut buffer = history.to_vec();
        let mut h = h0;
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            let window = tape.stack(&buffer)?;
            let feats = diff_features(tape, window, self.diff_order)?;
            let input = tape.select0(feats, self.diff_order)?;
            h = self.cell(tape, p, input, h)?;
            let disp = self.readout(tape, p, h)?;
            let pose = tape.add(*buffer.last().unwrap(), disp)?;
            let worst = tape.value(pose).max_abs().max(tape.value(h).max_abs());
            if worst > DIVERGENCE_LIMIT {
                return Err(Error::Diverged(format!(
                    "rollout step {step}: magnitude {worst:e} exceeds {DIVERGENCE_LIMIT:e}"
                )));
            }
            out.push(pose);
            let next = match teacher {
                Some(t) => tape.select0(t, step)?,
                None => pose,
            };
            buffer.remove(0);
            buffer.push(next);
        }
        tape.stack(&out)
    }

    /// Zeroes the readout so every step repeats the previous pose.
    pub fn zero_readout(&self, store: &mut ParamStore) -> Result<()> {
        for id in [self.readout_out.weight, self.readout_out.bias] {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z)?;
        }
        Ok(())
    }
}
