//! The standard finite-difference suite: every differentiable primitive, each
//! layer, the losses and a toy-sized full model.

use crate::config::ModelConfig;
use crate::conv::{spatial_graph_conv, temporal_graph_conv};
use crate::decoder::{attention_gate, GaGru};
use crate::encoder::diff_features;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradReport};
use crate::graphs::graph_power;
use crate::init::{seeded, uniform, SeedRng};
use crate::losses::{
    entropy_loss, gram_matrix_loss, l1_prediction_loss, total_loss, LossTerms, LossWeights,
};
use crate::model::MstGnn;
use crate::multiscale::{
    cross_scale_spatial_fuse, cross_scale_temporal_fuse, downscale_spatial, downscale_temporal,
    spatial_pool_operator, spatial_unpool_operator, temporal_pool_operator, CoarseSpatial,
    UnpoolVars,
};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

/// The configuration used for the full-model check: `T=4`, `M=5`, two scales
/// on each axis and an 8-wide state.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        obs_len: 4,
        pred_len: 2,
        layer_dims: vec![4, 8],
        embed_dim: 2,
        spatial_scales: 2,
        temporal_scales: 2,
        temporal_hops: 1,
        ..ModelConfig::desk(5)
    }
}

/// Reduces `out` to a scalar through fixed random weights so no gradient
/// component cancels by symmetry.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut seeded(seed), tape.shape(out), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn rand(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

/// Entries bounded away from zero, for kinked functions.
fn away_from_zero(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    rand(rng, shape).map(|v| if v < 0.0 { v - 0.2 } else { v + 0.2 })
}

fn positive(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    rand(rng, shape).map(|v| 1.0 + 0.5 * v)
}

type Check = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

fn primitive_checks(rng: &mut SeedRng) -> Vec<Check> {
    let mut c: Vec<Check> = Vec::new();
    macro_rules! unary {
        ($name:expr, $input:expr, $op:expr) => {
            c.push((
                $name,
                vec![$input],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = $op(t, v[0])?;
                    probe(t, y, 1)
                }),
            ));
        };
    }
    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $op:expr) => {
            c.push((
                $name,
                vec![$a, $b],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = $op(t, v[0], v[1])?;
                    probe(t, y, 2)
                }),
            ));
        };
    }
    binary!(
        "matmul",
        rand(rng, &[3, 4]),
        rand(rng, &[4, 2]),
        Tape::matmul
    );
    unary!("transpose", rand(rng, &[3, 4]), Tape::transpose);
    binary!("add", rand(rng, &[2, 3]), rand(rng, &[2, 3]), Tape::add);
    binary!("sub", rand(rng, &[2, 3]), rand(rng, &[2, 3]), Tape::sub);
    binary!("mul", rand(rng, &[2, 3]), rand(rng, &[2, 3]), Tape::mul);
    binary!(
        "add_row",
        rand(rng, &[3, 4]),
        rand(rng, &[4]),
        Tape::add_row
    );
    binary!(
        "scale_rows",
        rand(rng, &[3, 4]),
        rand(rng, &[3, 1]),
        Tape::scale_rows
    );
    unary!("affine", rand(rng, &[5]), |t: &mut Tape, x| t
        .affine(x, -1.7, 0.3));
    unary!("relu", away_from_zero(rng, &[6]), Tape::relu);
    unary!("sigmoid", rand(rng, &[6]).map(|v| 4.0 * v), Tape::sigmoid);
    unary!("tanh", rand(rng, &[6]).map(|v| 2.0 * v), Tape::tanh);
    unary!("abs", away_from_zero(rng, &[6]), Tape::abs);
    unary!("square", rand(rng, &[6]), Tape::square);
    unary!("log", positive(rng, &[6]), |t: &mut Tape, x| t
        .log_clamped(x, 1e-12));
    unary!(
        "softmax_rows",
        rand(rng, &[3, 4]).map(|v| 3.0 * v),
        Tape::softmax_rows
    );
    unary!("sum", rand(rng, &[2, 3]), |t: &mut Tape, x| {
        let s = t.sum(x)?;
        t.square(s)
    });
    unary!("reshape", rand(rng, &[2, 6]), |t: &mut Tape, x| t
        .reshape(x, &[3, 4]));
    unary!("permute3", rand(rng, &[2, 3, 4]), |t: &mut Tape, x| t
        .permute3(x, [2, 0, 1]));
    unary!("merge_dims_13", rand(rng, &[2, 3, 4]), Tape::merge_dims_13);
    unary!("unmerge_dims_13", rand(rng, &[3, 8]), |t: &mut Tape, x| t
        .unmerge_dims_13(x, 2));
    binary!(
        "concat_last",
        rand(rng, &[2, 3, 2]),
        rand(rng, &[2, 3, 1]),
        |t: &mut Tape, a, b| t.concat_last(&[a, b])
    );
    binary!(
        "stack",
        rand(rng, &[2, 3]),
        rand(rng, &[2, 3]),
        |t: &mut Tape, a, b| t.stack(&[a, b])
    );
    unary!("select0", rand(rng, &[3, 2, 2]), |t: &mut Tape, x| t
        .select0(x, 1));
    unary!("row_outer", rand(rng, &[3, 3]), Tape::row_outer);
    c
}

fn layer_checks(rng: &mut SeedRng) -> Vec<Check> {
    let (t, m, d, e, mr) = (4usize, 5usize, 3usize, 2usize, 3usize);
    let mut c: Vec<Check> = Vec::new();
    c.push((
        "graph_power",
        vec![rand(rng, &[4, 4]).map(|v| 0.5 * v)],
        Box::new(|tape, v| {
            let fwd = graph_power(tape, v[0], 3)?;
            let back = graph_power(tape, v[0], -2)?;
            let s = tape.add(fwd, back)?;
            probe(tape, s, 3)
        }),
    ));
    c.push((
        "spatial_graph_conv",
        vec![
            rand(rng, &[t, m, d]),
            rand(rng, &[m, m]),
            rand(rng, &[3, d, 2]),
        ],
        Box::new(|tape, v| {
            let y = spatial_graph_conv(tape, v[0], v[1], v[2], 2)?;
            probe(tape, y, 4)
        }),
    ));
    c.push((
        "temporal_graph_conv",
        vec![
            rand(rng, &[t, m, d]),
            rand(rng, &[t, t]),
            rand(rng, &[5, d, 2]),
        ],
        Box::new(|tape, v| {
            let y = temporal_graph_conv(tape, v[0], v[1], v[2], 2)?;
            probe(tape, y, 5)
        }),
    ));
    c.push((
        "spatial_pool_operator",
        vec![
            rand(rng, &[t, m, d]),
            rand(rng, &[m, m]),
            rand(rng, &[t, t]),
            rand(rng, &[3, d, e]),
            rand(rng, &[t * e, mr]),
        ],
        Box::new(|tape, v| {
            let psi = spatial_pool_operator(tape, v[0], v[1], v[2], v[3], v[4], 1)?;
            let (xr, sr) = downscale_spatial(tape, v[0], v[1], psi)?;
            let a = probe(tape, xr, 6)?;
            let b = probe(tape, sr, 7)?;
            tape.add(a, b)
        }),
    ));
    c.push((
        "downscale_temporal",
        vec![rand(rng, &[6, m, d]), rand(rng, &[6, 6])],
        Box::new(|tape, v| {
            let phi = tape.constant(temporal_pool_operator(6, 3)?);
            let (xr, tr) = downscale_temporal(tape, v[0], v[1], phi)?;
            let a = probe(tape, xr, 8)?;
            let b = probe(tape, tr, 9)?;
            tape.add(a, b)
        }),
    ));
    c.push((
        "spatial_unpool_and_fuse",
        vec![
            rand(rng, &[t, m, d]),
            rand(rng, &[t, mr, d]),
            rand(rng, &[m, m]),
            rand(rng, &[mr, mr]),
            rand(rng, &[t, t]),
            rand(rng, &[3, d, e]),
            rand(rng, &[3, d, e]),
            rand(rng, &[t * e, e]),
            rand(rng, &[t * e, e]),
            rand(rng, &[d, d]),
        ],
        Box::new(|tape, v| {
            let vars = UnpoolVars {
                fine_filter: v[5],
                coarse_filter: v[6],
                fine_proj: v[7],
                coarse_proj: v[8],
            };
            let psi = spatial_unpool_operator(tape, v[0], v[1], v[2], v[3], v[4], &vars, 1)?;
            let fused = cross_scale_spatial_fuse(
                tape,
                v[0],
                &[CoarseSpatial {
                    features: v[1],
                    unpool: psi,
                    weights: v[9],
                }],
            )?;
            probe(tape, fused, 10)
        }),
    ));
    c.push((
        "temporal_fuse",
        vec![rand(rng, &[5, m, d]), rand(rng, &[2, m, d])],
        Box::new(|tape, v| {
            let y = cross_scale_temporal_fuse(tape, v[0], &[v[1]])?;
            probe(tape, y, 11)
        }),
    ));
    c.push((
        "diff_features",
        vec![rand(rng, &[t, m, d])],
        Box::new(|tape, v| {
            let y = diff_features(tape, v[0], 2)?;
            probe(tape, y, 12)
        }),
    ));
    c.push((
        "attention_gate",
        vec![
            rand(rng, &[m, d]),
            rand(rng, &[m, m]),
            rand(rng, &[d, 4]),
            rand(rng, &[4, 1]),
        ],
        Box::new(|tape, v| {
            let (y, _) = attention_gate(tape, v[0], v[1], v[2], v[3])?;
            probe(tape, y, 13)
        }),
    ));
    c
}

fn loss_checks(rng: &mut SeedRng) -> Vec<Check> {
    let mut c: Vec<Check> = Vec::new();
    let truth = rand(rng, &[3, 4, 3]);
    let pred = truth
        .zip_map(&away_from_zero(rng, &[3, 4, 3]), |a, b| a + b)
        .unwrap();
    c.push((
        "l1_prediction_loss",
        vec![pred, truth],
        Box::new(|tape, v| l1_prediction_loss(tape, v[0], v[1])),
    ));
    c.push((
        "gram_matrix_loss",
        vec![
            rand(rng, &[3, 4, 3]),
            rand(rng, &[3, 4, 3]),
            rand(rng, &[4, 3]),
        ],
        Box::new(|tape, v| gram_matrix_loss(tape, v[0], v[1], v[2])),
    ));
    c.push((
        "entropy_loss",
        vec![rand(rng, &[5, 3]), rand(rng, &[5, 2])],
        Box::new(|tape, v| {
            let a = tape.softmax_rows(v[0])?;
            let b = tape.softmax_rows(v[1])?;
            entropy_loss(tape, &[a, b])
        }),
    ));
    let truth = rand(rng, &[2, 3, 3]);
    let pred = truth
        .zip_map(&away_from_zero(rng, &[2, 3, 3]), |a, b| a + b)
        .unwrap();
    c.push((
        "total_loss",
        vec![pred, truth, rand(rng, &[3, 3]), rand(rng, &[3, 2])],
        Box::new(|tape, v| {
            let psi = tape.softmax_rows(v[3])?;
            let terms = LossTerms {
                pred: l1_prediction_loss(tape, v[0], v[1])?,
                gram: gram_matrix_loss(tape, v[0], v[1], v[2])?,
                ent: entropy_loss(tape, &[psi])?,
            };
            total_loss(
                tape,
                &terms,
                &LossWeights {
                    alpha: 0.7,
                    beta: 0.3,
                    gamma: 2.0,
                },
            )
        }),
    ));
    c
}

fn model_checks(rng: &mut SeedRng) -> Result<Vec<Check>> {
    let cfg = toy_model_config();
    let mut c: Vec<Check> = Vec::new();

    // One GA-GRU step at M=5, D_h=8.
    let mut store = ParamStore::new();
    let gru = GaGru::build(&mut store, rng, &cfg)?;
    randomize_zeros(&mut store, rng)?;
    let mut params = store.values();
    params.push(rand(rng, &[5, 9]));
    params.push(rand(rng, &[5, 8]));
    let n = store.len();
    c.push((
        "ga_gru_cell",
        params,
        Box::new(move |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let h = gru.cell(tape, &p, v[n], v[n + 1])?;
            let y = gru.readout(tape, &p, h)?;
            let a = probe(tape, h, 14)?;
            let b = probe(tape, y, 15)?;
            tape.add(a, b)
        }),
    ));

    let mut model = MstGnn::new(cfg.clone(), 17)?;
    randomize_zeros(model.store_mut(), rng)?;
    let observed = rand(rng, &[cfg.obs_len, cfg.joints, cfg.channels]);
    let future = rand(rng, &[cfg.pred_len, cfg.joints, cfg.channels]);
    let params = model.store().values();
    c.push((
        "full_model",
        params,
        Box::new(move |tape, v| {
            let p = Bound::from_vars(v.to_vec());
            let fwd = model.forward(tape, &p, &observed, None)?;
            let out = model.loss(tape, &fwd, &future, &LossWeights::default())?;
            Ok(out.total)
        }),
    ));
    Ok(c)
}

/// Zero-initialized readout weights hide gradient paths; give them values.
fn randomize_zeros(store: &mut ParamStore, rng: &mut SeedRng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let v = store.get(id);
        if v.data().iter().all(|&x| x == 0.0) {
            let fresh = uniform(rng, v.shape(), 0.3);
            store.set(id, fresh)?;
        }
    }
    Ok(())
}

fn run_checks(checks: Vec<Check>, config: GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    checks
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(&params, f, config)?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}

/// Runs every check; names come back in a fixed order.
pub fn run_suite(config: GradCheckConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = seeded(seed);
    let mut checks = primitive_checks(&mut rng);
    checks.extend(layer_checks(&mut rng));
    checks.extend(loss_checks(&mut rng));
    checks.extend(model_checks(&mut rng)?);
    run_checks(checks, config)
}

/// Only the tape primitives, on inputs drawn from `seed`.
pub fn run_primitives(config: GradCheckConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    run_checks(primitive_checks(&mut seeded(seed)), config)
}
