//! Spatial and temporal graph convolutions over `T×M×D` motion tensors.
//!
//! Spatial filters hold one `D×D'` slice per hop `0..=L` (shape `[L+1, D, D']`);
//! temporal filters hold one slice per hop `-L..=L` (shape `[2L+1, D, D']`,
//! slice `ℓ + L`). Negative temporal hops shift along the transposed graph.

use crate::error::{Error, Result};
use crate::graphs::cartesian_product;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn rank3(tape: &Tape, op: &'static str, x: Var) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::dim(op, format!("expected T×M×D, got {s:?}"))),
    }
}

/// `out[t] = a · x[t]` for every frame: mixes the joint axis.
pub fn joint_mix(tape: &mut Tape, a: Var, x: Var) -> Result<Var> {
    let [t, m, d] = rank3(tape, "joint_mix", x)?;
    let sa = tape.shape(a).to_vec();
    if sa.len() != 2 || sa[1] != m {
        return Err(Error::dim(
            "joint_mix",
            format!("{sa:?} against {m} joints"),
        ));
    }
    let p = tape.permute3(x, [1, 0, 2])?;
    let flat = tape.reshape(p, &[m, t * d])?;
    let mixed = tape.matmul(a, flat)?;
    let back = tape.reshape(mixed, &[sa[0], t, d])?;
    tape.permute3(back, [1, 0, 2])
}

/// `out[:, s] = a · x[:, s]` for every joint: mixes the frame axis.
pub fn frame_mix(tape: &mut Tape, a: Var, x: Var) -> Result<Var> {
    let [t, m, d] = rank3(tape, "frame_mix", x)?;
    let sa = tape.shape(a).to_vec();
    if sa.len() != 2 || sa[1] != t {
        return Err(Error::dim(
            "frame_mix",
            format!("{sa:?} against {t} frames"),
        ));
    }
    let flat = tape.reshape(x, &[t, m * d])?;
    let mixed = tape.matmul(a, flat)?;
    tape.reshape(mixed, &[sa[0], m, d])
}

/// Applies a `D×D'` map to every (frame, joint) feature vector.
pub fn channel_map(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let [t, m, d] = rank3(tape, "channel_map", x)?;
    let sw = tape.shape(w).to_vec();
    if sw.len() != 2 || sw[0] != d {
        return Err(Error::dim(
            "channel_map",
            format!("{d} features into {sw:?}"),
        ));
    }
    let flat = tape.reshape(x, &[t * m, d])?;
    let y = tape.matmul(flat, w)?;
    tape.reshape(y, &[t, m, sw[1]])
}

fn check_filter(
    tape: &Tape,
    op: &'static str,
    filter: Var,
    slices: usize,
    d_in: usize,
) -> Result<usize> {
    match *tape.shape(filter) {
        [k, d, d_out] if d == d_in => {
            if k != slices {
                Err(Error::dim(
                    op,
                    format!("filter has {k} hop slices, hop bound allows {slices}"),
                ))
            } else {
                Ok(d_out)
            }
        }
        ref s => Err(Error::dim(
            op,
            format!("filter {s:?} for {d_in} input features"),
        )),
    }
}

/// `Σ_{ℓ=0..L} S^ℓ X[t] U_ℓ` for every frame `t`.
pub fn spatial_graph_conv(
    tape: &mut Tape,
    x: Var,
    graph: Var,
    filter: Var,
    hops: usize,
) -> Result<Var> {
    let [_, m, d] = rank3(tape, "spatial_graph_conv", x)?;
    let sg = tape.shape(graph);
    if sg != [m, m] {
        return Err(Error::dim(
            "spatial_graph_conv",
            format!("graph {sg:?} for {m} joints"),
        ));
    }
    check_filter(tape, "spatial_graph_conv", filter, hops + 1, d)?;
    let mut shifted = x;
    let mut terms = Vec::with_capacity(hops + 1);
    for hop in 0..=hops {
        if hop > 0 {
            shifted = joint_mix(tape, graph, shifted)?;
        }
        let u = tape.select0(filter, hop)?;
        terms.push(channel_map(tape, shifted, u)?);
    }
    tape.add_all(&terms)
}

/// `Σ_{ℓ=-L..L} T^ℓ X[:, s] V_ℓ` for every joint `s`, with `T^{-ℓ} = (Tᵀ)^ℓ`.
pub fn temporal_graph_conv(
    tape: &mut Tape,
    x: Var,
    graph: Var,
    filter: Var,
    hops: usize,
) -> Result<Var> {
    let [t, _, d] = rank3(tape, "temporal_graph_conv", x)?;
    let sg = tape.shape(graph);
    if sg != [t, t] {
        return Err(Error::dim(
            "temporal_graph_conv",
            format!("graph {sg:?} for {t} frames"),
        ));
    }
    check_filter(tape, "temporal_graph_conv", filter, 2 * hops + 1, d)?;
    let v0 = tape.select0(filter, hops)?;
    let mut terms = vec![channel_map(tape, x, v0)?];
    if hops > 0 {
        let back = tape.transpose(graph)?;
        let (mut fwd_x, mut back_x) = (x, x);
        for hop in 1..=hops {
            fwd_x = frame_mix(tape, graph, fwd_x)?;
            back_x = frame_mix(tape, back, back_x)?;
            let vf = tape.select0(filter, hops + hop)?;
            let vb = tape.select0(filter, hops - hop)?;
            terms.push(channel_map(tape, fwd_x, vf)?);
            terms.push(channel_map(tape, back_x, vb)?);
        }
    }
    tape.add_all(&terms)
}

/// Single-scale spatial graph convolution: ReLU of [`spatial_graph_conv`].
pub fn ss_gc(tape: &mut Tape, x: Var, graph: Var, filter: Var, hops: usize) -> Result<Var> {
    let y = spatial_graph_conv(tape, x, graph, filter, hops)?;
    tape.relu(y)
}

/// Single-scale temporal graph convolution: ReLU of [`temporal_graph_conv`].
pub fn st_gc(tape: &mut Tape, x: Var, graph: Var, filter: Var, hops: usize) -> Result<Var> {
    let y = temporal_graph_conv(tape, x, graph, filter, hops)?;
    tape.relu(y)
}

#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl DecompositionReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err < self.tolerance
    }
}

/// Checks that one shift on the product graph, applied to the flattened
/// `(T·M)×d` signal, equals a spatial shift plus a temporal shift applied to
/// the `T×M×d` tensor. Dense, so only meant for small instances.
pub fn decomposition_equivalence_check(
    x: &Tensor,
    spatial: &Tensor,
    temporal: &Tensor,
) -> Result<DecompositionReport> {
    let &[t, m, d] = x.shape() else {
        return Err(Error::dim("decomposition_check", "x must be T×M×d"));
    };
    if t * m > 64 {
        return Err(Error::dim(
            "decomposition_check",
            format!("T·M = {} exceeds 64", t * m),
        ));
    }
    let product = cartesian_product(spatial, temporal)?;
    if product.rows() != t * m {
        return Err(Error::dim(
            "decomposition_check",
            "graph sizes do not match x",
        ));
    }
    let flat = x.clone().reshape(&[t * m, d])?;
    let joint = product.matmul(&flat)?.reshape(&[t, m, d])?;

    let mut split = Tensor::zeros(&[t, m, d]);
    for ti in 0..t {
        for mi in 0..m {
            for c in 0..d {
                let mut v = 0.0;
                for mj in 0..m {
                    v += spatial.at2(mi, mj) * x.at3(ti, mj, c);
                }
                for tj in 0..t {
                    v += temporal.at2(ti, tj) * x.at3(tj, mi, c);
                }
                split.set3(ti, mi, c, v);
            }
        }
    }
    Ok(DecompositionReport {
        max_abs_err: joint.max_abs_diff(&split),
        tolerance: 1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{init_spatial, init_temporal_cyclic, SkeletonSpec};
    use crate::init::testutil::{rand_tensor, rng};

    fn filter_eye(slices: usize, d: usize, active: &[usize]) -> Tensor {
        Tensor::from_fn(&[slices, d, d], |i| {
            if active.contains(&i[0]) && i[1] == i[2] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Per-frame triple loop for the spatial convolution.
    fn spatial_oracle(x: &Tensor, s: &Tensor, u: &Tensor) -> Tensor {
        let &[t, m, d] = x.shape() else {
            unreachable!()
        };
        let (hops, d_out) = (u.shape()[0], u.shape()[2]);
        let mut out = Tensor::zeros(&[t, m, d_out]);
        let mut power = Tensor::eye(m);
        for hop in 0..hops {
            for ti in 0..t {
                for i in 0..m {
                    for o in 0..d_out {
                        let mut acc = 0.0;
                        for j in 0..m {
                            for c in 0..d {
                                acc += power.at2(i, j) * x.at3(ti, j, c) * u.at3(hop, c, o);
                            }
                        }
                        out.set3(ti, i, o, out.at3(ti, i, o) + acc);
                    }
                }
            }
            power = power.matmul(s).unwrap();
        }
        out
    }

    fn run_spatial(x: &Tensor, s: &Tensor, u: &Tensor, hops: usize, relu: bool) -> Tensor {
        let mut tape = Tape::new();
        let (xv, sv, uv) = (
            tape.leaf(x.clone()),
            tape.leaf(s.clone()),
            tape.leaf(u.clone()),
        );
        let y = if relu {
            ss_gc(&mut tape, xv, sv, uv, hops).unwrap()
        } else {
            spatial_graph_conv(&mut tape, xv, sv, uv, hops).unwrap()
        };
        tape.value(y).clone()
    }

    fn run_temporal(x: &Tensor, g: &Tensor, v: &Tensor, hops: usize, relu: bool) -> Tensor {
        let mut tape = Tape::new();
        let (xv, gv, vv) = (
            tape.leaf(x.clone()),
            tape.leaf(g.clone()),
            tape.leaf(v.clone()),
        );
        let y = if relu {
            st_gc(&mut tape, xv, gv, vv, hops).unwrap()
        } else {
            temporal_graph_conv(&mut tape, xv, gv, vv, hops).unwrap()
        };
        tape.value(y).clone()
    }

    #[test]
    fn spatial_identity_cases() {
        let mut r = rng(1);
        let x = rand_tensor(&mut r, &[3, 4, 2]);
        let s = rand_tensor(&mut r, &[4, 4]);
        assert!(run_spatial(&x, &s, &filter_eye(1, 2, &[0]), 0, false).max_abs_diff(&x) < 1e-15);
        let twice = run_spatial(&x, &Tensor::eye(4), &filter_eye(2, 2, &[0, 1]), 1, false);
        assert!(twice.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);
    }

    #[test]
    fn spatial_matches_triple_loop() {
        let mut r = rng(2);
        let x = rand_tensor(&mut r, &[3, 4, 2]);
        let s = rand_tensor(&mut r, &[4, 4]);
        let u = rand_tensor(&mut r, &[2, 2, 3]);
        let got = run_spatial(&x, &s, &u, 1, false);
        assert!(got.max_abs_diff(&spatial_oracle(&x, &s, &u)) < 1e-12);
        let relu = run_spatial(&x, &s, &u, 1, true);
        let expect = spatial_oracle(&x, &s, &u).map(|v| v.max(0.0));
        assert!(relu.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn ss_gc_nonnegative_and_zero_preserving() {
        let mut r = rng(3);
        let x = rand_tensor(&mut r, &[3, 4, 2]);
        let s = rand_tensor(&mut r, &[4, 4]);
        let u = rand_tensor(&mut r, &[2, 2, 3]);
        assert!(run_spatial(&x, &s, &u, 1, true)
            .data()
            .iter()
            .all(|&v| v >= 0.0));
        let zero = Tensor::zeros(&[3, 4, 2]);
        assert_eq!(run_spatial(&zero, &s, &u, 1, true).max_abs(), 0.0);
    }

    #[test]
    fn hop_bound_is_enforced() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2]));
        let s = tape.leaf(Tensor::eye(3));
        let u = tape.leaf(Tensor::zeros(&[3, 2, 2]));
        assert!(spatial_graph_conv(&mut tape, x, s, u, 1).is_err());
        let t = tape.leaf(Tensor::eye(2));
        assert!(temporal_graph_conv(&mut tape, x, t, u, 2).is_err());
    }

    #[test]
    fn temporal_identity_and_shift() {
        let mut r = rng(4);
        let x = rand_tensor(&mut r, &[5, 3, 2]);
        let g = init_temporal_cyclic(5).unwrap().adjacency;
        assert!(run_temporal(&x, &g, &filter_eye(1, 2, &[0]), 0, false).max_abs_diff(&x) < 1e-15);
        // slices are ordered ℓ = -1, 0, 1
        assert!(run_temporal(&x, &g, &filter_eye(3, 2, &[1]), 1, false).max_abs_diff(&x) < 1e-15);
        let shifted = run_temporal(&x, &g, &filter_eye(3, 2, &[2]), 1, false);
        for i in 0..5 {
            let src = (i + 4) % 5;
            for s in 0..3 {
                for c in 0..2 {
                    assert_eq!(shifted.at3(i, s, c), x.at3(src, s, c));
                }
            }
        }
        let back = run_temporal(&x, &g, &filter_eye(3, 2, &[0]), 1, false);
        for i in 0..5 {
            assert_eq!(back.at3(i, 0, 0), x.at3((i + 1) % 5, 0, 0));
        }
    }

    #[test]
    fn st_gc_matches_relu_of_oracle() {
        let mut r = rng(5);
        let x = rand_tensor(&mut r, &[4, 3, 2]);
        let g = rand_tensor(&mut r, &[4, 4]);
        let v = rand_tensor(&mut r, &[5, 2, 3]);
        // oracle: explicit powers, negative via transpose
        let mut expect = Tensor::zeros(&[4, 3, 3]);
        for (slice, hop) in (-2i32..=2).enumerate() {
            let p = crate::graphs::graph_power_value(&g, hop).unwrap();
            for ti in 0..4 {
                for s in 0..3 {
                    for o in 0..3 {
                        let mut acc = 0.0;
                        for tj in 0..4 {
                            for c in 0..2 {
                                acc += p.at2(ti, tj) * x.at3(tj, s, c) * v.at3(slice, c, o);
                            }
                        }
                        expect.set3(ti, s, o, expect.at3(ti, s, o) + acc);
                    }
                }
            }
        }
        assert!(run_temporal(&x, &g, &v, 2, false).max_abs_diff(&expect) < 1e-12);
        let relu = run_temporal(&x, &g, &v, 2, true);
        assert!(relu.max_abs_diff(&expect.map(|a| a.max(0.0))) < 1e-12);
        assert!(relu.data().iter().all(|&a| a >= 0.0));
        let zero = Tensor::zeros(&[4, 3, 2]);
        assert_eq!(run_temporal(&zero, &g, &v, 2, true).max_abs(), 0.0);
    }

    #[test]
    fn decomposition_check_cases() {
        let mut r = rng(6);
        let x = rand_tensor(&mut r, &[5, 4, 3]);
        let s = rand_tensor(&mut r, &[4, 4]);
        let t = rand_tensor(&mut r, &[5, 5]);
        let report = decomposition_equivalence_check(&x, &s, &t).unwrap();
        assert!(report.passed(), "{report:?}");

        // zero spatial graph: pure temporal shift
        let zs = Tensor::zeros(&[4, 4]);
        let flat = cartesian_product(&zs, &t).unwrap();
        let expect = run_temporal(&x, &t, &filter_eye(3, 3, &[2]), 1, false);
        let got = flat.matmul(&x.clone().reshape(&[20, 3]).unwrap()).unwrap();
        assert!(got.reshape(&[5, 4, 3]).unwrap().max_abs_diff(&expect) < 1e-12);

        // zero temporal graph: pure spatial shift
        let zt = Tensor::zeros(&[5, 5]);
        let flat = cartesian_product(&s, &zt).unwrap();
        let expect = run_spatial(&x, &s, &filter_eye(2, 3, &[1]), 1, false);
        let got = flat.matmul(&x.clone().reshape(&[20, 3]).unwrap()).unwrap();
        assert!(got.reshape(&[5, 4, 3]).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn product_graph_degrees_add() {
        let s = init_spatial(&SkeletonSpec::chain(4, 3).unwrap())
            .unwrap()
            .adjacency;
        let t = init_temporal_cyclic(3).unwrap().adjacency;
        let a = cartesian_product(&s, &t).unwrap();
        for ti in 0..3 {
            for mi in 0..4 {
                let row = ti * 4 + mi;
                let nnz = (0..12).filter(|&c| a.at2(row, c) != 0.0).count();
                let ds = (0..4).filter(|&j| s.at2(mi, j) != 0.0).count();
                let dt = (0..3).filter(|&j| t.at2(ti, j) != 0.0).count();
                assert_eq!(nnz, ds + dt);
            }
        }
    }
}
