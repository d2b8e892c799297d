//! Spatial and temporal graphs, graph powers and the product graph.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Joint count, channel count and the undirected bone list of a skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonSpec {
    joints: usize,
    channels: usize,
    edges: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn new(joints: usize, channels: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        if channels == 0 {
            return Err(Error::Config("skeleton has no channels".into()));
        }
        for &(i, j) in &edges {
            if i >= joints || j >= joints {
                return Err(Error::Config(format!(
                    "edge {i}-{j} references a joint outside 0..{joints}"
                )));
            }
            if i == j {
                return Err(Error::Config(format!("self-edge {i}-{j}")));
            }
        }
        Ok(SkeletonSpec {
            joints,
            channels,
            edges,
        })
    }

    /// Joints linked in index order: 0-1, 1-2, ...
    pub fn chain(joints: usize, channels: usize) -> Result<Self> {
        let edges = (1..joints).map(|j| (j - 1, j)).collect();
        Self::new(joints, channels, edges)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Parses `M C` followed by one `i j` pair per line. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| err(1, "missing `M C` header".into()))?;
        let nums =
            parse_pair(header).ok_or_else(|| err(hline, format!("bad header `{header}`")))?;
        let mut edges = Vec::new();
        for (ln, l) in lines {
            let pair = parse_pair(l).ok_or_else(|| err(ln, format!("bad edge `{l}`")))?;
            edges.push(pair);
        }
        Self::new(nums.0, nums.1, edges).map_err(|e| err(hline, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.joints, self.channels);
        for (i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let mut it = s.split_whitespace();
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    it.next().is_none().then_some((a, b))
}

/// Trainable joint adjacency at one spatial scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub adjacency: Tensor,
    pub scale_index: usize,
}

/// Symmetric 0/1 bone adjacency with self-loops.
pub fn init_spatial(skeleton: &SkeletonSpec) -> Result<SpatialGraph> {
    let m = skeleton.joints();
    let mut a = Tensor::eye(m);
    for &(i, j) in skeleton.edges() {
        a.set2(i, j, 1.0);
        a.set2(j, i, 1.0);
    }
    Ok(SpatialGraph {
        adjacency: a,
        scale_index: 0,
    })
}

/// Frame adjacency whose structural zeros stay frozen during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub adjacency: Tensor,
    /// `true` where the entry is trainable.
    pub trainable: Vec<bool>,
}

impl TemporalGraph {
    pub fn frames(&self) -> usize {
        self.adjacency.rows()
    }

    /// Zeros every frozen entry of `values` (same shape as the adjacency).
    pub fn apply_mask(&self, values: &mut Tensor) {
        apply_mask(&self.trainable, values);
    }
}

pub(crate) fn apply_mask(trainable: &[bool], values: &mut Tensor) {
    for (v, &keep) in values.data_mut().iter_mut().zip(trainable) {
        if !keep {
            *v = 0.0;
        }
    }
}

/// One-step cyclic shift: entry (i, j) is 1 iff `i == (j + 1) mod T`.
pub fn init_temporal_cyclic(frames: usize) -> Result<TemporalGraph> {
    if frames < 2 {
        return Err(Error::Config(format!(
            "temporal graph needs at least 2 frames, got {frames}"
        )));
    }
    let mut a = Tensor::zeros(&[frames, frames]);
    let mut trainable = vec![false; frames * frames];
    for j in 0..frames {
        let i = (j + 1) % frames;
        a.set2(i, j, 1.0);
        trainable[i * frames + j] = true;
    }
    Ok(TemporalGraph {
        adjacency: a,
        trainable,
    })
}

fn check_square(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim(op, format!("not square: {shape:?}")));
    }
    Ok(shape[0])
}

/// `g^ℓ` on the tape. Negative powers use the transpose: `g^{-ℓ} = (gᵀ)^ℓ`.
pub fn graph_power(tape: &mut Tape, g: Var, power: i32) -> Result<Var> {
    let n = check_square("graph_power", tape.shape(g))?;
    if power == 0 {
        return Ok(tape.constant(Tensor::eye(n)));
    }
    let base = if power < 0 { tape.transpose(g)? } else { g };
    let mut acc = base;
    for _ in 1..power.unsigned_abs() {
        acc = tape.matmul(acc, base)?;
    }
    Ok(acc)
}

/// Plain-value version of [`graph_power`].
pub fn graph_power_value(g: &Tensor, power: i32) -> Result<Tensor> {
    let n = check_square("graph_power", g.shape())?;
    let base = if power < 0 { g.transpose()? } else { g.clone() };
    let mut acc = Tensor::eye(n);
    for _ in 0..power.unsigned_abs() {
        acc = acc.matmul(&base)?;
    }
    Ok(acc)
}

/// Adjacency of the graph Cartesian product (Kronecker sum) over vertices
/// ordered `t * M + m`, matching a row-major flattening of a `T×M×d` tensor:
/// `A[(t,m),(t',m')] = S[m,m'] δ(t,t') + T[t,t'] δ(m,m')`.
pub fn cartesian_product(spatial: &Tensor, temporal: &Tensor) -> Result<Tensor> {
    let m = check_square("cartesian_product", spatial.shape())?;
    let t = check_square("cartesian_product", temporal.shape())?;
    let n = m * t;
    let mut a = Tensor::zeros(&[n, n]);
    for ti in 0..t {
        for mi in 0..m {
            let row = ti * m + mi;
            for mj in 0..m {
                let v = a.at2(row, ti * m + mj) + spatial.at2(mi, mj);
                a.set2(row, ti * m + mj, v);
            }
            for tj in 0..t {
                let v = a.at2(row, tj * m + mi) + temporal.at2(ti, tj);
                a.set2(row, tj * m + mi, v);
            }
        }
    }
    Ok(a)
}
