//! Motion sequences: CSV I/O, synthetic generation and windowing.
//!
//! CSV layout: a header line `M,C,unit`, then one line per frame holding `M·C`
//! values in joint-major order (`j0c0,j0c1,…,j1c0,…`).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    /// Free-form unit tag, e.g. `expmap` or `synthetic`.
    pub unit: String,
    /// `T×M×C` values.
    pub frames: Tensor,
}

impl MotionSequence {
    pub fn new(unit: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 || frames.shape().contains(&0) {
            return Err(Error::dim(
                "motion sequence",
                format!("{:?}", frames.shape()),
            ));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite {
                op: "motion sequence",
            });
        }
        Ok(MotionSequence {
            unit: unit.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<MotionSequence> {
        if start >= end || end > self.len() {
            return Err(Error::dim(
                "slice",
                format!("{start}..{end} of {} frames", self.len()),
            ));
        }
        let per = self.joints() * self.channels();
        let data = self.frames.data()[start * per..end * per].to_vec();
        let frames = Tensor::new(vec![end - start, self.joints(), self.channels()], data)?;
        Ok(MotionSequence {
            unit: self.unit.clone(),
            frames,
        })
    }

    pub fn parse_csv(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let (m, c, unit) = match fields.as_slice() {
            [m, c, unit] => {
                let m: usize = m
                    .parse()
                    .map_err(|_| err(1, format!("bad joint count `{m}`")))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| err(1, format!("bad channel count `{c}`")))?;
                if m == 0 || c == 0 {
                    return Err(err(1, "joint and channel counts must be positive".into()));
                }
                (m, c, unit.to_string())
            }
            _ => {
                return Err(err(
                    1,
                    format!("expected header `M,C,unit`, got `{header}`"),
                ))
            }
        };
        let mut data = Vec::new();
        let mut frames = 0;
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m * c {
                return Err(err(
                    n,
                    format!("expected {} values, found {}", m * c, cells.len()),
                ));
            }
            for cell in cells {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("non-numeric cell `{}`", cell.trim())))?;
                if !v.is_finite() {
                    return Err(err(n, format!("non-finite cell `{}`", cell.trim())));
                }
                data.push(v);
            }
            frames += 1;
        }
        if frames == 0 {
            return Err(err(2, "no frames".into()));
        }
        MotionSequence::new(unit, Tensor::new(vec![frames, m, c], data)?)
    }

    /// Lossless CSV: every value is written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}\n", self.joints(), self.channels(), self.unit);
        for row in self.frames.data().chunks(self.joints() * self.channels()) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Context {
            context: path.display().to_string(),
            inner: Box::new(e.into()),
        })?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Synthetic motion: each channel of joint `j` follows
/// `a·sin(ω t + φ) + b`, with `a ∈ [0.1, 0.5)`, `φ ∈ [0, 2π)` and offset
/// `b ∈ [-1, 1)` drawn per channel. Joints `2k` and `2k+1` share one
/// `ω ∈ [0.15, 0.45)` (radians per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Synth {
    pub joints: usize,
    pub frames: usize,
    pub channels: usize,
    pub seed: u64,
    /// Multiplies every amplitude; 0 gives a constant sequence.
    pub amplitude_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Per joint pair.
    pub omega: Vec<f64>,
    /// `[joint][channel]` amplitude, phase and offset.
    pub amplitude: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
    pub offset: Vec<Vec<f64>>,
}

impl Synth {
    pub fn new(joints: usize, frames: usize, seed: u64) -> Self {
        Synth {
            joints,
            frames,
            channels: 3,
            seed,
            amplitude_scale: 1.0,
        }
    }

    pub fn params(&self) -> SynthParams {
        let mut rng = seeded(self.seed);
        let pairs = self.joints.div_ceil(2);
        let omega = (0..pairs).map(|_| rng.gen_range(0.15..0.45)).collect();
        let mut draw = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..self.joints)
                .map(|_| (0..self.channels).map(|_| rng.gen_range(lo..hi)).collect())
                .collect()
        };
        let amplitude = draw(0.1, 0.5);
        let phase = draw(0.0, 2.0 * PI);
        let offset = draw(-1.0, 1.0);
        SynthParams {
            omega,
            amplitude,
            phase,
            offset,
        }
    }

    pub fn generate(&self) -> Result<MotionSequence> {
        if self.joints < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 joints".into(),
            ));
        }
        let p = self.params();
        let frames = Tensor::from_fn(&[self.frames, self.joints, self.channels], |i| {
            let (t, j, c) = (i[0] as f64, i[1], i[2]);
            let a = self.amplitude_scale * p.amplitude[j][c];
            a * (p.omega[j / 2] * t + p.phase[j][c]).sin() + p.offset[j][c]
        });
        MotionSequence::new("synthetic", frames)
    }
}

pub fn synth_generate(joints: usize, frames: usize, seed: u64) -> Result<MotionSequence> {
    Synth::new(joints, frames, seed).generate()
}

/// An observed/future pair cut from one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub observed: Tensor,
    pub future: Tensor,
}

pub fn window_count(len: usize, obs: usize, pred: usize, stride: usize) -> usize {
    if len < obs + pred || stride == 0 {
        0
    } else {
        (len - obs - pred) / stride + 1
    }
}

/// Consecutive windows starting every `stride` frames.
pub fn windows(
    seq: &MotionSequence,
    obs: usize,
    pred: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if obs == 0 || pred == 0 || stride == 0 {
        return Err(Error::Config(
            "window lengths and stride must be positive".into(),
        ));
    }
    (0..window_count(seq.len(), obs, pred, stride))
        .map(|k| {
            let s = k * stride;
            Ok(Window {
                observed: seq.slice(s, s + obs)?.frames,
                future: seq.slice(s + obs, s + obs + pred)?.frames,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

impl DatasetSplit {
    /// Cuts every sequence into contiguous train/val/test frame ranges (by the
    /// given fractions, test taking the rest) and windows each range, so no
    /// window spans two ranges or two sequences.
    pub fn from_sequences(
        seqs: &[MotionSequence],
        obs: usize,
        pred: usize,
        stride: usize,
        train_frac: f64,
        val_frac: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0
        {
            return Err(Error::Config(format!(
                "bad split fractions {train_frac} / {val_frac}"
            )));
        }
        let mut split = DatasetSplit::default();
        for seq in seqs {
            let n = seq.len();
            let a = (n as f64 * train_frac).round() as usize;
            let b = (a + (n as f64 * val_frac).round() as usize).min(n);
            for (range, out) in [
                (0..a, &mut split.train),
                (a..b, &mut split.val),
                (b..n, &mut split.test),
            ] {
                if range.len() >= obs + pred {
                    out.extend(windows(
                        &seq.slice(range.start, range.end)?,
                        obs,
                        pred,
                        stride,
                    )?);
                }
            }
        }
        Ok(split)
    }
}
