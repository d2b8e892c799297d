//! The full encoder-decoder predictor.

use crate::config::ModelConfig;
use crate::decoder::GaGru;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::init::seeded;
use crate::losses::{
    entropy_loss, gram_matrix_loss, l1_prediction_loss, total_loss, LossTerms, LossWeights,
};
use crate::mstgcu::UnitTrace;
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MstGnn {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: GaGru,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `ΔT×M×C` predicted poses.
    pub prediction: Var,
    /// One trace per MST-GCU, in encoder order.
    pub traces: Vec<UnitTrace>,
    last_observed: Var,
}

impl Forward {
    /// Every `Ψ_{0→r}` produced during the pass.
    pub fn pool_operators(&self) -> Vec<Var> {
        self.traces
            .iter()
            .flat_map(|t| t.pool.iter().copied())
            .collect()
    }

    pub fn unpool_operators(&self) -> Vec<Var> {
        self.traces
            .iter()
            .flat_map(|t| t.unpool.iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub total: Var,
}

impl MstGnn {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&mut store, &mut rng, &config)?;
        let decoder = GaGru::build(&mut store, &mut rng, &config)?;
        store.set_frozen_kind(ParamKind::Graph, !config.trainable_graphs);
        Ok(MstGnn {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the architecture for `config` and fills it with named values.
    /// Every parameter must be present with its exact shape.
    pub fn from_values(config: ModelConfig, values: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if values.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            model
                .store
                .set(id, value.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &GaGru {
        &self.decoder
    }

    fn check_observed(&self, observed: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.obs_len, c.joints, c.channels];
        if observed.shape() != want {
            return Err(Error::dim(
                "model input",
                format!("observed {:?}, expected {want:?}", observed.shape()),
            ));
        }
        Ok(())
    }

    /// Encodes `observed` (`T×M×C`) and rolls out `ΔT` frames. `teacher`
    /// (`ΔT×M×C`) enables teacher forcing.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        observed: &Tensor,
        teacher: Option<&Tensor>,
    ) -> Result<Forward> {
        self.check_observed(observed)?;
        let x = tape.constant(observed.clone());
        let encoded = self.encoder.forward(tape, p, x)?;
        let t = self.config.obs_len;
        let order = self.config.diff_order;
        let history = (t - order - 1..t)
            .map(|i| tape.select0(x, i))
            .collect::<Result<Vec<_>>>()?;
        let teacher = teacher.map(|f| tape.constant(f.clone()));
        let prediction = self.decoder.rollout(
            tape,
            p,
            &history,
            encoded.state,
            self.config.pred_len,
            teacher,
        )?;
        Ok(Forward {
            prediction,
            traces: encoded.traces,
            last_observed: *history.last().unwrap(),
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        future: &Tensor,
        weights: &LossWeights,
    ) -> Result<LossOutput> {
        let truth = tape.constant(future.clone());
        let pred = l1_prediction_loss(tape, fwd.prediction, truth)?;
        let gram = gram_matrix_loss(tape, fwd.prediction, truth, fwd.last_observed)?;
        let ent = entropy_loss(tape, &fwd.pool_operators())?;
        let terms = LossTerms { pred, gram, ent };
        let total = total_loss(tape, &terms, weights)?;
        Ok(LossOutput { terms, total })
    }

    pub fn predict(&self, observed: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, observed, None)?;
        Ok(tape.value(fwd.prediction).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::testutil::{rand_tensor, rng};

    fn toy() -> ModelConfig {
        ModelConfig {
            obs_len: 4,
            pred_len: 3,
            layer_dims: vec![4, 6],
            embed_dim: 2,
            temporal_hops: 1,
            spatial_scales: 2,
            temporal_scales: 2,
            ..ModelConfig::desk(5)
        }
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let a = MstGnn::new(toy(), 11).unwrap();
        let b = MstGnn::new(toy(), 11).unwrap();
        let x = rand_tensor(&mut rng(1), &[4, 5, 3]);
        let pa = a.predict(&x).unwrap();
        assert_eq!(pa.shape(), [3, 5, 3]);
        assert_eq!(pa, b.predict(&x).unwrap());
        // The zero-initialized readout makes an untrained model hold the last pose.
        for t in 0..3 {
            assert_eq!(pa.select0(t).unwrap(), x.select0(3).unwrap());
        }
        let c = MstGnn::new(toy(), 12).unwrap();
        assert_ne!(a.store().values(), c.store().values());
    }

    #[test]
    fn fixed_graphs_are_frozen() {
        let cfg = ModelConfig {
            trainable_graphs: false,
            ..toy()
        };
        let m = MstGnn::new(cfg, 0).unwrap();
        let graphs: Vec<_> = m
            .store()
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::Graph)
            .collect();
        assert!(!graphs.is_empty());
        assert!(graphs.iter().all(|p| p.frozen));
    }

    #[test]
    fn loss_terms_are_nonnegative() {
        let m = MstGnn::new(toy(), 3).unwrap();
        let mut r = rng(2);
        let (x, y) = (
            rand_tensor(&mut r, &[4, 5, 3]),
            rand_tensor(&mut r, &[3, 5, 3]),
        );
        let mut tape = Tape::new();
        let p = m.store().bind(&mut tape);
        let fwd = m.forward(&mut tape, &p, &x, None).unwrap();
        let out = m
            .loss(&mut tape, &fwd, &y, &LossWeights::default())
            .unwrap();
        for v in [out.terms.pred, out.terms.gram, out.terms.ent, out.total] {
            assert!(tape.value(v).item() >= 0.0);
        }
        assert_eq!(fwd.pool_operators().len(), 2);
    }

    #[test]
    fn wrong_observed_shape_rejected() {
        let m = MstGnn::new(toy(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[5, 5, 3])).is_err());
    }

    #[test]
    fn from_values_round_trip() {
        let m = MstGnn::new(toy(), 5).unwrap();
        let values: Vec<_> = m
            .store()
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let back = MstGnn::from_values(toy(), &values).unwrap();
        let x = rand_tensor(&mut rng(3), &[4, 5, 3]);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(MstGnn::from_values(toy(), &values[1..]).is_err());
    }
}
