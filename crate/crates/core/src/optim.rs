use echodepth_tensor::Tensor;

use crate::error::{Error, Result};
use crate::kv::{KvList, KvMap};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDecay {
    /// `p ← p − lr·wd·p` before the moment update.
    Decoupled,
    /// `wd·p` added to the gradient.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decay_mode: WeightDecay::Decoupled,
        }
    }
}

impl AdamConfig {
    pub fn to_kv(&self) -> KvList {
        let mut kv = KvList::new();
        kv.push("adam.lr", self.lr);
        kv.push("adam.beta1", self.beta1);
        kv.push("adam.beta2", self.beta2);
        kv.push("adam.eps", self.eps);
        kv.push("adam.weight_decay", self.weight_decay);
        kv.push(
            "adam.decay_mode",
            match self.decay_mode {
                WeightDecay::Decoupled => "decoupled",
                WeightDecay::L2 => "l2",
            },
        );
        kv
    }

    /// Missing keys keep their defaults.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let d = AdamConfig::default();
        let mode: String = map.get_or("adam.decay_mode", "decoupled".to_string())?;
        Ok(AdamConfig {
            lr: map.get_or("adam.lr", d.lr)?,
            beta1: map.get_or("adam.beta1", d.beta1)?,
            beta2: map.get_or("adam.beta2", d.beta2)?,
            eps: map.get_or("adam.eps", d.eps)?,
            weight_decay: map.get_or("adam.weight_decay", d.weight_decay)?,
            decay_mode: match mode.as_str() {
                "decoupled" => WeightDecay::Decoupled,
                "l2" => WeightDecay::L2,
                other => return Err(Error::Config(format!("unknown decay mode {other:?}"))),
            },
        })
    }
}

/// Adam with bias correction. Moments are kept per stored weight.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    /// Applies one update. Weights without an entry in `grads` are treated as
    /// having zero gradient. A non-finite gradient aborts before any change.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.get(*id).name.clone(),
                });
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape {:?} for {} of shape {:?}",
                    g.shape(),
                    store.get(*id).name,
                    store.value(*id).shape()
                )));
            }
        }
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            if p.kind != ParamKind::Weight || p.frozen {
                continue;
            }
            let n = p.value.numel();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; n]);
            let zeros;
            let grad = match by_id[i] {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; n];
                    &zeros
                }
            };
            let decoupled = c.decay_mode == WeightDecay::Decoupled;
            let w = store.value_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                let mut g = g;
                if decoupled {
                    *w -= c.lr * c.weight_decay * *w;
                } else {
                    g += c.weight_decay * *w;
                }
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, Builder};

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let id = Builder::new(&mut store, &mut rng).constant("w", Tensor::scalar(v));
        (store, id)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut store, id) = scalar_store(1.5);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[(id, Tensor::scalar(0.0))]).unwrap();
        opt.step(&mut store, &[]).unwrap();
        assert_eq!(store.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.25] {
            let (mut store, id) = scalar_store(0.0);
            let cfg = AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut opt = Adam::new(cfg.clone(), &store);
            opt.step(&mut store, &[(id, Tensor::scalar(g))]).unwrap();
            let delta = store.value(id).item();
            assert!((delta + cfg.lr * f64::signum(g)).abs() < 1e-6 * cfg.lr.max(1.0));
        }
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let (mut store, id) = scalar_store(2.0);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            lr: 0.01,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..5 {
            opt.step(&mut store, &[]).unwrap();
        }
        let expected = 2.0 * (1.0f64 - 0.01 * 0.1).powi(5);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let err = opt.step(&mut store, &[(id, Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = AdamConfig {
            decay_mode: WeightDecay::L2,
            lr: 3e-4,
            ..Default::default()
        };
        assert_eq!(AdamConfig::from_kv(&cfg.to_kv().into_map()).unwrap(), cfg);
    }
}
