//! Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar settings of an [`Adam`] optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional per-element gradient clip.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias-corrected moments, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// One update of every parameter in `params` from `grads`. Key sets must
    /// match; a non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if params.len() != grads.len() || params.keys().zip(grads.keys()).any(|(a, b)| a != b) {
            return Err(Error::Data("gradient keys do not match parameter keys".into()));
        }
        for (name, g) in grads {
            if g.dims() != params[name].dims() {
                return Err(Error::ShapeMismatch {
                    op: "adam step",
                    left: params[name].dims().to_vec(),
                    right: g.dims().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at element {i}")));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let corr1 = T::lit(1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let corr2 = T::lit(1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let clip = c.clip.map(T::lit);
        for (name, param) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims().to_vec()).expect("gradient extents are valid"));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims().to_vec()).expect("gradient extents are valid"));
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((theta, &grad), (mi, vi)) in param.data_mut().iter_mut().zip(g.data()).zip(moments) {
                let grad = match clip {
                    Some(c) => grad.max(-c).min(c),
                    None => grad,
                };
                *mi = b1 * *mi + one_b1 * grad;
                *vi = b2 * *vi + one_b2 * grad * grad;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Restores moments and step counter, checking moment keys against the
    /// parameter registry.
    pub fn restore(
        config: AdamConfig,
        t: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
        params: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let keys_ok = |reg: &BTreeMap<String, Tensor<T>>| {
            reg.iter().all(|(k, t)| params.get(k).is_some_and(|p| p.dims() == t.dims()))
        };
        if !keys_ok(&m) || !keys_ok(&v) || m.len() != v.len() || (t > 0 && m.len() != params.len()) {
            return Err(Error::Format("optimizer moments do not match the parameter registry".into()));
        }
        Ok(Adam { config, t, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value).unwrap())])
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap())]);
        let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], vec![3.0, -0.02, 1e3]).unwrap())]);
        adam.step(&mut p, &g).unwrap();
        for (&theta, &grad) in p["w"].data().iter().zip(g["w"].data()) {
            let expected = -1e-4 * grad / (grad.abs() + 1e-8);
            assert!((theta - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = single(0.7);
        for _ in 0..50 {
            adam.step(&mut p, &single(0.0)).unwrap();
        }
        assert_eq!(p["w"].data(), &[0.7]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut p = single(1.0);
        for _ in 0..5000 {
            let theta = p["w"].data()[0];
            let before = theta;
            adam.step(&mut p, &single(2.0 * theta)).unwrap();
            assert!((p["w"].data()[0] - before).abs() <= 10.0 * 1e-2);
        }
        assert!(p["w"].data()[0].abs() < 1e-3, "{}", p["w"].data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = single(1.0);
        let nan = BTreeMap::from([("w".to_string(), Tensor::from_parts_unchecked(crate::tensor::Shape::new(vec![]).unwrap(), vec![f64::NAN]))]);
        let err = adam.step(&mut p, &nan).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(adam.t, 0);
        assert_eq!(p["w"].data(), &[1.0]);
        let mut other = BTreeMap::from([("u".to_string(), Tensor::scalar(1.0).unwrap())]);
        assert!(adam.step(&mut other, &single(1.0)).is_err());
    }

    #[test]
    fn clipping_bounds_gradient() {
        let mut clipped = Adam::new(AdamConfig {
            clip: Some(0.5),
            ..AdamConfig::default()
        })
        .unwrap();
        let mut p = single(0.0);
        clipped.step(&mut p, &single(100.0)).unwrap();
        assert!((clipped.m["w"].data()[0] - 0.05).abs() < 1e-15);
        assert!(Adam::<f64>::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
    }
}
