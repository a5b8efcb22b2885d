use serde::{Deserialize, Serialize};

use super::array::ParamStore;
use super::error::{shape_err, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Hyperparameters. β and ε defaults are the conventional Adam values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; only applied by AdamW.
    pub weight_decay: f64,
    pub grad_clip_threshold: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip_threshold: None,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }

    pub fn with_clip(mut self, threshold: f64) -> Self {
        self.grad_clip_threshold = Some(threshold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::Invalid(format!("optimizer: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0,1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip_threshold, Some(t) if t <= 0.0) {
            return bad("clip threshold must be positive");
        }
        Ok(())
    }
}

/// Adam/AdamW state: step counter plus first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![0.0f32; t.numel()])
                .collect()
        };
        Ok(OptimizerState {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        })
    }

    /// One update over every non-frozen parameter.
    pub fn step(&mut self, params: &mut ParamStore<f32>) -> Result<StepReport> {
        if self.first_moment.len() != params.len() {
            return Err(shape_err(
                "optimizer_step",
                format!(
                    "{} moment buffers for {} parameters",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        let ids: Vec<_> = params
            .iter()
            .filter(|(id, _, _)| !params.is_frozen(*id))
            .map(|(id, _, _)| id)
            .collect();
        for &id in &ids {
            let t = params.get(id);
            let g = t
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(params.name(id).to_string()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGrad(params.name(id).to_string()));
            }
            if self.first_moment[id.0].len() != t.numel() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("moment buffer does not match `{}`", params.name(id)),
                ));
            }
        }

        let grad_norm = {
            let mut grads: Vec<&mut [f32]> = Vec::with_capacity(ids.len());
            for (id, t) in params.tensors_mut().enumerate() {
                if ids.iter().any(|p| p.0 == id) {
                    grads.push(t.grad_mut().expect("checked above"));
                }
            }
            match self.config.grad_clip_threshold {
                Some(th) => clip_global_grad_norm(grads, th)?,
                None => global_norm(grads.iter().map(|g| &**g)),
            }
        };

        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = match c.kind {
            OptimizerKind::AdamW => (c.lr * c.weight_decay) as f32,
            OptimizerKind::Adam => 0.0,
        };
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (ob1, ob2) = ((1.0 - c.beta1) as f32, (1.0 - c.beta2) as f32);
        for id in ids {
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let (data, grad) = params.get_mut(id).data_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..data.len() {
                let gi = grad[i];
                if decay != 0.0 {
                    data[i] -= decay * data[i];
                }
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                data[i] -= (c.lr * mh / (vh.sqrt() + c.eps)) as f32;
            }
        }
        Ok(StepReport {
            step: self.step_count,
            grad_norm,
        })
    }
}

fn global_norm<'a>(grads: impl Iterator<Item = &'a [f32]>) -> f64 {
    grads
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_global_grad_norm(mut grads: Vec<&mut [f32]>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(TensorError::Invalid(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let pre = global_norm(grads.iter().map(|g| &**g));
    let mut norm = pre;
    // f32 rounding can leave the scaled norm a hair above the threshold.
    while norm > threshold {
        let factor = (threshold / norm) * if norm == pre { 1.0 } else { 1.0 - 1e-7 };
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = (*v as f64 * factor) as f32);
        }
        norm = global_norm(grads.iter().map(|g| &**g));
    }
    Ok(pre)
}

/// `target <- m * target + (1 - m) * source`, elementwise.
pub fn ema_update(
    target: &mut ParamStore<f32>,
    source: &ParamStore<f32>,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(TensorError::Invalid(format!(
            "EMA momentum must be in [0,1], got {momentum}"
        )));
    }
    target.check_compatible(source)?;
    if momentum == 1.0 {
        return Ok(());
    }
    let m = momentum as f32;
    for (t, (_, _, s)) in target.tensors_mut().zip(source.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32, grad: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s
            .insert("p", Tensor::new(vec![1], vec![value]).unwrap())
            .unwrap();
        s.get_mut(id).accumulate_grad(&[grad]).unwrap();
        s
    }

    #[test]
    fn single_adam_step_closed_form() {
        let mut p = single(0.0, 1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.0005), &p).unwrap();
        opt.step(&mut p).unwrap();
        let expect = -0.0005 / (1.0 + 1e-8);
        assert!((p.by_name("p").unwrap().data()[0] as f64 - expect).abs() < 1e-9);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn adamw_without_decay_matches_adam() {
        let mut a = single(0.3, -0.7);
        let mut b = single(0.3, -0.7);
        let mut oa = OptimizerState::new(OptimizerConfig::adam(0.01), &a).unwrap();
        let mut ob = OptimizerState::new(OptimizerConfig::adamw(0.01, 0.0), &b).unwrap();
        for _ in 0..3 {
            oa.step(&mut a).unwrap();
            ob.step(&mut b).unwrap();
        }
        assert_eq!(
            a.by_name("p").unwrap().data(),
            b.by_name("p").unwrap().data()
        );
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = single(2.0, 0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adamw(0.0005, 0.0001), &p).unwrap();
        opt.step(&mut p).unwrap();
        let expect = 2.0 - 0.0005 * 0.0001 * 2.0;
        assert!((p.by_name("p").unwrap().data()[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = single(1.25, 0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), &p).unwrap();
        opt.step(&mut p).unwrap();
        assert_eq!(p.by_name("p").unwrap().data()[0], 1.25);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::<f32>::zeros(&[2])).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), &s).unwrap();
        assert!(matches!(opt.step(&mut s), Err(TensorError::MissingGrad(n)) if n == "w"));
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut p = single(0.0, f32::NAN);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), &p).unwrap();
        assert!(matches!(opt.step(&mut p), Err(TensorError::NonFiniteGrad(n)) if n == "p"));
    }

    #[test]
    fn clip_examples() {
        let mut g = [3.0f32, 4.0];
        let n = clip_global_grad_norm(vec![&mut g[..]], 0.3).unwrap();
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.18).abs() < 1e-6 && (g[1] - 0.24).abs() < 1e-6);

        let mut g = vec![0.1f32, 0.1];
        clip_global_grad_norm(vec![&mut g[..]], 0.3).unwrap();
        assert_eq!(g, vec![0.1, 0.1]);

        let mut g = vec![3.0f32, 4.0];
        clip_global_grad_norm(vec![&mut g[..]], 5.0).unwrap();
        assert_eq!(g, vec![3.0, 4.0]);

        assert_eq!(clip_global_grad_norm(Vec::new(), 0.3).unwrap(), 0.0);
        assert!(clip_global_grad_norm(Vec::new(), 0.0).is_err());
    }

    #[test]
    fn ema_identities() {
        let src = single(4.0, 0.0);
        let mut t = single(2.0, 0.0);
        ema_update(&mut t, &src, 1.0).unwrap();
        assert_eq!(t.by_name("p").unwrap().data()[0], 2.0);
        ema_update(&mut t, &src, 0.5).unwrap();
        assert_eq!(t.by_name("p").unwrap().data()[0], 3.0);
        ema_update(&mut t, &src, 0.0).unwrap();
        assert_eq!(t.by_name("p").unwrap().data()[0], 4.0);
        assert!(ema_update(&mut t, &src, 1.5).is_err());
        assert!(ema_update(&mut t, &src, -0.1).is_err());
    }
}
