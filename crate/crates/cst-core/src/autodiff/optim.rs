//! Named parameter collections and the AdamW update.

use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Ordered, named set of trainable tensors. Iteration follows insertion
/// order, so checkpoints and optimizer state line up deterministically.
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), AutodiffError> {
        if self.names.iter().any(|n| n == name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    fn position(&self, name: &str) -> Result<usize, AutodiffError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, AutodiffError> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, AutodiffError> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// AdamW hyperparameters. Weight decay is decoupled: it scales the
/// parameter directly instead of entering the moment estimates.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Per-parameter moment estimates, always in 64-bit regardless of the
/// parameter precision, plus the shared step counter.
pub struct OptimizerState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds state from saved pieces, e.g. when resuming a checkpoint.
    pub fn from_parts(step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        Self { step, first, second }
    }
}

/// One AdamW update over every gradient-carrying parameter in the set.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut OptimizerState,
    cfg: &AdamW,
) -> Result<(), AutodiffError> {
    if state.first.len() != params.len() {
        return Err(AutodiffError::Shape(format!(
            "optimizer tracks {} parameters, set has {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        if !tensor.requires_grad {
            continue;
        }
        let grad = tensor
            .grad
            .as_ref()
            .ok_or_else(|| AutodiffError::MissingGrad(name.to_string()))?;
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        if m.len() != tensor.values.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer state for {name} has length {}, parameter has {}",
                m.len(),
                tensor.values.len()
            )));
        }
        for (j, p) in tensor.values.iter_mut().enumerate() {
            let g = grad[j].to_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            let pv = p.to_f64();
            let update = cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pv);
            *p = T::from_f64(pv - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64, grad: f64) -> ParamSet<f64> {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.requires_grad = true;
        t.grad = Some(vec![grad]);
        let mut p = ParamSet::new();
        p.insert("w", t).unwrap();
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut params = single_param(1.0, 1.0);
        let mut state = OptimizerState::new(&params);
        let cfg = AdamW::default();
        adamw_step(&mut params, &mut state, &cfg).unwrap();
        // m = 0.1, v = 0.001; bias corrections restore both to 1, so the
        // step is lr * (1 / (1 + eps) + wd * 1).
        let expect = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8) + 1e-2);
        let got = params.get("w").unwrap().values[0];
        assert!((got - expect).abs() <= 1e-15, "{got} vs {expect}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn bias_correction_makes_first_step_scale_free() {
        // With zero decay, the first step is lr * g / (|g| + eps), close to
        // lr in magnitude whether the gradient is huge or tiny.
        let cfg = AdamW { weight_decay: 0.0, ..AdamW::default() };
        for &g in &[1e-6, 1.0, 1e3] {
            let mut params = single_param(0.0, g);
            let mut state = OptimizerState::new(&params);
            adamw_step(&mut params, &mut state, &cfg).unwrap();
            let step = -params.get("w").unwrap().values[0];
            assert!(
                (step - cfg.lr).abs() <= cfg.lr * 1e-2,
                "gradient {g} stepped {step}"
            );
        }
    }

    #[test]
    fn weight_decay_is_decoupled_from_moments() {
        // Zero gradient: the only movement is the multiplicative decay.
        let mut params = single_param(2.0, 0.0);
        let mut state = OptimizerState::new(&params);
        let cfg = AdamW::default();
        adamw_step(&mut params, &mut state, &cfg).unwrap();
        adamw_step(&mut params, &mut state, &cfg).unwrap();
        let expect = 2.0 * (1.0 - cfg.lr * cfg.weight_decay).powi(2);
        let got = params.get("w").unwrap().values[0];
        assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn quadratic_descent_is_monotone_after_warmup() {
        // Minimize (w - 3)^2 elementwise from w = 0.
        let mut t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        t.requires_grad = true;
        let mut params = ParamSet::new();
        params.insert("w", t).unwrap();
        let mut state = OptimizerState::new(&params);
        let cfg = AdamW { lr: 5e-2, weight_decay: 0.0, ..AdamW::default() };

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            params.get("w").unwrap().values.iter().map(|w| (w - 3.0).powi(2)).sum()
        };
        let mut losses = Vec::new();
        for _ in 0..500 {
            let grad: Vec<f64> = params
                .get("w")
                .unwrap()
                .values
                .iter()
                .map(|w| 2.0 * (w - 3.0))
                .collect();
            params.get_mut("w").unwrap().grad = Some(grad);
            adamw_step(&mut params, &mut state, &cfg).unwrap();
            losses.push(loss_of(&params));
        }
        // Far from the optimum the normalized step shrinks the distance
        // every iteration; near it, momentum may ring, so only boundedness
        // and the final value are asserted there.
        for pair in losses[..40].windows(2) {
            assert!(pair[1] < pair[0], "early loss rose: {} -> {}", pair[0], pair[1]);
        }
        let late_worst = losses[400..].iter().cloned().fold(0.0f64, f64::max);
        assert!(late_worst < 1e-2, "late-phase loss {late_worst}");
        assert!(losses.last().unwrap() < &1e-3, "final loss {}", losses.last().unwrap());
    }

    #[test]
    fn f32_parameters_track_f64_reference() {
        // Moments live in 64-bit either way, so a 32-bit parameter should
        // follow the 64-bit trajectory to within float rounding.
        let cfg = AdamW { lr: 1e-2, weight_decay: 0.0, ..AdamW::default() };
        let grads = [0.3, -0.7, 0.1, 0.9, -0.2];

        let mut p64 = single_param(0.5, 0.0);
        let mut s64 = OptimizerState::new(&p64);
        let mut t32 = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        t32.requires_grad = true;
        let mut p32 = ParamSet::new();
        p32.insert("w", t32).unwrap();
        let mut s32 = OptimizerState::new(&p32);

        for &g in &grads {
            p64.get_mut("w").unwrap().grad = Some(vec![g]);
            adamw_step(&mut p64, &mut s64, &cfg).unwrap();
            p32.get_mut("w").unwrap().grad = Some(vec![g as f32]);
            adamw_step(&mut p32, &mut s32, &cfg).unwrap();
        }
        let w64 = p64.get("w").unwrap().values[0];
        let w32 = p32.get("w").unwrap().values[0] as f64;
        assert!((w64 - w32).abs() <= 1e-6, "{w64} vs {w32}");
    }

    #[test]
    fn missing_gradient_is_reported_by_name() {
        let mut t = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        t.requires_grad = true;
        let mut params = ParamSet::new();
        params.insert("conv.kernel", t).unwrap();
        let mut state = OptimizerState::new(&params);
        let err = adamw_step(&mut params, &mut state, &AdamW::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::MissingGrad(ref n) if n == "conv.kernel"));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut t = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        t.requires_grad = false;
        let mut params = ParamSet::new();
        params.insert("fixed", t).unwrap();
        let mut state = OptimizerState::new(&params);
        adamw_step(&mut params, &mut state, &AdamW::default()).unwrap();
        assert_eq!(params.get("fixed").unwrap().values, vec![1.0; 3]);
    }

    #[test]
    fn param_set_rejects_duplicates_and_unknown_names() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("a", Tensor::zeros(vec![2])).unwrap();
        let err = params.insert("a", Tensor::zeros(vec![2])).unwrap_err();
        assert!(matches!(err, AutodiffError::DuplicateParam(_)));
        assert!(matches!(params.get("b"), Err(AutodiffError::UnknownParam(_))));
        params.insert("z", Tensor::zeros(vec![1])).unwrap();
        params.insert("m", Tensor::zeros(vec![1])).unwrap();
        let order: Vec<&str> = params.iter().map(|(n, _)| n).collect();
        assert_eq!(order, vec!["a", "z", "m"]);
        assert_eq!(params.total_len(), 4);
    }
}
