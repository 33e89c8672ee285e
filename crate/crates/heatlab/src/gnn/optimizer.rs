//! Bias-corrected adaptive-moment updates over the trainable coordinates:
//! base weights of full-mode layers plus every adapter factor.

use super::{GnnGrads, LayerMode, PolicySnapshot};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m_main: Vec<f64>,
    pub v_main: Vec<f64>,
    pub m_adapter: Vec<f64>,
    pub v_adapter: Vec<f64>,
}

impl AdamState {
    pub fn new(policy: &PolicySnapshot) -> Self {
        let main = policy.params.data.len();
        let adapter = policy.adapters.as_ref().map_or(0, |a| a.data.len());
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_main: vec![0.0; main],
            v_main: vec![0.0; main],
            m_adapter: vec![0.0; adapter],
            v_adapter: vec![0.0; adapter],
        }
    }
}

/// One optimizer step. Frozen and adapter-mode base weights are left bitwise
/// untouched; NaN gradients abort with diagnostics.
pub fn apply_update(
    policy: &mut PolicySnapshot,
    grads: &GnnGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.main.len() != policy.params.data.len()
        || grads.adapter.len() != policy.adapters.as_ref().map_or(0, |a| a.data.len())
        || state.m_main.len() != grads.main.len()
        || state.m_adapter.len() != grads.adapter.len()
    {
        return Err(Error::DimensionMismatch("gradient/optimizer shapes do not match the policy".into()));
    }
    if grads.has_nan() {
        let bad = grads
            .main
            .iter()
            .chain(grads.adapter.iter())
            .filter(|x| !x.is_finite())
            .count();
        return Err(Error::Numerical(format!(
            "{bad} non-finite gradient entries at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    let modes = policy.mask.seg_modes(&policy.params.layout);
    let specs: Vec<(usize, usize)> = policy
        .params
        .layout
        .specs
        .iter()
        .enumerate()
        .filter(|(seg, _)| modes[*seg] == LayerMode::Full)
        .map(|(_, s)| (s.offset, s.len()))
        .collect();
    for (offset, len) in specs {
        for idx in offset..offset + len {
            let g = grads.main[idx];
            let m = b1 * state.m_main[idx] + (1.0 - b1) * g;
            let v = b2 * state.v_main[idx] + (1.0 - b2) * g * g;
            state.m_main[idx] = m;
            state.v_main[idx] = v;
            policy.params.data[idx] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
    if let Some(ad) = policy.adapters.as_mut() {
        for idx in 0..ad.data.len() {
            let g = grads.adapter[idx];
            let m = b1 * state.m_adapter[idx] + (1.0 - b1) * g;
            let v = b2 * state.v_adapter[idx] + (1.0 - b2) * g * g;
            state.m_adapter[idx] = m;
            state.v_adapter[idx] = v;
            ad.data[idx] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
    policy.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{GnnConfig, GnnGrads};
    use crate::instances::ProblemKind;

    fn policy() -> PolicySnapshot {
        let cfg = GnnConfig::new(ProblemKind::Tsp, 1, 4).unwrap();
        PolicySnapshot::new(&cfg, 0).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = policy();
        let before = p.params.data.clone();
        let grads = GnnGrads::zeros(&p.params, None);
        let mut state = AdamState::new(&p);
        apply_update(&mut p, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(before, p.params.data);
        assert_eq!(p.version, 1);
    }

    #[test]
    fn descends_a_quadratic() {
        // One coordinate, f(w) = w^2 from w = 1: the first step moves toward 0.
        let mut p = policy();
        let idx = 0;
        p.params.data[idx] = 1.0;
        let mut state = AdamState::new(&p);
        let mut grads = GnnGrads::zeros(&p.params, None);
        grads.main[idx] = 2.0 * p.params.data[idx];
        apply_update(&mut p, &grads, &mut state, 1e-2).unwrap();
        let f_before = 1.0f64;
        let f_after = p.params.data[idx] * p.params.data[idx];
        assert!(f_after < f_before);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = policy();
            let mut state = AdamState::new(&p);
            let mut grads = GnnGrads::zeros(&p.params, None);
            for (i, g) in grads.main.iter_mut().enumerate() {
                *g = (i as f64 * 0.37).sin();
            }
            for _ in 0..5 {
                apply_update(&mut p, &grads, &mut state, 3e-3).unwrap();
            }
            p.params.data
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradients_abort() {
        let mut p = policy();
        let mut state = AdamState::new(&p);
        let mut grads = GnnGrads::zeros(&p.params, None);
        grads.main[3] = f64::NAN;
        let err = apply_update(&mut p, &grads, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, crate::error::Error::Numerical(_)));
    }

    #[test]
    fn masked_parameters_stay_bitwise_identical() {
        let cfg = GnnConfig::new(ProblemKind::Tsp, 2, 4).unwrap();
        let mut p = PolicySnapshot::new(&cfg, 1)
            .unwrap()
            .into_hybrid(2, 1.0, 1, 2)
            .unwrap();
        let before = p.params.data.clone();
        let mut state = AdamState::new(&p);
        let mut grads = GnnGrads::zeros(&p.params, p.adapters.as_ref());
        for g in grads.main.iter_mut() {
            *g = 0.5;
        }
        for g in grads.adapter.iter_mut() {
            *g = 0.5;
        }
        for _ in 0..7 {
            apply_update(&mut p, &grads, &mut state, 1e-3).unwrap();
        }
        // Lora/frozen base segments are untouched; full segments moved.
        let modes = p.mask.seg_modes(&p.params.layout);
        for (seg, spec) in p.params.layout.specs.iter().enumerate() {
            let same = p.params.data[spec.offset..spec.offset + spec.len()]
                == before[spec.offset..spec.offset + spec.len()];
            match modes[seg] {
                LayerMode::Full => assert!(!same, "{} should have moved", spec.name),
                _ => assert!(same, "{} should be frozen", spec.name),
            }
        }
        // Adapters moved.
        assert!(p.adapters.unwrap().data.iter().any(|&x| x != 0.0));
    }
}
