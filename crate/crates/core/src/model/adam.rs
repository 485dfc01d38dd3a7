use crate::error::{Error, Result};
use crate::model::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step using the gradients stored in `params`,
/// which are cleared afterwards. Non-finite gradients abort the step and
/// leave parameters and moments untouched.
pub fn optimizer_step(params: &mut ParamStore, lr: f64, state: &mut AdamState) -> Result<()> {
    for p in params.params() {
        if let Some(g) = p.grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient {g} in {}", p.name)));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for ((p, m), v) in params.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    params.bump_updates();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Param;

    fn scalar(x: f64) -> ParamStore {
        ParamStore::new(vec![Param::new("x", vec![1], vec![x])])
    }

    // Closed form for a constant gradient g: m̂_t = g and v̂_t = g², so every
    // step moves by lr·|g|/(|g| + ε) against the gradient's sign.
    #[test]
    fn constant_gradient_steps_are_lr() {
        let lr = 1e-3;
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        let g = 0.37;
        let expected_step = lr * g / (g + EPSILON);
        for t in 1..=500 {
            let before = p.get(0)[0];
            p.params_mut()[0].grad[0] = g;
            optimizer_step(&mut p, lr, &mut st).unwrap();
            let step = before - p.get(0)[0];
            assert!(step > 0.0 && step <= lr / (1.0 - BETA1));
            assert!((step - expected_step).abs() < 1e-12, "t={t} step={step}");
        }
        assert_eq!(p.updates(), 500);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = scalar(1.5);
        let mut st = AdamState::new(&p);
        p.params_mut()[0].grad[0] = 1.0;
        optimizer_step(&mut p, 1e-2, &mut st).unwrap();
        let (x, m, v) = (p.get(0)[0], st.m[0][0], st.v[0][0]);
        // With a zero gradient the update is -lr·m̂/(√v̂+ε) ≠ 0 while moments
        // are nonzero; with fresh moments it is exactly zero.
        let mut fresh = scalar(1.5);
        let mut fs = AdamState::new(&fresh);
        optimizer_step(&mut fresh, 1e-2, &mut fs).unwrap();
        assert_eq!(fresh.get(0)[0], 1.5);
        optimizer_step(&mut p, 1e-2, &mut st).unwrap();
        assert!(st.m[0][0] < m && st.v[0][0] < v);
        assert!(p.get(0)[0] < x);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        p.params_mut()[0].grad[0] = f64::NAN;
        assert!(optimizer_step(&mut p, 1e-3, &mut st).is_err());
        assert_eq!(p.get(0)[0], 1.0);
        assert_eq!(st.t, 0);
    }
}
