use super::{Result, SsmError};

/// Zero-order-hold discretization of a diagonal system:
/// `Ā = e^{Δa}`, `B̄ = (e^{Δa} − 1)/a · B`, with `B̄ = Δ·B` once `|Δa| < 1e-8`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(SsmError::NonPositiveStep(delta));
    }
    if a.len() != b.len() {
        return Err(SsmError::Shape(format!(
            "A has {} entries but B has {}",
            a.len(),
            b.len()
        )));
    }
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let x = delta * ai;
        abar.push(x.exp());
        bbar.push(if x.abs() < 1e-8 {
            delta * bi
        } else {
            x.exp_m1() / ai * bi
        });
    }
    Ok((abar, bbar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_half_decay() {
        let (a, b) = zoh_discretize(&[-1.0], &[2.0], std::f64::consts::LN_2).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12);
        assert!((b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_state_matrix_is_euler() {
        let (a, b) = zoh_discretize(&[0.0], &[2.0], 0.3).unwrap();
        assert_eq!(a[0], 1.0);
        assert!((b[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(zoh_discretize(&[-1.0], &[1.0], 0.0).is_err());
        assert!(zoh_discretize(&[-1.0], &[1.0], -0.1).is_err());
        assert!(zoh_discretize(&[-1.0], &[1.0], f64::NAN).is_err());
    }

    #[test]
    fn small_step_limit_is_second_order() {
        let a = [-0.5, -1.0, -3.0, -7.5];
        let b = [1.0, -2.0, 0.5, 3.0];
        let mut prev = None;
        for delta in [1e-2, 1e-3, 1e-4] {
            let (abar, bbar) = zoh_discretize(&a, &b, delta).unwrap();
            let err = (0..4)
                .map(|i| (bbar[i] - delta * b[i]).abs())
                .fold(0.0, f64::max);
            assert!(abar.iter().all(|&x| (x - 1.0).abs() < 10.0 * delta));
            if let Some(p) = prev {
                let ratio: f64 = p / err;
                assert!((ratio - 100.0).abs() < 5.0, "ratio {ratio}");
            }
            prev = Some(err);
        }
    }
}
