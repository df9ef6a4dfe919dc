mod common;

use davam::autodiff::Tensor;
use davam::models::{discrete_kl, gaussian_kl};
use proptest::prelude::*;

#[test]
fn kl_closed_forms_and_monte_carlo() {
    common::formula_fidelity().unwrap();
}

proptest! {
    #[test]
    fn gaussian_kl_is_non_negative_and_zero_on_equal_arguments(
        mu in -3.0f64..3.0, sigma in 0.05f64..4.0, mu_hat in -3.0f64..3.0, sigma_hat in 0.05f64..4.0,
    ) {
        let t = Tensor::scalar;
        let kl = gaussian_kl(&t(mu), &t(sigma), &t(mu_hat), &t(sigma_hat)).unwrap();
        prop_assert!(kl >= -1e-12);
        let same = gaussian_kl(&t(mu), &t(sigma), &t(mu), &t(sigma)).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn discrete_kl_is_bounded_by_the_probability_floor(
        z in proptest::collection::vec(0usize..4, 1..12), p in 0.0f64..1.0,
    ) {
        // every row puts mass p on code 0 and spreads the rest
        let mut gamma = Tensor::<f64>::zeros(z.len(), 4);
        for t in 0..z.len() {
            gamma.set(t, 0, p);
            for k in 1..4 {
                gamma.set(t, k, (1.0 - p) / 3.0);
            }
        }
        let kl = discrete_kl(&z, &gamma);
        prop_assert!(kl >= 0.0);
        prop_assert!(kl <= z.len() as f64 * -(1e-10f64).ln() + 1e-9);
    }
}

#[test]
fn gaussian_kl_rejects_bad_arguments() {
    let t = Tensor::scalar;
    assert!(gaussian_kl(&t(0.0), &t(0.0), &t(0.0), &t(1.0)).is_err());
    assert!(gaussian_kl(&t(0.0), &t(1.0), &t(0.0), &t(-1.0)).is_err());
    let row = Tensor::from_f64(1, 2, &[0.0, 0.0]).unwrap();
    assert!(gaussian_kl(&row, &t(1.0), &t(0.0), &t(1.0)).is_err());
}
