#![allow(dead_code)]

use polling_core::model::{SystemConfig, TravelLaw};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// Two stations, buffers of 2, rates (0.6, 0.2): a pointwise interior fixed point at alpha = 1.
pub fn interior_config(alpha: f64) -> SystemConfig {
    let mut c = SystemConfig::fig2(2, alpha);
    c.buffers = vec![2, 2];
    c.lambda = vec![0.6, 0.2];
    c
}

/// Two-station heterogeneous instance (one good, one bad) with buffers of 2.
pub fn small_heterogeneous(alpha: f64) -> SystemConfig {
    let mut c = SystemConfig::fig3(2, alpha);
    c.buffers = vec![2, 2];
    c
}

/// Fully symmetric instance: equal rates, buffers and route probabilities.
pub fn symmetric_config(m: usize, buffer: u32, alpha: f64) -> SystemConfig {
    let mut c = SystemConfig::fig2(m, alpha);
    c.buffers = vec![buffer; m];
    c.lambda = vec![0.2; m];
    c.p_good = SystemConfig::destination_matrix(&vec![0.5; m]);
    c
}

/// Two-sided critical value keeping the family-wise error of `tests` comparisons at `level`.
pub fn bonferroni_z(level: f64, tests: usize) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.inverse_cdf(1.0 - level / (2.0 * tests.max(1) as f64))
}

/// Random valid configurations with travel spreads small enough that truncation at zero is negligible.
pub fn config_strategy() -> impl Strategy<Value = SystemConfig> {
    (2usize..=4).prop_flat_map(|m| {
        (
            prop::collection::vec(0.01f64..1.0, m),
            prop::collection::vec(1u32..=6, m),
            0.1f64..2.0,
            (0.5f64..4.0, 0.5f64..6.0, 0.0f64..0.125, 0.0f64..0.125),
            prop::collection::vec(0.05f64..0.95, m),
            1.0f64..10.0,
        )
            .prop_map(move |(lambda, buffers, mu_s, (mg, gap, sg, sb), p, w)| SystemConfig {
                lambda,
                buffers,
                service_rate: mu_s,
                travel_good: TravelLaw::new(mg, sg * mg),
                travel_bad: TravelLaw::new(mg + gap, sb * (mg + gap)),
                p_good: SystemConfig::destination_matrix(&p),
                reward: w,
                alpha: 1.0,
                delta: 0.01,
                gamma: 1.01,
                seed: 1,
            })
    })
}
