use polling_core::anticipation::AnticipationEvaluator;
use polling_core::model::{validate_config, Condition, SystemConfig, SystemState};
use polling_core::scheduler::fair_index;
use statrs::distribution::{Continuous, Discrete, Normal, Poisson};

/// `E[(G - h)^+]` for `G` geometric on {0, 1, ..} with `P(G = k) = (1 - q) q^k`.
fn geometric_overflow(q: f64, h: u32) -> f64 {
    q.powi(h as i32 + 1) / (1.0 - q)
}

/// Overflow over an exponential hold alone: Poisson arrivals over Exp(mu) are geometric.
fn stay_loss(lambda: f64, mu: f64, headroom: u32) -> f64 {
    geometric_overflow(lambda / (lambda + mu), headroom)
}

/// Overflow over Normal(mean, sd) travel followed by an exponential hold, by a fine trapezoid in t.
fn travel_loss(lambda: f64, mu: f64, mean: f64, sd: f64, headroom: u32) -> f64 {
    let q = lambda / (lambda + mu);
    let density = Normal::new(mean, sd).unwrap();
    let (lo, hi, n) = (mean - 10.0 * sd, mean + 10.0 * sd, 4000);
    let dt = (hi - lo) / n as f64;
    let mut total = 0.0;
    for k in 0..=n {
        let t = lo + k as f64 * dt;
        let pois = Poisson::new(lambda * t).unwrap();
        let inner: f64 = (0..80u32)
            .map(|a| {
                let tail = if a >= headroom {
                    (a - headroom) as f64 + q / (1.0 - q)
                } else {
                    geometric_overflow(q, headroom - a)
                };
                pois.pmf(u64::from(a)) * tail
            })
            .sum();
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        total += w * dt * density.pdf(t) * inner;
    }
    total
}

#[test]
fn worked_two_station_index() {
    let c = SystemConfig::fig2(2, 1.0);
    let ev = AnticipationEvaluator::new(&c);
    let state = SystemState {
        server: 0,
        queues: vec![2, 0],
        conditions: vec![Condition::Stay, Condition::Good],
        epoch: 1,
    };
    let ubar = [1.5, 0.5];
    let (lambda, mu, w) = (c.lambda[0], c.service_rate, c.reward);
    let (g, sd) = (c.travel_good.mean, c.travel_good.sd);

    let gain_1 = w * (1.0 - (-lambda * g + 0.5 * lambda * lambda * sd * sd).exp());
    let stay_0 = stay_loss(lambda, mu, 3);
    let stay_1 = stay_loss(lambda, mu, 5);
    let move_0 = travel_loss(lambda, mu, g, sd, 3);
    let move_1 = travel_loss(lambda, mu, g, sd, 5);

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-6);
    assert_eq!(ev.expected_gain(0, &state), w);
    assert!(close(ev.expected_gain(1, &state), gain_1));
    assert!(close(ev.expected_loss(0, 0, &state), stay_0), "{} vs {stay_0}", ev.expected_loss(0, 0, &state));
    assert!(close(ev.expected_loss(1, 0, &state), stay_1));
    assert!(close(ev.expected_loss(0, 1, &state), move_0), "{} vs {move_0}", ev.expected_loss(0, 1, &state));
    assert!(close(ev.expected_loss(1, 1, &state), move_1));

    let (w0, w1) = (1.0 / ubar[0], 1.0 / ubar[1]);
    let o_stay = w * w0 - (stay_0 * w0 + stay_1 * w1);
    let o_move = gain_1 * w1 - (move_0 * w0 + move_1 * w1);
    let idx = fair_index(&state, &ev, &ubar, 1.0, c.delta);
    assert!(close(idx.values[0], o_stay), "{} vs {o_stay}", idx.values[0]);
    assert!(close(idx.values[1], o_move), "{} vs {o_move}", idx.values[1]);
}

#[test]
fn bad_route_loss_matches_independent_integral() {
    let mut c = SystemConfig::fig2(5, 1.0);
    c.lambda = vec![0.134; 5];
    let ev = AnticipationEvaluator::new(&c);
    let want = travel_loss(0.134, c.service_rate, c.travel_bad.mean, c.travel_bad.sd, 3);
    let got = ev.loss(0, 2, Condition::Bad);
    assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
}

#[test]
fn fig2_layout_load_sits_just_above_the_reward() {
    let d = validate_config(&SystemConfig::fig2(5, 1.0));
    assert!(d.is_valid());
    assert!((d.rho_b_raw - 0.67 * 9.0).abs() < 1e-12);
    assert!((d.rho_b - 6.03).abs() < 1e-9);
    assert!(!d.losses_below_gain);

    let mut heavy = SystemConfig::fig2(2, 1.0);
    heavy.lambda = vec![5.0, 5.0];
    heavy.reward = 1.0;
    assert!(!validate_config(&heavy).passes());

    let mut light = SystemConfig::fig2(5, 1.0);
    light.lambda = vec![0.1; 5];
    assert!(validate_config(&light).passes());
}

#[test]
fn load_is_monotone_in_rates_and_reward() {
    let mut c = SystemConfig::fig2(3, 1.0);
    let base = validate_config(&c);
    c.lambda[1] += 0.05;
    let more = validate_config(&c);
    assert!(more.rho_b >= base.rho_b);
    c.reward = 100.0;
    assert!(validate_config(&c).losses_below_gain);
}
