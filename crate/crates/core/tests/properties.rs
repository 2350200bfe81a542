use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sphereflow::attention::{check_conditions, compute_flow_state, HeadSpec, TokenConfiguration, CONDITION_TOL};
use sphereflow::dynamics::{equiangular_configuration, integrate, random_configuration, step_positions, token_derivatives, DynamicsKind, Schedule};
use sphereflow::energy::{per_head_rate, total_energy_rate};
use sphereflow::entropy::entropy_report;
use sphereflow::equiangular::{relu_rate, softmax_rate, unnormalized_softmax_rate};
use sphereflow::geometry::{decompose, project_tangent, renormalize, UnitVector};
use sphereflow::harness::{block_projection_heads, random_symmetric_heads};
use sphereflow::thresholds::{critical_alignment, inflection_strength, lambert_w0, optimal_strength, rate_function};

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d)
}

fn unit(v: &[f64]) -> Option<UnitVector> {
    renormalize(&DVector::from_column_slice(v)).ok()
}

// Flow map by repeated RK4 steps, for the finite-difference oracle.
fn flow(xs: &[DVector<f64>], beta: f64, heads: &[HeadSpec], kind: DynamicsKind, t: f64) -> Vec<DVector<f64>> {
    let mut cur = xs.to_vec();
    for _ in 0..50 {
        cur = step_positions(&cur, beta, heads, kind, t / 50.0).unwrap();
    }
    cur
}

fn central<F: Fn(&[DVector<f64>]) -> f64>(xs: &[DVector<f64>], beta: f64, heads: &[HeadSpec], kind: DynamicsKind, obs: F) -> f64 {
    let h = 1e-5;
    (obs(&flow(xs, beta, heads, kind, h)) - obs(&flow(xs, beta, heads, kind, -h))) / (2.0 * h)
}

fn energy(xs: &[DVector<f64>], beta: f64, heads: &[HeadSpec]) -> f64 {
    let n2 = (xs.len() * xs.len()) as f64;
    let mut e = 0.0;
    for h in heads {
        for xi in xs {
            for xj in xs {
                e += (beta * xi.dot(&(h.score_matrix() * xj))).exp();
            }
        }
    }
    e / (2.0 * beta * n2)
}

fn entropy_of(xs: &[DVector<f64>], beta: f64, m: &DMatrix<f64>, i: usize) -> f64 {
    let w: Vec<f64> = xs.iter().map(|xj| (beta * xs[i].dot(&(m * xj))).exp()).collect();
    let z: f64 = w.iter().sum();
    -w.iter().map(|v| v / z * (v / z).ln()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tangent_projection_identities(x in vector(7), u in vector(7), w in vector(7)) {
        let Some(x) = unit(&x) else { return Ok(()) };
        let (u, w) = (DVector::from_vec(u), DVector::from_vec(w));
        let pu = project_tangent(&x, &u).unwrap();
        let pw = project_tangent(&x, &w).unwrap();
        let scale = 1.0 + u.norm_squared() + w.norm_squared();
        prop_assert!((pu.dot(&u) - pu.norm_squared()).abs() <= 1e-12 * scale);
        prop_assert!((pu.dot(&w) - u.dot(&pw)).abs() <= 1e-12 * scale);
        let ppu = project_tangent(&x, &pu).unwrap();
        prop_assert!((ppu - &pu).amax() <= 1e-12 * scale);
        prop_assert!(pu.dot(x.as_vector()).abs() <= 1e-12 * scale);
    }

    #[test]
    fn decomposition_is_pythagorean(x in vector(5), f in vector(5)) {
        let Some(x) = unit(&x) else { return Ok(()) };
        let f = DVector::from_vec(f);
        let rt = decompose(&x, &f).unwrap();
        if f.norm() > 1e-12 {
            let lhs = rt.radial.powi(2) + rt.tangential_norm.powi(2);
            prop_assert!((lhs - f.norm_squared()).abs() <= 1e-10 * (1.0 + f.norm_squared()));
            prop_assert!((rt.alignment_fraction - rt.radial.abs() / f.norm()).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambert_round_trip(e in -6.0..6.0f64) {
        let z = 10f64.powf(e);
        let w = lambert_w0(z).unwrap();
        prop_assert!((w * w.exp() - z).abs() <= 1e-13 * z.max(1.0));
        let zn = -(-1.0f64).exp() + 1e-6 + (1.0 - 1e-6) * (e + 6.0) / 12.0 * (-1.0f64).exp();
        let wn = lambert_w0(zn).unwrap();
        prop_assert!((wn * wn.exp() - zn).abs() <= 1e-13);
    }

    #[test]
    fn optimal_strength_is_stationary(n in 2usize..5000, beta in 0.05..20.0f64) {
        let x = optimal_strength(beta, n).unwrap() * beta;
        let r = (1.0 - x) * x.exp() + (n as f64 - 1.0);
        prop_assert!(r.abs() <= 1e-10 * x.exp().max(1.0), "residual {r}");
        prop_assert!(rate_function(x / beta, beta, n).d1.abs() <= 1e-10);
    }

    #[test]
    fn rate_derivatives_match_differences(lambda in 0.01..10.0f64, beta in 0.1..3.0f64, n in 2usize..100) {
        let h = 1e-5;
        let f = |l: f64| rate_function(l, beta, n);
        let d1 = (f(lambda + h).phi - f(lambda - h).phi) / (2.0 * h);
        let d2 = (f(lambda + h).d1 - f(lambda - h).d1) / (2.0 * h);
        prop_assert!((d1 - f(lambda).d1).abs() <= 1e-6);
        prop_assert!((d2 - f(lambda).d2).abs() <= 1e-6);
    }

    #[test]
    fn inflection_is_a_root_above_the_peak(n in 2usize..100_000, beta in 0.1..5.0f64) {
        let lc = inflection_strength(beta, n).unwrap();
        let ls = optimal_strength(beta, n).unwrap();
        prop_assert!(lc > ls);
        // phi'' normalized by its natural scale beta / (e^{lambda beta} + n - 1)
        let s = (lc * beta).exp() + n as f64 - 1.0;
        prop_assert!((rate_function(lc, beta, n).d2 * s / beta).abs() <= 1e-10);
    }

    #[test]
    fn reduced_rates_vanish_only_at_full_alignment(gamma in 1e-6..(1.0 - 1e-9), lambda in 0.1..4.0f64, n in 2usize..64) {
        prop_assert!(softmax_rate(gamma, lambda, 1.0, n) > 0.0);
        prop_assert!(unnormalized_softmax_rate(gamma, lambda, 1.0, n) > 0.0);
        prop_assert!(relu_rate(gamma, lambda, n) > 0.0);
        prop_assert_eq!(softmax_rate(1.0, lambda, 1.0, n), 0.0);
        prop_assert_eq!(relu_rate(1.0, lambda, n), 0.0);
    }
}

#[test]
fn critical_alignment_solves_its_quadratic() {
    for h in 1..=64usize {
        let c = critical_alignment(h).unwrap();
        assert!((c * c + (h as f64 - 1.0) * c - 1.0).abs() <= 1e-14, "H = {h}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_ignore_a_constant_score_shift(seed in any::<u64>(), shift in -5.0..5.0f64) {
        // Lifting every token to (sqrt(1-a^2) x, a) with M' = diag(M/(1-a^2), c/a^2)
        // adds c to every score.
        let (n, d, a) = (6, 5, 0.6f64);
        let cfg = random_configuration(n, d, 1.3, seed).unwrap();
        let heads = random_symmetric_heads(d, 2, seed ^ 1).unwrap();
        let r = (1.0 - a * a).sqrt();
        let lifted = TokenConfiguration::new(
            cfg.vectors().iter().map(|x| {
                let mut v = DVector::zeros(d + 1);
                v.rows_mut(0, d).copy_from(&(x * r));
                v[d] = a;
                UnitVector::new(v).unwrap()
            }).collect(),
            1.3,
        ).unwrap();
        let lifted_heads: Vec<HeadSpec> = heads.iter().map(|h| {
            let mut m = DMatrix::zeros(d + 1, d + 1);
            m.view_mut((0, 0), (d, d)).copy_from(&(h.score_matrix() / (r * r)));
            m[(d, d)] = shift / (a * a);
            HeadSpec::from_matrix(m).unwrap()
        }).collect();
        let base = compute_flow_state(&cfg, &heads).unwrap();
        let moved = compute_flow_state(&lifted, &lifted_heads).unwrap();
        for i in 0..n {
            for h in 0..2 {
                for j in 0..n {
                    prop_assert!((moved.scores[i][h][j] - base.scores[i][h][j] - shift).abs() <= 1e-12);
                    prop_assert!((moved.attention_rows[i][h][j] - base.attention_rows[i][h][j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn flow_state_bookkeeping(seed in any::<u64>(), beta in 0.1..4.0f64) {
        let cfg = random_configuration(7, 6, beta, seed).unwrap();
        let heads = random_symmetric_heads(6, 3, seed.wrapping_add(9)).unwrap();
        let st = compute_flow_state(&cfg, &heads).unwrap();
        for i in 0..7 {
            let mut v = DVector::zeros(6);
            for h in 0..3 {
                let row = &st.attention_rows[i][h];
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                v += &st.aggregations[i][h];
            }
            prop_assert!((v / 7.0 - &st.velocities[i]).amax() <= 1e-12 * (1.0 + st.velocities[i].amax()));
        }
    }

    #[test]
    fn projection_heads_keep_aggregations_in_range(seed in any::<u64>(), heads in 2usize..5) {
        let d = 3 * heads;
        let hs = block_projection_heads(d, &vec![1.0; heads]).unwrap();
        let cfg = random_configuration(5, d, 1.0, seed).unwrap();
        let st = compute_flow_state(&cfg, &hs).unwrap();
        for i in 0..5 {
            for h in 0..heads {
                let f = &st.aggregations[i][h];
                prop_assert!((hs[h].score_matrix() * f - f).norm() <= 1e-10);
                for g in (0..heads).filter(|&g| g != h) {
                    let cross = st.aggregations[i][g].dot(&(hs[g].score_matrix() * f));
                    prop_assert!(cross.abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), beta in 0.0..6.0f64) {
        let cfg = random_configuration(6, 4, beta.max(1e-3), seed).unwrap();
        let heads = random_symmetric_heads(4, 2, seed ^ 7).unwrap();
        let st = compute_flow_state(&cfg, &heads).unwrap();
        let derivs = token_derivatives(&st, DynamicsKind::Sphere).unwrap();
        let rep = entropy_report(&st, &heads, &derivs).unwrap();
        for h in rep.entropy.iter().flatten() {
            prop_assert!(*h >= 0.0 && *h <= 6f64.ln() + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_rate_matches_flow_differences(seed in any::<u64>(), beta in 0.3..2.0f64) {
        let cfg = random_configuration(5, 6, beta, seed).unwrap();
        let heads = random_symmetric_heads(6, 2, seed ^ 3).unwrap();
        let st = compute_flow_state(&cfg, &heads).unwrap();
        let xs = cfg.vectors();
        let flags = check_conditions(&heads, CONDITION_TOL);
        let mut rates = Vec::new();
        for kind in [DynamicsKind::Flat, DynamicsKind::Sphere, DynamicsKind::Normalized] {
            let analytic = total_energy_rate(&st, kind).unwrap();
            let numeric = central(&xs, beta, &heads, kind, |ys| energy(ys, beta, &heads));
            prop_assert!((analytic - numeric).abs() <= 1e-6, "{kind:?}: {analytic} vs {numeric}");
            if kind != DynamicsKind::Normalized {
                let parts: f64 = (0..2).map(|h| per_head_rate(&st, &flags, h, kind).unwrap().rate).sum();
                prop_assert!((parts - analytic).abs() <= 1e-9 * (1.0 + analytic.abs()));
            }
            rates.push(analytic);
        }
        prop_assert!(rates[1] <= rates[0] + 1e-12);
    }

    #[test]
    fn entropy_rate_matches_flow_differences(seed in any::<u64>()) {
        let beta = 1.0;
        let cfg = random_configuration(5, 6, beta, seed).unwrap();
        let heads = random_symmetric_heads(6, 2, seed ^ 5).unwrap();
        let st = compute_flow_state(&cfg, &heads).unwrap();
        let derivs = token_derivatives(&st, DynamicsKind::Sphere).unwrap();
        let rep = entropy_report(&st, &heads, &derivs).unwrap();
        let xs = cfg.vectors();
        for i in 0..5 {
            for (h, head) in heads.iter().enumerate() {
                let numeric = central(&xs, beta, &heads, DynamicsKind::Sphere, |ys| entropy_of(ys, beta, head.score_matrix(), i));
                prop_assert!((numeric - rep.production_rate[i][h]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn equiangular_states_stay_equiangular(gamma0 in 0.0..0.9f64, lambda in 0.3..2.0f64, heads in 1usize..4) {
        let cfg = equiangular_configuration(6, 6, gamma0, 1.0).unwrap();
        let hs = vec![HeadSpec::scalar(lambda, 6); heads];
        let rec = integrate(&cfg, &hs, DynamicsKind::Sphere, &Schedule::new(1e-2, 3.0, 10)).unwrap();
        prop_assert!(rec.alignment_spread.iter().all(|&s| s <= 1e-8));
        let e = rec.total_energy();
        prop_assert!(e.windows(2).all(|w| w[1] >= w[0] - 1e-10));
    }
}
