use proptest::prelude::*;

use fwq::convergence::{quant_error_term, rounds_required, ConvergenceCoeffs};
use fwq::flsim::{aggregate, run_fwq_fl, DataSpec, ModelKind, Precision, SimConfig, SyntheticSpec};
use fwq::harness::{run_strategy, toy_scenario, StrategyKind};
use fwq::models::memory_ratio;
use fwq::solver::{check_feasible, iterate, split_bandwidth, BandwidthRule};

fn coeffs() -> ConvergenceCoeffs<f64> {
    ConvergenceCoeffs {
        a1: 13.765,
        a2: 1.023,
        a3: 0.0435,
        eps: 0.1,
        m_batch: 32,
        s_scale: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rounds_grow_with_quant_budget(h in 1.0f64..200.0, a in 0.0f64..0.09, b in 0.0f64..0.09) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let k_lo = rounds_required(h, lo, &coeffs()).unwrap();
        let k_hi = rounds_required(h, hi, &coeffs()).unwrap();
        prop_assert!(k_lo <= k_hi);
        prop_assert!(k_lo > 0.0);
    }

    #[test]
    fn quant_error_shrinks_with_bits(q in 2u32..32, pis in prop::collection::vec(0.01f64..1.0, 1..6)) {
        let c = coeffs();
        let lo = quant_error_term(&pis, &vec![q as f64; pis.len()], &c);
        let hi = quant_error_term(&pis, &vec![(q + 1) as f64; pis.len()], &c);
        prop_assert!(hi < lo);
        prop_assert!(hi > 0.0);
    }

    #[test]
    fn bandwidth_split_respects_budget_and_floors(
        w in prop::collection::vec(1e-3f64..1e3, 1..6),
        floors in prop::collection::vec(0.0f64..1.0, 6),
        rule in prop_oneof![Just(BandwidthRule::Kkt), Just(BandwidthRule::Linear)],
    ) {
        let n = w.len();
        let b_max = 100e6;
        // floors sum to at most 90% of the budget
        let total: f64 = floors[..n].iter().sum::<f64>().max(1e-12);
        let b_min: Vec<f64> = floors[..n].iter().map(|f| 0.9 * b_max * f / total.max(1.0)).collect();
        let (b, _) = split_bandwidth(&w, &b_min, b_max, rule).unwrap();
        let sum: f64 = b.iter().sum();
        prop_assert!((sum - b_max).abs() <= 1e-6 * b_max);
        for (x, m) in b.iter().zip(&b_min) {
            prop_assert!(*x >= m * (1.0 - 1e-9));
        }
    }

    #[test]
    fn aggregate_is_a_convex_combination(
        ws in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..5),
        raw in prop::collection::vec(0.1f64..1.0, 5),
    ) {
        let n = ws.len();
        let total: f64 = raw[..n].iter().sum();
        let pi: Vec<f64> = raw[..n].iter().map(|r| r / total).collect();
        let g = aggregate(&ws, &pi).unwrap();
        for j in 0..4 {
            let lo = ws.iter().map(|w| w[j]).fold(f64::INFINITY, f64::min);
            let hi = ws.iter().map(|w| w[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g[j] >= lo - 1e-12 && g[j] <= hi + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_allocations_are_feasible(seed in 0u64..10_000, n in 2usize..5) {
        let sc = toy_scenario::<f64>(n, seed).unwrap();
        let a = iterate(&sc, None).unwrap();
        let rep = check_feasible(&sc, &a);
        prop_assert!(rep.feasible, "{:?}", rep);
        prop_assert!(a.b.iter().sum::<f64>() <= sc.net.b_max * (1.0 + 1e-6));
        for (d, &q) in sc.devices.iter().zip(&a.q) {
            prop_assert!(memory_ratio(q as f64) * d.model_size <= d.mem_capacity * (1.0 + 1e-9));
            prop_assert!(sc.q_set.contains(&q));
        }
        let phi = quant_error_term(
            &sc.devices.iter().map(|d| d.pi_weight).collect::<Vec<_>>(),
            &a.q.iter().map(|&q| q as f64).collect::<Vec<_>>(),
            &sc.coeffs,
        );
        prop_assert!(phi <= a.eps_q * (1.0 + 1e-9) && a.eps_q < sc.coeffs.eps);
        for w in a.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn fwq_dominates_baselines(seed in 0u64..10_000, n in 2usize..5) {
        let sc = toy_scenario::<f64>(n, seed).unwrap();
        let fwq = run_strategy(StrategyKind::Fwq, &sc, seed).objective().unwrap();
        for k in [StrategyKind::UnifiedQ, StrategyKind::RandQ, StrategyKind::FullPrecision] {
            if let Some(o) = run_strategy(k, &sc, seed).objective() {
                prop_assert!(fwq <= o * 1.01, "{:?}: {} vs {}", k, fwq, o);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn traces_have_one_record_per_round_and_growing_energy(seed in 0u64..1000, rounds in 0usize..6, q in 2u32..17) {
        let tpl = fwq::harness::ScenarioTemplate::<f64>::reference();
        let devices = fwq::harness::gen_devices(&tpl, 2, 0.0, seed).unwrap();
        let cfg = SimConfig {
            n_devices: 2,
            h_steps: 2,
            rounds,
            batch: 8,
            lr: 0.05,
            l2: 1e-4,
            q_per_device: vec![Precision::Bits(q), Precision::Full],
            seed,
            data: DataSpec::Synthetic(SyntheticSpec { n_train: 200, n_test: 50, dim: 5, classes: 10, separation: 1.5 }),
            label_skew: 5,
            model: ModelKind::Logistic,
            energy: Some(fwq::flsim::EnergySpec { devices, net: tpl.net }),
        };
        let a = run_fwq_fl(&cfg).unwrap();
        prop_assert_eq!(a.records.len(), rounds);
        for w in a.records.windows(2) {
            prop_assert!(w[1].energy_j > w[0].energy_j);
        }
        prop_assert!(a.final_weights.iter().all(|w| w.is_finite()));
        prop_assert_eq!(a, run_fwq_fl(&cfg).unwrap());
    }
}

#[test]
fn trace_energy_matches_models() {
    use fwq::models::{comm_energy, comp_energy};
    let tpl = fwq::harness::ScenarioTemplate::<f64>::reference();
    let devices = fwq::harness::gen_devices(&tpl, 3, 0.0, 5).unwrap();
    let q = [Precision::Bits(8), Precision::Bits(16), Precision::Full];
    let cfg = SimConfig {
        n_devices: 3,
        h_steps: 4,
        rounds: 3,
        batch: 8,
        lr: 0.05,
        l2: 0.0,
        q_per_device: q.to_vec(),
        seed: 5,
        data: DataSpec::Synthetic(SyntheticSpec { n_train: 300, n_test: 30, dim: 5, classes: 10, separation: 1.5 }),
        label_skew: 4,
        model: ModelKind::Logistic,
        energy: Some(fwq::flsim::EnergySpec { devices: devices.clone(), net: tpl.net }),
    };
    let trace = run_fwq_fl(&cfg).unwrap();
    let b = tpl.net.b_max / 3.0;
    let per_round: f64 = devices
        .iter()
        .zip(q)
        .map(|(d, p)| comp_energy(&d.gpu, p.energy_bits() as f64, 4.0) + comm_energy(b, &d.radio, &tpl.net).unwrap())
        .sum();
    for r in &trace.records {
        let want = r.round as f64 * per_round;
        assert!((r.energy_j - want).abs() <= 1e-12 * want);
    }
}
