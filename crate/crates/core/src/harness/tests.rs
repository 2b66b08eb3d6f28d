use super::*;

fn tpl() -> ScenarioTemplate<f64> {
    ScenarioTemplate::reference()
}

#[test]
fn capacities_follow_groups() {
    let d0 = gen_devices(&tpl(), 8, 0.0, 1).unwrap();
    assert!(d0.iter().all(|d| d.mem_capacity == 1800.0));
    let d10 = gen_devices(&tpl(), 8, 10.0, 1).unwrap();
    let caps: Vec<f64> = d10.iter().map(|d| d.mem_capacity).collect();
    assert_eq!(caps, vec![1800.0, 1800.0, 2300.0, 2300.0, 3300.0, 3300.0, 3800.0, 3800.0]);
    for (a, b) in d0.iter().zip(&d10) {
        assert_eq!(a.radio, b.radio);
        assert_eq!(a.gpu, b.gpu);
    }
    assert!(d0.iter().all(|d| (d.pi_weight - 0.125).abs() < 1e-15));
}

#[test]
fn draws_come_from_the_configured_sets() {
    let t = tpl();
    let a = gen_devices(&t, 20, 3.0, 42).unwrap();
    assert_eq!(a, gen_devices(&t, 20, 3.0, 42).unwrap());
    assert_ne!(a, gen_devices(&t, 20, 3.0, 43).unwrap());
    for d in &a {
        assert!(t.f_core_choices.contains(&d.gpu.f_core));
        assert!(t.f_mem_choices.contains(&d.gpu.f_mem));
        let dbm = crate::models::watts_to_dbm(d.radio.p_cm);
        assert!(t.tx_power_dbm_choices.iter().any(|&c| (c - dbm).abs() < 1e-9));
        assert!(d.radio.h > 0.0);
    }
    assert!(gen_devices(&t, 0, 0.0, 1).is_err());
    assert!(gen_devices(&t, 3, -1.0, 1).is_err());
}

#[test]
fn worst_group_is_lowest_quarter() {
    let devs = gen_devices(&tpl(), 10, 0.0, 5).unwrap();
    let w = worst_channel_group(&devs);
    assert_eq!(w.len(), 3);
    let cut = w.iter().map(|&i| devs[i].radio.h).fold(0.0f64, f64::max);
    let below = devs.iter().filter(|d| d.radio.h <= cut).count();
    assert_eq!(below, 3);
}

#[test]
fn strategy_names_round_trip() {
    for k in StrategyKind::ALL {
        assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
    }
    assert!("best".parse::<StrategyKind>().is_err());
}

#[test]
fn fwq_never_loses_to_baselines() {
    let t = tpl();
    for seed in 0..4 {
        let sc = t.scenario(6, 5.0, seed).unwrap();
        let fwq = run_strategy(StrategyKind::Fwq, &sc, seed).objective().unwrap();
        for k in [StrategyKind::UnifiedQ, StrategyKind::RandQ, StrategyKind::FullPrecision] {
            if let Some(o) = run_strategy(k, &sc, seed).objective() {
                assert!(fwq <= o * 1.01, "seed {seed} {k:?}: {fwq} vs {o}");
            }
        }
    }
}

#[test]
fn rand_q_is_reproducible_and_memory_feasible() {
    let sc = tpl().scenario(6, 0.0, 9).unwrap();
    let a = run_strategy(StrategyKind::RandQ, &sc, 3);
    assert_eq!(a, run_strategy(StrategyKind::RandQ, &sc, 3));
    let q = &a.allocation.unwrap().q;
    for (i, &b) in q.iter().enumerate() {
        assert!(sc.devices[i].fits_memory(b as f64));
    }
}

#[test]
fn full_precision_needs_memory() {
    let sc = tpl().scenario(4, 0.0, 1).unwrap();
    let out = run_strategy(StrategyKind::FullPrecision, &sc, 1);
    assert!(!out.feasible());
    assert!(out.error.unwrap().contains("memory"));
}

#[test]
fn memory_starved_device_separates_fwq_from_unified() {
    let mut t = tpl();
    t.coeffs.s_scale = 600.0;
    let mut sc = t.scenario(2, 0.0, 4).unwrap();
    sc.devices[0].mem_capacity = 750.0;
    sc.devices[1].mem_capacity = 4000.0;
    let fwq = run_strategy(StrategyKind::Fwq, &sc, 0);
    let uni = run_strategy(StrategyKind::UnifiedQ, &sc, 0);
    let (qa, qu) = (&fwq.allocation.as_ref().unwrap().q, &uni.allocation.as_ref().unwrap().q);
    assert_eq!(qu, &vec![8, 8]);
    assert_eq!(qa[0], 8);
    assert!(qa[1] > 8);
    assert!(fwq.objective().unwrap() < 0.9 * uni.objective().unwrap());
}

fn spec(kind: SweepKind, values: Vec<f64>) -> SweepSpec<f64> {
    SweepSpec {
        kind,
        values,
        repeats: 2,
        base: tpl(),
        n_devices: 4,
        heterogeneity: 0.0,
        seed: 7,
        strategies: StrategyKind::ALL.to_vec(),
    }
}

#[test]
fn single_point_sweep_matches_run_strategy() {
    let s = spec(SweepKind::Heterogeneity, vec![5.0]);
    let res = sweep(&s).unwrap();
    assert_eq!(res.rows.len(), 8);
    let sc = tpl().scenario(4, 5.0, 7).unwrap();
    let direct = run_strategy(StrategyKind::Fwq, &sc, 7);
    let row = &res.rows[0];
    assert_eq!((row.seed, row.strategy), (7, StrategyKind::Fwq));
    assert_eq!(row.objective_j, direct.objective());
    assert_eq!(row.q, direct.allocation.unwrap().q);
}

#[test]
fn sweep_is_reproducible_and_ordered() {
    let s = spec(SweepKind::Bandwidth, vec![80e6, 98e6]);
    let a = sweep(&s).unwrap();
    assert_eq!(a, sweep(&s).unwrap());
    let keys: Vec<(f64, u64)> = a.rows.iter().map(|r| (r.sweep_value, r.seed)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(keys, sorted);
    let csv = a.to_csv();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("sweep_value,seed,strategy,objective_j,h,k_rounds,eps_q,q_0,q_1,q_2,q_3,b_0_hz"));
    assert_eq!(csv.lines().count(), 1 + a.rows.len());
    assert_eq!(a.to_csv(), sweep(&s).unwrap().to_csv());
}

#[test]
fn summary_statistics() {
    let res = sweep(&spec(SweepKind::NumDevices, vec![3.0])).unwrap();
    let fwq: Vec<f64> = res
        .rows
        .iter()
        .filter(|r| r.strategy == StrategyKind::Fwq)
        .map(|r| r.objective_j.unwrap())
        .collect();
    let p = res.summary().into_iter().find(|p| p.strategy == StrategyKind::Fwq).unwrap();
    let mean = (fwq[0] + fwq[1]) / 2.0;
    assert!((p.mean_objective_j.unwrap() - mean).abs() <= 1e-9 * mean);
    let sd = ((fwq[0] - mean).powi(2) + (fwq[1] - mean).powi(2)).sqrt();
    assert!((p.std_objective_j.unwrap() - sd).abs() <= 1e-9 * mean.max(1.0));
    assert_eq!((p.feasible, p.total), (2, 2));
    let fp = res.summary().into_iter().find(|p| p.strategy == StrategyKind::FullPrecision).unwrap();
    assert_eq!(fp.feasible, 0);
    assert!(fp.mean_objective_j.is_none());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(sweep(&spec(SweepKind::NumDevices, vec![])).is_err());
    assert!(sweep(&spec(SweepKind::NumDevices, vec![2.5])).is_err());
    let mut s = spec(SweepKind::Heterogeneity, vec![0.0]);
    s.repeats = 0;
    assert!(sweep(&s).is_err());
}
