use beamre::mm::Anchor;
use beamre::oracle::relative_gap;
use beamre::*;

fn desk(m: usize, pmax_dbm: f64) -> SystemParams64 {
    let mut p = SystemParams64::reference(m, vec![2; 4]);
    p.pmax = dbm_to_watt(pmax_dbm);
    p
}

#[test]
fn mm_improves_on_the_uniform_start_and_stays_feasible() {
    let cfg = SolverConfig64::default();
    for (seed, dbm) in [(0u64, 20.0), (1, 40.0)] {
        let params = desk(16, dbm);
        let stats = synth_coupling(&params, &SynthSpec::default(), seed).unwrap();
        let (alloc, st) = mm_solve(&stats, &params, &cfg, None).unwrap();
        assert!(st.converged);
        assert!(alloc.total() <= params.pmax * (1.0 + 1e-9));
        assert!(alloc.rows().iter().flatten().all(|v| *v >= 0.0));
        assert!(st.re_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(st.re() > st.re_trace[0]);
        assert!(st.stationarity < 1e-3, "stationarity {}", st.stationarity);
        let (re, _) = de_re_and_se(&stats, &alloc, &params, &cfg).unwrap();
        assert_eq!(re, st.re());
    }
}

#[test]
fn single_precision_follows_double() {
    let p64 = desk(8, 30.0);
    let stats64 = synth_coupling(&p64, &SynthSpec::default(), 2).unwrap();
    let (_, st64) = mm_solve(&stats64, &p64, &SolverConfig64::default(), None).unwrap();

    let p32 = SystemParams32::reference(8, vec![2; 4]);
    let stats32 = ChannelStats32::new(
        stats64
            .matrices()
            .iter()
            .map(|w| {
                let rows: Vec<Vec<f32>> = (0..w.rows())
                    .map(|n| w.row(n).iter().map(|v| *v as f32).collect())
                    .collect();
                CouplingMatrix::from_rows(&rows).unwrap()
            })
            .collect(),
    )
    .unwrap();
    let cfg32 = SolverConfig32 {
        eps1: 1e-5,
        eps2: 1e-4,
        eps3: 1e-5,
        eps4: 1e-6,
        eps5: 1e-5,
        ..SolverConfig32::default()
    };
    let (alloc32, st32) = mm_solve(&stats32, &p32, &cfg32, None).unwrap();
    assert!(alloc32.total() <= p32.pmax * (1.0 + 1e-5));
    let gap = relative_gap(st32.re() as f64, st64.re());
    assert!(gap < 1e-3, "f32 {} vs f64 {}", st32.re(), st64.re());
}

#[test]
fn without_interference_mm_stops_after_one_step() {
    // One user: the interference term is constant, the minorant is exact and
    // the first MM step already lands on the optimum.
    let cfg = SolverConfig64::default();
    let mut params = SystemParams64::reference(16, vec![2]);
    params.pmax = dbm_to_watt(35.0);
    let stats = synth_coupling(&params, &SynthSpec::default(), 9).unwrap();
    let (_, st) = mm_solve(&stats, &params, &cfg, None).unwrap();
    assert!(st.converged);
    assert!(st.ell <= 2, "took {} iterations", st.ell);
    assert!(st.d.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn zero_channel_and_zero_budget_are_trivial() {
    let cfg = SolverConfig64::default();
    let params = desk(4, 30.0);
    let stats = ChannelStats64::zeros(4, &params.n);
    let (alloc, st) = mm_solve(&stats, &params, &cfg, None).unwrap();
    assert_eq!(alloc.total(), 0.0);
    assert_eq!(st.re(), 0.0);
    assert_eq!(st.ell, 1);

    let mut params = desk(4, 30.0);
    params.pmax = 0.0;
    let stats = synth_coupling(&params, &SynthSpec::default(), 1).unwrap();
    let (alloc, _) = mm_solve(&stats, &params, &cfg, None).unwrap();
    assert_eq!(alloc.total(), 0.0);
}

#[test]
fn matches_the_grid_on_a_two_beam_instance() {
    let cfg = SolverConfig64::default();
    let params = SystemParams64::reference(2, vec![1, 1]);
    let spec = SynthSpec {
        support_fraction: 1.0,
        ..SynthSpec::default()
    };
    let stats = synth_coupling(&params, &spec, 0).unwrap();
    let (_, st) = mm_solve(&stats, &params, &cfg, None).unwrap();
    let (_, grid) = grid_search_re(&stats, &params, 25, &cfg).unwrap();
    assert!((grid - st.re()) / grid <= 1e-3);
}

#[test]
fn waterfill_agrees_with_the_reference_solver() {
    let cfg = SolverConfig64::default();
    let params = desk(16, 30.0);
    let stats = synth_coupling(&params, &SynthSpec::default(), 6).unwrap();
    let start = PowerAllocation64::uniform(4, 16, params.pmax);
    let problem = Anchor::new(&stats, &start, params.sigma2, &cfg)
        .unwrap()
        .surrogate(&stats, params.sigma2)
        .unwrap();
    for frac in [0.1, 0.5, 1.0] {
        let p_t = frac * params.pmax;
        let wf = problem.waterfill(p_t, &cfg, None).unwrap();
        assert!(wf.kkt_residual <= 1e-6);
        assert!((wf.alloc.total() - p_t).abs() <= 1e-12);
        let (_, reference) = refsolve_inner(&problem, p_t).unwrap();
        assert!(problem.objective(&wf.alloc) >= reference - 1e-5 * reference.abs());
    }
}

#[test]
fn outer_search_slope_matches_finite_differences() {
    let cfg = SolverConfig64::default();
    let params = desk(16, 40.0);
    let stats = synth_coupling(&params, &SynthSpec::default(), 8).unwrap();
    let start = PowerAllocation64::uniform(4, 16, params.pmax);
    let problem = Anchor::new(&stats, &start, params.sigma2, &cfg)
        .unwrap()
        .surrogate(&stats, params.sigma2)
        .unwrap();
    for p_t in [0.5, 2.0, 7.0] {
        let wf = problem.waterfill(p_t, &cfg, None).unwrap();
        let slope = scalar::nats_to_bits(re_derivative(p_t, wf.se_nats, wf.mu_star, &params));
        let re = |p: f64| problem.re_at(p, &params, &cfg).unwrap().0;
        assert!(fd_check(re, slope, p_t, 1e-4 * p_t).unwrap() < 1e-3);
    }
    let search = pt_search(&problem, &params, &cfg, None).unwrap();
    assert!(search.p_opt > 0.0 && search.p_opt <= params.pmax);
    let (re_opt, _) = problem.re_at(search.p_opt, &params, &cfg).unwrap();
    for p in [0.25, 0.5, 0.75, 1.0].map(|f| f * params.pmax) {
        assert!(problem.re_at(p, &params, &cfg).unwrap().0 <= re_opt * (1.0 + 1e-9));
    }
}

#[test]
fn de_tracks_monte_carlo_at_desk_scale() {
    let cfg = SolverConfig64::default();
    let params = desk(32, 30.0);
    let stats = synth_coupling(&params, &SynthSpec::default(), 12).unwrap();
    let (alloc, _) = mm_solve(&stats, &params, &cfg, None).unwrap();
    let report = de_vs_mc_report(&stats, &alloc, &params, 1000, 5).unwrap();
    assert!(report.gap < 0.02, "gap {}", report.gap);
    assert!(report.details.contains_key("se_mc"));
}
