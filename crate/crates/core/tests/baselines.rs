use fas_gnn::baselines::*;
use fas_gnn::channel::*;
use fas_gnn::dataset::sample_dataset;
use fas_gnn::{ArchConfig, FasError, SystemConfig, TwoStageModel};

fn coarse() -> GridSpec {
    GridSpec {
        alpha_points: 6,
        power_points: 6,
        position_points: 12,
        ..GridSpec::default()
    }
}

#[test]
fn grid_search_dominates_equal_power_baselines() {
    let cfg = SystemConfig::reference(4, 2);
    let x = equidistant_positions(&cfg, EquidistantMode::FullAperture);
    for s in &sample_dataset(&cfg, 30, 1).samples {
        let g = channel_matrix(&x, s, &cfg).unwrap();
        for kind in [Utility::SumRate, Utility::EnergyEfficiency] {
            let best = hzf_grid_search(&g, &cfg, &GridSpec::default(), kind).unwrap();
            let mrt = utility(&mrt_equal_power(&g, &cfg).unwrap(), &g, &cfg, kind).unwrap();
            let zf = utility(&zf_equal_power(&g, &cfg).unwrap(), &g, &cfg, kind).unwrap();
            assert!(best.utility >= mrt - 1e-9 && best.utility >= zf - 1e-9);
            assert!(check_feasibility(&best.beams, &x, &cfg).passed());
        }
    }
}

#[test]
fn finer_grids_never_do_worse() {
    let cfg = SystemConfig::reference(4, 2);
    let x = equidistant_positions(&cfg, EquidistantMode::FullAperture);
    let fine = GridSpec {
        alpha_points: 21,
        power_points: 21,
        ..GridSpec::default()
    };
    for s in &sample_dataset(&cfg, 10, 2).samples {
        let g = channel_matrix(&x, s, &cfg).unwrap();
        let a = hzf_grid_search(&g, &cfg, &GridSpec::default(), Utility::SumRate).unwrap();
        let b = hzf_grid_search(&g, &cfg, &fine, Utility::SumRate).unwrap();
        assert!(b.utility >= a.utility - 1e-12);
    }
}

#[test]
fn single_user_grid_search_uses_full_power() {
    let cfg = SystemConfig::reference(4, 1);
    let x = equidistant_positions(&cfg, EquidistantMode::FullAperture);
    let s = ChannelSample::new(vec![0.9]).unwrap();
    let g = channel_matrix(&x, &s, &cfg).unwrap();
    let best = hzf_grid_search(&g, &cfg, &GridSpec::default(), Utility::SumRate).unwrap();
    assert_eq!(best.hzf.unwrap().p, vec![cfg.p_max]);
    let expected = (1.0 + cfg.p_max * 4.0 / cfg.noise_power).log2();
    assert!((best.utility - expected).abs() < 1e-9);
}

#[test]
fn single_user_oracle_is_position_independent() {
    let cfg = SystemConfig::reference(2, 1);
    let s = ChannelSample::new(vec![1.3]).unwrap();
    let values: Vec<f64> = position_candidates(&cfg, 25)
        .unwrap()
        .iter()
        .map(|x| {
            let g = channel_matrix(x, &s, &cfg).unwrap();
            hzf_grid_search(&g, &cfg, &coarse(), Utility::SumRate)
                .unwrap()
                .utility
        })
        .collect();
    assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-9));
}

#[test]
fn oracle_dominates_fixed_positions() {
    let cfg = SystemConfig::reference(2, 2);
    let x = equidistant_positions(&cfg, EquidistantMode::FullAperture);
    for s in &sample_dataset(&cfg, 8, 3).samples {
        let oracle = position_grid_oracle(s, &cfg, &coarse(), Utility::SumRate).unwrap();
        let g = channel_matrix(&x, s, &cfg).unwrap();
        let fixed = hzf_grid_search(&g, &cfg, &coarse(), Utility::SumRate).unwrap();
        assert!(oracle.utility >= fixed.utility - 1e-12);
        assert!(check_feasibility(&oracle.beams, &oracle.positions, &cfg).passed());
    }
}

#[test]
fn oracle_candidates_are_feasible() {
    let cfg = SystemConfig::reference(3, 2);
    let xs = position_candidates(&cfg, 15).unwrap();
    assert!(xs.len() > 15);
    for x in &xs {
        let (a, b, c) = check_positions(x, &cfg);
        assert!(a.passed && b.passed && c.passed, "{x:?}");
    }
    assert!(position_candidates(&SystemConfig::reference(4, 2), 5).is_err());
}

#[test]
fn budget_violations_report_the_requirement() {
    let cfg = SystemConfig::reference(4, 3);
    let x = equidistant_positions(&cfg, EquidistantMode::FullAperture);
    let g = channel_matrix(&x, &ChannelSample::new(vec![0.4, 1.0, 2.0]).unwrap(), &cfg).unwrap();
    let tight = GridSpec {
        budget: 1000,
        ..GridSpec::default()
    };
    match hzf_grid_search(&g, &cfg, &tight, Utility::SumRate) {
        Err(FasError::Budget { required, budget }) => assert!(required > budget && budget == 1000),
        other => panic!("expected a budget error, got {other:?}"),
    }
}

#[test]
fn comparison_table_is_deterministic_and_complete() {
    let cfg = SystemConfig::reference(4, 2);
    let model = TwoStageModel::new(&ArchConfig::desk(), 4, 0).unwrap();
    let data = sample_dataset(&cfg, 6, 4);
    let cells = Method::table_cells();
    let a = compare_table(
        &cells,
        Some(&model),
        &data.samples,
        &cfg,
        Utility::SumRate,
        &coarse(),
    )
    .unwrap();
    let b = compare_table(
        &cells,
        Some(&model),
        &data.samples,
        &cfg,
        Utility::SumRate,
        &coarse(),
    )
    .unwrap();
    for (r, s) in a.rows.iter().zip(&b.rows) {
        assert_eq!(r.utilities, s.utilities);
    }
    assert_eq!(a.rows.len(), 4);
    let text = a.to_text();
    assert!(text.contains("Stage-1 positions") && text.contains("HZF grid search"));
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);

    let single = [Method {
        positions: PositionMethod::Stage1,
        beams: BeamMethod::Stage2,
    }];
    let t = compare_table(
        &single,
        Some(&model),
        &data.samples,
        &cfg,
        Utility::SumRate,
        &coarse(),
    )
    .unwrap();
    let m = fas_gnn::evaluate(&model, &data.samples, &cfg, Utility::SumRate).unwrap();
    assert!((t.rows[0].mean_utility - m.mean_utility).abs() < 1e-12);
    assert!(compare_table(
        &single,
        None,
        &data.samples,
        &cfg,
        Utility::SumRate,
        &coarse()
    )
    .is_err());
}
