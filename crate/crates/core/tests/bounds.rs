use nbafl_core::bounds::{
    estimate_regularity, optimal_k, theorem2_bound, theorem3_bound, BoundInputs, LossRegularity, RegularityConfig,
};
use nbafl_core::data::SyntheticTask;
use nbafl_core::learning::{LossSpec, ModelKind, Objective, ShardObjective};
use nbafl_core::rng::{stream, Purpose};

fn inputs(n_clients: usize, mu: f64) -> BoundInputs {
    BoundInputs {
        n_clients,
        shard_size: 100,
        clip_c: 0.5,
        delta: 0.01,
        mu,
        uplink: 1,
        reg: LossRegularity::from_constants(1.0, 1.0, 0.5, 1.0, 1.0).unwrap(),
    }
}

#[test]
fn theorem3_at_k_equals_n_is_comparable_to_theorem2() {
    // The two bounds use different coefficient sets, so only the order of
    // magnitude is expected to agree.
    let inp = inputs(10, 8.0);
    for t in [5u32, 20, 80] {
        let two = theorem2_bound(t, 60.0, &inp).unwrap();
        let three = theorem3_bound(t, 60.0, 10, &inp).unwrap();
        assert!(two.is_finite() && three.is_finite());
        let ratio = three / two;
        assert!(ratio > 0.1 && ratio < 10.0, "T = {t}: theorem3 / theorem2 = {ratio}");
    }
}

#[test]
fn optimal_k_skips_undefined_points() {
    let inp = inputs(50, 40.0);
    let best = optimal_k(&[5, 10, 20, 30, 40, 50], |k| theorem3_bound(150, 60.0, k as usize, &inp)).unwrap();
    assert!(best.profile.values.iter().any(Option::is_none));
    assert!(best.profile.values.iter().any(Option::is_some));
    let defined = best.profile.grid.iter().zip(&best.profile.values).filter(|(_, v)| v.is_some());
    assert!(defined.map(|(k, _)| *k).any(|k| k == best.best));
}

#[test]
fn estimated_constants_are_consistent_on_a_logistic_task() {
    let task = SyntheticTask::new(5, 3, 2.0, &mut stream(3, Purpose::SynthData, 0, 0)).unwrap();
    let shards: Vec<_> = (0..4).map(|i| task.sample(60, &mut stream(3, Purpose::SynthData, 1, i))).collect();
    let spec = LossSpec::new(ModelKind::MultinomialLogistic, 0.05).unwrap();
    let objs: Vec<ShardObjective> = shards.iter().map(|s| ShardObjective::new(spec, s)).collect();
    let w0 = vec![0.0; objs[0].dim()];
    let reg = estimate_regularity(&objs, &w0, &RegularityConfig::default(), &mut stream(3, Purpose::Probe, 0, 0)).unwrap();
    // A ridge weight of 0.05 makes F 0.1-strongly convex: PL holds with l >= 0.1
    // and smoothness cannot fall below it.
    assert!(reg.l >= 0.1 * 0.99, "l = {}", reg.l);
    assert!(reg.rho >= reg.l);
    assert!(reg.dissimilarity >= 1.0);
    assert!(reg.theta > 0.0 && reg.f_star < objs.iter().map(|o| o.value(&w0)).sum::<f64>() / 4.0);
    assert_eq!(reg.divergence.len(), 4);
    assert_eq!(reg.probes_used, 64);
}
