use proptest::prelude::*;
use tube_il::evalbench::*;
use tube_il::expert::{build_expert, Expert, ExpertConfig};
use tube_il::il::{run_il, Augmentation, ExpertController, IlConfig, IlTask, Method, PolicyController};
use tube_il::linmodel::CostWeights;
use tube_il::quadsim::{make_reference, Action, DisturbanceSpec, Environment, Episode, QuadParams, ReferenceParams, State};
use tube_il::rtmpc::ReferenceWindow;
use tube_il::Result;

fn setup() -> (IlTask, Expert) {
    let params = QuadParams::default();
    let env = Environment::new(params.clone(), 0.1, 20).unwrap();
    let reference = make_reference(&ReferenceParams::default(), &params, 0.1).unwrap();
    let mut cfg = ExpertConfig::default();
    cfg.tube.n_rollouts = 2000;
    let expert = build_expert(&env, &cfg).unwrap();
    let task = IlTask { env, reference, source: DisturbanceSpec::none(), randomization: DisturbanceSpec::uniform(0.3) };
    (task, expert)
}

fn one_step(x: State, r: [f64; 6], u: Action) -> Episode {
    Episode { states: vec![x, x], actions: vec![u], references: vec![r], disturbances: vec![[0.0; 3]], stage_costs: vec![0.0], violation: false, failure: None }
}

#[test]
fn stage_cost_examples() {
    let trim = [9.81, 0.0, 0.0];
    let w = CostWeights::from_diagonals(&[2.0; 8], &[1.0, 1.0, 1.0]).unwrap();
    let r = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
    let on_ref = one_step([1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0], r, trim);
    assert_eq!(stage_cost(&on_ref, &w, &trim), 0.0);
    let off = one_step([4.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0], r, trim);
    assert!((stage_cost(&off, &w, &trim) - 18.0).abs() < 1e-12);
}

fn expert_fn(_t: usize, x: &State, _w: &ReferenceWindow) -> Result<Action> {
    Ok([1.0 + x[0].abs(), 2.0, x[1]])
}

fn fake_episode() -> Vec<Episode> {
    let states: Vec<State> = (0..6).map(|k| [k as f64 * 0.1, -0.2 * k as f64, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).collect();
    let n = states.len() - 1;
    vec![Episode { actions: vec![[0.0; 3]; n], references: vec![[0.0; 6]; n], disturbances: vec![[0.0; 3]; n], stage_costs: vec![0.0; n], states, violation: false, failure: None }]
}

#[test]
fn expert_gap_examples() {
    let (task, _) = setup();
    let eps = fake_episode();
    let mut same = expert_fn;
    let mut e = expert_fn;
    let g = expert_gap(&mut same, &mut e, &eps, &task.reference, 20).unwrap();
    assert_eq!(g.percent, 0.0);
    assert_eq!(g.steps, 5);
    let mut scaled = |t: usize, x: &State, w: &ReferenceWindow| -> Result<Action> {
        let u = expert_fn(t, x, w)?;
        Ok(u.map(|v| 1.1 * v))
    };
    let g = expert_gap(&mut scaled, &mut e, &eps, &task.reference, 20).unwrap();
    assert!((g.percent - 10.0).abs() < 1e-9, "{}", g.percent);
    let mut zero = |_t: usize, _x: &State, _w: &ReferenceWindow| -> Result<Action> { Ok([0.0; 3]) };
    let g = expert_gap(&mut same, &mut zero, &eps, &task.reference, 20).unwrap();
    assert_eq!(g.skipped_small, 5);
    assert!(expert_gap(&mut same, &mut e, &[], &task.reference, 20).is_err());
}

proptest! {
    #[test]
    fn shift_identity_holds(js in 0.0f64..1e3, jt in 0.0f64..1e3) {
        let d = ShiftDecomposition::from_losses(js, jt);
        prop_assert!(d.identity_error() <= 1e-12);
    }
}

#[test]
fn demonstration_efficiency_definition() {
    assert_eq!(demonstrations_to_full_success(&[0.2, 1.0, 0.9, 1.0]), Some(2));
    assert_eq!(demonstrations_to_full_success(&[0.2, 0.9]), None);
}

#[test]
fn covariate_shift_of_plain_cloning_is_positive() {
    let (task, mut expert) = setup();
    // states near a crash make the expert QP slow; the sign check does not need full accuracy
    let mut setup_qp = expert.mpc.setup().clone();
    setup_qp.qp.max_iter = 2000;
    expert.mpc = tube_il::rtmpc::TubeMpc::robust(setup_qp, expert.lqr.k.clone(), expert.tube().clone(), Default::default()).unwrap();
    let run = run_il(&IlConfig::new(Method::Bc, Augmentation::None), 1, &task, &expert).unwrap();
    let policy = &run.policies[0];
    let models = DomainModels::default();
    let src = evaluate_policy(policy, &task, &models.source, &expert.weights, 3, 1).unwrap();
    let tgt = evaluate_policy(policy, &task, &models.t1, &expert.weights, 3, 1).unwrap();
    let mut p = PolicyController { policy, horizon: 20 };
    let mut e = ExpertController { mpc: expert.fresh() };
    let same = covariate_shift_gap(&mut p, &mut e, &src, &src, &task.reference, 20).unwrap();
    assert_eq!(same.gap, 0.0);
    let d = covariate_shift_gap(&mut p, &mut e, &src, &tgt, &task.reference, 20).unwrap();
    assert!(d.identity_error() <= 1e-12);
    assert!(d.gap > 0.0, "{d:?}");
}

#[test]
fn augmented_policy_cost_is_not_below_expert() {
    let (task, expert) = setup();
    let run = run_il(&IlConfig::new(Method::Bc, Augmentation::SaSparse), 1, &task, &expert).unwrap();
    let models = DomainModels::default();
    let trim = task.env.params.hover_input();
    let pol = evaluate_policy(&run.policies[0], &task, &models.t1, &expert.weights, 20, 3).unwrap();
    let exp = evaluate_expert(&expert, &task, &models.t1, 20, 3).unwrap();
    assert_eq!(success_rate(&pol), 1.0);
    let mp: f64 = pol.iter().map(|e| stage_cost(e, &expert.weights, &trim)).sum::<f64>() / 20.0;
    let me: f64 = exp.iter().map(|e| stage_cost(e, &expert.weights, &trim)).sum::<f64>() / 20.0;
    assert!(mp >= 0.95 * me, "policy {mp} expert {me}");
    for e in &exp {
        assert!((stage_cost(e, &expert.weights, &trim) - e.total_cost()).abs() < 1e-9 * e.total_cost().max(1.0));
    }
}

fn spec(methods: Vec<IlConfig>, n: usize) -> ComparisonSpec {
    ComparisonSpec {
        methods,
        domains: vec![Domain::Source, Domain::TargetT1],
        models: DomainModels::default(),
        n_demos_max: n,
        seeds: vec![0, 1],
        eval_episodes: 3,
        eval_seed: 11,
        gap_every_demo: false,
    }
}

#[test]
fn comparison_table_shape_and_order_independence() {
    let (task, expert) = setup();
    let s = spec(vec![IlConfig::new(Method::Bc, Augmentation::SaSparse)], 2);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let two = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let a = one.install(|| run_comparison(&s, &task, &expert, "abc")).unwrap();
    let b = two.install(|| run_comparison(&s, &task, &expert, "abc")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.results.len(), 2);
    assert_eq!(a.rows.len(), 2 * 2);
    assert!(a.rows.iter().all(|r| r.config_hash == "abc" && r.seeds == "0 1" && (0.0..=1.0).contains(&r.success_rate)));
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4);
    assert_eq!(a.summary()["table"].as_array().unwrap().len(), 2);
}

#[test]
fn comparison_preconditions() {
    let (task, expert) = setup();
    assert!(run_comparison(&spec(vec![IlConfig::default()], 0), &task, &expert, "").is_err());
    assert!(run_comparison(&spec(vec![], 1), &task, &expert, "").is_err());
}
