use kinetrace::costs::{build_caches, CostWeights, EvalContext, PosePrior, Problem, Stage};
use kinetrace::eval::{evaluate, generate_synthetic, Scenario, SyntheticOptions};
use kinetrace::solver::{initialize, run_stage, SolveOptions};
use std::collections::BTreeMap;

fn breakdown(problem: &Problem, state: &kinetrace::costs::TrajectoryState, tag: &str) {
    let caches = build_caches(problem, state);
    let ctx = EvalContext {
        problem,
        state,
        caches: &caches,
    };
    let mut by_label: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for b in problem.build_blocks(Stage::Full) {
        let mut r = vec![0.0; b.rows()];
        b.eval(&ctx, &mut r);
        let cost = 0.5 * r.iter().map(|x| x * x).sum::<f64>();
        let e = by_label.entry(b.label()).or_insert((0.0, 0.0, 0));
        e.0 += cost;
        if cost > e.1 {
            e.1 = cost;
            e.2 = b.vars().last().map(|v| v.frame).unwrap_or(0);
        }
    }
    eprintln!("--- {tag}");
    for (label, (cost, worst, frame)) in by_label {
        eprintln!("    {label:24} total {cost:12.4e}   worst-frame {frame:3} {worst:remaining$.4e}", remaining = 10);
    }
}

#[test]
#[ignore]
fn trace_lift_solve() {
    let data = generate_synthetic(&SyntheticOptions {
        scenario: Scenario::LiftObject,
        n_frames: 10,
        fps: 10.0,
        noise_px: 0.0,
        seed: 5,
    });
    let prior = PosePrior::from_spec(&PosePrior::synthetic_spec(69, 4, 7)).unwrap();
    let problem =
        Problem::from_measurements(&data.measurements, Some(prior), CostWeights::default())
            .unwrap();

    let truth_state = kinetrace::eval::state_from_solution(&problem, &data.truth);
    breakdown(&problem, &truth_state, "truth");

    let mut state = initialize(&problem);
    let opts = SolveOptions {
        max_iterations: 30,
        ..SolveOptions::default()
    };
    for stage in [Stage::Kinematics, Stage::Forces, Stage::Full] {
        let (next, stats) = run_stage(&problem, stage, state, &opts);
        state = next;
        eprintln!("==> {stats:?}");
        breakdown(&problem, &state, stats.stage.as_str());
    }
    let est = kinetrace::solver::export_solution(&problem, &state, Default::default());
    let report = evaluate(&problem, &data.truth, &est);
    eprintln!("==> {report:?}");
}
