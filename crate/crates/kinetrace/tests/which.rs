use kinetrace::eval::*;

#[test]
#[ignore]
fn which_scenario_dies() {
    for scenario in Scenario::ALL {
        eprintln!("--- {}", scenario.name());
        let _ = generate_synthetic(&SyntheticOptions {
            scenario,
            n_frames: scenario.min_frames().max(14),
            fps: 10.0,
            noise_px: 0.0,
            seed: 3,
        });
        eprintln!("    ok");
    }
}
