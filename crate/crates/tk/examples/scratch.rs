use tk::harness::*;
fn main() {
    let mut spec = ExperimentSpec::default();
    spec.attack.active_trials = 50;
    spec.attack.passive_trials = 12;
    match run_attack_suite(&spec) {
        Ok(out) => {
            for r in &out.rows {
                println!("{:<16} {:<22} {:<10} {:>8.3}", r.suite, r.config, r.metric, r.value);
            }
        }
        Err(e) => eprintln!("FAILED: {e}"),
    }
}
