use haif_core::logging::JsonlLog;
use haif_core::runner::run_episode;
use haif_core::scenario::Scenario;
use haif_core::sim::episode::{generate_episode, TaskKind};

#[test]
fn dbg_bench_failures() {
    let mut scenario = Scenario::default();
    scenario.runner.ground_truth_map = true;
    for seed in 0..10u64 {
        let ep = generate_episode(TaskKind::TidyHouse, seed).unwrap();
        let log = JsonlLog::create(std::path::Path::new(&format!("/tmp/bench_{seed}.jsonl"))).unwrap();
        let o = run_episode(&ep, &scenario, log, false);
        let n = o.stage_flags.iter().filter(|f| **f).count();
        eprintln!("seed {seed}: {n}/10");
    }
}
