use std::time::Instant;

use mnsp_core::gradcheck::{run_gradcheck, GradcheckOptions, TOLERANCE};
use mnsp_core::RunConfig;

#[test]
fn tiny_profile_gradients_match_finite_differences() {
    let start = Instant::now();
    let report = run_gradcheck(&RunConfig::tiny(), GradcheckOptions::default()).unwrap();
    println!("{}", report.table());
    println!("elapsed {:.1?}", start.elapsed());
    assert!(report.all_passed());
    for name in ["pretrain/nsp", "pretrain/mim", "pretrain/mla", "pretrain/total", "finetune/ce"] {
        let r = report.get(name).unwrap();
        assert!(r.checked > 100, "{name} checked only {}", r.checked);
        assert!(r.max_rel_error <= TOLERANCE);
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let opts = GradcheckOptions {
        samples_per_array: 0,
        inject_fault: true,
        ..Default::default()
    };
    let report = run_gradcheck(&RunConfig::tiny(), opts).unwrap();
    assert!(!report.all_passed());
    assert!(!report.get("op/gelu").unwrap().passed);
    assert!(report.get("op/matmul").unwrap().passed);
    // The hook is scoped to the run.
    let clean = run_gradcheck(
        &RunConfig::tiny(),
        GradcheckOptions {
            samples_per_array: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(clean.all_passed(), "{}", clean.table());
}
