mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in [3, 8, 17, 21] {
        for (name, spec, batch) in common::grad_check_nets() {
            let r = common::grad_check(name, spec, batch, seed);
            assert!(r.params <= 200, "{name} has {} params", r.params);
            assert_eq!(r.failures, 0, "{name} seed {seed}: {} of {} disagree", r.failures, r.checked);
            assert!(r.kinks * 20 < r.checked, "{name} seed {seed}: {} kinks", r.kinks);
        }
    }
}
