use ssheat::branch::{find_mu_m, first_singular_m, singular_branch, BranchKind};
use ssheat::inverted::{solve_and_classify, Mode};
use ssheat::ProblemParams;

fn pp(n: u32, a: f64) -> ProblemParams {
    ProblemParams::new(n, a).unwrap()
}

#[test]
fn mu_thresholds_increase_and_alternate() {
    let p = pp(3, 1.0);
    let mut prev = 2.0;
    for m in 2..=4 {
        let (bp, c) = find_mu_m(m, &p, 1e-10).unwrap();
        assert_eq!(bp.kind, BranchKind::MuM);
        assert!(bp.shoot > prev, "μ_{m} = {} after {prev}", bp.shoot);
        assert_eq!(c.mode, Mode::Fast);
        assert_eq!(bp.zero_count, m);
        let l1 = c.ltilde1.expect("fast decay coefficient").value;
        assert!(if m % 2 == 0 { l1 > 0.0 } else { l1 < 0.0 }, "m = {m}: L̃₁ = {l1}");
        prev = bp.shoot;
    }
}

#[test]
fn between_thresholds_the_decay_is_slow() {
    let p = pp(3, 1.0);
    let (a, _) = find_mu_m(2, &p, 1e-10).unwrap();
    let (b, _) = find_mu_m(3, &p, 1e-10).unwrap();
    let (sol, c) = solve_and_classify(0.5 * (a.shoot + b.shoot), &p, 1e-10).unwrap();
    assert_eq!(sol.tally.count, 3);
    assert_eq!(c.mode, Mode::Slow);
}

#[test]
fn singular_branches_in_three_dimensions() {
    let p = pp(3, 3.0);
    let m0 = first_singular_m(&p, 1e-10).unwrap();
    assert_eq!(m0, 18);
    let a = singular_branch(m0, &p, 1e-10).unwrap();
    let b = singular_branch(m0 + 1, &p, 1e-10).unwrap();
    assert!(a.point.shoot >= 1.0 && b.point.shoot > a.point.shoot);
    assert_eq!(a.classification.mode, Mode::Slow);
    // The limit alternates in sign with m.
    assert!(a.point.limit > 0.0 && b.point.limit < 0.0);
    for sb in [&a, &b] {
        let w = sb.solution.eval(1e-6).unwrap().0;
        assert!((w - sb.point.shoot).abs() <= 1e-3);
    }
}
