mod support;

use support::gradients::check_instances;

#[test]
fn full_student_path_matches_finite_differences() {
    let r = check_instances(24);
    println!("{r:?}");
    assert!(r.instances >= 20, "{r:?}");
    assert!(r.worst < 1e-3, "{r:?}");
    assert!(r.unstable * 4 < r.compared, "{r:?}");
}
