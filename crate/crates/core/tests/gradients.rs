use enfnet::checks;

#[test]
fn every_registered_check_is_under_tolerance() {
    let mut failures = Vec::new();
    for name in checks::names() {
        let rep = checks::run(name).unwrap();
        assert!(rep.coords_checked > 0, "{name} checked nothing");
        if rep.max_rel_error >= 1e-4 {
            failures.push(format!("{name}: {:.3e} at {:?}", rep.max_rel_error, rep.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn end_to_end_covers_every_parameter_tensor() {
    let rep = checks::run("end_to_end").unwrap();
    assert!(rep.coords_checked > 400, "{rep:?}");
    assert!(rep.kinks_skipped * 10 < rep.coords_checked, "{rep:?}");
}
