use flowdet_core::gradsuite::{registry, run_suite, write_suite_csv};

#[test]
fn every_registered_case_passes() {
    let rows = run_suite(None, |r, secs| eprintln!("{} {:.2e} {:.1}s", r.name, r.max_rel_err, secs)).unwrap();
    assert_eq!(rows.len(), registry().len());
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn sabotaged_backward_is_caught() {
    for case in registry().iter().filter(|c| ["conv2d", "bilinear_sample", "gate_fuse", "set_loss"].contains(&c.name)) {
        let r = case.run(true);
        assert!(!r.pass, "{} passed with a faulty backward", case.name);
        assert!(r.max_rel_err > 0.05, "{}: {}", case.name, r.max_rel_err);
    }
}

#[test]
fn unknown_sabotage_target_is_rejected() {
    assert!(run_suite(Some("no_such_op"), |_, _| {}).is_err());
}

#[test]
fn csv_has_one_row_per_case() {
    let rows: Vec<_> = registry()
        .iter()
        .filter(|c| c.name == "softmax")
        .map(|c| {
            let r = c.run(false);
            flowdet_core::gradsuite::SuiteRow {
                name: c.name.into(),
                tol: c.tol,
                max_rel_err: r.max_rel_err,
                checked: r.checked,
                pass: r.pass,
                failure: r.failure,
            }
        })
        .collect();
    let mut buf = Vec::new();
    write_suite_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "op,tol,max_rel_err,checked,pass");
    assert!(lines[1].starts_with("softmax,1e-5,") && lines[1].ends_with(",true"), "{}", lines[1]);
}

#[test]
fn case_names_are_unique() {
    let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
    names.sort();
    let n = names.len();
    names.dedup();
    assert_eq!(names.len(), n);
}
