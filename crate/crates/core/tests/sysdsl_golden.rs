use nesp_core::sysdsl::parse_expr;
use nesp_core::NespError;

fn fixtures() -> Vec<(String, String)> {
    include_str!("data/golden_exprs.txt")
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (src, tree) = l.split_once(" => ").expect("fixture line needs ' => '");
            (src.to_string(), tree.to_string())
        })
        .collect()
}

#[test]
fn thirty_golden_trees() {
    let fx = fixtures();
    assert_eq!(fx.len(), 30);
    for (src, tree) in fx {
        let e = parse_expr(&src).unwrap_or_else(|e| panic!("{src}: {e}"));
        assert_eq!(e.to_sexpr(), tree, "{src}");
        let printed = e.to_string();
        assert_eq!(parse_expr(&printed).unwrap(), e, "{src} printed as {printed}");
    }
}

#[test]
fn error_positions() {
    let cases = [("1 +", 4), ("2 ** 3", 4), ("sin(x1", 7), ("x1 x2", 4), ("3 @ 4", 3), ("pow(1, 2, 3)", 1)];
    for (src, col) in cases {
        match parse_expr(src) {
            Err(NespError::Parse { line: 1, col: c, .. }) => assert_eq!(c, col, "{src}"),
            other => panic!("{src}: {other:?}"),
        }
    }
}
