/// `horizon_ms,mpjpe_mm` rows sorted by horizon.
pub fn export_errors(rows: &[(f64, f64)]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = String::from("horizon_ms,mpjpe_mm\n");
    for (h, e) in sorted {
        out.push_str(&format!("{h},{e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(export_errors(&[]), "horizon_ms,mpjpe_mm\n");
        assert_eq!(export_errors(&[(1000.0, 0.0)]), "horizon_ms,mpjpe_mm\n1000,0\n");
        let csv = export_errors(&[(400.0, 2.0), (80.0, 1.0)]);
        assert_eq!(csv.lines().nth(1), Some("80,1"));
    }

    proptest! {
        #[test]
        fn values_roundtrip(rows in prop::collection::vec((0.0f64..1e4, 0.0f64..1e3), 0..10)) {
            let csv = export_errors(&rows);
            let mut parsed: Vec<(f64, f64)> = csv
                .lines()
                .skip(1)
                .map(|l| {
                    let (a, b) = l.split_once(',').unwrap();
                    (a.parse().unwrap(), b.parse().unwrap())
                })
                .collect();
            let mut want = rows.clone();
            want.sort_by(|a, b| a.0.total_cmp(&b.0));
            parsed.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (p, w) in parsed.iter().zip(&want) {
                prop_assert!((p.0 - w.0).abs() <= 1e-12 * w.0.abs().max(1.0));
                prop_assert!((p.1 - w.1).abs() <= 1e-12 * w.1.abs().max(1.0));
            }
            prop_assert_eq!(parsed.len(), want.len());
        }
    }
}
