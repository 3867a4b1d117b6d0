//! Sweep tables: `xi,value,stderr,feasible_frac`, one row per design, sorted
//! by design. Multi-dimensional designs are joined with `;`.

use std::fmt::Write as _;
use std::path::Path;

use crate::design::SweepRow;
use crate::error::{Error, Result};

pub const SWEEP_HEADER: &str = "xi,value,stderr,feasible_frac";

/// Shortest decimal form of `x` rounded to `digits` significant digits:
/// `5`, `0.25`, `1.234567891e-07`.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    } else {
        format!("{}e{exp}", trim(mant))
    }
}

fn xi_key(xi: &[f64]) -> String {
    xi.iter().map(|&v| fmt_sig(v, 10)).collect::<Vec<_>>().join(";")
}

pub fn sweep_csv_string(rows: &[SweepRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("sweep has no rows".into()));
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.xi.partial_cmp(&b.xi).unwrap_or(std::cmp::Ordering::Equal));
    let mut s = String::new();
    s.push_str(SWEEP_HEADER);
    s.push('\n');
    for r in sorted {
        let _ = writeln!(s, "{},{},{},{}", xi_key(&r.xi), fmt_sig(r.value, 10), fmt_sig(r.stderr, 10), fmt_sig(r.feasible_frac, 10));
    }
    Ok(s)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let text = sweep_csv_string(rows)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a sweep table back into rows; error fields are not stored.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::InvalidArgument("missing sweep header".into()));
    }
    let num = |t: &str| t.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number `{t}`")));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::InvalidArgument(format!("expected 4 fields in `{l}`")));
            }
            Ok(SweepRow {
                xi: f[0].split(';').map(num).collect::<Result<_>>()?,
                value: num(f[1])?,
                stderr: num(f[2])?,
                feasible_frac: num(f[3])?,
                error: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(xi: f64, value: f64) -> SweepRow {
        SweepRow { xi: vec![xi], value, stderr: 0.01, feasible_frac: 1.0, error: None }
    }

    #[test]
    fn single_row_format() {
        let s = sweep_csv_string(&[SweepRow { xi: vec![5.0], value: 0.25, stderr: 0.01, feasible_frac: 1.0, error: None }]).unwrap();
        assert_eq!(s, "xi,value,stderr,feasible_frac\n5,0.25,0.01,1\n");
    }

    #[test]
    fn rows_are_sorted_and_2d_designs_joined() {
        let s = sweep_csv_string(&[row(3.0, 1.0), row(1.0, 2.0), row(2.0, 3.0)]).unwrap();
        let xs: Vec<&str> = s.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(xs, ["1", "2", "3"]);
        let r = SweepRow { xi: vec![-4.0, 1.3333333333333333], value: f64::NAN, stderr: f64::NAN, feasible_frac: 0.0, error: Some("x".into()) };
        assert_eq!(sweep_csv_string(&[r]).unwrap().lines().nth(1).unwrap(), "-4;1.333333333,NaN,NaN,0");
        assert!(sweep_csv_string(&[]).is_err());
    }

    #[test]
    fn formatting_examples() {
        assert_eq!(fmt_sig(1.0 / 3.0, 10), "0.3333333333");
        assert_eq!(fmt_sig(-123456.789, 10), "-123456.789");
        assert_eq!(fmt_sig(1.5e-9, 10), "1.5e-9");
        assert_eq!(fmt_sig(2.0e20, 10), "2e20");
        assert_eq!(fmt_sig(9.9999999999, 10), "10");
    }

    #[test]
    fn fifteen_row_sweep_parses_back() {
        let rows: Vec<SweepRow> = (1..=15).map(|d| row(d as f64, (d as f64).sqrt() * 0.123456789123)).collect();
        let text = sweep_csv_string(&rows).unwrap();
        let back = read_sweep_csv(&text).unwrap();
        assert_eq!(back.len(), 15);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.xi, b.xi);
            assert!((a.value - b.value).abs() <= 5e-10 * a.value.abs());
        }
        assert_eq!(sweep_csv_string(&back).unwrap(), text);
    }

    proptest! {
        #[test]
        fn sig_format_is_stable(x in -1e30f64..1e30) {
            let s = fmt_sig(x, 10);
            let y: f64 = s.parse().unwrap();
            prop_assert!((x - y).abs() <= 5e-10 * x.abs());
            prop_assert_eq!(fmt_sig(y, 10), s);
        }
    }
}
