//! Problem files: CSV with header `y,l,x`, one observation per row.
//!
//! `y` is a non-negative integer count, `l` a positive exposure and `x` the
//! group label (0 = control, 1 = treatment). Columns may appear in any order.

use anyhow::{bail, Context, Result};
use nbscreen::Problem;
use std::io::Read;
use std::path::Path;

pub fn read_problem<R: Read>(input: R) -> Result<Problem> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().context("reading the header row")?.clone();
    let column = |name: &str| {
        header.iter().position(|h| h == name).with_context(|| format!("missing column `{name}` (expected header y,l,x)"))
    };
    let (iy, il, ix) = (column("y")?, column("l")?, column("x")?);

    let (mut counts, mut exposures, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("line {line}"))?;
        let field = |idx: usize, name: &str| {
            rec.get(idx).with_context(|| format!("line {line}: field `{name}` is missing"))
        };
        let y = field(iy, "y")?;
        let y: u64 = y.parse().with_context(|| format!("line {line}: field `y` must be a non-negative integer, got `{y}`"))?;
        let l = field(il, "l")?;
        let l: f64 = l.parse().with_context(|| format!("line {line}: field `l` must be a number, got `{l}`"))?;
        if !(l.is_finite() && l > 0.0) {
            bail!("line {line}: field `l` must be finite and > 0, got {l}");
        }
        let x = match field(ix, "x")? {
            "0" => false,
            "1" => true,
            other => bail!("line {line}: field `x` must be 0 or 1, got `{other}`"),
        };
        counts.push(y);
        exposures.push(l);
        labels.push(x);
    }
    if counts.is_empty() {
        bail!("the problem file has no observations");
    }
    Ok(Problem::new(counts, exposures, labels)?)
}

pub fn load_problem(path: &Path) -> Result<Problem> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_problem(file).with_context(|| format!("reading {}", path.display()))
}

/// Writes a problem in the same format; floats use shortest round-trip text,
/// so reading the output gives back the identical problem.
#[cfg(test)]
pub fn write_problem(p: &Problem) -> String {
    let mut s = String::from("y,l,x\n");
    for (y, l, x) in p.observations() {
        s.push_str(&format!("{y},{l:?},{}\n", u8::from(x)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_observations_in_any_column_order() {
        let p = read_problem("x,y,l\n0,5,1e4\n1, 7 ,2.5\n0,0,1\n".as_bytes()).unwrap();
        assert_eq!(p.counts(), &[5, 7, 0]);
        assert_eq!(p.exposures(), &[1e4, 2.5, 1.0]);
        assert_eq!(p.labels(), &[false, true, false]);
    }

    #[test]
    fn round_trips_without_loss() {
        let p = Problem::new(vec![3, 0, 12, 1], vec![0.1 + 0.2, 1e4, 9876.54321, 1e-300], vec![false, true, true, false]).unwrap();
        assert_eq!(read_problem(write_problem(&p).as_bytes()).unwrap(), p);
    }

    #[test]
    fn errors_name_the_offending_field() {
        let cases = [
            ("y,l\n1,2\n", "`x`"),
            ("y,l,x\n-1,2,0\n", "`y`"),
            ("y,l,x\n1,0,0\n", "`l`"),
            ("y,l,x\n1,abc,0\n", "`l`"),
            ("y,l,x\n1,2,2\n", "`x`"),
            ("y,l,x\n", "no observations"),
        ];
        for (text, needle) in cases {
            let err = format!("{:#}", read_problem(text.as_bytes()).unwrap_err());
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }
}
