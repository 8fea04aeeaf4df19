//! Observation CSV files: header `t,y1,...,yd`, one row per time.

use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use weakode::smoother::Observations;

pub fn write_observations<W: Write>(out: W, obs: &Observations) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let d = obs.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|j| format!("y{j}")));
    w.write_record(&header)?;
    let y = obs.values();
    for (i, t) in obs.times().iter().enumerate() {
        let mut row = vec![fmt17(*t)];
        row.extend((0..d).map(|j| fmt17(y[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// 17 significant digits round-trips every f64
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_observations<R: Read>(input: R) -> Result<Observations> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers().context("reading the header")?.clone();
    if header.len() < 2 || &header[0] != "t" {
        bail!("header must be `t,y1,...,yd`");
    }
    for (j, h) in header.iter().skip(1).enumerate() {
        if h != format!("y{}", j + 1) {
            bail!("unexpected column `{h}`, expected `y{}`", j + 1);
        }
    }
    let d = header.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("row {}", line + 1))?;
        if rec.len() != d + 1 {
            bail!("row {} has {} fields, expected {}", line + 1, rec.len(), d + 1);
        }
        let parse = |k: usize| -> Result<f64> {
            let v: f64 = rec[k].parse().with_context(|| format!("row {}: `{}` is not a number", line + 1, &rec[k]))?;
            if !v.is_finite() {
                bail!("row {}: non-finite value", line + 1);
            }
            Ok(v)
        };
        times.push(parse(0)?);
        for k in 1..=d {
            values.push(parse(k)?);
        }
    }
    if times.is_empty() {
        bail!("no observations");
    }
    let y = DMatrix::from_row_slice(times.len(), d, &values);
    Ok(Observations::new(times, y)?)
}
