//! Text and binary formats for fields, coefficient arrays and traces.
//!
//! Floats are written with Rust's shortest round-trip `{:e}` formatting, so a
//! parse followed by a write reproduces a file byte for byte. Binary files are
//! little-endian: a header of `u64` dimensions followed by `f64` payload.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::basis::{Grid, Placement, ScalarField, SpectralCoeffs};
use crate::error::{Error, Result};
use crate::pde_wave::BoundaryTrace;
use crate::synth::NoiseSpec;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("line {line}: bad number {s:?}: {e}")))
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("line {line}: bad index {s:?}: {e}")))
}

fn expect_header<'a>(
    mut lines: impl Iterator<Item = &'a str>,
    header: &str,
) -> Result<()> {
    match lines.next() {
        Some(h) if h.trim_end() == header => Ok(()),
        Some(h) => Err(Error::Parse(format!("expected header {header:?}, found {h:?}"))),
        None => Err(Error::Parse("empty file".into())),
    }
}

fn split_fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != n {
        return Err(Error::Parse(format!(
            "line {lineno}: expected {n} fields, found {}",
            parts.len()
        )));
    }
    Ok(parts)
}

pub fn field_to_csv(f: &ScalarField) -> String {
    let g = f.grid();
    let mut s = String::from("i,j,x,y,value\n");
    for i in 0..g.side() {
        for j in 0..g.side() {
            let _ = writeln!(
                s,
                "{i},{j},{},{},{}",
                fmt_f64(g.x(i)),
                fmt_f64(g.y(j)),
                fmt_f64(f.at(i, j))
            );
        }
    }
    s
}

/// Parses a field CSV. Placement is inferred from the first `y` value.
pub fn field_from_csv(text: &str) -> Result<ScalarField> {
    let mut lines = text.lines();
    expect_header(&mut lines, "i,j,x,y,value")?;
    let mut rows = Vec::new();
    let mut lowered = false;
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let p = split_fields(line, 5, n + 2)?;
        let i = parse_usize(p[0], n + 2)?;
        let j = parse_usize(p[1], n + 2)?;
        let y = parse_f64(p[3], n + 2)?;
        if rows.is_empty() {
            lowered = y < -0.5;
        }
        rows.push((i, j, parse_f64(p[4], n + 2)?));
    }
    let side = (rows.len() as f64).sqrt().round() as usize;
    if side < 2 || side * side != rows.len() {
        return Err(Error::Parse(format!(
            "{} rows do not form a square grid",
            rows.len()
        )));
    }
    let placement = if lowered {
        Placement::Lowered
    } else {
        Placement::Unit
    };
    let grid = Grid::with_placement(side - 1, placement);
    let mut values = vec![f64::NAN; grid.len()];
    for (i, j, v) in rows {
        if i >= side || j >= side {
            return Err(Error::Parse(format!("node ({i}, {j}) outside grid")));
        }
        values[grid.index(i, j)] = v;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Parse("missing grid nodes".into()));
    }
    ScalarField::new(grid, values)
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse("truncated binary header".into()))
}

fn read_f64s(bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    if bytes.len() != 8 * n {
        return Err(Error::Parse(format!(
            "binary payload holds {} bytes, expected {}",
            bytes.len(),
            8 * n
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Field binary: `u64` M, then `(M+1)^2` values in `(i, j)` order.
pub fn field_to_bytes(f: &ScalarField) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * f.values().len());
    push_u64(&mut buf, f.grid().m() as u64);
    push_f64s(&mut buf, f.values());
    buf
}

pub fn field_from_bytes(bytes: &[u8], placement: Placement) -> Result<ScalarField> {
    let m = read_u64(bytes, 0)? as usize;
    if m == 0 {
        return Err(Error::Parse("grid with zero cells".into()));
    }
    let grid = Grid::with_placement(m, placement);
    let values = read_f64s(&bytes[8..], grid.len())?;
    ScalarField::new(grid, values)
}

pub fn coeffs_to_csv(c: &SpectralCoeffs) -> String {
    let mut s = String::from("kx,kz,value\n");
    for mode in c.modes() {
        let _ = writeln!(s, "{},{},{}", mode.kx, mode.kz, fmt_f64(c.get(mode)));
    }
    let _ = writeln!(s, "offset,,{}", fmt_f64(c.offset));
    s
}

pub fn coeffs_from_csv(text: &str) -> Result<SpectralCoeffs> {
    let mut lines = text.lines();
    expect_header(&mut lines, "kx,kz,value")?;
    let mut entries = Vec::new();
    let mut offset = None;
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let p = split_fields(line, 3, n + 2)?;
        if p[0] == "offset" {
            offset = Some(parse_f64(p[2], n + 2)?);
        } else {
            entries.push((
                parse_usize(p[0], n + 2)?,
                parse_usize(p[1], n + 2)?,
                parse_f64(p[2], n + 2)?,
            ));
        }
    }
    let side = (entries.len() as f64).sqrt().round() as usize;
    if side == 0 || side * side != entries.len() {
        return Err(Error::Parse("coefficient rows do not form a square array".into()));
    }
    let k = side - 1;
    let mut c = SpectralCoeffs::zeros(k);
    for (kx, kz, v) in entries {
        if kx > k || kz > k {
            return Err(Error::Parse(format!("mode ({kx}, {kz}) exceeds band limit {k}")));
        }
        c.set(crate::basis::ModeIndex::new(kx, kz), v);
    }
    c.offset = offset.ok_or_else(|| Error::Parse("missing offset row".into()))?;
    SpectralCoeffs::new(k, c.offset, c.into_vec())
}

pub fn trace_to_csv(t: &BoundaryTrace) -> String {
    let mut s = String::from("step,t,i,x,value\n");
    for (n, row) in t.values.iter().enumerate() {
        let time = fmt_f64(n as f64 * t.dt);
        for (i, v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                "{n},{time},{i},{},{}",
                fmt_f64(i as f64 / t.m as f64),
                fmt_f64(*v)
            );
        }
    }
    s
}

pub fn trace_from_csv(text: &str) -> Result<BoundaryTrace> {
    let mut lines = text.lines();
    expect_header(&mut lines, "step,t,i,x,value")?;
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut dt = 0.0;
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let p = split_fields(line, 5, n + 2)?;
        let step = parse_usize(p[0], n + 2)?;
        let i = parse_usize(p[2], n + 2)?;
        if step == 1 && i == 0 {
            dt = parse_f64(p[1], n + 2)?;
        }
        if step == values.len() {
            values.push(Vec::new());
        }
        if step + 1 != values.len() || i != values[step].len() {
            return Err(Error::Parse(format!("line {}: rows out of order", n + 2)));
        }
        values[step].push(parse_f64(p[4], n + 2)?);
    }
    let width = values.first().map_or(0, Vec::len);
    if width < 2 || values.iter().any(|r| r.len() != width) {
        return Err(Error::Parse("ragged or empty trace".into()));
    }
    Ok(BoundaryTrace {
        dt,
        m: width - 1,
        values,
        noise: NoiseSpec::none(),
    })
}

/// Trace binary: `u64` rows, `u64` columns, `f64` dt, then the values.
pub fn trace_to_bytes(t: &BoundaryTrace) -> Vec<u8> {
    let cols = t.m + 1;
    let mut buf = Vec::with_capacity(24 + 8 * t.values.len() * cols);
    push_u64(&mut buf, t.values.len() as u64);
    push_u64(&mut buf, cols as u64);
    buf.extend_from_slice(&t.dt.to_le_bytes());
    for row in &t.values {
        push_f64s(&mut buf, row);
    }
    buf
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<BoundaryTrace> {
    let rows = read_u64(bytes, 0)? as usize;
    let cols = read_u64(bytes, 8)? as usize;
    let dt = f64::from_bits(read_u64(bytes, 16)?);
    if cols < 2 {
        return Err(Error::Parse("trace needs at least two columns".into()));
    }
    let flat = read_f64s(&bytes[24..], rows * cols)?;
    Ok(BoundaryTrace {
        dt,
        m: cols - 1,
        values: flat.chunks(cols).map(<[f64]>::to_vec).collect(),
        noise: NoiseSpec::none(),
    })
}

/// Plain CSV table with a header row and float cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty table".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let r: Vec<String> = line.split(',').map(str::to_string).collect();
            if r.len() != header.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, found {}",
                    n + 2,
                    header.len(),
                    r.len()
                )));
            }
            rows.push(r);
        }
        Ok(Self { header, rows })
    }

    /// Numeric value of a cell, `NaN` for the literal `NaN`.
    pub fn value(&self, row: usize, col: &str) -> Option<f64> {
        let c = self.header.iter().position(|h| h == col)?;
        self.rows.get(row)?.get(c)?.parse().ok()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ModeIndex;

    fn sample_field(grid: Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x, y| (1.3 * x).sin() + 0.1 * y + 1.0 / 3.0)
    }

    #[test]
    fn field_csv_roundtrip_is_byte_identical() {
        for grid in [Grid::unit(5), Grid::lowered(4)] {
            let f = sample_field(grid);
            let csv = field_to_csv(&f);
            let back = field_from_csv(&csv).unwrap();
            assert_eq!(back, f);
            assert_eq!(field_to_csv(&back), csv);
        }
    }

    #[test]
    fn field_binary_roundtrip() {
        let f = sample_field(Grid::lowered(6));
        let bytes = field_to_bytes(&f);
        assert_eq!(&bytes[..8], &6u64.to_le_bytes());
        assert_eq!(field_from_bytes(&bytes, Placement::Lowered).unwrap(), f);
        assert!(field_from_bytes(&bytes[..bytes.len() - 1], Placement::Lowered).is_err());
    }

    #[test]
    fn coeffs_csv_roundtrip() {
        let mut c = SpectralCoeffs::zeros(2);
        c.set(ModeIndex::new(1, 2), -0.125);
        c.set(ModeIndex::new(0, 0), 1e-3 / 7.0);
        c.offset = 0.04;
        let csv = coeffs_to_csv(&c);
        assert!(csv.ends_with("offset,,4e-2\n"));
        let back = coeffs_from_csv(&csv).unwrap();
        assert_eq!(back, c);
        assert_eq!(coeffs_to_csv(&back), csv);
    }

    #[test]
    fn trace_roundtrips() {
        let t = BoundaryTrace {
            noise: NoiseSpec::none(),
            dt: 0.005,
            m: 3,
            values: (0..4)
                .map(|n| (0..4).map(|i| (n * i) as f64 / 7.0).collect())
                .collect(),
        };
        let csv = trace_to_csv(&t);
        let back = trace_from_csv(&csv).unwrap();
        assert_eq!(back, t);
        assert_eq!(trace_to_csv(&back), csv);
        assert_eq!(trace_from_bytes(&trace_to_bytes(&t)).unwrap(), t);
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        assert!(matches!(field_from_csv("a,b\n"), Err(Error::Parse(_))));
        assert!(matches!(
            field_from_csv("i,j,x,y,value\n0,0,0e0,0e0,zz\n"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(coeffs_from_csv("kx,kz,value\n0,0,1e0\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn table_roundtrip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(0.1)]);
        t.push(vec!["2".into(), "NaN".into()]);
        let csv = t.to_csv();
        let back = Table::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.value(0, "b"), Some(0.1));
        assert!(back.value(1, "b").unwrap().is_nan());
    }
}
