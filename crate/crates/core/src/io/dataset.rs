use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Location;
use crate::io::write_atomic;
use crate::observation::ObservationRecord;

/// A parsed dataset: dimensionality, category count and records in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub w: usize,
    pub records: Vec<ObservationRecord>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Number of leading `x1`, `x2` coordinate columns.
fn coord_columns(path: &Path, header: &csv::StringRecord, line: u64) -> Result<usize> {
    let d = header
        .iter()
        .take(2)
        .enumerate()
        .take_while(|(i, name)| *name == format!("x{}", i + 1))
        .count();
    if d == 0 {
        return Err(parse_err(path, line, "header must start with coordinate column `x1`"));
    }
    Ok(d)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn parse_coords(path: &Path, rec: &csv::StringRecord, d: usize) -> Result<Location> {
    let line = line_of(rec);
    let mut coords = Vec::with_capacity(d);
    for (i, field) in rec.iter().take(d).enumerate() {
        let v: f64 = field
            .parse()
            .map_err(|_| parse_err(path, line, format!("coordinate x{} is not a number: `{field}`", i + 1)))?;
        if !v.is_finite() {
            return Err(parse_err(path, line, format!("coordinate x{} is not finite", i + 1)));
        }
        coords.push(v);
    }
    Location::new(coords).map_err(|e| parse_err(path, line, e.to_string()))
}

/// Reads a wide CSV: header `x1[,x2],c0,…,c{W−1}`, one record per line.
/// Lines starting with `#` are comments.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = coord_columns(path, &header, 1)?;
    let w = header.len() - d;
    for (i, name) in header.iter().skip(d).enumerate() {
        if name != format!("c{i}") {
            return Err(parse_err(path, 1, format!("expected column `c{i}`, found `{name}`")));
        }
    }
    if w < 2 {
        return Err(parse_err(path, 1, "datasets need at least two count columns"));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = line_of(&row);
        if row.len() != d + w {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields ({d} coordinates + {w} counts), found {}", d + w, row.len()),
            ));
        }
        let loc = parse_coords(path, &row, d)?;
        let mut entries = Vec::new();
        for (c, field) in row.iter().skip(d).enumerate() {
            let n: u64 = field.parse().map_err(|_| {
                let msg = if field.starts_with('-') {
                    format!("negative count in c{c}: `{field}`")
                } else {
                    format!("count c{c} is not a nonnegative integer: `{field}`")
                };
                parse_err(path, line, msg)
            })?;
            if n > 0 {
                entries.push((c, n));
            }
        }
        records.push(ObservationRecord::from_sparse(loc, w, entries)?);
    }
    Ok(Dataset { d, w, records })
}

fn coord_header(d: usize) -> String {
    (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn write_coords(out: &mut impl Write, loc: &Location) -> std::io::Result<()> {
    let parts: Vec<String> = loc.coords().iter().map(|c| format!("{c}")).collect();
    write!(out, "{}", parts.join(","))
}

pub(crate) fn write_hash_comment(out: &mut impl Write, hash: Option<&str>) -> std::io::Result<()> {
    if let Some(h) = hash {
        writeln!(out, "# config_hash={h}")?;
    }
    Ok(())
}

/// Writes records in order; coordinates use shortest round-trip formatting.
pub fn write_dataset(path: &Path, d: usize, w: usize, records: &[ObservationRecord], config_hash: Option<&str>) -> Result<()> {
    for r in records {
        crate::error::ensure_len("record dimension", d, r.location().dim())?;
        crate::error::ensure_len("record categories", w, r.num_categories())?;
    }
    write_atomic(path, |out| {
        write_hash_comment(out, config_hash)?;
        let counts: Vec<String> = (0..w).map(|c| format!("c{c}")).collect();
        writeln!(out, "{},{}", coord_header(d), counts.join(","))?;
        for r in records {
            write_coords(out, r.location())?;
            let dense = r.dense();
            for c in dense {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    })
}

/// Reads locations from any CSV whose leading columns are `x1[,x2]`;
/// remaining columns are ignored, so dataset files work too.
pub fn read_locations(path: &Path) -> Result<Vec<Location>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = coord_columns(path, &header, 1)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.len() < d {
            return Err(parse_err(path, line_of(&row), format!("expected {d} coordinates, found {}", row.len())));
        }
        out.push(parse_coords(path, &row, d)?);
    }
    Ok(out)
}

pub fn write_locations(path: &Path, locations: &[Location]) -> Result<()> {
    let d = locations.first().map_or(1, |l| l.dim());
    write_atomic(path, |out| {
        writeln!(out, "{}", coord_header(d))?;
        for l in locations {
            write_coords(out, l)?;
            writeln!(out)?;
        }
        Ok(())
    })
}
