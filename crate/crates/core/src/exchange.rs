//! Form exchange files.
//!
//! CSV layout (version 1): `#`-prefixed header lines `key: value` with keys
//! `format`, `geometry`, `total_dim`, `degree`, `n_points`, followed by a
//! `point,multi_index,coefficient` table. `multi_index` lists 1-based frame
//! indices in increasing order separated by spaces (empty for 0-forms).
//! Missing rows read as zero.
//!
//! Binary layout (version 1, little endian): magic `DFRM`, `u32` version,
//! `u32` total_dim, `u32` degree, `u64` n_points, then the coefficients as
//! `f64` in storage order (point-major, multi-indices in lexicographic
//! order).

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::forms::{DiscreteForm, FormError};
use crate::geometry::ProductGeometry;
use crate::multiindex::{binomial, indices, FormBasis};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"DFRM";
const FORMAT_TAG: &str = "twistor-forms-exchange";

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Header(String),
    #[error("{field} is {got}, geometry has {expected}")]
    Shape {
        field: &'static str,
        got: u64,
        expected: u64,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error(transparent)]
    Form(#[from] FormError),
}

fn check(field: &'static str, got: u64, expected: u64) -> Result<(), ExchangeError> {
    if got == expected {
        Ok(())
    } else {
        Err(ExchangeError::Shape { field, got, expected })
    }
}

fn multi_index_label(mask: u32) -> String {
    indices(mask)
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_csv<W: Write>(u: &DiscreteForm, mut out: W) -> Result<(), ExchangeError> {
    let g = u.geometry();
    writeln!(out, "# format: {FORMAT_TAG} v{FORMAT_VERSION}")?;
    writeln!(out, "# geometry: {}", g.describe())?;
    writeln!(out, "# total_dim: {}", g.total_dim())?;
    writeln!(out, "# degree: {}", u.degree())?;
    writeln!(out, "# n_points: {}", g.n_points())?;
    let basis = FormBasis::get(g.total_dim(), u.degree());
    let labels: Vec<String> = basis.masks().iter().map(|&m| multi_index_label(m)).collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["point", "multi_index", "coefficient"])?;
    for pt in 0..g.n_points() {
        for (label, v) in labels.iter().zip(u.at(pt)) {
            w.write_record([pt.to_string().as_str(), label, v.to_string().as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: BufRead>(g: &Arc<ProductGeometry>, mut input: R) -> Result<DiscreteForm, ExchangeError> {
    let mut header = std::collections::BTreeMap::new();
    let mut body = String::new();
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        match line.strip_prefix('#') {
            Some(rest) => {
                let (k, v) = rest
                    .split_once(':')
                    .ok_or_else(|| ExchangeError::Header(format!("malformed line {:?}", line.trim_end())))?;
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => {
                body.push_str(&line);
                input.read_to_string(&mut body)?;
                break;
            }
        }
    }
    let format = header
        .get("format")
        .ok_or_else(|| ExchangeError::Header("missing format".into()))?;
    let version = format
        .strip_prefix(FORMAT_TAG)
        .and_then(|v| v.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| ExchangeError::Header(format!("unknown format {format:?}")))?;
    if version != FORMAT_VERSION {
        return Err(ExchangeError::Version(version));
    }
    let field = |k: &str| -> Result<u64, ExchangeError> {
        header
            .get(k)
            .ok_or_else(|| ExchangeError::Header(format!("missing {k}")))?
            .parse()
            .map_err(|_| ExchangeError::Header(format!("{k} is not an integer")))
    };
    let n = g.total_dim();
    check("total_dim", field("total_dim")?, n as u64)?;
    check("n_points", field("n_points")?, g.n_points() as u64)?;
    let degree = field("degree")? as usize;
    let mut form = DiscreteForm::zeros(g, degree)?;
    let basis = FormBasis::get(n, degree);
    let c = binomial(n, degree);
    let mut seen = HashSet::new();
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| ExchangeError::Row { line, message };
        if record.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", record.len())));
        }
        let pt: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad point {:?}", &record[0])))?;
        if pt >= g.n_points() {
            return Err(err(format!("point {pt} out of range")));
        }
        let mut mask = 0u32;
        let mut last = 0usize;
        for tok in record[1].split_whitespace() {
            let i: usize = tok.parse().map_err(|_| err(format!("bad index {tok:?}")))?;
            if i <= last || i > n {
                return Err(err(format!("multi-index {:?} not increasing in 1..={n}", &record[1])));
            }
            last = i;
            mask |= 1 << (i - 1);
        }
        let slot = basis
            .rank(mask)
            .ok_or_else(|| err(format!("multi-index {:?} has wrong degree", &record[1])))?;
        if !seen.insert((pt, slot)) {
            return Err(err(format!("duplicate entry ({pt}, {:?})", &record[1])));
        }
        let v: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad coefficient {:?}", &record[2])))?;
        form.coefficients_mut()[pt * c + slot] = v;
    }
    Ok(form)
}

pub fn write_binary<W: Write>(u: &DiscreteForm, mut out: W) -> Result<(), ExchangeError> {
    let g = u.geometry();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(g.total_dim() as u32).to_le_bytes())?;
    out.write_all(&(u.degree() as u32).to_le_bytes())?;
    out.write_all(&(g.n_points() as u64).to_le_bytes())?;
    for v in u.coefficients() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(g: &Arc<ProductGeometry>, mut input: R) -> Result<DiscreteForm, ExchangeError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ExchangeError::BadMagic);
    }
    let mut w = [0u8; 4];
    let mut u32_field = |input: &mut R| -> Result<u32, ExchangeError> {
        input.read_exact(&mut w)?;
        Ok(u32::from_le_bytes(w))
    };
    let version = u32_field(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(ExchangeError::Version(version));
    }
    let dim = u32_field(&mut input)?;
    let degree = u32_field(&mut input)? as usize;
    let mut q = [0u8; 8];
    input.read_exact(&mut q)?;
    let n_points = u64::from_le_bytes(q);
    check("total_dim", dim as u64, g.total_dim() as u64)?;
    check("n_points", n_points, g.n_points() as u64)?;
    let len = g.n_points() * binomial(g.total_dim(), degree.min(g.total_dim()));
    let mut coefficients = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut q)?;
        coefficients.push(f64::from_le_bytes(q));
    }
    Ok(DiscreteForm::from_coefficients(g, degree, coefficients)?)
}
