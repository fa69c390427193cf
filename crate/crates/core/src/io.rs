//! File formats: Matrix Market adjacency, edge-list / response / design /
//! cell-table CSVs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::ingest::{CellRecord, CellTable};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Parse(format!(
            "line {line}: {what} '{}' is not a number",
            field.trim()
        ))
    })
}

fn parse_index(field: &str, what: &str, line: usize) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| {
        Error::Parse(format!(
            "line {line}: {what} '{}' is not an index",
            field.trim()
        ))
    })
}

/// Reads a square Matrix Market coordinate matrix as 0/1 adjacency.
///
/// Accepts `pattern`, `real` and `integer` fields with `symmetric` or
/// `general` symmetry. Entries must be 0 or 1; explicit zeros are ignored.
/// `general` matrices must be symmetric and the diagonal must be empty.
pub fn read_matrix_market<R: Read>(reader: R) -> Result<AdjacencyGraph> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty Matrix Market file".into()))?;
    let header = header?.to_ascii_lowercase();
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(Error::Parse(format!(
            "line 1: not a Matrix Market header: '{header}'"
        )));
    }
    if tokens[2] != "coordinate" {
        return Err(Error::Parse(
            "only coordinate Matrix Market files are supported".into(),
        ));
    }
    let has_value = match tokens[3] {
        "pattern" => false,
        "real" | "integer" => true,
        other => {
            return Err(Error::Parse(format!(
                "unsupported Matrix Market field '{other}'"
            )))
        }
    };
    let symmetric = match tokens[4] {
        "symmetric" => true,
        "general" => false,
        other => {
            return Err(Error::Parse(format!(
                "unsupported Matrix Market symmetry '{other}'"
            )))
        }
    };

    let mut size: Option<(usize, usize)> = None;
    let mut entries: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut seen = 0usize;
    let mut expected = 0usize;
    for (k, line) in lines {
        let line = line?;
        let lineno = k + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(Error::Parse(format!(
                        "line {lineno}: expected 'rows cols entries'"
                    )));
                }
                let rows = parse_index(fields[0], "row count", lineno)?;
                let cols = parse_index(fields[1], "column count", lineno)?;
                if rows != cols {
                    return Err(Error::Parse(format!(
                        "adjacency must be square, got {rows}x{cols}"
                    )));
                }
                expected = parse_index(fields[2], "entry count", lineno)?;
                size = Some((rows, cols));
            }
            Some((n, _)) => {
                let want = if has_value { 3 } else { 2 };
                if fields.len() != want {
                    return Err(Error::Parse(format!(
                        "line {lineno}: expected {want} fields, got {}",
                        fields.len()
                    )));
                }
                let i = parse_index(fields[0], "row", lineno)?;
                let j = parse_index(fields[1], "column", lineno)?;
                if i == 0 || j == 0 || i > n || j > n {
                    return Err(Error::Parse(format!(
                        "line {lineno}: index ({i}, {j}) outside 1..={n}"
                    )));
                }
                seen += 1;
                if has_value {
                    let v = parse_f64(fields[2], "value", lineno)?;
                    if v == 0.0 {
                        continue;
                    }
                    if v != 1.0 {
                        return Err(Error::Parse(format!(
                            "line {lineno}: adjacency weights must be 0 or 1, got {v}"
                        )));
                    }
                }
                if i == j {
                    return Err(Error::SelfLoop { i: i - 1, j: j - 1 });
                }
                *entries.entry((i - 1, j - 1)).or_default() += 1;
            }
        }
    }
    let (n, _) = size.ok_or_else(|| Error::Parse("missing Matrix Market size line".into()))?;
    if seen != expected {
        return Err(Error::Parse(format!(
            "size line declares {expected} entries, found {seen}"
        )));
    }
    if !symmetric {
        if let Some(&(i, j)) = entries
            .keys()
            .find(|&&(i, j)| !entries.contains_key(&(j, i)))
        {
            return Err(Error::Parse(format!(
                "general matrix is not symmetric: entry ({}, {}) has no mirror",
                i + 1,
                j + 1
            )));
        }
    }
    AdjacencyGraph::new(n, entries.into_keys())
}

pub fn read_matrix_market_file(path: &Path) -> Result<AdjacencyGraph> {
    read_matrix_market(open(path)?)
}

/// Writes the adjacency as a `pattern symmetric` Matrix Market file with
/// lower-triangle entries in sorted order.
pub fn write_matrix_market<W: Write>(graph: &AdjacencyGraph, mut w: W) -> Result<()> {
    let mut lower: Vec<(usize, usize)> = graph.edges().iter().map(|&(i, j)| (j, i)).collect();
    lower.sort_unstable_by_key(|&(r, c)| (c, r));
    writeln!(w, "%%MatrixMarket matrix coordinate pattern symmetric")?;
    writeln!(w, "{} {} {}", graph.n(), graph.n(), lower.len())?;
    for (r, c) in lower {
        writeln!(w, "{} {}", r + 1, c + 1)?;
    }
    Ok(())
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Reads an edge list with header `i,j` (0-based) over `n` nodes.
pub fn read_edge_list<R: Read>(reader: R, n: usize) -> Result<AdjacencyGraph> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let (ci, cj) = (column_index(&headers, "i")?, column_index(&headers, "j")?);
    let mut edges = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        edges.push((
            parse_index(&rec[ci], "i", line)?,
            parse_index(&rec[cj], "j", line)?,
        ));
    }
    AdjacencyGraph::new(n, edges)
}

pub fn read_edge_list_file(path: &Path, n: usize) -> Result<AdjacencyGraph> {
    read_edge_list(open(path)?, n)
}

/// Reads a response file with a single column `y`.
pub fn read_response<R: Read>(reader: R) -> Result<DVector<f64>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let c = column_index(&headers, "y")?;
    let mut v = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        v.push(parse_f64(&rec?[c], "y", k + 2)?);
    }
    Ok(DVector::from_vec(v))
}

pub fn read_response_file(path: &Path) -> Result<DVector<f64>> {
    read_response(open(path)?)
}

/// Reads a design matrix with named columns; returns the names and `X`.
pub fn read_design<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(|s| s.is_empty()) {
        return Err(Error::Parse("design file has no columns".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            data.push(parse_f64(field, &names[j], k + 2)?);
        }
        rows += 1;
    }
    Ok((
        names.clone(),
        DMatrix::from_row_slice(rows, names.len(), &data),
    ))
}

pub fn read_design_file(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    read_design(open(path)?)
}

/// Reads a point table with header `x,y,count,library_size`.
pub fn read_cells<R: Read>(reader: R) -> Result<CellTable> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx = [
        column_index(&headers, "x")?,
        column_index(&headers, "y")?,
        column_index(&headers, "count")?,
        column_index(&headers, "library_size")?,
    ];
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let f = |c: usize, what: &str| parse_f64(&rec[idx[c]], what, line);
        rows.push(CellRecord {
            x: f(0, "x")?,
            y: f(1, "y")?,
            count: f(2, "count")?,
            library_size: f(3, "library_size")?,
        });
    }
    CellTable::new(rows)
}

pub fn read_cells_file(path: &Path) -> Result<CellTable> {
    read_cells(open(path)?)
}

/// Writes `y` as a one-column CSV.
pub fn write_response<W: Write>(y: &DVector<f64>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["y"])?;
    for v in y.iter() {
        wtr.write_record([format_float(*v)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `X` with the given column names.
pub fn write_design<W: Write>(names: &[&str], x: &DMatrix<f64>, w: W) -> Result<()> {
    if names.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            what: "design column names",
            expected: x.ncols(),
            got: names.len(),
        });
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(names)?;
    for row in x.row_iter() {
        wtr.write_record(row.iter().map(|v| format_float(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}
