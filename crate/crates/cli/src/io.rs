//! CSV ingestion and atomic file output.
//!
//! Input schemas (UTF-8, decimal dot, no thousands separators):
//! - population or sample rows: header `id,x1,...,xk[,y]`, further named
//!   columns are kept and can be referenced by name (a `q` column, say)
//! - design: header `id,pi`
//! - instruments: header `id,z1,...,zk`
//! - target file: one row of numbers, optionally preceded by a header row
//!
//! Output files are written to a temporary name in the destination directory
//! and renamed into place, so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use memcal::nalgebra::{DMatrix, DVector};

/// A parsed population or sample file.
#[derive(Debug)]
pub struct Table {
    pub ids: Vec<u64>,
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
    /// Extra named columns after id, x1..xk and y, in file order.
    pub extras: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_aux(&self) -> usize {
        self.x.ncols()
    }

    /// Look up a column by name: an extra column or one of the x columns.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if let Some((_, v)) = self.extras.iter().find(|(n, _)| n == name) {
            return Some(v.clone());
        }
        for j in 0..self.n_aux() {
            if name == format!("x{}", j + 1) {
                return Some(self.x.column(j).iter().copied().collect());
            }
        }
        if name == "y" {
            return self.y.as_ref().map(|y| y.iter().copied().collect());
        }
        None
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n_aux()).map(|j| format!("x{}", j)).collect();
        if self.y.is_some() {
            names.push("y".into());
        }
        names.extend(self.extras.iter().map(|(n, _)| n.clone()));
        names
    }
}

fn parse_num(file: &str, line: u64, col: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| {
        anyhow!(
            "{} line {}, column {}: cannot parse '{}' as a number",
            file,
            line,
            col,
            raw
        )
    })?;
    if !v.is_finite() {
        bail!("{} line {}, column {}: value must be finite", file, line, col);
    }
    Ok(v)
}

fn parse_id(file: &str, line: u64, raw: &str) -> Result<u64> {
    raw.trim().parse().map_err(|_| {
        anyhow!(
            "{} line {}, column id: cannot parse '{}' as an integer id",
            file,
            line,
            raw
        )
    })
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn check_distinct_ids(file: &str, ids: &[u64]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            bail!("{}: id {} appears more than once", file, id);
        }
    }
    Ok(())
}

/// Read a population or sample file: header `id,x1,...,xk[,y][,named...]`.
pub fn read_table(path: &Path) -> Result<Table> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    let headers: Vec<String> = rdr
        .headers()
        .with_context(|| format!("reading {} header", file))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    if headers.first().map(String::as_str) != Some("id") {
        bail!(
            "{}: expected header starting with id,x1,...; found {}",
            file,
            headers.join(",")
        );
    }
    let mut k = 0;
    while 1 + k < headers.len() && headers[1 + k] == format!("x{}", k + 1) {
        k += 1;
    }
    if k == 0 {
        bail!(
            "{}: expected auxiliary columns x1,...,xk after id; found {}",
            file,
            headers.join(",")
        );
    }
    let mut next = 1 + k;
    let has_y = headers.get(next).map(String::as_str) == Some("y");
    if has_y {
        next += 1;
    }
    let extra_names: Vec<String> = headers[next..].to_vec();
    for (i, name) in extra_names.iter().enumerate() {
        if name.is_empty() {
            bail!("{}: empty column name in header", file);
        }
        if extra_names[..i].contains(name) || name == "id" || name == "y" {
            bail!("{}: duplicate column name '{}' in header", file, name);
        }
    }

    let mut ids = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut extras: Vec<Vec<f64>> = vec![Vec::new(); extra_names.len()];
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", file))?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            bail!(
                "{} line {}: expected {} fields, found {}",
                file,
                line,
                headers.len(),
                rec.len()
            );
        }
        ids.push(parse_id(&file, line, &rec[0])?);
        for j in 0..k {
            xs.push(parse_num(&file, line, &headers[1 + j], &rec[1 + j])?);
        }
        if has_y {
            ys.push(parse_num(&file, line, "y", &rec[1 + k])?);
        }
        for (e, name) in extra_names.iter().enumerate() {
            extras[e].push(parse_num(&file, line, name, &rec[next + e])?);
        }
    }
    if ids.is_empty() {
        bail!("{}: no data rows", file);
    }
    check_distinct_ids(&file, &ids)?;

    let n = ids.len();
    let x = DMatrix::from_fn(n, k, |i, j| xs[i * k + j]);
    Ok(Table {
        ids,
        x,
        y: if has_y { Some(DVector::from_vec(ys)) } else { None },
        extras: extra_names.into_iter().zip(extras).collect(),
    })
}

/// Read a design file: header `id,pi`, one row per population unit.
pub fn read_design_table(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    let headers: Vec<String> = rdr
        .headers()
        .with_context(|| format!("reading {} header", file))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers != ["id", "pi"] {
        bail!(
            "{}: expected header id,pi; found {}",
            file,
            headers.join(",")
        );
    }
    let mut ids = Vec::new();
    let mut pi = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", file))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            bail!("{} line {}: expected 2 fields, found {}", file, line, rec.len());
        }
        ids.push(parse_id(&file, line, &rec[0])?);
        let p = parse_num(&file, line, "pi", &rec[1])?;
        if p <= 0.0 {
            bail!(
                "{} line {}: inclusion probabilities must be strictly positive, got {}",
                file,
                line,
                p
            );
        }
        if p > 1.0 {
            bail!(
                "{} line {}: inclusion probability {} exceeds 1",
                file,
                line,
                p
            );
        }
        pi.push(p);
    }
    if ids.is_empty() {
        bail!("{}: no data rows", file);
    }
    check_distinct_ids(&file, &ids)?;
    Ok((ids, pi))
}

/// Read an instruments file: header `id,z1,...,zk`.
pub fn read_instruments_table(path: &Path) -> Result<(Vec<u64>, DMatrix<f64>)> {
    let file = path.display().to_string();
    let mut rdr = reader(path)?;
    let headers: Vec<String> = rdr
        .headers()
        .with_context(|| format!("reading {} header", file))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if headers.first().map(String::as_str) != Some("id") {
        bail!(
            "{}: expected header id,z1,...,zk; found {}",
            file,
            headers.join(",")
        );
    }
    let k = headers.len() - 1;
    for j in 0..k {
        if headers[1 + j] != format!("z{}", j + 1) {
            bail!(
                "{}: expected header id,z1,...,zk; found {}",
                file,
                headers.join(",")
            );
        }
    }
    if k == 0 {
        bail!("{}: instruments file needs at least one z column", file);
    }
    let mut ids = Vec::new();
    let mut zs: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", file))?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            bail!(
                "{} line {}: expected {} fields, found {}",
                file,
                line,
                headers.len(),
                rec.len()
            );
        }
        ids.push(parse_id(&file, line, &rec[0])?);
        for j in 0..k {
            zs.push(parse_num(&file, line, &headers[1 + j], &rec[1 + j])?);
        }
    }
    if ids.is_empty() {
        bail!("{}: no data rows", file);
    }
    check_distinct_ids(&file, &ids)?;
    let n = ids.len();
    Ok((ids, DMatrix::from_fn(n, k, |i, j| zs[i * k + j])))
}

/// Read auxiliary population means from a one-row file. A leading header
/// row is allowed and skipped.
pub fn read_target_file(path: &Path) -> Result<Vec<f64>> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", file))?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec.with_context(|| format!("reading {}", file))?);
    }
    let parse_row = |rec: &csv::StringRecord| -> Result<Vec<f64>> {
        rec.iter()
            .map(|s| parse_num(&file, record_line(rec), "target", s))
            .collect()
    };
    match records.len() {
        1 => parse_row(&records[0]),
        2 => {
            if parse_row(&records[0]).is_ok() {
                bail!(
                    "{}: two rows of numbers; the target file must contain one row of \
                     totals, optionally preceded by a header",
                    file
                );
            }
            parse_row(&records[1])
        }
        n => bail!(
            "{}: expected one row of totals (plus an optional header), found {} rows",
            file,
            n
        ),
    }
}

/// Write bytes to `path` atomically: temp file in the same directory, then
/// rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e).with_context(|| format!("renaming into {}", path.display()));
    }
    Ok(())
}

/// Write to the given path atomically, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            std::io::stdout()
                .write_all(bytes)
                .context("writing to stdout")?;
            Ok(())
        }
    }
}

/// Render a weights table: id, design weight, calibrated weight, and the
/// weight scaled back by the inclusion probability. 17 significant digits
/// so values round-trip exactly.
pub fn weights_csv(ids: &[u64], pi: &DVector<f64>, w: &DVector<f64>) -> String {
    let mut out = String::from("id,d,w,pi_w\n");
    for i in 0..ids.len() {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            ids[i],
            1.0 / pi[i],
            w[i],
            pi[i] * w[i]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn table_with_extras_and_lookup() {
        let f = tmp("id,x1,x2,y,q\n1,1.0,2.0,3.0,0.5\n2,4.0,5.0,6.0,1.5\n");
        let t = read_table(f.path()).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.n_aux(), 2);
        assert_eq!(t.column("q").unwrap(), vec![0.5, 1.5]);
        assert_eq!(t.column("x2").unwrap(), vec![2.0, 5.0]);
        assert_eq!(t.column("y").unwrap(), vec![3.0, 6.0]);
        assert!(t.column("nope").is_none());
    }

    #[test]
    fn table_rejects_duplicate_ids_and_ragged_rows() {
        let f = tmp("id,x1\n1,1.0\n1,2.0\n");
        assert!(read_table(f.path()).unwrap_err().to_string().contains("id 1"));
        let f = tmp("id,x1,y\n1,1.0\n");
        assert!(read_table(f.path()).is_err());
    }

    #[test]
    fn target_file_forms() {
        let f = tmp("1.25,0.5\n");
        assert_eq!(read_target_file(f.path()).unwrap(), vec![1.25, 0.5]);
        let f = tmp("x1,x2\n1.25,0.5\n");
        assert_eq!(read_target_file(f.path()).unwrap(), vec![1.25, 0.5]);
        let f = tmp("1.0,2.0\n3.0,4.0\n");
        assert!(read_target_file(f.path()).is_err());
        let f = tmp("a,b\n1.0,2.0\n3.0,4.0\n");
        assert!(read_target_file(f.path()).is_err());
    }

    #[test]
    fn instruments_schema_is_strict() {
        let f = tmp("id,z1,z2\n1,1.0,2.0\n");
        let (ids, z) = read_instruments_table(f.path()).unwrap();
        assert_eq!(ids, vec![1]);
        assert_eq!(z[(0, 1)], 2.0);
        let f = tmp("id,w1\n1,1.0\n");
        assert!(read_instruments_table(f.path()).is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .contains(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }
}
