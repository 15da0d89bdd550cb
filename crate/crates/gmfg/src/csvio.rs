//! CSV input and output.
//!
//! Numbers are written with the shortest representation that round-trips, so
//! identical results give byte-identical files.

use std::io::Write;
use std::path::Path;

use gmfg_core::gmfg::MeanFieldSolution;
use gmfg_core::simulate::{PopulationPaths, PopulationRun};
use gmfg_core::{AlphaGrid, TimeGrid};
use nalgebra::DMatrix;

pub type CsvResult<T> = Result<T, csv::Error>;

/// Reads a headerless numeric matrix.
pub fn read_matrix(bytes: &[u8]) -> Result<DMatrix<f64>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format!("row {}: {f:?}: {e}", line + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 {
        return Err("empty matrix".into());
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Streams rows of numbers under a header.
pub struct Table<W: Write> {
    writer: csv::Writer<W>,
    buf: Vec<String>,
}

impl Table<std::fs::File> {
    pub fn create(path: &Path, header: &[String]) -> CsvResult<Self> {
        Table::new(std::fs::File::create(path)?, header)
    }
}

impl<W: Write> Table<W> {
    pub fn new(out: W, header: &[String]) -> CsvResult<Self> {
        let mut writer = csv::WriterBuilder::new().from_writer(out);
        writer.write_record(header)?;
        Ok(Table { writer, buf: Vec::with_capacity(header.len()) })
    }

    pub fn row(&mut self, values: impl IntoIterator<Item = f64>) -> CsvResult<()> {
        self.buf.clear();
        self.buf.extend(values.into_iter().map(format_number));
        self.writer.write_record(&self.buf)
    }

    pub fn finish(mut self) -> CsvResult<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest round-trip form, switching to exponent notation for very small or
/// very large magnitudes.
pub fn format_number(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=n).map(|c| format!("{prefix}_{c}")).collect()
    }
}

/// Long format: one row per `(α, t)` with `z`, `S` and `r`.
pub fn write_solution(path: &Path, sol: &MeanFieldSolution, alpha: AlphaGrid, time: TimeGrid) -> CsvResult<()> {
    let mut header = vec!["alpha".to_string(), "t".to_string()];
    header.extend(names("z", sol.z.dim));
    header.extend(names("S", sol.s.dim));
    header.push("r".into());
    let mut t = Table::create(path, &header)?;
    for i in 0..alpha.n {
        for k in 0..time.nodes() {
            let lead = [alpha.node(i), time.t(k)];
            let r = [sol.r[i][k]];
            t.row(lead.into_iter().chain(sol.z.at(i, k).iter().copied()).chain(sol.s.at(i, k).iter().copied()).chain(r))?;
        }
    }
    t.finish()
}

/// Wide format: a `t` column and one column per `α` node. Scalar fields only.
pub fn write_wide(
    path: &Path,
    time: TimeGrid,
    columns: &[String],
    value: impl Fn(usize, usize) -> f64,
) -> CsvResult<()> {
    let mut header = vec!["t".to_string()];
    header.extend(columns.iter().cloned());
    let mut t = Table::create(path, &header)?;
    for k in 0..time.nodes() {
        t.row(std::iter::once(time.t(k)).chain((0..columns.len()).map(|c| value(c, k))))?;
    }
    t.finish()
}

/// One row per `(path, agent, t)`.
pub fn write_trajectories(path: &Path, paths: &PopulationPaths, alphas: &[f64]) -> CsvResult<()> {
    let mut header = vec!["path".to_string(), "agent".to_string(), "alpha".to_string(), "t".to_string()];
    header.extend(names("x", paths.state_dim));
    header.extend(names("u", paths.control_dim));
    header.extend(names("xN", paths.state_dim));
    let mut t = Table::create(path, &header)?;
    for m in 0..paths.paths {
        for (a, &alpha) in alphas.iter().enumerate().take(paths.agents) {
            for k in 0..paths.times {
                let lead = [m as f64, (a + 1) as f64, alpha, k as f64 * paths.dt];
                t.row(
                    lead.into_iter()
                        .chain(paths.x(m, a, k).iter().copied())
                        .chain(paths.u(m, a, k).iter().copied())
                        .chain(paths.xn(m, a, k).iter().copied()),
                )?;
            }
        }
    }
    t.finish()
}

/// One row per probe and path with the pathwise cost exponent `Λ_T`.
pub fn write_exponents(path: &Path, run: &PopulationRun, alphas: &[f64]) -> CsvResult<()> {
    let mut header: Vec<String> = ["agent", "alpha", "path", "exponent"].map(String::from).to_vec();
    if run.limit_exponents.is_some() {
        header.push("limit_exponent".into());
    }
    let mut t = Table::create(path, &header)?;
    for (p, &agent) in run.probes.iter().enumerate() {
        for (m, &e) in run.exponents[p].iter().enumerate() {
            let lead = [(agent + 1) as f64, alphas[agent], m as f64, e];
            let lim = run.limit_exponents.as_ref().map(|l| l[p][m]);
            t.row(lead.into_iter().chain(lim))?;
        }
    }
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_padded_matrices_and_rejects_garbage() {
        let m = read_matrix(b"# header comment\n1, 0.5\n0.5 ,2\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]));
        assert!(read_matrix(b"1,x\n").is_err());
        assert!(read_matrix(b"1,2\n3\n").is_err());
        assert!(read_matrix(b"").is_err());
    }

    #[test]
    fn table_formatting_round_trips() {
        let mut buf = Vec::new();
        let mut t = Table::new(&mut buf, &["a".into(), "b".into()]).unwrap();
        t.row([0.1 + 0.2, -1e-300]).unwrap();
        t.finish().unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let back: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(back, vec![0.1 + 0.2, -1e-300]);
        assert_eq!(line, "0.30000000000000004,-1e-300");
    }
}
