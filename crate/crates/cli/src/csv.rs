//! Comma-separated output with round-trip-exact doubles.

use std::fmt::Write as _;

use mflab_core::SymMatrix;

/// In-memory CSV table with an optional `key=value` footer.
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    footer: Vec<(String, String)>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn width(&self) -> usize {
        self.header.len()
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(
            row.len(),
            self.header.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn footer(&mut self, key: &str, value: String) {
        self.footer.push((key.to_string(), value));
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{}", number(*v)).unwrap();
            }
            out.push('\n');
        }
        for (k, v) in &self.footer {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// 17 significant digits in scientific notation.
pub fn number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Header names `prefix_ij` for the upper triangle, row-major, 1-based.
pub fn upper_names(prefix: &str, d: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 1..=d {
        for j in i..=d {
            out.push(format!("{prefix}_{i}{j}"));
        }
    }
    out
}

pub fn indexed_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn upper_values(m: &SymMatrix) -> Vec<f64> {
    m.upper_triangle()
}

/// Reads two named numeric columns, skipping footer and comment lines.
pub fn read_columns(text: &str, a: &str, b: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or("empty file")?
        .split(',')
        .map(str::trim)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| format!("column {name:?} not found in header"))
    };
    let (ia, ib) = (find(a)?, find(b)?);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        if line.contains('=') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| -> Result<f64, String> {
            cells
                .get(i)
                .ok_or_else(|| format!("data line {} is too short", n + 1))?
                .parse::<f64>()
                .map_err(|e| format!("data line {}: {e}", n + 1))
        };
        xa.push(get(ia)?);
        xb.push(get(ib)?);
    }
    Ok((xa, xb))
}
