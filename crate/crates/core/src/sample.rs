use crate::error::{Error, Result};

/// `n × d` matrix of i.i.d. observations, one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
}

impl SampleSet {
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data(
                "observations must have at least one column".into(),
            ));
        }
        if data.len() % dim != 0 {
            return Err(Error::Data(format!(
                "{} values cannot be split into rows of {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in row {}",
                pos / dim + 1
            )));
        }
        Ok(SampleSet { data, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Data(format!(
                    "row {} has {} columns, expected {dim}",
                    i + 1,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(data, dim)
    }

    /// One-dimensional samples.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows `range.start..range.end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> SampleSet {
        SampleSet {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
        }
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` here.
    pub fn permuted(&self, order: &[usize]) -> SampleSet {
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        SampleSet {
            data,
            dim: self.dim,
        }
    }

    /// Parses CSV text with one observation per row. A first row containing
    /// any non-numeric field is treated as a header.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Data(format!("malformed CSV: {e}")))?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(r) => rows.push(r),
                Err(_) if idx == 0 => continue,
                Err(_) => {
                    return Err(Error::Data(format!(
                        "malformed CSV: non-numeric field in line {}",
                        idx + 1
                    )))
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Data("CSV contains no observations".into()));
        }
        Self::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_and_without_header() {
        let a = SampleSet::parse_csv("x,y\n1,2\n3,4\n").unwrap();
        let b = SampleSet::parse_csv("1,2\n3, 4\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            SampleSet::parse_csv("a\n1\nfoo\n"),
            Err(Error::Data(_))
        ));
        assert!(SampleSet::parse_csv("1,2\n3\n").is_err());
        assert!(SampleSet::parse_csv("x,y\n").is_err());
        assert!(SampleSet::parse_csv("1,nan\n").is_err());
    }

    #[test]
    fn slicing_and_permutation() {
        let s = SampleSet::from_scalars(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.slice(1, 3), SampleSet::from_scalars(&[2.0, 3.0]).unwrap());
        assert_eq!(
            s.permuted(&[3, 2, 1, 0]),
            SampleSet::from_scalars(&[4.0, 3.0, 2.0, 1.0]).unwrap()
        );
    }
}
