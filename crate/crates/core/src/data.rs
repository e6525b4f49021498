//! Row-major sample matrices.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `n` observations of a `d`-dimensional variable, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Array2<f64>,
}

impl SampleSet {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            data: Array2::zeros((0, dim)),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut data = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {dim}",
                    r.len()
                )));
            }
            data.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
        }
        Ok(Self { data })
    }

    pub fn from_column(values: &[f64]) -> Self {
        Self {
            data: Array2::from_shape_vec((values.len(), 1), values.to_vec())
                .expect("column shape"),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.column(j).to_vec()
    }

    /// First `n` rows (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> SampleSet {
        let n = n.min(self.len());
        SampleSet::new(self.data.slice(s![..n, ..]).to_owned())
    }

    pub fn select_rows(&self, idx: &[usize]) -> SampleSet {
        SampleSet::new(self.data.select(Axis(0), idx))
    }

    pub fn column_means(&self) -> Vec<f64> {
        if self.is_empty() {
            return vec![f64::NAN; self.dim()];
        }
        self.data
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_default()
    }

    /// Unbiased per-column variances.
    pub fn column_variances(&self) -> Vec<f64> {
        self.data.var_axis(Axis(0), 1.0).to_vec()
    }
}

/// Writes a headered CSV (`x1,...,xd`), one row per observation.
pub fn write_samples_csv<W: std::io::Write>(samples: &SampleSet, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let header: Vec<String> = (1..=samples.dim()).map(|j| format!("x{j}")).collect();
    w.write_record(&header).map_err(csv_err)?;
    for row in samples.data.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered numeric CSV; column names are ignored.
pub fn read_samples_csv<R: std::io::Read>(source: R) -> Result<SampleSet> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let dim = r.headers().map_err(csv_err)?.len();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {f:?}", k + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    SampleSet::from_rows(&rows, dim)
}

pub fn save_samples(samples: &SampleSet, path: &std::path::Path) -> Result<()> {
    write_samples_csv(samples, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_samples(path: &std::path::Path) -> Result<SampleSet> {
    read_samples_csv(std::fs::File::open(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

impl From<Array2<f64>> for SampleSet {
    fn from(data: Array2<f64>) -> Self {
        Self::new(data)
    }
}
