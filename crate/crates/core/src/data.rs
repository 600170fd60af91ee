//! Dataset model, CSV ingestion and validation of the sampling preconditions.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{IcmError, Result};

pub const INTERCEPT_NAME: &str = "const";

/// Outcome, covariates (intercept first) and instruments for one sample.
///
/// Instruments may repeat covariate columns; a dataset with no excluded
/// instrument at all is valid. Construction validates every invariant, so a
/// `Dataset` value is always usable by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y_name: String,
    x_names: Vec<String>,
    z_names: Vec<String>,
    endog_mask: Vec<bool>,
}

impl Dataset {
    /// Builds a dataset from raw parts. `x` must already carry the intercept
    /// in column 0; see [`Dataset::with_intercept`] for the usual entry point.
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y_name: impl Into<String>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        endog_mask: Vec<bool>,
    ) -> Result<Self> {
        let ds = Dataset {
            y,
            x,
            z,
            y_name: y_name.into(),
            x_names,
            z_names,
            endog_mask,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Prepends a column of ones (named `const`) to `x_rest`.
    pub fn with_intercept(
        y: DVector<f64>,
        x_rest: DMatrix<f64>,
        z: DMatrix<f64>,
        y_name: impl Into<String>,
        x_rest_names: Vec<String>,
        z_names: Vec<String>,
        endog_rest: Vec<bool>,
    ) -> Result<Self> {
        let n = y.len();
        if x_rest.nrows() != n && x_rest.ncols() > 0 {
            return Err(IcmError::Validation(format!(
                "row count mismatch: y has {n} rows, X has {}",
                x_rest.nrows()
            )));
        }
        let mut x = DMatrix::from_element(n, x_rest.ncols() + 1, 1.0);
        if x_rest.ncols() > 0 {
            x.columns_mut(1, x_rest.ncols()).copy_from(&x_rest);
        }
        let mut names = Vec::with_capacity(x_rest_names.len() + 1);
        names.push(INTERCEPT_NAME.to_string());
        names.extend(x_rest_names);
        let mut mask = Vec::with_capacity(endog_rest.len() + 1);
        mask.push(false);
        mask.extend(endog_rest);
        Dataset::new(y, x, z, y_name, names, z_names, mask)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        let px = self.x.ncols();
        let pz = self.z.ncols();
        let fail = |msg: String| Err(IcmError::Validation(msg));

        if self.x.nrows() != n || self.z.nrows() != n {
            return fail(format!(
                "row counts differ (y: {n}, X: {}, Z: {})",
                self.x.nrows(),
                self.z.nrows()
            ));
        }
        if px == 0 {
            return fail("X must contain at least the intercept column".into());
        }
        if n < 3 || n < px + 2 {
            return fail(format!("sample size n = {n} must satisfy n >= 3 and n >= p_x + 2 = {}", px + 2));
        }
        if pz == 0 {
            return fail("at least one instrument column is required".into());
        }
        if self.x_names.len() != px || self.z_names.len() != pz || self.endog_mask.len() != px {
            return fail("column metadata does not match matrix dimensions".into());
        }
        if self.x.column(0).iter().any(|&v| v != 1.0) {
            return fail("X column 0 must be the all-ones intercept".into());
        }
        if self.endog_mask[0] {
            return fail("the intercept cannot be flagged endogenous".into());
        }
        if !self.y.iter().all(|v| v.is_finite()) {
            return fail(format!("non-finite value in outcome `{}`", self.y_name));
        }
        for (j, name) in self.x_names.iter().enumerate() {
            if !self.x.column(j).iter().all(|v| v.is_finite()) {
                return fail(format!("non-finite value in covariate `{name}`"));
            }
        }
        for (j, name) in self.z_names.iter().enumerate() {
            let col = self.z.column(j);
            if !col.iter().all(|v| v.is_finite()) {
                return fail(format!("non-finite value in instrument `{name}`"));
            }
            if col.iter().all(|&v| v == col[0]) {
                return fail(format!("instrument `{name}` is constant"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn px(&self) -> usize {
        self.x.ncols()
    }
    pub fn pz(&self) -> usize {
        self.z.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn y_name(&self) -> &str {
        &self.y_name
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn endog_mask(&self) -> &[bool] {
        &self.endog_mask
    }

    pub fn endog_indices(&self) -> Vec<usize> {
        self.endog_mask
            .iter()
            .enumerate()
            .filter_map(|(j, &e)| e.then_some(j))
            .collect()
    }

    /// Same covariates and instruments with a different outcome vector.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        Dataset::new(
            y,
            self.x.clone(),
            self.z.clone(),
            self.y_name.clone(),
            self.x_names.clone(),
            self.z_names.clone(),
            self.endog_mask.clone(),
        )
    }

    /// Writes the dataset back out as CSV: outcome, non-intercept covariates,
    /// then any instrument not already present as a covariate.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| IcmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut wtr = csv::Writer::from_writer(file);

        let mut header: Vec<&str> = vec![&self.y_name];
        let mut cols: Vec<Vec<f64>> = vec![self.y.iter().copied().collect()];
        for j in 1..self.px() {
            header.push(&self.x_names[j]);
            cols.push(self.x.column(j).iter().copied().collect());
        }
        for (j, name) in self.z_names.iter().enumerate() {
            let zc: Vec<f64> = self.z.column(j).iter().copied().collect();
            match header.iter().position(|h| h == name) {
                Some(k) if cols[k] == zc => continue,
                Some(_) => {
                    return Err(IcmError::Argument(format!(
                        "instrument `{name}` shares a name with a different column"
                    )))
                }
                None => {
                    header.push(name);
                    cols.push(zc);
                }
            }
        }
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            wtr.write_record(cols.iter().map(|c| format!("{:?}", c[i])))?;
        }
        wtr.flush().map_err(|source| IcmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Reads a comma-separated file with a header row and assigns column roles.
///
/// The intercept is generated, never read. `endog_cols` must be a subset of
/// `x_cols`; `z_cols` may overlap `x_cols`.
pub fn load_csv(
    path: impl AsRef<Path>,
    y_col: &str,
    x_cols: &[String],
    z_cols: &[String],
    endog_cols: &[String],
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IcmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();

    for e in endog_cols {
        if !x_cols.contains(e) {
            return Err(IcmError::Argument(format!(
                "endogenous column `{e}` is not among the covariates"
            )));
        }
    }
    let wanted: Vec<&str> = std::iter::once(y_col)
        .chain(x_cols.iter().map(String::as_str))
        .chain(z_cols.iter().map(String::as_str))
        .collect();
    let mut positions = Vec::with_capacity(wanted.len());
    for name in &wanted {
        let pos = index
            .get(name)
            .copied()
            .ok_or_else(|| IcmError::MissingColumn(name.to_string()))?;
        positions.push(pos);
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (k, &pos) in positions.iter().enumerate() {
            let raw = record.get(pos).unwrap_or("").trim();
            let value: f64 = raw.parse().map_err(|_| IcmError::Parse {
                row: row + 1,
                column: wanted[k].to_string(),
                value: raw.to_string(),
            })?;
            columns[k].push(value);
        }
    }

    let n = columns[0].len();
    let y = DVector::from_vec(columns[0].clone());
    let px_rest = x_cols.len();
    let x_rest = DMatrix::from_fn(n, px_rest, |i, j| columns[1 + j][i]);
    let z = DMatrix::from_fn(n, z_cols.len(), |i, j| columns[1 + px_rest + j][i]);
    let endog = x_cols.iter().map(|c| endog_cols.contains(c)).collect();
    Dataset::with_intercept(y, x_rest, z, y_col, x_cols.to_vec(), z_cols.to_vec(), endog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrumentTransform {
    None,
    /// Element-wise arctangent of every instrument.
    Atan,
}

/// Robustifies the instruments against outliers; outcome and covariates are
/// left untouched.
pub fn standardize_instruments(ds: &Dataset, method: InstrumentTransform) -> Result<Dataset> {
    match method {
        InstrumentTransform::None => Ok(ds.clone()),
        InstrumentTransform::Atan => Dataset::new(
            ds.y.clone(),
            ds.x.clone(),
            ds.z.map(f64::atan),
            ds.y_name.clone(),
            ds.x_names.clone(),
            ds.z_names.clone(),
            ds.endog_mask.clone(),
        ),
    }
}
