//! Balanced return/characteristics panels: construction, CSV ingestion and
//! the cross-sectional transforms applied to characteristics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::eigen_ratio;

/// Relative smallest-eigenvalue threshold for `X_tᵀX_t` at load time.
pub const GRAM_REL_TOL: f64 = 1e-10;

/// Excess returns and per-period characteristics for `N` assets over `T` periods.
///
/// Column `t` of `returns` is the return realised over `t → t+1`, explained by
/// the characteristics `characteristics[t]` observed at the start of period `t`.
#[derive(Debug, Clone)]
pub struct Panel {
    returns: DMatrix<f64>,
    characteristics: Vec<DMatrix<f64>>,
    asset_ids: Vec<String>,
    period_labels: Vec<String>,
    characteristic_names: Vec<String>,
    has_constant: bool,
}

impl Panel {
    pub fn new(
        returns: DMatrix<f64>,
        characteristics: Vec<DMatrix<f64>>,
        asset_ids: Vec<String>,
        period_labels: Vec<String>,
        has_constant: bool,
    ) -> Result<Self> {
        let (n, t) = returns.shape();
        if characteristics.len() != t {
            return Err(Error::IncompatibleDimensions(format!(
                "{} characteristic matrices for {t} periods",
                characteristics.len()
            )));
        }
        if asset_ids.len() != n || period_labels.len() != t {
            return Err(Error::IncompatibleDimensions(
                "label lengths do not match the return matrix".into(),
            ));
        }
        if t < 2 {
            return Err(Error::IncompatibleDimensions(format!("need T >= 2, got {t}")));
        }
        let l = characteristics[0].ncols();
        if l == 0 || n <= l {
            return Err(Error::IncompatibleDimensions(format!("need N > L >= 1, got N = {n}, L = {l}")));
        }
        for (p, x) in characteristics.iter().enumerate() {
            if x.shape() != (n, l) {
                return Err(Error::IncompatibleDimensions(format!(
                    "period {p}: characteristics are {:?}, expected ({n}, {l})",
                    x.shape()
                )));
            }
            if has_constant && x.column(0).iter().any(|&v| v != 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "period {p}: first characteristic is flagged constant but is not all ones"
                )));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("period {p}: non-finite characteristic")));
            }
            if !(eigen_ratio(&x.tr_mul(x)) > GRAM_REL_TOL) {
                return Err(Error::RankDeficientCharacteristics {
                    period: p,
                    label: period_labels[p].clone(),
                });
            }
        }
        if !returns.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite return".into()));
        }
        let characteristic_names = (0..l)
            .map(|c| if has_constant && c == 0 { "const".to_string() } else { format!("c{}", c + usize::from(!has_constant)) })
            .collect();
        Ok(Self {
            returns,
            characteristics,
            asset_ids,
            period_labels,
            characteristic_names,
            has_constant,
        })
    }

    pub fn n(&self) -> usize {
        self.returns.nrows()
    }

    pub fn t(&self) -> usize {
        self.returns.ncols()
    }

    pub fn l(&self) -> usize {
        self.characteristics[0].ncols()
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    /// Return vector `R_{t+1}` for period `t`.
    pub fn r(&self, t: usize) -> DVector<f64> {
        self.returns.column(t).into_owned()
    }

    /// Characteristic matrix `X_t`.
    pub fn x(&self, t: usize) -> &DMatrix<f64> {
        &self.characteristics[t]
    }

    pub fn characteristics(&self) -> &[DMatrix<f64>] {
        &self.characteristics
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.characteristic_names
    }

    /// Replace the default names (`const`, `c1`, ...).
    pub fn with_characteristic_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.l() {
            return Err(Error::IncompatibleDimensions(format!("{} names for {} characteristics", names.len(), self.l())));
        }
        self.characteristic_names = names;
        Ok(self)
    }

    pub fn has_constant(&self) -> bool {
        self.has_constant
    }

    /// Same characteristics, different returns (used by scaling checks).
    pub fn with_returns(&self, returns: DMatrix<f64>) -> Result<Self> {
        if returns.shape() != self.returns.shape() {
            return Err(Error::IncompatibleDimensions("return matrix shape changed".into()));
        }
        let mut out = self.clone();
        out.returns = returns;
        Ok(out)
    }
}

/// What to do with assets that are not observed in every period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    DropAsset,
    Error,
}

/// Column mapping for long-format panel files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub asset_col: String,
    pub period_col: String,
    pub return_col: String,
    /// Characteristic columns in order; empty means every remaining column.
    pub characteristic_cols: Vec<String>,
    pub missing: MissingPolicy,
    /// Prepend an all-ones column as characteristic 1.
    pub prepend_constant: bool,
    /// `chrono` format string for period labels; lexicographic order if absent.
    pub period_format: Option<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            asset_col: "asset_id".into(),
            period_col: "period".into(),
            return_col: "ret".into(),
            characteristic_cols: Vec::new(),
            missing: MissingPolicy::DropAsset,
            prepend_constant: true,
            period_format: None,
        }
    }
}

struct Observation {
    ret: Option<f64>,
    chars: Vec<Option<f64>>,
}

impl Observation {
    fn complete(&self) -> bool {
        self.ret.is_some() && self.chars.iter().all(Option::is_some)
    }
}

fn parse_field(raw: &str, line: usize) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Parse { line, msg: format!("`{s}`: {e}") })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn sort_periods(labels: BTreeSet<String>, format: Option<&str>) -> Result<Vec<String>> {
    let mut labels: Vec<String> = labels.into_iter().collect();
    if let Some(fmt) = format {
        let mut keyed = Vec::with_capacity(labels.len());
        for label in labels {
            let date = chrono::NaiveDate::parse_from_str(&label, fmt).map_err(|e| {
                Error::InvalidConfig(format!("period `{label}` does not match `{fmt}`: {e}"))
            })?;
            keyed.push((date, label));
        }
        keyed.sort();
        labels = keyed.into_iter().map(|(_, l)| l).collect();
    }
    Ok(labels)
}

/// Read a long-format CSV panel (`asset_id,period,ret,c1,...,cL`).
///
/// Assets are sorted by id, periods ascending. Empty fields are missing
/// values; incomplete assets are dropped or rejected per `schema.missing`.
pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    read_panel(&mut reader, schema)
}

/// [`load_panel`] over any reader.
pub fn read_panel<R: std::io::Read>(reader: &mut csv::Reader<R>, schema: &PanelSchema) -> Result<Panel> {
    let headers = reader.headers()?.clone();
    let asset_idx = column_index(&headers, &schema.asset_col)?;
    let period_idx = column_index(&headers, &schema.period_col)?;
    let ret_idx = column_index(&headers, &schema.return_col)?;
    let char_idx: Vec<usize> = if schema.characteristic_cols.is_empty() {
        (0..headers.len())
            .filter(|i| ![asset_idx, period_idx, ret_idx].contains(i))
            .collect()
    } else {
        schema
            .characteristic_cols
            .iter()
            .map(|c| column_index(&headers, c))
            .collect::<Result<_>>()?
    };
    if char_idx.is_empty() && !schema.prepend_constant {
        return Err(Error::InvalidConfig("no characteristic columns".into()));
    }

    let mut obs: BTreeMap<String, HashMap<String, Observation>> = BTreeMap::new();
    let mut periods = BTreeSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let asset = record.get(asset_idx).unwrap_or("").trim().to_string();
        let period = record.get(period_idx).unwrap_or("").trim().to_string();
        if asset.is_empty() || period.is_empty() {
            return Err(Error::Parse { line, msg: "empty asset or period".into() });
        }
        let ret = parse_field(record.get(ret_idx).unwrap_or(""), line)?;
        let chars = char_idx
            .iter()
            .map(|&i| parse_field(record.get(i).unwrap_or(""), line))
            .collect::<Result<Vec<_>>>()?;
        periods.insert(period.clone());
        let per_asset = obs.entry(asset.clone()).or_default();
        if per_asset.insert(period.clone(), Observation { ret, chars }).is_some() {
            return Err(Error::DuplicateObservation { asset, period });
        }
    }
    let periods = sort_periods(periods, schema.period_format.as_deref())?;

    let mut kept = Vec::new();
    for (asset, per_period) in &obs {
        let missing = periods
            .iter()
            .find(|p| !per_period.get(*p).is_some_and(Observation::complete));
        match (missing, schema.missing) {
            (None, _) => kept.push(asset.clone()),
            (Some(p), MissingPolicy::Error) => {
                return Err(Error::UnbalancedPanel { asset: asset.clone(), period: p.clone() })
            }
            (Some(p), MissingPolicy::DropAsset) => {
                log::debug!("dropping asset `{asset}`: incomplete in period `{p}`");
            }
        }
    }

    let n = kept.len();
    let t = periods.len();
    let offset = usize::from(schema.prepend_constant);
    let l = char_idx.len() + offset;
    let mut returns = DMatrix::zeros(n, t);
    let mut xs = vec![DMatrix::zeros(n, l); t];
    for (i, asset) in kept.iter().enumerate() {
        let per_period = &obs[asset];
        for (p, period) in periods.iter().enumerate() {
            let o = &per_period[period];
            returns[(i, p)] = o.ret.expect("complete");
            if schema.prepend_constant {
                xs[p][(i, 0)] = 1.0;
            }
            for (c, v) in o.chars.iter().enumerate() {
                xs[p][(i, c + offset)] = v.expect("complete");
            }
        }
    }
    let has_constant = schema.prepend_constant
        || (l > 0 && n > 0 && xs.iter().all(|x| x.column(0).iter().all(|&v| v == 1.0)));
    let mut names: Vec<String> = char_idx.iter().map(|&i| headers[i].trim().to_string()).collect();
    if schema.prepend_constant {
        names.insert(0, "const".into());
    }
    Panel::new(returns, xs, kept, periods, has_constant)?.with_characteristic_names(names)
}

/// Write a panel in the long CSV format read by [`load_panel`]. The constant
/// column, if flagged, is omitted so that reading back with
/// `prepend_constant = true` reproduces the panel.
pub fn write_panel_csv<W: std::io::Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let skip = usize::from(panel.has_constant());
    let mut header = vec!["asset_id".to_string(), "period".to_string(), "ret".to_string()];
    header.extend((skip..panel.l()).map(|c| format!("c{}", c + 1 - skip)));
    w.write_record(&header)?;
    for (i, asset) in panel.asset_ids().iter().enumerate() {
        for (t, period) in panel.period_labels().iter().enumerate() {
            let mut rec = vec![asset.clone(), period.clone(), format!("{:e}", panel.returns[(i, t)])];
            rec.extend((skip..panel.l()).map(|c| format!("{:e}", panel.x(t)[(i, c)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write equally shaped matrices in long format: one row per (row label,
/// column label) with one value column per matrix.
pub fn write_matrices_long<W: std::io::Write>(
    writer: W,
    row_header: &str,
    row_labels: &[String],
    col_header: &str,
    col_labels: &[String],
    values: &[(&str, &DMatrix<f64>)],
) -> Result<()> {
    for (name, m) in values {
        if m.shape() != (row_labels.len(), col_labels.len()) {
            return Err(Error::IncompatibleDimensions(format!(
                "{name} is {:?}, labels are {}×{}",
                m.shape(),
                row_labels.len(),
                col_labels.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![row_header.to_string(), col_header.to_string()];
    header.extend(values.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (i, r) in row_labels.iter().enumerate() {
        for (j, c) in col_labels.iter().enumerate() {
            let mut rec = vec![r.clone(), c.clone()];
            rec.extend(values.iter().map(|(_, m)| format!("{:e}", m[(i, j)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// How tied values are ranked by [`rank_normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// Ordinal ranks, ties broken by ascending asset id.
    #[default]
    Ordinal,
    /// Tied values share the average of their ordinal ranks.
    Average,
}

/// Cross-sectional ranks (1 = smallest) of one column.
pub fn cross_sectional_ranks(values: &[f64], tie: TieRule) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal values keep asset order
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    match tie {
        TieRule::Ordinal => {
            for (pos, &i) in order.iter().enumerate() {
                ranks[i] = (pos + 1) as f64;
            }
        }
        TieRule::Average => {
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && values[order[end]] == values[order[start]] {
                    end += 1;
                }
                let avg = (start + 1 + end) as f64 / 2.0;
                for &i in &order[start..end] {
                    ranks[i] = avg;
                }
                start = end;
            }
        }
    }
    ranks
}

/// Replace every non-constant characteristic by `−0.5 + rank/N` within each
/// period. Fails if the normalised characteristics become collinear.
pub fn rank_normalize(panel: &Panel, tie: TieRule) -> Result<Panel> {
    let n = panel.n();
    let first = usize::from(panel.has_constant());
    let xs = panel
        .characteristics()
        .iter()
        .map(|x| {
            let mut out = x.clone();
            for c in first..x.ncols() {
                let col: Vec<f64> = x.column(c).iter().copied().collect();
                for (i, z) in cross_sectional_ranks(&col, tie).into_iter().enumerate() {
                    out[(i, c)] = -0.5 + z / n as f64;
                }
            }
            out
        })
        .collect();
    Panel::new(
        panel.returns.clone(),
        xs,
        panel.asset_ids.clone(),
        panel.period_labels.clone(),
        panel.has_constant,
    )?
    .with_characteristic_names(panel.characteristic_names.clone())
}

/// Change characteristic units: `X_t ← X_t · diag(weights)`.
pub fn rescale_characteristics(panel: &Panel, weights: &[f64]) -> Result<Panel> {
    if weights.len() != panel.l() {
        return Err(Error::IncompatibleDimensions(format!(
            "{} weights for {} characteristics",
            weights.len(),
            panel.l()
        )));
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::NonPositiveWeight { index, value });
    }
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let xs = panel.characteristics().iter().map(|x| x * &w).collect();
    Panel::new(
        panel.returns.clone(),
        xs,
        panel.asset_ids.clone(),
        panel.period_labels.clone(),
        panel.has_constant && weights[0] == 1.0,
    )?
    .with_characteristic_names(panel.characteristic_names.clone())
}
