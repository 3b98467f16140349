//! Normalization, windowing and train/validation splitting.
//!
//! Cleaning can leave gaps in the 2-minute grid; the series is spliced
//! into contiguous segments and windows never straddle a gap. Window
//! sample `n` covers input rows `n..n+p` and predicts the target row
//! `n+p+dn`, i.e. `dn = 0` is the bucket right after the last input
//! bucket. Min/max normalization statistics always come from the
//! training rows only; later rows are clamped into [-1, 1].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DciAggregate, BUCKET_SECONDS, INPUT_COLUMNS, TARGET_COLUMNS};
use crate::error::{Error, Result};
use crate::nn::serialize as container;
use crate::tensor::Tensor;

/// Per-column (min, max) fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub columns: BTreeMap<String, (f64, f64)>,
}

impl NormParams {
    /// Fit from named column slices (training rows only).
    pub fn fit(columns: &[(&str, &[f64])]) -> Result<NormParams> {
        let mut out = BTreeMap::new();
        for (name, values) in columns {
            if values.is_empty() {
                return Err(Error::InvalidData(format!("column {name}: no rows to fit")));
            }
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min >= max {
                return Err(Error::InvalidData(format!(
                    "column {name} is constant ({min}); cannot normalize"
                )));
            }
            out.insert(name.to_string(), (min, max));
        }
        Ok(NormParams { columns: out })
    }

    pub fn range(&self, column: &str) -> Result<(f64, f64)> {
        self.columns
            .get(column)
            .copied()
            .ok_or_else(|| Error::InvalidData(format!("no normalization for column {column:?}")))
    }

    /// Map into [-1, 1]; out-of-range values (validation rows beyond the
    /// training extremes) are clamped.
    pub fn normalize(&self, column: &str, v: f64) -> Result<f64> {
        let (min, max) = self.range(column)?;
        Ok((2.0 * (v - min) / (max - min) - 1.0).clamp(-1.0, 1.0))
    }

    pub fn denormalize(&self, column: &str, v: f64) -> Result<f64> {
        let (min, max) = self.range(column)?;
        Ok((v + 1.0) / 2.0 * (max - min) + min)
    }

    /// Normalize a [T, k] matrix in place, column by column.
    pub fn normalize_matrix(&self, names: &[&str], matrix: &mut Tensor) -> Result<()> {
        let k = matrix.shape()[1];
        debug_assert_eq!(k, names.len());
        let ranges: Vec<(f64, f64)> = names
            .iter()
            .map(|n| self.range(n))
            .collect::<Result<_>>()?;
        for row in matrix.data_mut().chunks_mut(k) {
            for (v, (min, max)) in row.iter_mut().zip(&ranges) {
                *v = (2.0 * (*v - min) / (max - min) - 1.0).clamp(-1.0, 1.0);
            }
        }
        Ok(())
    }
}

/// Windowed samples ready for training: inputs `[N,p,m]`, aligned
/// targets `[N,q]`, plus the target-feature row at each window's last
/// input bucket (the persistence predictor) and each sample's global
/// target row index (used for chronological splitting).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub x: Tensor,
    pub y: Tensor,
    pub persistence: Tensor,
    pub p: usize,
    pub dn: usize,
    pub target_rows: Vec<usize>,
    pub input_columns: Vec<String>,
    pub target_columns: Vec<String>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.target_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_rows.is_empty()
    }

    pub fn m(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn q(&self) -> usize {
        self.y.shape()[1]
    }

    /// One input window as a [p, m] tensor.
    pub fn sample_x(&self, n: usize) -> Tensor {
        let (p, m) = (self.p, self.m());
        Tensor::new(
            vec![p, m],
            self.x.data()[n * p * m..(n + 1) * p * m].to_vec(),
        )
        .expect("sample shape")
    }

    pub fn sample_y(&self, n: usize) -> &[f64] {
        let q = self.q();
        &self.y.data()[n * q..(n + 1) * q]
    }

    /// Gather rows into a batch: ([B,p,m], [B,q]).
    pub fn gather_batch(&self, idxs: &[usize]) -> (Tensor, Tensor) {
        let (p, m, q) = (self.p, self.m(), self.q());
        let mut xb = Vec::with_capacity(idxs.len() * p * m);
        let mut yb = Vec::with_capacity(idxs.len() * q);
        for &n in idxs {
            xb.extend_from_slice(&self.x.data()[n * p * m..(n + 1) * p * m]);
            yb.extend_from_slice(&self.y.data()[n * q..(n + 1) * q]);
        }
        (
            Tensor::new(vec![idxs.len(), p, m], xb).expect("batch shape"),
            Tensor::new(vec![idxs.len(), q], yb).expect("batch shape"),
        )
    }

    pub fn select(&self, idxs: &[usize]) -> WindowedDataset {
        let (p, m, q) = (self.p, self.m(), self.q());
        let mut x = Vec::with_capacity(idxs.len() * p * m);
        let mut y = Vec::with_capacity(idxs.len() * q);
        let mut pers = Vec::with_capacity(idxs.len() * q);
        let mut rows = Vec::with_capacity(idxs.len());
        for &n in idxs {
            x.extend_from_slice(&self.x.data()[n * p * m..(n + 1) * p * m]);
            y.extend_from_slice(&self.y.data()[n * q..(n + 1) * q]);
            pers.extend_from_slice(&self.persistence.data()[n * q..(n + 1) * q]);
            rows.push(self.target_rows[n]);
        }
        WindowedDataset {
            x: Tensor::new(vec![idxs.len(), p, m], x).expect("select shape"),
            y: Tensor::new(vec![idxs.len(), q], y).expect("select shape"),
            persistence: Tensor::new(vec![idxs.len(), q], pers).expect("select shape"),
            p: self.p,
            dn: self.dn,
            target_rows: rows,
            input_columns: self.input_columns.clone(),
            target_columns: self.target_columns.clone(),
        }
    }

    /// Every `stride`-th window (training-time thinning; windows overlap
    /// heavily so this trades samples for speed).
    pub fn subsample(&self, stride: usize) -> WindowedDataset {
        if stride <= 1 {
            return self.clone();
        }
        let idxs: Vec<usize> = (0..self.len()).step_by(stride).collect();
        self.select(&idxs)
    }

    /// Chronological split: a window belongs to the training side iff
    /// its target row index lies before `row`.
    pub fn split_at_row(&self, row: usize) -> (WindowedDataset, WindowedDataset) {
        let train_idx: Vec<usize> = (0..self.len())
            .filter(|&n| self.target_rows[n] < row)
            .collect();
        let val_idx: Vec<usize> = (0..self.len())
            .filter(|&n| self.target_rows[n] >= row)
            .collect();
        (self.select(&train_idx), self.select(&val_idx))
    }

    /// Write tensors + sidecar (`<stem>.bin` / `<stem>.json`).
    pub fn save(&self, stem: &Path, norm: Option<&NormParams>) -> Result<()> {
        let meta = serde_json::json!({
            "p": self.p,
            "dn": self.dn,
            "n": self.len(),
            "input_columns": self.input_columns,
            "target_columns": self.target_columns,
            "target_rows": self.target_rows,
            "norm_params": norm,
        });
        container::save_container(
            &stem.with_extension("bin"),
            &stem.with_extension("json"),
            meta,
            &[
                ("x".into(), &self.x),
                ("y".into(), &self.y),
                ("persistence".into(), &self.persistence),
            ],
        )
    }

    pub fn load(stem: &Path) -> Result<(WindowedDataset, Option<NormParams>)> {
        let (meta, tensors) = container::load_container(
            &stem.with_extension("bin"),
            &stem.with_extension("json"),
        )?;
        let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let (x, y, persistence) = match (map.remove("x"), map.remove("y"), map.remove("persistence"))
        {
            (Some(x), Some(y), Some(p)) => (x, y, p),
            _ => {
                return Err(Error::InvalidData(
                    "dataset container missing x/y/persistence".into(),
                ))
            }
        };
        let p = meta["p"].as_u64().ok_or_else(|| bad_meta("p"))? as usize;
        let dn = meta["dn"].as_u64().ok_or_else(|| bad_meta("dn"))? as usize;
        let target_rows: Vec<usize> =
            serde_json::from_value(meta["target_rows"].clone()).map_err(|_| bad_meta("target_rows"))?;
        let input_columns: Vec<String> =
            serde_json::from_value(meta["input_columns"].clone()).map_err(|_| bad_meta("input_columns"))?;
        let target_columns: Vec<String> =
            serde_json::from_value(meta["target_columns"].clone()).map_err(|_| bad_meta("target_columns"))?;
        let norm: Option<NormParams> = serde_json::from_value(meta["norm_params"].clone()).ok();
        Ok((
            WindowedDataset {
                x,
                y,
                persistence,
                p,
                dn,
                target_rows,
                input_columns,
                target_columns,
            },
            norm,
        ))
    }
}

fn bad_meta(field: &str) -> Error {
    Error::InvalidData(format!("dataset sidecar missing field {field:?}"))
}

/// Slide a length-p window over a contiguous series; sample `n` has
/// inputs rows `n..n+p` and target row `n+p+dn`, giving
/// `N = T - p - dn` samples. `row_offset` shifts the recorded global row
/// indices when the series is one segment of a spliced dataset.
pub fn window(
    inputs: &Tensor,
    targets: &Tensor,
    p: usize,
    dn: usize,
    row_offset: usize,
) -> Result<WindowedDataset> {
    let t = inputs.shape()[0];
    if targets.shape()[0] != t {
        return Err(Error::ShapeMismatch {
            op: "window",
            lhs: inputs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    if p == 0 {
        return Err(Error::InvalidArg("window: p must be >= 1".into()));
    }
    let needed = p + dn + 1;
    if t < needed {
        return Err(Error::InvalidArg(format!(
            "window: series has {t} rows, needs at least p + dn + 1 = {needed}"
        )));
    }
    let m = inputs.shape()[1];
    let q = targets.shape()[1];
    let n = t - p - dn;
    let mut x = Vec::with_capacity(n * p * m);
    let mut y = Vec::with_capacity(n * q);
    let mut pers = Vec::with_capacity(n * q);
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        x.extend_from_slice(&inputs.data()[s * m..(s + p) * m]);
        let ty = s + p + dn;
        y.extend_from_slice(&targets.data()[ty * q..(ty + 1) * q]);
        let tp = s + p - 1;
        pers.extend_from_slice(&targets.data()[tp * q..(tp + 1) * q]);
        rows.push(row_offset + ty);
    }
    Ok(WindowedDataset {
        x: Tensor::new(vec![n, p, m], x)?,
        y: Tensor::new(vec![n, q], y)?,
        persistence: Tensor::new(vec![n, q], pers)?,
        p,
        dn,
        target_rows: rows,
        input_columns: INPUT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        target_columns: TARGET_COLUMNS.iter().map(|s| s.to_string()).collect(),
    })
}

/// Concatenate per-segment windows into one dataset.
pub fn merge(mut parts: Vec<WindowedDataset>) -> Result<WindowedDataset> {
    if parts.is_empty() {
        return Err(Error::InvalidData(
            "no segment is long enough to produce a window".into(),
        ));
    }
    let mut base = parts.remove(0);
    for part in parts {
        if part.p != base.p || part.dn != base.dn || part.m() != base.m() || part.q() != base.q() {
            return Err(Error::InvalidData("merge: mismatched window parts".into()));
        }
        let mut x = base.x.into_data();
        x.extend_from_slice(part.x.data());
        let mut y = base.y.into_data();
        y.extend_from_slice(part.y.data());
        let mut pers = base.persistence.into_data();
        pers.extend_from_slice(part.persistence.data());
        base.target_rows.extend_from_slice(&part.target_rows);
        let n = base.target_rows.len();
        base.x = Tensor::new(vec![n, base.p, part.m()], x)?;
        base.y = Tensor::new(vec![n, part.q()], y)?;
        base.persistence = Tensor::new(vec![n, part.q()], pers)?;
    }
    Ok(base)
}

/// Pairwise Pearson correlation of a [T, m] matrix: symmetric, unit
/// diagonal. Uses the running-sums formula; tests check it against the
/// two-pass textbook route.
pub fn pearson_matrix(series: &Tensor) -> Result<Tensor> {
    let t = series.shape()[0];
    let m = series.shape()[1];
    if t < 2 {
        return Err(Error::InvalidData("pearson: need at least 2 rows".into()));
    }
    let mut sums = vec![0.0; m];
    let mut sq = vec![0.0; m];
    let mut cross = vec![0.0; m * m];
    for row in series.data().chunks(m) {
        for i in 0..m {
            sums[i] += row[i];
            sq[i] += row[i] * row[i];
            for j in i..m {
                cross[i * m + j] += row[i] * row[j];
            }
        }
    }
    let tf = t as f64;
    let var: Vec<f64> = (0..m).map(|i| sq[i] - sums[i] * sums[i] / tf).collect();
    for (i, v) in var.iter().enumerate() {
        if *v <= 0.0 {
            return Err(Error::InvalidData(format!(
                "pearson: column {i} is constant"
            )));
        }
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let cov = cross[i * m + j] - sums[i] * sums[j] / tf;
            let r = if i == j {
                1.0
            } else {
                (cov / (var[i] * var[j]).sqrt()).clamp(-1.0, 1.0)
            };
            out[i * m + j] = r;
            out[j * m + i] = r;
        }
    }
    Tensor::new(vec![m, m], out)
}

/// A site's windowed data split chronologically into train/validation,
/// with the normalization fitted on the training days.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site: String,
    pub p: usize,
    pub dn: usize,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub norm: NormParams,
    /// Row index of the train/validation boundary.
    pub split_row: usize,
}

/// Full pipeline from clean aggregates to tensors: derive target
/// columns, fit normalization on the first `train_days` of data,
/// normalize, window per contiguous segment, split chronologically.
pub fn build_site_dataset(
    site: &str,
    aggs: &[DciAggregate],
    p: usize,
    dn: usize,
    train_days: f64,
) -> Result<SiteDataset> {
    if aggs.is_empty() {
        return Err(Error::InvalidData(format!("site {site}: no aggregates")));
    }
    let t = aggs.len();
    let mut inputs = Vec::with_capacity(t * 5);
    let mut targets = Vec::with_capacity(t * 5);
    for a in aggs {
        inputs.extend_from_slice(&[
            a.rnti_count as f64,
            a.rb_down,
            a.rb_up,
            a.mcs_down,
            a.mcs_up,
        ]);
        targets.extend_from_slice(&[a.rnti_count as f64, a.rb_down, a.rb_up, a.thr_down, a.thr_up]);
    }
    let mut inputs = Tensor::new(vec![t, 5], inputs)?;
    let mut targets = Tensor::new(vec![t, 5], targets)?;

    let start_ts = aggs[0].timestamp;
    let cutoff = start_ts + (train_days * 86_400.0) as i64;
    let train_rows = aggs.iter().take_while(|a| a.timestamp < cutoff).count();
    if train_rows == t {
        return Err(Error::InvalidData(format!(
            "site {site}: {train_days} training days cover the whole series (validation empty)"
        )));
    }
    if train_rows == 0 {
        return Err(Error::InvalidData(format!(
            "site {site}: no rows inside the {train_days}-day training span"
        )));
    }

    let col = |m: &Tensor, j: usize| -> Vec<f64> {
        m.data()
            .iter()
            .skip(j)
            .step_by(5)
            .take(train_rows)
            .cloned()
            .collect()
    };
    let in_cols: Vec<Vec<f64>> = (0..5).map(|j| col(&inputs, j)).collect();
    let tg_cols: Vec<Vec<f64>> = (0..5).map(|j| col(&targets, j)).collect();
    let mut fit_list: Vec<(&str, &[f64])> = Vec::new();
    for (name, values) in INPUT_COLUMNS.iter().zip(&in_cols) {
        fit_list.push((name, values));
    }
    for (name, values) in TARGET_COLUMNS.iter().zip(&tg_cols) {
        if !INPUT_COLUMNS.contains(name) {
            fit_list.push((name, values));
        }
    }
    let norm = NormParams::fit(&fit_list)?;
    norm.normalize_matrix(&INPUT_COLUMNS, &mut inputs)?;
    norm.normalize_matrix(&TARGET_COLUMNS, &mut targets)?;

    // Contiguous segments: consecutive buckets exactly BUCKET_SECONDS
    // apart. Windows never straddle a splice.
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut seg_start = 0usize;
    for i in 1..t {
        if aggs[i].timestamp - aggs[i - 1].timestamp != BUCKET_SECONDS {
            segments.push((seg_start, i - seg_start));
            seg_start = i;
        }
    }
    segments.push((seg_start, t - seg_start));

    let needed = p + dn + 1;
    let mut parts = Vec::new();
    for (start, len) in segments {
        if len < needed {
            continue;
        }
        let seg_in = inputs.rows(start, len);
        let seg_tg = targets.rows(start, len);
        parts.push(window(&seg_in, &seg_tg, p, dn, start)?);
    }
    let all = merge(parts).map_err(|_| {
        Error::InvalidData(format!(
            "site {site}: no contiguous segment reaches p + dn + 1 = {needed} rows"
        ))
    })?;
    let (train, val) = all.split_at_row(train_rows);
    if train.is_empty() {
        return Err(Error::InvalidData(format!(
            "site {site}: training split has no windows"
        )));
    }
    if val.is_empty() {
        return Err(Error::InvalidData(format!(
            "site {site}: validation split has no windows"
        )));
    }
    Ok(SiteDataset {
        site: site.to_string(),
        p,
        dn,
        train,
        val,
        norm,
        split_row: train_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DciAggregate;

    fn ramp_tensor(t: usize, m: usize) -> Tensor {
        Tensor::new(
            vec![t, m],
            (0..t * m).map(|i| (i % 97) as f64 * 0.37 - 10.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalize_basics() {
        let norm = NormParams::fit(&[("a", &[2.0, 10.0, 6.0])]).unwrap();
        assert_eq!(norm.normalize("a", 6.0).unwrap(), 0.0);
        assert_eq!(norm.normalize("a", 2.0).unwrap(), -1.0);
        assert_eq!(norm.normalize("a", 10.0).unwrap(), 1.0);
        assert_eq!(norm.normalize("a", 100.0).unwrap(), 1.0, "clamped");
        let v = 7.3;
        let round = norm.denormalize("a", norm.normalize("a", v).unwrap()).unwrap();
        assert!((round - v).abs() < 1e-12);

        let err = NormParams::fit(&[("flat", &[3.0, 3.0, 3.0])]).unwrap_err();
        assert!(err.to_string().contains("flat"));
    }

    #[test]
    fn window_counts_and_alignment() {
        let inputs = ramp_tensor(100, 3);
        let targets = ramp_tensor(100, 2);
        let ds = window(&inputs, &targets, 10, 0, 0).unwrap();
        assert_eq!(ds.len(), 90);
        // X[0] is rows 0..10, Y[0] is target row 10, persistence row 9.
        assert_eq!(ds.sample_x(0).data(), &inputs.data()[..30]);
        assert_eq!(ds.sample_y(0), &targets.data()[20..22]);
        assert_eq!(&ds.persistence.data()[..2], &targets.data()[18..20]);
        assert_eq!(ds.target_rows[0], 10);

        // Boundary: T = p + dn + 1 gives exactly one sample.
        let inputs = ramp_tensor(14, 3);
        let targets = ramp_tensor(14, 2);
        let ds = window(&inputs, &targets, 10, 3, 0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.target_rows[0], 13);

        let err = window(&inputs, &targets, 12, 3, 0).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn window_matches_naive_enumeration() {
        // Independent oracle: enumerate every (input range, target row)
        // pair directly.
        for (t, p, dn) in [(30usize, 4usize, 0usize), (25, 7, 3), (12, 2, 9)] {
            let inputs = ramp_tensor(t, 2);
            let targets = ramp_tensor(t, 3);
            let ds = window(&inputs, &targets, p, dn, 0).unwrap();
            let mut count = 0;
            for start in 0.. {
                let target = start + p - 1 + dn + 1;
                if target >= t {
                    break;
                }
                assert_eq!(
                    ds.sample_x(count).data(),
                    &inputs.data()[start * 2..(start + p) * 2]
                );
                assert_eq!(ds.sample_y(count), &targets.data()[target * 3..target * 3 + 3]);
                count += 1;
            }
            assert_eq!(ds.len(), count, "t={t} p={p} dn={dn}");
        }
    }

    #[test]
    fn one_step_base_case() {
        // p=1, dn=0: Y[n] is the row right after X[n].
        let inputs = ramp_tensor(5, 2);
        let targets = ramp_tensor(5, 2);
        let ds = window(&inputs, &targets, 1, 0, 0).unwrap();
        assert_eq!(ds.len(), 4);
        for n in 0..4 {
            assert_eq!(ds.sample_y(n), &targets.data()[(n + 1) * 2..(n + 2) * 2]);
        }
    }

    #[test]
    fn pearson_against_two_pass_oracle() {
        let series = Tensor::new(
            vec![1000, 5],
            (0..5000)
                .map(|i| {
                    let x = i as f64 * 0.618;
                    (x.sin() * 3.0 + (i % 5) as f64) * 0.5 + (x * 0.01).cos()
                })
                .collect(),
        )
        .unwrap();
        let got = pearson_matrix(&series).unwrap();

        // Two-pass oracle: explicit means, then centered sums.
        let (t, m) = (1000usize, 5usize);
        let mut means = vec![0.0; m];
        for row in series.data().chunks(m) {
            for (mu, v) in means.iter_mut().zip(row) {
                *mu += v;
            }
        }
        for mu in &mut means {
            *mu /= t as f64;
        }
        for i in 0..m {
            for j in 0..m {
                let mut num = 0.0;
                let mut di = 0.0;
                let mut dj = 0.0;
                for row in series.data().chunks(m) {
                    let a = row[i] - means[i];
                    let b = row[j] - means[j];
                    num += a * b;
                    di += a * a;
                    dj += b * b;
                }
                let expected = num / (di * dj).sqrt();
                assert!(
                    (got.at2(i, j) - expected).abs() < 1e-10,
                    "({i},{j}): {} vs {expected}",
                    got.at2(i, j)
                );
            }
        }

        // Trivial cases.
        let two = Tensor::new(vec![4, 2], vec![1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0]).unwrap();
        let r = pearson_matrix(&two).unwrap();
        assert!((r.at2(0, 0) - 1.0).abs() < 1e-12);
        assert!((r.at2(0, 1) + 1.0).abs() < 1e-12);

        let flat = Tensor::new(vec![3, 2], vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]).unwrap();
        assert!(pearson_matrix(&flat).is_err());
    }

    fn agg(ts: i64, scale: f64) -> DciAggregate {
        DciAggregate::with_derived_throughput(
            ts,
            (10.0 + 5.0 * scale) as u32,
            20.0 + 3.0 * (ts as f64 * 0.001).sin(),
            15.0 + 2.0 * (ts as f64 * 0.0013).cos(),
            30.0 + 10.0 * (ts as f64 * 0.0007).sin(),
            10.0 + 4.0 * (ts as f64 * 0.0009).cos(),
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn site_dataset_splices_gaps_and_splits_by_target_row() {
        // Two days of buckets with one missing bucket in the middle of
        // day 1: windows must not straddle it.
        let mut aggs = Vec::new();
        for i in 0..1440usize {
            if i == 300 {
                continue; // dropped bucket
            }
            aggs.push(agg(i as i64 * 120, (i % 720) as f64 / 720.0));
        }
        let ds = build_site_dataset("T", &aggs, 10, 0, 1.0).unwrap();
        // Segment lengths 300 and 1139: windows = (300-10) + (1139-10).
        assert_eq!(ds.train.len() + ds.val.len(), 290 + 1129);
        // Split rule: target row < 720 => train.
        assert!(ds.train.target_rows.iter().all(|&r| r < ds.split_row));
        assert!(ds.val.target_rows.iter().all(|&r| r >= ds.split_row));
        // Validation strictly after training in time.
        let max_train = ds.train.target_rows.iter().max().unwrap();
        let min_val = ds.val.target_rows.iter().min().unwrap();
        assert!(max_train < min_val);
        // Inputs are normalized into [-1, 1].
        assert!(ds.train.x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ds.val.y.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        // Train days covering everything -> error.
        assert!(build_site_dataset("T", &aggs, 10, 0, 5.0).is_err());
    }

    #[test]
    fn normalize_then_window_commutes() {
        let mut aggs = Vec::new();
        for i in 0..300usize {
            aggs.push(agg(i as i64 * 120, i as f64 / 300.0));
        }
        let ds = build_site_dataset("T", &aggs, 5, 2, 0.2).unwrap();

        // Window the raw series first, then normalize each window with
        // the same params: X tensors must agree.
        let t = aggs.len();
        let mut raw_in = Vec::new();
        for a in &aggs {
            raw_in.extend_from_slice(&[a.rnti_count as f64, a.rb_down, a.rb_up, a.mcs_down, a.mcs_up]);
        }
        let raw_in = Tensor::new(vec![t, 5], raw_in).unwrap();
        let raw_tg = raw_in.clone();
        let win_first = window(&raw_in, &raw_tg, 5, 2, 0).unwrap();
        let all = merge(vec![win_first]).unwrap();
        let n0 = all.sample_x(0);
        let mut manual = Vec::new();
        for (r, row) in n0.data().chunks(5).enumerate() {
            let _ = r;
            for (j, v) in row.iter().enumerate() {
                manual.push(ds.norm.normalize(INPUT_COLUMNS[j], *v).unwrap());
            }
        }
        let combined = [ds.train.clone(), ds.val.clone()];
        let first = combined
            .iter()
            .flat_map(|d| (0..d.len()).map(move |i| (d.target_rows[i], d, i)))
            .min_by_key(|(r, _, _)| *r)
            .unwrap();
        let got = first.1.sample_x(first.2);
        for (a, b) in got.data().iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn container_round_trip() {
        let inputs = ramp_tensor(40, 5);
        let targets = ramp_tensor(40, 5);
        let ds = window(&inputs, &targets, 6, 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ds");
        let norm = NormParams::fit(&[("a", &[0.0, 1.0])]).unwrap();
        ds.save(&stem, Some(&norm)).unwrap();
        let (loaded, norm2) = WindowedDataset::load(&stem).unwrap();
        assert_eq!(ds, loaded);
        assert_eq!(Some(norm), norm2);
    }
}
