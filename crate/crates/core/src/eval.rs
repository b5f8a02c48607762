//! Inference post-processing and ensemble metrics.

use std::io::Write;
use std::path::Path;

use crate::autodiff::prob::{argmax, clamped_neg_log};
use crate::autodiff::Tensor;
use crate::error::{config, state, Error, Result};
use crate::objective::SpecializationMatrix;

pub const HISTOGRAM_BINS: usize = 20;

/// Drops the trailing auxiliary slot. The remaining entries are not renormalized.
pub fn strip_auxiliary(p: &[f64]) -> Result<Vec<f64>> {
    if p.len() < 2 {
        return config("strip_auxiliary needs at least one class plus the auxiliary slot");
    }
    Ok(p[..p.len() - 1].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Averaged {
    pub probs: Vec<f64>,
    /// Every member put all of its mass outside the classes.
    pub rejected: bool,
}

/// Element-wise mean of member rows, optionally rescaled to sum to one.
pub fn ensemble_average(rows: &[Vec<f64>], normalize: bool) -> Result<Averaged> {
    let first = rows.first().ok_or_else(|| Error::Config("ensemble_average needs at least one member".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return config("member rows differ in length");
    }
    let mut probs = vec![0.0; first.len()];
    for r in rows {
        probs.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let m = rows.len() as f64;
    probs.iter_mut().for_each(|a| *a /= m);
    let mass: f64 = probs.iter().sum();
    let rejected = mass <= 0.0;
    if normalize && !rejected {
        probs.iter_mut().for_each(|a| *a /= mass);
    }
    Ok(Averaged { probs, rejected })
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if n != labels.len() {
        return config(format!("{n} predictions for {} labels", labels.len()));
    }
    if n == 0 {
        return Err(Error::Input("no examples to score".into()));
    }
    Ok(())
}

/// Percentage of examples that no member classifies correctly.
pub fn oracle_error(member_argmax: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    check_labels(member_argmax.len(), labels)?;
    let missed = member_argmax.iter().zip(labels).filter(|(row, y)| row.iter().all(|p| p != *y)).count();
    Ok(100.0 * missed as f64 / labels.len() as f64)
}

/// Percentage of examples whose averaged prediction is wrong.
pub fn top1_error(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    check_labels(predicted.len(), labels)?;
    let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Member probability tables for one set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[B, W]` per member.
    pub members: Vec<Tensor>,
    pub num_classes: usize,
    pub auxiliary: bool,
}

impl Predictions {
    pub fn new(members: Vec<Tensor>, num_classes: usize, auxiliary: bool) -> Result<Self> {
        let width = num_classes + auxiliary as usize;
        let first = members.first().ok_or_else(|| Error::Config("predictions need at least one member".into()))?;
        let batch = first.shape()[0];
        for t in &members {
            if t.shape() != [batch, width] {
                return config(format!("member output {:?}, expected [{batch}, {width}]", t.shape()));
            }
        }
        Ok(Self { members, num_classes, auxiliary })
    }

    pub fn batch(&self) -> usize {
        self.members[0].shape()[0]
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    fn width(&self) -> usize {
        self.num_classes + self.auxiliary as usize
    }

    /// Raw output row, auxiliary slot included.
    pub fn raw(&self, j: usize, m: usize) -> &[f64] {
        let w = self.width();
        &self.members[m].data()[j * w..(j + 1) * w]
    }

    pub fn stripped(&self, j: usize, m: usize) -> &[f64] {
        &self.raw(j, m)[..self.num_classes]
    }

    pub fn averaged(&self, j: usize, normalize: bool) -> Averaged {
        let rows: Vec<Vec<f64>> = (0..self.member_count()).map(|m| self.stripped(j, m).to_vec()).collect();
        ensemble_average(&rows, normalize).expect("rows share one width")
    }

    /// `[B][M]` argmax of each member's stripped row.
    pub fn member_argmax(&self) -> Vec<Vec<usize>> {
        (0..self.batch())
            .map(|j| (0..self.member_count()).map(|m| argmax(self.stripped(j, m))).collect())
            .collect()
    }

    pub fn ensemble_argmax(&self) -> Vec<usize> {
        (0..self.batch()).map(|j| argmax(&self.averaged(j, false).probs)).collect()
    }

    pub fn oracle_error(&self, labels: &[usize]) -> Result<f64> {
        oracle_error(&self.member_argmax(), labels)
    }

    pub fn top1_error(&self, labels: &[usize]) -> Result<f64> {
        top1_error(&self.ensemble_argmax(), labels)
    }

    /// Each member's own error rate, in percent.
    pub fn member_errors(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let am = self.member_argmax();
        (0..self.member_count())
            .map(|m| top1_error(&am.iter().map(|r| r[m]).collect::<Vec<_>>(), labels))
            .collect()
    }

    /// Normalized ensemble probability of class `c` on examples labelled `c`.
    pub fn class_confidences(&self, labels: &[usize], c: usize) -> Result<Vec<f64>> {
        check_labels(self.batch(), labels)?;
        let v: Vec<f64> =
            (0..self.batch()).filter(|&j| labels[j] == c).map(|j| self.averaged(j, true).probs[c]).collect();
        if v.is_empty() {
            return Err(Error::Input(format!("no test examples of class {c}")));
        }
        Ok(v)
    }

    /// Member `m`'s renormalized stripped probability of class `c` on examples labelled `c`.
    pub fn member_confidences(&self, labels: &[usize], c: usize, m: usize) -> Result<Vec<f64>> {
        check_labels(self.batch(), labels)?;
        let v: Vec<f64> = (0..self.batch())
            .filter(|&j| labels[j] == c)
            .map(|j| {
                let row = self.stripped(j, m);
                let mass: f64 = row.iter().sum();
                if mass > 0.0 {
                    row[c] / mass
                } else {
                    0.0
                }
            })
            .collect();
        if v.is_empty() {
            return Err(Error::Input(format!("no test examples of class {c}")));
        }
        Ok(v)
    }

    /// Per-input mean auxiliary probability across members.
    pub fn ood_scores(&self) -> Result<Vec<f64>> {
        if !self.auxiliary {
            return Err(Error::Unsupported("OOD scores need members with an auxiliary output".into()));
        }
        let m = self.member_count() as f64;
        Ok((0..self.batch())
            .map(|j| (0..self.member_count()).map(|k| self.raw(j, k)[self.num_classes]).sum::<f64>() / m)
            .collect())
    }

    /// Cross-entropy of every (example, member) pair, bucketed by whether the
    /// member is specialized on the example's class.
    pub fn cross_entropy_split(&self, labels: &[usize], w: Option<&SpecializationMatrix>) -> Result<CeSplit> {
        let w = match w {
            Some(w) => w,
            None => return state("cross-entropy split needs a frozen specialization matrix"),
        };
        check_labels(self.batch(), labels)?;
        if w.num_classes() != self.num_classes || w.members() != self.member_count() {
            return config("specialization matrix does not match the ensemble");
        }
        let mut split = CeSplit::default();
        for (j, &y) in labels.iter().enumerate() {
            for m in 0..self.member_count() {
                let row = self.stripped(j, m);
                let mass: f64 = row.iter().sum();
                let p = if mass > 0.0 { row[y] / mass } else { 0.0 };
                let ce = clamped_neg_log(p);
                if w.get(y, m) {
                    split.specialized.push(ce);
                } else {
                    split.non_specialized.push(ce);
                }
            }
        }
        Ok(split)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CeSplit {
    pub specialized: Vec<f64>,
    pub non_specialized: Vec<f64>,
}

/// Counts over `HISTOGRAM_BINS` uniform bins on `[0, 1]`; 1.0 falls in the top bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_center(i: usize) -> f64 {
        (i as f64 + 0.5) / HISTOGRAM_BINS as f64
    }
}

pub fn confidence_histogram(values: &[f64]) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Input("histogram of an empty split".into()));
    }
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite confidence {v}")));
        }
        let bin = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Ok(Histogram { counts })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-class assignment counts `[classes x members]` recorded for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSnapshot {
    pub epoch: usize,
    pub phase: String,
    pub num_classes: usize,
    pub members: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurityRow {
    pub epoch: usize,
    pub phase: String,
    pub class: usize,
    pub member: usize,
    pub count: u64,
    /// Share of the class's assignments received by this member.
    pub ratio: f64,
}

/// Normalizes each class row of every snapshot. Rows without assignments get ratio 0.
pub fn purity_flow(snapshots: &[CountSnapshot]) -> Vec<PurityRow> {
    let mut rows = Vec::new();
    for s in snapshots {
        for c in 0..s.num_classes {
            let row = &s.counts[c * s.members..(c + 1) * s.members];
            let total: u64 = row.iter().sum();
            for (m, &count) in row.iter().enumerate() {
                let ratio = if total == 0 { 0.0 } else { count as f64 / total as f64 };
                rows.push(PurityRow { epoch: s.epoch, phase: s.phase.clone(), class: c, member: m, count, ratio });
            }
        }
    }
    rows
}

/// Aggregate metrics for one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub examples: usize,
    pub oracle_error: f64,
    pub top1_error: f64,
    pub member_errors: Vec<f64>,
    /// Examples on which every member put zero mass on the classes.
    pub rejected: usize,
    /// Per-class histograms of the normalized ensemble confidence.
    pub histograms: Vec<Histogram>,
    /// `[member][class]` histograms of each member's renormalized confidence.
    pub member_histograms: Vec<Vec<Histogram>>,
    pub median_confidence: Vec<f64>,
}

impl MetricReport {
    pub fn compute(preds: &Predictions, labels: &[usize]) -> Result<Self> {
        let oracle = preds.oracle_error(labels)?;
        let top1 = preds.top1_error(labels)?;
        let member_errors = preds.member_errors(labels)?;
        let rejected = (0..preds.batch()).filter(|&j| preds.averaged(j, false).rejected).count();
        let mut histograms = Vec::new();
        let mut median_confidence = Vec::new();
        for c in 0..preds.num_classes {
            match preds.class_confidences(labels, c) {
                Ok(v) => {
                    histograms.push(confidence_histogram(&v)?);
                    median_confidence.push(median(&v).unwrap_or(f64::NAN));
                }
                Err(Error::Input(_)) => {
                    histograms.push(Histogram { counts: vec![0; HISTOGRAM_BINS] });
                    median_confidence.push(f64::NAN);
                }
                Err(e) => return Err(e),
            }
        }
        let mut member_histograms = Vec::new();
        for m in 0..preds.member_count() {
            let mut per_class = Vec::new();
            for c in 0..preds.num_classes {
                per_class.push(match preds.member_confidences(labels, c, m) {
                    Ok(v) => confidence_histogram(&v)?,
                    Err(_) => Histogram { counts: vec![0; HISTOGRAM_BINS] },
                });
            }
            member_histograms.push(per_class);
        }
        Ok(Self {
            examples: labels.len(),
            oracle_error: oracle,
            top1_error: top1,
            member_errors,
            rejected,
            histograms,
            member_histograms,
            median_confidence,
        })
    }

    pub fn write_errors_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        w.write_record(["examples", &self.examples.to_string()])?;
        w.write_record(["oracle_error", &fmt_f(self.oracle_error)])?;
        w.write_record(["top1_error", &fmt_f(self.top1_error)])?;
        w.write_record(["rejected", &self.rejected.to_string()])?;
        for (m, e) in self.member_errors.iter().enumerate() {
            w.write_record([format!("member{m}_error"), fmt_f(*e)])?;
        }
        for (c, v) in self.median_confidence.iter().enumerate() {
            w.write_record([format!("class{c}_median_confidence"), fmt_f(*v)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Two-column histogram CSVs: `hist_class{c}.csv` for the ensemble and
    /// `hist_member{m}_class{c}.csv` per member.
    pub fn write_histograms(&self, dir: &Path) -> Result<()> {
        for (c, h) in self.histograms.iter().enumerate() {
            write_histogram(&dir.join(format!("hist_class{c}.csv")), h)?;
        }
        for (m, per_class) in self.member_histograms.iter().enumerate() {
            for (c, h) in per_class.iter().enumerate() {
                write_histogram(&dir.join(format!("hist_member{m}_class{c}.csv")), h)?;
            }
        }
        Ok(())
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "examples {}\noracle error {:.2}%\ntop-1 error {:.2}%\n",
            self.examples, self.oracle_error, self.top1_error
        );
        for (m, e) in self.member_errors.iter().enumerate() {
            s.push_str(&format!("member {m} error {e:.2}%\n"));
        }
        s
    }
}

/// Fixed-precision float formatting used by every CSV writer.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_center", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([format!("{:.3}", Histogram::bin_center(i)), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ce_split(path: &Path, split: &CeSplit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bucket", "cross_entropy"])?;
    for v in &split.specialized {
        w.write_record(["specialized", &fmt_f(*v)])?;
    }
    for v in &split.non_specialized {
        w.write_record(["non_specialized", &fmt_f(*v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ood_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "ood_score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f(*s)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_purity_flow(path: &Path, rows: &[PurityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "class", "member", "count", "ratio"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.phase.clone(),
            r.class.to_string(),
            r.member.to_string(),
            r.count.to_string(),
            fmt_f(r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text fallback used where a CSV writer is unavailable.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
