//! Evaluation: the per-level training objective, prediction scoring against
//! clusterings and taxonomies, Bjøntegaard delta-rate and RD-curve CSV.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::taxonomy::{Clustering, Taxonomy, TaxonomyError};

/// Distortion weights per prefix level used for the reference operating points.
pub const REFERENCE_LAMBDAS: [f64; 3] = [1e-4, 1e-3, 1e-2];
/// Cross-entropy weights per prefix level used for the reference operating points.
pub const REFERENCE_GAMMAS: [f64; 3] = [0.5, 1.0, 2.0];

pub const PREDICTIONS_HEADER: [&str; 4] = ["image_id", "level", "pred_class", "true_class"];
pub const RD_HEADER: [&str; 3] = ["level", "bpp", "quality"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("negative rate {bpp} at level {level}")]
    NegativeRate { level: usize, bpp: f64 },
    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("class {class:?} has no cluster at level {level}")]
    UnmappedClass { class: String, level: usize },
    #[error("row {row} has level {level}, outside 1..={levels}")]
    InvalidLevel {
        row: usize,
        level: usize,
        levels: usize,
    },
    #[error("prediction table is empty")]
    EmptyTable,
    #[error("curve needs at least 4 points with distinct quality, found {0}")]
    InsufficientPoints(usize),
    #[error("curves share no quality interval")]
    NoOverlap,
    #[error("csv: {0}")]
    Csv(String),
    #[error("csv header must be `{0}`")]
    BadHeader(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelTerms {
    pub bpp: f64,
    pub mse: f64,
    pub ce: f64,
}

/// `sum_k bpp_k + lambda_k * mse_k + gamma_k * ce_k`.
pub fn composite_loss(
    levels: &[LevelTerms],
    lambdas: &[f64],
    gammas: &[f64],
) -> Result<f64, EvalError> {
    for (what, n) in [("lambdas", lambdas.len()), ("gammas", gammas.len())] {
        if n != levels.len() {
            return Err(EvalError::LengthMismatch {
                what,
                expected: levels.len(),
                found: n,
            });
        }
    }
    let mut total = 0.0;
    for (k, t) in levels.iter().enumerate() {
        if t.bpp < 0.0 {
            return Err(EvalError::NegativeRate {
                level: k + 1,
                bpp: t.bpp,
            });
        }
        total += t.bpp + lambdas[k] * t.mse + gammas[k] * t.ce;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub image_id: String,
    pub level: usize,
    pub pred_class: String,
    pub true_class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionTable {
    pub rows: Vec<Prediction>,
}

fn csv_err(e: csv::Error) -> EvalError {
    EvalError::Csv(e.to_string())
}

fn check_header(r: &mut csv::Reader<&[u8]>, want: &[&str]) -> Result<(), EvalError> {
    let h = r.headers().map_err(csv_err)?;
    if h.len() != want.len() || h.iter().zip(want).any(|(a, b)| a != *b) {
        return Err(EvalError::BadHeader(want.join(",")));
    }
    Ok(())
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn parse_level(field: &str) -> Result<usize, EvalError> {
    field
        .trim()
        .parse()
        .map_err(|_| EvalError::Csv(format!("bad level {field:?}")))
}

impl PredictionTable {
    pub fn parse_csv(text: &str) -> Result<Self, EvalError> {
        let mut r = reader(text);
        check_header(&mut r, &PREDICTIONS_HEADER)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            rows.push(Prediction {
                image_id: rec[0].to_owned(),
                level: parse_level(&rec[1])?,
                pred_class: rec[2].to_owned(),
                true_class: rec[3].to_owned(),
            });
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(PREDICTIONS_HEADER).expect("in-memory write");
        for p in &self.rows {
            let level = p.level.to_string();
            w.write_record([&p.image_id, &level, &p.pred_class, &p.true_class])
                .expect("in-memory write");
        }
        finish(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAccuracy {
    pub level: usize,
    pub rows: usize,
    /// `None` when no row carries this level.
    pub accuracy: Option<f64>,
}

/// Accuracy at level `k` over the rows tagged `k`, counting a row correct
/// when `clusterings[k - 1]` puts prediction and truth in the same cluster.
pub fn hierarchical_accuracy(
    table: &PredictionTable,
    clusterings: &[Clustering],
) -> Result<Vec<LevelAccuracy>, EvalError> {
    let levels = clusterings.len();
    let mut correct = vec![0usize; levels];
    let mut rows = vec![0usize; levels];
    for (i, p) in table.rows.iter().enumerate() {
        if p.level == 0 || p.level > levels {
            return Err(EvalError::InvalidLevel {
                row: i,
                level: p.level,
                levels,
            });
        }
        let c = &clusterings[p.level - 1];
        let lookup = |class: &str| {
            c.cluster_of(class).ok_or_else(|| EvalError::UnmappedClass {
                class: class.to_owned(),
                level: p.level,
            })
        };
        let hit = lookup(&p.pred_class)? == lookup(&p.true_class)?;
        rows[p.level - 1] += 1;
        correct[p.level - 1] += usize::from(hit);
    }
    Ok((0..levels)
        .map(|k| LevelAccuracy {
            level: k + 1,
            rows: rows[k],
            accuracy: (rows[k] > 0).then(|| correct[k] as f64 / rows[k] as f64),
        })
        .collect())
}

/// Mean Wu-Palmer similarity between predicted and true class over all rows.
pub fn wup_score(table: &PredictionTable, t: &Taxonomy) -> Result<f64, EvalError> {
    if table.rows.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    let mut sum = 0.0;
    for p in &table.rows {
        sum += t.wup(&p.pred_class, &p.true_class)?;
    }
    Ok(sum / table.rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub level: usize,
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BdMethod {
    /// Least-squares cubic in quality for log-rate.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite interpolation of log-rate.
    Pchip,
}

/// Cubic `sum c_i u^i` in the normalized variable `u = (q - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRateCubic {
    pub coeffs: [f64; 4],
    pub center: f64,
    pub scale: f64,
}

impl LogRateCubic {
    pub fn eval(&self, q: f64) -> f64 {
        let u = (q - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    /// Exact integral over `[lo, hi]` in quality units.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let u = (q - self.center) / self.scale;
            self.coeffs
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (i, c)| acc * u + c / (i + 1) as f64)
                * u
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

fn log_rate_points(points: &[RdPoint]) -> Result<Vec<(f64, f64)>, EvalError> {
    let mut pts = Vec::with_capacity(points.len());
    for p in points {
        if !(p.bpp > 0.0) || !p.bpp.is_finite() {
            return Err(EvalError::NonPositiveRate(p.bpp));
        }
        if !p.quality.is_finite() {
            return Err(EvalError::Csv(format!("non-finite quality {}", p.quality)));
        }
        pts.push((p.quality, p.bpp.ln()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let distinct = 1 + pts.windows(2).filter(|w| w[0].0 != w[1].0).count();
    if pts.is_empty() || distinct < 4 {
        return Err(EvalError::InsufficientPoints(if pts.is_empty() {
            0
        } else {
            distinct
        }));
    }
    Ok(pts)
}

/// Least-squares fit of log-rate as a cubic in quality.
pub fn fit_log_rate(points: &[RdPoint]) -> Result<LogRateCubic, EvalError> {
    let pts = log_rate_points(points)?;
    let (qmin, qmax) = (pts[0].0, pts[pts.len() - 1].0);
    let center = 0.5 * (qmin + qmax);
    let scale = 0.5 * (qmax - qmin);
    let a = DMatrix::from_fn(pts.len(), 4, |r, c| {
        ((pts[r].0 - center) / scale).powi(c as i32)
    });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let x = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|_| EvalError::InsufficientPoints(pts.len()))?;
    Ok(LogRateCubic {
        coeffs: [x[0], x[1], x[2], x[3]],
        center,
        scale,
    })
}

/// Interpolant through `(quality, log-rate)` knots with shape-preserving slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn pchip_end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    pub fn new(points: &[RdPoint]) -> Result<Self, EvalError> {
        let pts = log_rate_points(points)?;
        // average log-rate over points sharing a quality value
        let mut x: Vec<f64> = Vec::new();
        let mut y: Vec<f64> = Vec::new();
        let mut n: Vec<f64> = Vec::new();
        for (q, r) in pts {
            if x.last() == Some(&q) {
                *y.last_mut().expect("nonempty") += r;
                *n.last_mut().expect("nonempty") += 1.0;
            } else {
                x.push(q);
                y.push(r);
                n.push(1.0);
            }
        }
        y.iter_mut().zip(&n).for_each(|(v, c)| *v /= c);
        let k = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..k - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; k];
        for i in 1..k - 1 {
            if m[i - 1] * m[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / m[i - 1] + w2 / m[i]);
            }
        }
        d[0] = pchip_end_slope(h[0], h[1], m[0], m[1]);
        d[k - 1] = pchip_end_slope(h[k - 2], h[k - 3], m[k - 2], m[k - 3]);
        Ok(Self { x, y, d })
    }

    pub fn eval(&self, q: f64) -> f64 {
        let k = self.x.len();
        let i = self.x[1..k - 1].partition_point(|&v| v <= q);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let t = (q - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.y[i]
            + (t3 - 2.0 * t2 + t) * h * self.d[i]
            + (-2.0 * t3 + 3.0 * t2) * self.y[i + 1]
            + (t3 - t2) * h * self.d[i + 1]
    }

    /// Exact integral over `[lo, hi]` inside the knot range.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for w in self.x.windows(2) {
            let (a, b) = (w[0].max(lo), w[1].min(hi));
            if a < b {
                // Simpson's rule is exact on each cubic piece.
                total +=
                    (b - a) / 6.0 * (self.eval(a) + 4.0 * self.eval(0.5 * (a + b)) + self.eval(b));
            }
        }
        total
    }
}

fn quality_range(points: &[RdPoint]) -> (f64, f64) {
    points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.quality), hi.max(p.quality))
        })
}

/// Average rate change of `b` relative to `a` at equal quality, in percent.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint], method: BdMethod) -> Result<f64, EvalError> {
    let (alo, ahi) = quality_range(a);
    let (blo, bhi) = quality_range(b);
    let (ia, ib): (Box<dyn Fn(f64, f64) -> f64>, Box<dyn Fn(f64, f64) -> f64>) = match method {
        BdMethod::Cubic => {
            let (fa, fb) = (fit_log_rate(a)?, fit_log_rate(b)?);
            (
                Box::new(move |l, h| fa.integral(l, h)),
                Box::new(move |l, h| fb.integral(l, h)),
            )
        }
        BdMethod::Pchip => {
            let (fa, fb) = (Pchip::new(a)?, Pchip::new(b)?);
            (
                Box::new(move |l, h| fa.integral(l, h)),
                Box::new(move |l, h| fb.integral(l, h)),
            )
        }
    };
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(lo < hi) {
        return Err(EvalError::NoOverlap);
    }
    let mean_diff = (ib(lo, hi) - ia(lo, hi)) / (hi - lo);
    Ok(mean_diff.exp_m1() * 100.0)
}

/// CSV `level,bpp,quality`, rows sorted by level, then rate, then quality.
pub fn export_rd(points: &[RdPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.level
            .cmp(&b.level)
            .then(a.bpp.total_cmp(&b.bpp))
            .then(a.quality.total_cmp(&b.quality))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RD_HEADER).expect("in-memory write");
    for p in &sorted {
        w.write_record([
            p.level.to_string(),
            p.bpp.to_string(),
            p.quality.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn parse_rd(text: &str) -> Result<Vec<RdPoint>, EvalError> {
    let mut r = reader(text);
    check_header(&mut r, &RD_HEADER)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64, EvalError> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| EvalError::Csv(format!("bad number {:?}", &rec[i])))
        };
        let p = RdPoint {
            level: parse_level(&rec[0])?,
            bpp: num(1)?,
            quality: num(2)?,
        };
        if !(p.bpp > 0.0) {
            return Err(EvalError::NonPositiveRate(p.bpp));
        }
        out.push(p);
    }
    Ok(out)
}
