//! Telemetry ingestion, normalization, BS clustering and window assembly,
//! plus a seeded synthetic generator used in place of operator data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GgzError, Result};
use crate::policy::{ContextKey, HOURS_PER_DAY};

pub const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M:%S";

/// Names for the first KPI columns of the synthetic feed; the rest are
/// numbered. Semantics stop at the names.
const NAMED_KPIS: [&str; 6] = [
    "dl_prb_usage",
    "rrc_conn",
    "latency",
    "dl_payload",
    "ul_rate",
    "ho_attempts",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Split> {
        match tag {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(GgzError::Data(format!("unknown split tag {other}"))),
        }
    }
}

/// First 70% of each BS's days train, next 15% validation, rest test.
pub fn split_of_day(day: usize, n_days: usize) -> Split {
    let train_days = ((n_days as f64) * 0.70).ceil() as usize;
    let val_days = ((n_days as f64) * 0.15).ceil() as usize;
    if day < train_days {
        Split::Train
    } else if day < train_days + val_days {
        Split::Val
    } else {
        Split::Test
    }
}

/// One base station's hourly record timeline. `hours[i]` is the KPI row at
/// `start + i` hours; `None` marks a gap in the feed.
#[derive(Clone, Debug)]
pub struct BsSeries {
    pub bs_id: String,
    pub start: NaiveDateTime,
    pub hours: Vec<Option<Vec<f64>>>,
}

impl BsSeries {
    pub fn n_days(&self) -> usize {
        self.hours.len() / HOURS_PER_DAY
    }

    pub fn day_complete(&self, day: usize) -> bool {
        let lo = day * HOURS_PER_DAY;
        let hi = lo + HOURS_PER_DAY;
        hi <= self.hours.len() && self.hours[lo..hi].iter().all(|h| h.is_some())
    }
}

/// Reference to one complete day window of one BS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub bs: usize,
    pub day: usize,
}

/// The corpus: per-BS timelines plus everything derived on the train split
/// (normalization bounds, class labels).
#[derive(Clone, Debug)]
pub struct TelemetryDataset {
    pub k: usize,
    pub kpi_names: Vec<String>,
    pub series: Vec<BsSeries>,
    /// Per-KPI (min, max) over the train split, in raw units.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Class label per series, assigned by clustering.
    pub classes: Vec<usize>,
    pub n_classes: usize,
    /// Fraction of val/test values clipped into [0,1] by normalization.
    pub clip_rate: f64,
}

impl TelemetryDataset {
    pub fn n_bs(&self) -> usize {
        self.series.len()
    }

    pub fn d(&self) -> usize {
        self.k * HOURS_PER_DAY
    }

    pub fn is_normalized(&self) -> bool {
        self.bounds.is_some()
    }

    /// Complete-day windows of one split, in (bs, day) order.
    pub fn windows(&self, split: Split) -> Vec<WindowRef> {
        let mut out = Vec::new();
        for (bs, series) in self.series.iter().enumerate() {
            let n_days = series.n_days();
            for day in 0..n_days {
                if split_of_day(day, n_days) == split && series.day_complete(day) {
                    out.push(WindowRef { bs, day });
                }
            }
        }
        out
    }

    /// Normalized window flattened KPI-major: entry (k, t) at index k·24 + t.
    pub fn window_values(&self, w: WindowRef) -> Result<Vec<f64>> {
        let bounds = self
            .bounds
            .as_ref()
            .ok_or_else(|| GgzError::Contract("dataset not normalized yet".into()))?;
        let series = &self.series[w.bs];
        if !series.day_complete(w.day) {
            return Err(GgzError::Contract(format!(
                "window (bs {}, day {}) has gaps",
                w.bs, w.day
            )));
        }
        let mut out = vec![0.0; self.d()];
        for t in 0..HOURS_PER_DAY {
            let row = series.hours[w.day * HOURS_PER_DAY + t].as_ref().unwrap();
            for k in 0..self.k {
                out[k * HOURS_PER_DAY + t] = normalize_value(row[k], bounds[k]);
            }
        }
        Ok(out)
    }

    /// Normalized hourly values of one KPI, starting at an absolute hour
    /// offset; `None` if any needed hour is missing.
    pub fn kpi_slice(&self, bs: usize, kpi: usize, start_hour: usize, len: usize) -> Option<Vec<f64>> {
        let bounds = self.bounds.as_ref()?;
        let series = &self.series[bs];
        if start_hour + len > series.hours.len() {
            return None;
        }
        let mut out = Vec::with_capacity(len);
        for h in start_hour..start_hour + len {
            match &series.hours[h] {
                Some(row) => out.push(normalize_value(row[kpi], bounds[kpi])),
                None => return None,
            }
        }
        Some(out)
    }

    pub fn context_of(&self, w: WindowRef, task: Option<usize>) -> ContextKey {
        ContextKey {
            bs_class: self.classes[w.bs],
            // day-aligned windows start at midnight
            hour: self.series[w.bs].hours[w.day * HOURS_PER_DAY..]
                .first()
                .map(|_| (self.series[w.bs].start.hour() as usize) % HOURS_PER_DAY)
                .unwrap_or(0),
            task,
        }
    }

    pub fn denormalize(&self, kpi: usize, v: f64) -> Result<f64> {
        let bounds = self
            .bounds
            .as_ref()
            .ok_or_else(|| GgzError::Contract("dataset not normalized yet".into()))?;
        let (lo, hi) = bounds[kpi];
        Ok(lo + v * (hi - lo))
    }

    /// Min-max normalize per KPI using train-split rows only; val/test values
    /// outside the train range clip into [0,1] and are counted.
    pub fn normalize(&mut self) -> Result<()> {
        if self.is_normalized() {
            return Ok(());
        }
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); self.k];
        let mut train_rows = 0usize;
        for series in &self.series {
            let n_days = series.n_days();
            for (h, row) in series.hours.iter().enumerate() {
                if split_of_day(h / HOURS_PER_DAY, n_days) != Split::Train {
                    continue;
                }
                if let Some(row) = row {
                    train_rows += 1;
                    for (k, &v) in row.iter().enumerate() {
                        bounds[k].0 = bounds[k].0.min(v);
                        bounds[k].1 = bounds[k].1.max(v);
                    }
                }
            }
        }
        if train_rows == 0 {
            return Err(GgzError::Data("train split is empty".into()));
        }
        for (k, b) in bounds.iter().enumerate() {
            if b.0 == b.1 {
                log::warn!(
                    "KPI {} ({}) is constant on the train split; mapping to 0.5",
                    k,
                    self.kpi_names[k]
                );
            }
        }
        // count clipping on val/test
        let mut clipped = 0usize;
        let mut total = 0usize;
        for series in &self.series {
            let n_days = series.n_days();
            for (h, row) in series.hours.iter().enumerate() {
                if split_of_day(h / HOURS_PER_DAY, n_days) == Split::Train {
                    continue;
                }
                if let Some(row) = row {
                    for (k, &v) in row.iter().enumerate() {
                        total += 1;
                        let (lo, hi) = bounds[k];
                        if v < lo || v > hi {
                            clipped += 1;
                        }
                    }
                }
            }
        }
        self.clip_rate = if total == 0 {
            0.0
        } else {
            clipped as f64 / total as f64
        };
        self.bounds = Some(bounds);
        Ok(())
    }

    /// Per-BS mean daily profile over complete train days, flattened K×24 and
    /// normalized; the clustering feature vector.
    fn mean_daily_profiles(&self) -> Result<Vec<Vec<f64>>> {
        let mut profiles = Vec::with_capacity(self.n_bs());
        for (bs, series) in self.series.iter().enumerate() {
            let n_days = series.n_days();
            let mut acc = vec![0.0; self.d()];
            let mut count = 0usize;
            for day in 0..n_days {
                if split_of_day(day, n_days) != Split::Train || !series.day_complete(day) {
                    continue;
                }
                let w = self.window_values(WindowRef { bs, day })?;
                for (a, v) in acc.iter_mut().zip(&w) {
                    *a += v;
                }
                count += 1;
            }
            if count == 0 {
                return Err(GgzError::Data(format!(
                    "BS {} has no complete train day",
                    series.bs_id
                )));
            }
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
            profiles.push(acc);
        }
        Ok(profiles)
    }

    /// Label BSs by k-means over their mean daily profiles: seeded, 20
    /// restarts, best inertia kept.
    pub fn cluster(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes == 0 || n_classes > self.n_bs() {
            return Err(GgzError::InvalidArg(format!(
                "n_classes {n_classes} out of range for {} base stations",
                self.n_bs()
            )));
        }
        let profiles = self.mean_daily_profiles()?;
        let (labels, _inertia) = kmeans(&profiles, n_classes, seed, 20);
        self.classes = labels;
        self.n_classes = n_classes;
        Ok(())
    }
}

fn normalize_value(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        0.5
    } else {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with random restarts; returns labels and best inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> (Vec<usize>, f64) {
    let mut best_labels = vec![0; points.len()];
    let mut best_inertia = f64::INFINITY;
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (restart as u64).wrapping_mul(0x9e37_79b9));
        let mut centroids: Vec<Vec<f64>> = (0..k)
            .map(|_| points[rng.gen_range(0..points.len())].clone())
            .collect();
        let mut labels = vec![0usize; points.len()];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut best_d = sq_dist(p, &centroids[0]);
                for (c, centroid) in centroids.iter().enumerate().skip(1) {
                    let d = sq_dist(p, centroid);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                if labels[i] != best {
                    labels[i] = best;
                    changed = true;
                }
            }
            let dim = points[0].len();
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue; // keep the previous centroid
                }
                let mut mean = vec![0.0; dim];
                for m in &members {
                    for (a, &v) in mean.iter_mut().zip(m.iter()) {
                        *a += v;
                    }
                }
                for a in mean.iter_mut() {
                    *a /= members.len() as f64;
                }
                *centroid = mean;
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    (best_labels, best_inertia)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_bs: usize,
    pub n_days: usize,
    pub n_classes: usize,
    pub k: usize,
    /// AR(1) noise amplitude in normalized profile units.
    pub noise_sigma: f64,
    /// How much weekend days flatten the diurnal swing.
    pub weekend_factor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_bs: 64,
            n_days: 10,
            n_classes: 4,
            k: 34,
            noise_sigma: 0.04,
            weekend_factor: 0.25,
        }
    }
}

fn sub_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = seed;
    for v in [tag, a, b] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(23).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Class-conditional diurnal profile of one KPI, in [0.05, 0.95] units.
/// `shift` slides the whole profile by fractional hours, modelling sites
/// whose traffic peaks earlier or later than their class's norm.
fn class_profile(cfg: &SynthConfig, class: usize, kpi: usize, shift: f64) -> Vec<f64> {
    let mut rng = sub_rng(cfg.seed, 1, class as u64, kpi as u64);
    let harmonics = 1 + kpi % 3;
    // classes take well-separated base phases so clustering is well-posed
    let class_phase = class as f64 / cfg.n_classes as f64 * 24.0;
    let mut amps = Vec::new();
    let mut phases = Vec::new();
    for j in 1..=harmonics {
        amps.push(rng.gen_range(0.12..0.30) / j as f64);
        phases.push(class_phase + rng.gen_range(0.0..4.0));
    }
    let bias = rng.gen_range(0.35..0.65);
    (0..HOURS_PER_DAY)
        .map(|h| {
            let mut v = bias;
            for (j, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
                let freq = (j + 1) as f64;
                v += a * (std::f64::consts::TAU * freq * (h as f64 + shift + p) / 24.0).sin();
            }
            v.clamp(0.05, 0.95)
        })
        .collect()
}

/// How a KPI reports its values. Real hourly aggregates are never
/// full-precision reals: percentages report coarsely, event counters are
/// small integers, and bursty volume metrics sit at exactly zero off-peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KpiFamily {
    /// Smooth utilization-style metric on a fine lattice.
    Smooth,
    /// Bursty volume metric, rectified to zero through the quiet hours.
    Sparse,
    /// Small-integer counter on a coarse lattice.
    Counter,
}

impl KpiFamily {
    fn of(kpi: usize) -> Self {
        match kpi % 3 {
            0 => KpiFamily::Smooth,
            1 => KpiFamily::Sparse,
            _ => KpiFamily::Counter,
        }
    }

    fn lattice_steps(&self) -> f64 {
        match self {
            KpiFamily::Smooth => 128.0,
            KpiFamily::Sparse => 64.0,
            KpiFamily::Counter => 16.0,
        }
    }

    /// Shape the raw profile units into the family's reporting behavior.
    fn shape(&self, units: f64) -> f64 {
        let clamped = units.clamp(0.0, 1.2);
        match self {
            KpiFamily::Smooth => clamped,
            // everything below the activity floor reports as exactly zero
            KpiFamily::Sparse => ((clamped - 0.40) / 0.60).max(0.0),
            KpiFamily::Counter => clamped,
        }
    }

    fn snap(&self, units: f64) -> f64 {
        let steps = self.lattice_steps();
        (self.shape(units) * steps).round() / steps
    }
}

/// Raw-unit affine range of one KPI; normalization has to undo this.
fn kpi_range(cfg: &SynthConfig, kpi: usize) -> (f64, f64) {
    let mut rng = sub_rng(cfg.seed, 2, kpi as u64, 0);
    let offset = match KpiFamily::of(kpi) {
        KpiFamily::Sparse => 0.0,
        _ => rng.gen_range(0.0..50.0),
    };
    let scale = rng.gen_range(4.0..120.0);
    (offset, scale)
}

/// Deterministic synthetic corpus: class-specific diurnal harmonics, per-BS
/// gain jitter, AR(1) noise, weekend flattening, and cross-KPI couplings that
/// make about a third of the KPIs predictable from driver KPIs.
pub fn synth_generate(cfg: &SynthConfig) -> Result<TelemetryDataset> {
    if cfg.n_bs == 0 || cfg.n_days == 0 || cfg.k == 0 || cfg.n_classes == 0 {
        return Err(GgzError::InvalidArg("synth sizes must be positive".into()));
    }
    let n_hours = cfg.n_days * HOURS_PER_DAY;
    let n_drivers = cfg.k.div_ceil(3).max(1);
    // start on a Monday so days 5 and 6 of each week land on the weekend
    let start = NaiveDateTime::parse_from_str("2025-03-03T00:00:00", TIMESTAMP_FMT).unwrap();

    let mut kpi_names: Vec<String> = NAMED_KPIS.iter().map(|s| s.to_string()).collect();
    for i in kpi_names.len()..cfg.k {
        kpi_names.push(format!("kpi_{i:02}"));
    }
    kpi_names.truncate(cfg.k);

    let mut series = Vec::with_capacity(cfg.n_bs);
    let mut classes = Vec::with_capacity(cfg.n_bs);
    for bs in 0..cfg.n_bs {
        let class = bs % cfg.n_classes;
        classes.push(class);
        let mut gain_rng = sub_rng(cfg.seed, 3, bs as u64, 0);
        let gains: Vec<f64> = (0..cfg.k).map(|_| gain_rng.gen_range(0.88..1.12)).collect();
        // site-specific timing: this BS peaks earlier/later than its class,
        // so context-only imputation cannot explain it away
        let bs_shift: f64 = gain_rng.gen_range(-2.0..2.0);
        let kpi_wiggle: Vec<f64> = (0..cfg.k).map(|_| gain_rng.gen_range(-0.5..0.5)).collect();

        // driver KPIs first: profile + AR(1) noise, in profile units
        let mut driver_series = vec![vec![0.0; n_hours]; n_drivers];
        for (kpi, target) in driver_series.iter_mut().enumerate() {
            let profile = class_profile(cfg, class, kpi, bs_shift + kpi_wiggle[kpi]);
            let mut noise_rng = sub_rng(cfg.seed, 4, bs as u64, kpi as u64);
            let mut ar = 0.0f64;
            let rho = 0.6_f64;
            let innov = cfg.noise_sigma * (1.0 - rho * rho).sqrt();
            for (h, slot) in target.iter_mut().enumerate() {
                ar = rho * ar + innov * standard_normal(&mut noise_rng);
                let day = h / HOURS_PER_DAY;
                let weekend = day % 7 >= 5;
                let hour = h % HOURS_PER_DAY;
                let swing = profile[hour] - 0.5;
                let damp = if weekend { 1.0 - cfg.weekend_factor } else { 1.0 };
                *slot = 0.5 + swing * damp * gains[kpi] + ar;
            }
        }

        // remaining KPIs couple linearly to two drivers plus their own
        // residual profile and a little independent noise
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; cfg.k]; n_hours];
        for kpi in 0..cfg.k {
            let (offset, scale) = kpi_range(cfg, kpi);
            let family = KpiFamily::of(kpi);
            if kpi < n_drivers {
                for h in 0..n_hours {
                    rows[h][kpi] = offset + scale * family.snap(driver_series[kpi][h]);
                }
                continue;
            }
            let mut mix_rng = sub_rng(cfg.seed, 5, class as u64, kpi as u64);
            let d1 = mix_rng.gen_range(0..n_drivers);
            let mut d2 = mix_rng.gen_range(0..n_drivers);
            if d2 == d1 {
                d2 = (d2 + 1) % n_drivers;
            }
            let w1 = mix_rng.gen_range(0.30..0.55);
            let w2 = mix_rng.gen_range(0.15..0.35);
            let own = 1.0 - w1 - w2;
            let profile = class_profile(cfg, class, kpi, bs_shift + kpi_wiggle[kpi]);
            let mut noise_rng = sub_rng(cfg.seed, 6, bs as u64, kpi as u64);
            for h in 0..n_hours {
                let residual = profile[h % HOURS_PER_DAY];
                let eps = 0.3 * cfg.noise_sigma * standard_normal(&mut noise_rng);
                let units = w1 * driver_series[d1][h] + w2 * driver_series[d2][h]
                    + own * residual
                    + eps;
                rows[h][kpi] = offset + scale * family.snap(units * gains[kpi]);
            }
        }

        series.push(BsSeries {
            bs_id: format!("bs_{bs:04}"),
            start,
            hours: rows.into_iter().map(Some).collect(),
        });
    }

    Ok(TelemetryDataset {
        k: cfg.k,
        kpi_names,
        series,
        bounds: None,
        classes,
        n_classes: cfg.n_classes,
        clip_rate: 0.0,
    })
}

// ---------------------------------------------------------------------------
// CSV ingestion and export
// ---------------------------------------------------------------------------

/// Parse the documented schema: `bs_id,timestamp,<K KPI columns>`. Rows are
/// sorted per BS; duplicate timestamps and off-hour timestamps are validation
/// errors, missing hours become gaps.
pub fn load_csv(path: &Path) -> Result<TelemetryDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| GgzError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| GgzError::Data(format!("header: {e}")))?
        .clone();
    if headers.len() < 3 {
        return Err(GgzError::Data(format!(
            "expected bs_id, timestamp and at least one KPI column, got {} columns",
            headers.len()
        )));
    }
    if &headers[0] != "bs_id" || !headers[1].starts_with("timestamp") {
        return Err(GgzError::Data(format!(
            "header must start with bs_id,timestamp — got {},{}",
            &headers[0], &headers[1]
        )));
    }
    let k = headers.len() - 2;
    let kpi_names: Vec<String> = headers.iter().skip(2).map(|s| s.to_string()).collect();

    let mut per_bs: BTreeMap<String, Vec<(NaiveDateTime, Vec<f64>)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| GgzError::Data(format!("line {line}: {e}")))?;
        if record.len() != k + 2 {
            return Err(GgzError::Data(format!(
                "line {line}: expected {} fields, got {}",
                k + 2,
                record.len()
            )));
        }
        let ts = NaiveDateTime::parse_from_str(&record[1], TIMESTAMP_FMT)
            .map_err(|e| GgzError::Data(format!("line {line}: bad timestamp: {e}")))?;
        let mut row = Vec::with_capacity(k);
        for f in record.iter().skip(2) {
            row.push(
                f.parse::<f64>()
                    .map_err(|e| GgzError::Data(format!("line {line}: bad value {f:?}: {e}")))?,
            );
        }
        per_bs.entry(record[0].to_string()).or_default().push((ts, row));
    }
    if per_bs.is_empty() {
        return Err(GgzError::Data("empty dataset: no data rows".into()));
    }

    let mut series = Vec::with_capacity(per_bs.len());
    for (bs_id, mut rows) in per_bs {
        rows.sort_by_key(|(ts, _)| *ts);
        let start = rows[0].0;
        let mut offenders = Vec::new();
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GgzError::Data(format!(
                    "BS {bs_id}: duplicate timestamp {}",
                    w[1].0.format(TIMESTAMP_FMT)
                )));
            }
        }
        for (ts, _) in &rows {
            let delta = *ts - start;
            if delta.num_seconds() % 3600 != 0 {
                offenders.push(ts.format(TIMESTAMP_FMT).to_string());
            }
        }
        if !offenders.is_empty() {
            return Err(GgzError::Data(format!(
                "BS {bs_id}: timestamps off the hourly stride: {}",
                offenders.join(", ")
            )));
        }
        let span_hours = ((rows.last().unwrap().0 - start).num_seconds() / 3600) as usize + 1;
        let mut hours: Vec<Option<Vec<f64>>> = vec![None; span_hours];
        for (ts, row) in rows {
            let idx = ((ts - start).num_seconds() / 3600) as usize;
            hours[idx] = Some(row);
        }
        let gap_count = hours.iter().filter(|h| h.is_none()).count();
        if gap_count > 0 {
            log::warn!("BS {bs_id}: {gap_count} missing hours flagged as gaps");
        }
        series.push(BsSeries {
            bs_id,
            start,
            hours,
        });
    }

    let classes = vec![0; series.len()];
    Ok(TelemetryDataset {
        k,
        kpi_names,
        series,
        bounds: None,
        classes,
        n_classes: 1,
        clip_rate: 0.0,
    })
}

/// Write the raw (pre-normalization) dataset in the documented CSV schema.
/// Values print in shortest-roundtrip form, so load_csv inverts exactly.
pub fn write_csv(ds: &TelemetryDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| GgzError::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["bs_id".to_string(), "timestamp".to_string()];
    header.extend(ds.kpi_names.iter().cloned());
    w.write_record(&header)
        .map_err(|e| GgzError::Data(e.to_string()))?;
    for series in &ds.series {
        for (h, row) in series.hours.iter().enumerate() {
            if let Some(row) = row {
                let ts = series.start + Duration::hours(h as i64);
                let mut record = vec![series.bs_id.clone(), ts.format(TIMESTAMP_FMT).to_string()];
                record.extend(row.iter().map(|v| format!("{v}")));
                w.write_record(&record)
                    .map_err(|e| GgzError::Data(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Persist everything evaluation needs to reproduce preprocessing without
/// re-deriving it: dimensions, class labels, split assignment, bounds.
pub fn write_manifest(ds: &TelemetryDataset, path: &Path) -> Result<()> {
    let bounds = ds
        .bounds
        .as_ref()
        .ok_or_else(|| GgzError::Contract("manifest requires a normalized dataset".into()))?;
    let mut out = String::new();
    writeln!(out, "k={}", ds.k).unwrap();
    writeln!(out, "n_bs={}", ds.n_bs()).unwrap();
    writeln!(out, "n_classes={}", ds.n_classes).unwrap();
    writeln!(out, "clip_rate={}", ds.clip_rate).unwrap();
    for (i, name) in ds.kpi_names.iter().enumerate() {
        writeln!(out, "kpi.{i}={name}").unwrap();
    }
    for (i, b) in bounds.iter().enumerate() {
        writeln!(out, "bounds.{i}={},{}", b.0, b.1).unwrap();
    }
    for (i, series) in ds.series.iter().enumerate() {
        let n_days = series.n_days();
        let split_tags: Vec<&str> = (0..n_days).map(|d| split_of_day(d, n_days).tag()).collect();
        writeln!(out, "class.{}={}", series.bs_id, ds.classes[i]).unwrap();
        writeln!(out, "days.{}={}", series.bs_id, n_days).unwrap();
        writeln!(out, "split.{}={}", series.bs_id, split_tags.join(",")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Re-apply a manifest onto a freshly loaded raw dataset.
pub fn apply_manifest(ds: &mut TelemetryDataset, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| GgzError::Data(format!("manifest line without '=': {line}")))?;
        kv.insert(key.to_string(), value.to_string());
    }
    let k: usize = kv
        .get("k")
        .ok_or_else(|| GgzError::Data("manifest missing k".into()))?
        .parse()
        .map_err(|_| GgzError::Data("manifest k is not a number".into()))?;
    if k != ds.k {
        return Err(GgzError::Dim(format!(
            "manifest K {k} vs dataset K {}",
            ds.k
        )));
    }
    let n_classes: usize = kv
        .get("n_classes")
        .ok_or_else(|| GgzError::Data("manifest missing n_classes".into()))?
        .parse()
        .map_err(|_| GgzError::Data("manifest n_classes is not a number".into()))?;
    let mut bounds = Vec::with_capacity(k);
    for i in 0..k {
        let raw = kv
            .get(&format!("bounds.{i}"))
            .ok_or_else(|| GgzError::Data(format!("manifest missing bounds.{i}")))?;
        let (lo, hi) = raw
            .split_once(',')
            .ok_or_else(|| GgzError::Data(format!("bad bounds.{i}")))?;
        bounds.push((
            lo.parse().map_err(|_| GgzError::Data(format!("bad bounds.{i}")))?,
            hi.parse().map_err(|_| GgzError::Data(format!("bad bounds.{i}")))?,
        ));
    }
    let mut classes = Vec::with_capacity(ds.n_bs());
    for series in &ds.series {
        let c: usize = kv
            .get(&format!("class.{}", series.bs_id))
            .ok_or_else(|| GgzError::Data(format!("manifest missing class.{}", series.bs_id)))?
            .parse()
            .map_err(|_| GgzError::Data(format!("bad class.{}", series.bs_id)))?;
        if c >= n_classes {
            return Err(GgzError::Data(format!(
                "class {c} out of range for {n_classes} classes"
            )));
        }
        classes.push(c);
    }
    ds.bounds = Some(bounds);
    ds.classes = classes;
    ds.n_classes = n_classes;
    if let Some(rate) = kv.get("clip_rate") {
        ds.clip_rate = rate
            .parse()
            .map_err(|_| GgzError::Data("bad clip_rate".into()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One goal-oriented sample: the anchor day plus lookback/horizon bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct GoItem {
    /// Last lookback window; the stack covers days anchor-L+1 ..= anchor.
    pub window: WindowRef,
    pub task: usize,
}

#[derive(Clone, Debug)]
pub enum Batch {
    Recon(Vec<WindowRef>),
    Go(Vec<GoItem>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Recon(v) => v.len(),
            Batch::Go(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shuffled<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Reconstruction-mode batches: a seeded shuffle of the split's windows.
pub fn recon_batches(
    ds: &TelemetryDataset,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(GgzError::InvalidArg("batch_size must be positive".into()));
    }
    let windows = ds.windows(split);
    if windows.is_empty() {
        return Err(GgzError::Data(format!("no complete windows in {} split", split.tag())));
    }
    if batch_size > windows.len() {
        log::warn!(
            "batch_size {batch_size} exceeds {} available windows; using one smaller batch",
            windows.len()
        );
    }
    let mut rng = sub_rng(seed, 10, split as u64, 0);
    let shuffledw = shuffled(&windows, &mut rng);
    Ok(shuffledw
        .chunks(batch_size)
        .map(|c| Batch::Recon(c.to_vec()))
        .collect())
}

/// Anchors whose full lookback stack exists and whose horizon hours are all
/// present. The split constrains the anchor day only: lookback windows are
/// observable history and may reach into earlier days of any split. Anchors
/// missing future samples are excluded, never padded.
pub fn go_anchors(
    ds: &TelemetryDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for (bs, series) in ds.series.iter().enumerate() {
        let n_days = series.n_days();
        for day in 0..n_days {
            if split_of_day(day, n_days) != split {
                continue;
            }
            if day + 1 < lookback {
                continue;
            }
            let stack_ok = (day + 1 - lookback..=day).all(|d| series.day_complete(d));
            if !stack_ok {
                continue;
            }
            let horizon_start = (day + 1) * HOURS_PER_DAY;
            let horizon_ok = horizon_start + horizon <= series.hours.len()
                && (horizon_start..horizon_start + horizon).all(|h| series.hours[h].is_some());
            if horizon_ok {
                out.push(WindowRef { bs, day });
            }
        }
    }
    out
}

/// Goal-oriented batches with tasks stratified inside each batch.
pub fn go_batches(
    ds: &TelemetryDataset,
    split: Split,
    batch_size: usize,
    n_tasks: usize,
    lookback: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if n_tasks == 0 {
        return Err(GgzError::InvalidArg("goal-oriented mode needs tasks".into()));
    }
    if batch_size < n_tasks {
        return Err(GgzError::InvalidArg(format!(
            "batch_size {batch_size} cannot stratify {n_tasks} tasks"
        )));
    }
    let anchors = go_anchors(ds, split, lookback, horizon);
    if anchors.is_empty() {
        return Err(GgzError::Data(format!(
            "no usable lookback/horizon anchors in {} split",
            split.tag()
        )));
    }
    let per_task = batch_size / n_tasks;
    let pools: Vec<Vec<WindowRef>> = (0..n_tasks)
        .map(|t| {
            let mut rng = sub_rng(seed, 11, split as u64, t as u64);
            shuffled(&anchors, &mut rng)
        })
        .collect();
    let n_batches = (anchors.len() / per_task).max(1);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut items = Vec::with_capacity(per_task * n_tasks);
        for (t, pool) in pools.iter().enumerate() {
            for i in 0..per_task {
                let idx = (b * per_task + i) % pool.len();
                items.push(GoItem {
                    window: pool[idx],
                    task: t,
                });
            }
        }
        batches.push(Batch::Go(items));
    }
    Ok(batches)
}
