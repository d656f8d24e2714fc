use chrono::{Datelike, Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::frame::{FrameVariable, MultivariateFrame};
use super::series::{build_interval_dummy, build_season_dummy, DateInterval, VariableSpec};
use super::{DataError, DataResult};

/// A date range over which the generated entrant level is multiplied by
/// `factor` (values < 1 model a collapse, e.g. an epidemic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub factor: f64,
}

impl ShockSpec {
    fn interval(&self) -> DataResult<DateInterval> {
        DateInterval::new(self.start, self.end)
    }
}

/// Recipe for a synthetic five-variable dataset with the canonical layout.
///
/// The entrant series is trend × annual cycle × weekly cycle × shocks ×
/// log-normal day noise, clipped at zero. The two interval dummies mirror the
/// declared shock ranges, the season dummy follows the calendar, and the
/// attraction series is a smoothed, lagged copy of the entrant level
/// rescaled to [0, 100]. The same spec always generates the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub start_date: NaiveDate,
    pub length_days: usize,
    /// Baseline daily entrant count before modulation.
    pub base_level: f64,
    /// Polynomial in elapsed years applied multiplicatively to the baseline;
    /// empty means a flat trend.
    pub trend_coeffs: Vec<f64>,
    /// Relative amplitude of the annual cycle (peaking mid July).
    pub annual_amplitude: f64,
    /// Relative amplitude of the day-of-week cycle.
    pub weekly_amplitude: f64,
    pub politics_shocks: Vec<ShockSpec>,
    pub disease_shocks: Vec<ShockSpec>,
    /// Standard deviation of the log-normal day-to-day noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            start_date: NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date"),
            length_days: 3926,
            base_level: 15_000.0,
            trend_coeffs: vec![1.0, 0.08],
            annual_amplitude: 0.35,
            weekly_amplitude: 0.12,
            politics_shocks: vec![ShockSpec {
                start: NaiveDate::from_ymd_opt(2017, 3, 1).expect("valid date"),
                end: NaiveDate::from_ymd_opt(2020, 9, 30).expect("valid date"),
                factor: 0.55,
            }],
            disease_shocks: vec![
                ShockSpec {
                    start: NaiveDate::from_ymd_opt(2015, 6, 1).expect("valid date"),
                    end: NaiveDate::from_ymd_opt(2015, 8, 31).expect("valid date"),
                    factor: 0.5,
                },
                ShockSpec {
                    start: NaiveDate::from_ymd_opt(2020, 2, 1).expect("valid date"),
                    end: NaiveDate::from_ymd_opt(2020, 9, 30).expect("valid date"),
                    factor: 0.08,
                },
            ],
            noise_scale: 0.08,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> DataResult<()> {
        let fail = |detail: String| Err(DataError::Frame { detail });
        if self.length_days == 0 {
            return fail("length_days must be >= 1".into());
        }
        if !(self.base_level.is_finite() && self.base_level > 0.0) {
            return fail(format!("base_level must be positive, got {}", self.base_level));
        }
        for amp in [self.annual_amplitude, self.weekly_amplitude] {
            if !(0.0..1.0).contains(&amp) {
                return fail(format!("cycle amplitudes must be in [0, 1), got {amp}"));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return fail(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        for shock in self.politics_shocks.iter().chain(&self.disease_shocks) {
            if !(shock.factor.is_finite() && shock.factor >= 0.0) {
                return fail(format!("shock factor must be >= 0, got {}", shock.factor));
            }
        }
        Ok(())
    }

    fn end_date(&self) -> NaiveDate {
        self.start_date + Days::new(self.length_days as u64 - 1)
    }

    fn trend(&self, years: f64) -> f64 {
        if self.trend_coeffs.is_empty() {
            return 1.0;
        }
        let mut acc = 0.0;
        for coeff in self.trend_coeffs.iter().rev() {
            acc = acc * years + coeff;
        }
        acc.max(0.0)
    }
}

fn shock_factor(shocks: &[ShockSpec], date: NaiveDate) -> f64 {
    shocks
        .iter()
        .filter(|s| s.start <= date && date <= s.end)
        .map(|s| s.factor)
        .product()
}

/// Generates the canonical five-variable frame described by `spec`.
pub fn synth_generate(spec: &SynthSpec) -> DataResult<MultivariateFrame> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let t = spec.length_days;

    let mut entrant = Vec::with_capacity(t);
    for d in 0..t {
        let date = spec.start_date + Days::new(d as u64);
        let years = d as f64 / 365.25;
        let doy = date.ordinal() as f64;
        let annual = 1.0
            + spec.annual_amplitude
                * (std::f64::consts::TAU * (doy - 196.0) / 365.25).cos();
        let dow = date.weekday().num_days_from_monday() as f64;
        let weekly = 1.0 + spec.weekly_amplitude * (std::f64::consts::TAU * dow / 7.0).cos();
        let shocks = shock_factor(&spec.politics_shocks, date)
            * shock_factor(&spec.disease_shocks, date);
        let z: f64 = normal.sample(&mut rng);
        let noise = (spec.noise_scale * z).exp();
        let value = spec.base_level * spec.trend(years) * annual * weekly * shocks * noise;
        entrant.push(value.max(0.0));
    }

    // Attraction: search interest modeled as a 14-day mean of entrant levels
    // lagged by 3 days, plus its own mild noise, min-max scaled to [0, 100].
    let mut attraction_raw = Vec::with_capacity(t);
    for d in 0..t {
        let hi = d.saturating_sub(3);
        let lo = hi.saturating_sub(13);
        let window = &entrant[lo..=hi];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let z: f64 = normal.sample(&mut rng);
        attraction_raw.push(mean * (0.5 * spec.noise_scale * z).exp());
    }
    let min = attraction_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = attraction_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let attraction: Vec<f64> = if max > min {
        attraction_raw
            .iter()
            .map(|v| (v - min) / (max - min) * 100.0)
            .collect()
    } else {
        vec![50.0; t]
    };

    let politics_spec = VariableSpec::dummy_interval(
        "politics",
        spec.politics_shocks
            .iter()
            .map(ShockSpec::interval)
            .collect::<DataResult<Vec<_>>>()?,
    )?;
    let disease_spec = VariableSpec::dummy_interval(
        "disease",
        spec.disease_shocks
            .iter()
            .map(ShockSpec::interval)
            .collect::<DataResult<Vec<_>>>()?,
    )?;
    let politics = build_interval_dummy(&politics_spec, spec.start_date, t)?;
    let disease = build_interval_dummy(&disease_spec, spec.start_date, t)?;
    let season = build_season_dummy(spec.start_date, t)?;

    let frame = MultivariateFrame::new(
        spec.start_date,
        vec![
            FrameVariable::new(VariableSpec::numeric("entrant"), entrant)?,
            FrameVariable::from_series(politics_spec, &politics)?,
            FrameVariable::from_series(disease_spec, &disease)?,
            FrameVariable::from_series(VariableSpec::dummy_season("season"), &season)?,
            FrameVariable::new(VariableSpec::numeric("attraction"), attraction)?,
        ],
    )?;
    debug_assert_eq!(frame.end_date(), Some(spec.end_date()));
    Ok(frame)
}
