//! Synthetic context generator.
//!
//! Parameters are drawn in three stages: a context draws sub-ranges from the
//! hyperprior, then two cluster centres inside each sub-range, then every
//! series draws its own parameters around one of the centres. A series is
//! `trend(t) * seasonality(t) * noise` on the raw grid `t_i = i / rho`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Weibull};
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, ContextBatch};
use crate::error::{domain, Error, Result};
use crate::model::si::si_targets;
use crate::rng::Rng;
use latpfn_autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.min <= x && x <= self.max
    }

    pub fn contains_range(&self, other: &Range) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

pub fn map_log_uniform(x: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(domain("map_log_uniform", format!("kappa {kappa} must be positive")));
    }
    let arg = x * kappa + 1.0;
    if !(arg > 0.0) {
        return Err(domain("map_log_uniform", format!("x*kappa + 1 = {arg} <= 0")));
    }
    Ok(arg.log2())
}

pub fn unmap_log_uniform(y: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(domain("unmap_log_uniform", format!("kappa {kappa} must be positive")));
    }
    Ok((y.exp2() - 1.0) / kappa)
}

/// How the linear and exponential trend parts combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendForm {
    /// `1 + (m_lin t + c_lin) * m_exp^(t - c_exp)`: the offset shifts the
    /// exponential in time, so negative offsets stay well defined.
    #[default]
    Compound,
    /// `1 + (m_lin t + c_lin) * (m_exp * c_exp^t)`, NaN for negative `c_exp`
    /// at fractional `t`.
    Literal,
}

/// Parameters that receive the full range -> centre -> series treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Annual,
    Monthly,
    Weekly,
    Linear,
    Exponential,
    Resolution,
}

impl Param {
    pub const ALL: [Param; 6] = [
        Param::Annual,
        Param::Monthly,
        Param::Weekly,
        Param::Linear,
        Param::Exponential,
        Param::Resolution,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Season {
    Week,
    Month,
    Year,
}

impl Season {
    pub const ALL: [Season; 3] = [Season::Week, Season::Month, Season::Year];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperPrior {
    pub annual_scale: Range,
    pub monthly_scale: Range,
    pub weekly_scale: Range,
    pub linear_trend: Range,
    pub exp_trend: Range,
    pub noise_k: Range,
    pub resolution: Range,
    pub linear_offset: Range,
    pub exp_offset: Range,
    /// Inclusive range of harmonics per seasonal component.
    pub harmonics_min: usize,
    pub harmonics_max: usize,
    /// Standard deviation of series parameters around their cluster centre.
    pub seasonality_std: f64,
    pub linear_std: f64,
    pub exp_std: f64,
    pub resolution_std: f64,
    pub kappa_exp: f64,
    pub kappa_rho: f64,
    /// Multiplier for log-scaling the noise amplitude in the regression
    /// targets.
    pub kappa_noise: f64,
    /// One of these is chosen per context; series draw their amplitude from it.
    pub noise_ranges: Vec<Range>,
    pub p_week: f64,
    pub p_month: f64,
    pub p_year: f64,
    pub trend_form: TrendForm,
    pub trend_cap: f64,
}

impl Default for HyperPrior {
    fn default() -> Self {
        Self {
            annual_scale: Range::new(-8.0, 8.0),
            monthly_scale: Range::new(-4.0, 4.0),
            weekly_scale: Range::new(-2.0, 2.0),
            linear_trend: Range::new(-0.015, 0.015),
            exp_trend: Range::new(0.996, 1.0016),
            noise_k: Range::new(0.8, 5.0),
            resolution: Range::new(0.1, 1.0),
            linear_offset: Range::new(-1.0, 2.0),
            exp_offset: Range::new(-1.0, 2.0),
            harmonics_min: 4,
            harmonics_max: 12,
            seasonality_std: 0.15,
            linear_std: 0.005,
            exp_std: 0.001,
            resolution_std: 0.0,
            kappa_exp: 507.0,
            kappa_rho: 53.6,
            kappa_noise: 1.0,
            noise_ranges: vec![Range::new(0.0, 0.1), Range::new(0.2, 0.4), Range::new(0.6, 0.8)],
            p_week: 7.0,
            p_month: 30.417,
            p_year: 30.417,
            trend_form: TrendForm::Compound,
            trend_cap: 1e6,
        }
    }
}

impl HyperPrior {
    pub fn range(&self, p: Param) -> Range {
        match p {
            Param::Annual => self.annual_scale,
            Param::Monthly => self.monthly_scale,
            Param::Weekly => self.weekly_scale,
            Param::Linear => self.linear_trend,
            Param::Exponential => self.exp_trend,
            Param::Resolution => self.resolution,
        }
    }

    pub fn std(&self, p: Param) -> f64 {
        match p {
            Param::Annual | Param::Monthly | Param::Weekly => self.seasonality_std,
            Param::Linear => self.linear_std,
            Param::Exponential => self.exp_std,
            Param::Resolution => self.resolution_std,
        }
    }

    /// Multiplier for parameters whose sub-ranges are drawn log-uniformly.
    pub fn kappa(&self, p: Param) -> Option<f64> {
        match p {
            Param::Exponential => Some(self.kappa_exp),
            Param::Resolution => Some(self.kappa_rho),
            _ => None,
        }
    }

    pub fn period(&self, s: Season) -> f64 {
        match s {
            Season::Week => self.p_week,
            Season::Month => self.p_month,
            Season::Year => self.p_year,
        }
    }

    /// Hull of all noise amplitude ranges.
    pub fn noise_hull(&self) -> Range {
        let min = self.noise_ranges.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
        let max = self
            .noise_ranges
            .iter()
            .map(|r| r.max)
            .fold(f64::NEG_INFINITY, f64::max);
        Range::new(min, max)
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("annual_scale", self.annual_scale),
            ("monthly_scale", self.monthly_scale),
            ("weekly_scale", self.weekly_scale),
            ("linear_trend", self.linear_trend),
            ("exp_trend", self.exp_trend),
            ("noise_k", self.noise_k),
            ("resolution", self.resolution),
            ("linear_offset", self.linear_offset),
            ("exp_offset", self.exp_offset),
        ];
        for (name, r) in named.iter().chain(
            self.noise_ranges
                .iter()
                .map(|r| ("noise_ranges", *r))
                .collect::<Vec<_>>()
                .iter(),
        ) {
            if !(r.min <= r.max) {
                return Err(Error::Config(format!("{name}: min {} > max {}", r.min, r.max)));
            }
        }
        for (name, v) in [
            ("seasonality_std", self.seasonality_std),
            ("linear_std", self.linear_std),
            ("exp_std", self.exp_std),
            ("resolution_std", self.resolution_std),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("kappa_exp", self.kappa_exp),
            ("kappa_rho", self.kappa_rho),
            ("kappa_noise", self.kappa_noise),
            ("trend_cap", self.trend_cap),
            ("p_week", self.p_week),
            ("p_month", self.p_month),
            ("p_year", self.p_year),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.harmonics_min < 1 || self.harmonics_min > self.harmonics_max {
            return Err(Error::Config(format!(
                "harmonics range [{}, {}] must be positive integers with min <= max",
                self.harmonics_min, self.harmonics_max
            )));
        }
        if !(self.noise_k.min > 0.0) {
            return Err(Error::Config("noise_k must be positive".into()));
        }
        if !(self.resolution.min > 0.0) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.noise_ranges.is_empty() || self.noise_hull().min < 0.0 {
            return Err(Error::Config("noise_ranges must be non-empty and >= 0".into()));
        }
        for p in [Param::Exponential, Param::Resolution] {
            let (r, k) = (self.range(p), self.kappa(p).unwrap_or(1.0));
            map_log_uniform(r.min, k)?;
        }
        Ok(())
    }
}

/// Limits of one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextParams {
    /// Indexed by [`Param::index`].
    pub ranges: [Range; 6],
    pub noise_k: f64,
    pub noise_range: Range,
    /// Harmonics per component, indexed by [`Season`].
    pub harmonics: [usize; 3],
}

impl ContextParams {
    pub fn range(&self, p: Param) -> Range {
        self.ranges[p.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCenters {
    /// `mu[param][cluster - 1]`.
    pub mu: [[f64; 2]; 6],
}

impl ClusterCenters {
    pub fn get(&self, p: Param, cluster: u8) -> f64 {
        self.mu[p.index()][(cluster - 1) as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesParams {
    pub m_annual: f64,
    pub m_monthly: f64,
    pub m_weekly: f64,
    pub m_lin: f64,
    pub c_lin: f64,
    pub m_exp: f64,
    pub c_exp: f64,
    pub k: f64,
    pub m_noise: f64,
    pub rho: f64,
    /// Indexed by [`Season`].
    pub harmonics: [usize; 3],
    /// `(c_f, d_f)` pairs per component, indexed by [`Season`].
    pub coeffs: [Vec<(f64, f64)>; 3],
    pub cluster: u8,
}

impl SeriesParams {
    pub fn scale(&self, s: Season) -> f64 {
        match s {
            Season::Week => self.m_weekly,
            Season::Month => self.m_monthly,
            Season::Year => self.m_annual,
        }
    }

    /// A flat series: unit trend, no seasonality, no noise.
    pub fn flat(rho: f64) -> Self {
        Self {
            m_annual: 0.0,
            m_monthly: 0.0,
            m_weekly: 0.0,
            m_lin: 0.0,
            c_lin: 0.0,
            m_exp: 1.0,
            c_exp: 0.0,
            k: 1.0,
            m_noise: 0.0,
            rho,
            harmonics: [1; 3],
            coeffs: [vec![(0.0, 0.0)], vec![(0.0, 0.0)], vec![(0.0, 0.0)]],
            cluster: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSeries {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    /// The trend hit the overflow cap somewhere on the grid.
    pub flagged: bool,
}

pub fn sample_context_params(hp: &HyperPrior, rng: &mut Rng) -> Result<ContextParams> {
    hp.validate()?;
    let mut ranges = [Range::new(0.0, 0.0); 6];
    for p in Param::ALL {
        let r = hp.range(p);
        ranges[p.index()] = match hp.kappa(p) {
            Some(k) => {
                let mapped = Range::new(map_log_uniform(r.min, k)?, map_log_uniform(r.max, k)?);
                let (a, b) = (mapped.sample(rng), mapped.sample(rng));
                let lo = unmap_log_uniform(a.min(b), k)?.clamp(r.min, r.max);
                let hi = unmap_log_uniform(a.max(b), k)?.clamp(r.min, r.max);
                Range::new(lo, hi)
            }
            None => {
                let (a, b) = (r.sample(rng), r.sample(rng));
                Range::new(a.min(b), a.max(b))
            }
        };
    }
    let noise_k = hp.noise_k.sample(rng);
    let noise_range = hp.noise_ranges[rng.random_range(0..hp.noise_ranges.len())];
    let mut harmonics = [0; 3];
    for h in &mut harmonics {
        *h = rng.random_range(hp.harmonics_min..=hp.harmonics_max);
    }
    Ok(ContextParams {
        ranges,
        noise_k,
        noise_range,
        harmonics,
    })
}

pub fn sample_cluster_centers(cp: &ContextParams, rng: &mut Rng) -> ClusterCenters {
    let mut mu = [[0.0; 2]; 6];
    for p in Param::ALL {
        let r = cp.range(p);
        mu[p.index()] = [r.sample(rng), r.sample(rng)];
    }
    ClusterCenters { mu }
}

fn normal(rng: &mut Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("finite std").sample(rng)
}

pub fn sample_series_params(
    centers: &ClusterCenters,
    cluster: u8,
    cp: &ContextParams,
    hp: &HyperPrior,
    rng: &mut Rng,
) -> Result<SeriesParams> {
    if cluster != 1 && cluster != 2 {
        return Err(domain(
            "sample_series_params",
            format!("cluster {cluster} not in {{1, 2}}"),
        ));
    }
    let draw = |p: Param, rng: &mut Rng| normal(rng, centers.get(p, cluster), hp.std(p));
    let m_annual = draw(Param::Annual, rng);
    let m_monthly = draw(Param::Monthly, rng);
    let m_weekly = draw(Param::Weekly, rng);
    let m_lin = draw(Param::Linear, rng);
    let m_exp = draw(Param::Exponential, rng);
    let mut rho = draw(Param::Resolution, rng);
    if !(rho > 0.0) {
        rho = cp.range(Param::Resolution).min;
    }
    let c_lin = hp.linear_offset.sample(rng);
    let c_exp = hp.exp_offset.sample(rng);
    let m_noise = cp.noise_range.sample(rng);
    let mut coeffs: [Vec<(f64, f64)>; 3] = Default::default();
    for (v, &delta) in cp.harmonics.iter().enumerate() {
        let sd = (1.0 / delta as f64).sqrt();
        coeffs[v] = (0..delta)
            .map(|_| (normal(rng, 0.0, sd), normal(rng, 0.0, sd)))
            .collect();
    }
    Ok(SeriesParams {
        m_annual,
        m_monthly,
        m_weekly,
        m_lin,
        c_lin,
        m_exp,
        c_exp,
        k: cp.noise_k,
        m_noise,
        rho,
        harmonics: cp.harmonics,
        coeffs,
        cluster,
    })
}

/// Trend value and whether it was clamped to `cap`.
pub fn eval_trend(t: f64, psi: &SeriesParams, form: TrendForm, cap: f64) -> (f64, bool) {
    let lin = psi.m_lin * t + psi.c_lin;
    let v = match form {
        TrendForm::Compound => 1.0 + lin * psi.m_exp.powf(t - psi.c_exp),
        TrendForm::Literal => 1.0 + lin * (psi.m_exp * psi.c_exp.powf(t)),
    };
    if v.is_nan() {
        (v, true)
    } else if v.abs() > cap {
        (cap.copysign(v), true)
    } else {
        (v, false)
    }
}

pub fn eval_component(t: f64, psi: &SeriesParams, s: Season, period: f64) -> f64 {
    let idx = s as usize;
    let w = 2.0 * std::f64::consts::PI * t / period;
    let sum: f64 = psi.coeffs[idx]
        .iter()
        .enumerate()
        .map(|(f, &(c, d))| {
            let x = (f + 1) as f64 * w;
            c * x.sin() + d * x.cos()
        })
        .sum();
    1.0 + psi.scale(s) * sum
}

pub fn eval_seasonality(t: f64, psi: &SeriesParams, hp: &HyperPrior) -> f64 {
    Season::ALL
        .iter()
        .map(|&s| eval_component(t, psi, s, hp.period(s)))
        .product()
}

/// Multiplicative Weibull noise `1 + m (z - median(z))`, `z ~ Weibull(1, k)`.
pub fn sample_noise(len: usize, k: f64, m_noise: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(k > 0.0) || !(m_noise >= 0.0) {
        return Err(domain(
            "sample_noise",
            format!("need k > 0 and m >= 0, got k={k} m={m_noise}"),
        ));
    }
    let dist = Weibull::new(1.0, k).map_err(|e| domain("sample_noise", e.to_string()))?;
    let median = std::f64::consts::LN_2.powf(1.0 / k);
    Ok((0..len).map(|_| 1.0 + m_noise * (dist.sample(rng) - median)).collect())
}

pub fn synthesize_series(psi: &SeriesParams, s: usize, hp: &HyperPrior, rng: &mut Rng) -> Result<SyntheticSeries> {
    if s < 2 {
        return Err(domain("synthesize_series", format!("length {s} < 2")));
    }
    if !(psi.rho > 0.0) {
        return Err(domain("synthesize_series", format!("resolution {} <= 0", psi.rho)));
    }
    let noise = sample_noise(s, psi.k, psi.m_noise, rng)?;
    let mut flagged = false;
    let mut t = Vec::with_capacity(s);
    let mut v = Vec::with_capacity(s);
    for (i, z) in noise.into_iter().enumerate() {
        let ti = i as f64 / psi.rho;
        let (tr, f) = eval_trend(ti, psi, hp.trend_form, hp.trend_cap);
        flagged |= f;
        t.push(ti);
        v.push(tr * eval_seasonality(ti, psi, hp) * z);
    }
    Ok(SyntheticSeries { t, v, flagged })
}

/// Shape of one generated context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchShape {
    /// Context examples.
    pub n: usize,
    /// Held-out series.
    pub n_h: usize,
    /// Sequence length.
    pub s: usize,
    /// Horizon.
    pub h: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            n: 14,
            n_h: 2,
            s: 240,
            h: 60,
        }
    }
}

impl BatchShape {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n_h < 1 || self.h < 1 || self.h + 2 > self.s {
            return Err(Error::Config(format!(
                "invalid batch shape N={} N_h={} S={} H={}",
                self.n, self.n_h, self.s, self.h
            )));
        }
        Ok(())
    }
}

/// Everything drawn for one context.
#[derive(Clone, Debug)]
pub struct PriorDraw {
    pub batch: ContextBatch,
    pub context_params: ContextParams,
    pub centers: ClusterCenters,
    /// Context series first, then held-out series.
    pub series: Vec<SeriesParams>,
    pub flagged: Vec<bool>,
}

pub fn generate_context_batch(hp: &HyperPrior, shape: BatchShape, si_count: usize, rng: &mut Rng) -> Result<PriorDraw> {
    shape.validate()?;
    let cp = sample_context_params(hp, rng)?;
    let centers = sample_cluster_centers(&cp, rng);
    let total = shape.n + shape.n_h;
    let mut series = Vec::with_capacity(total);
    let mut windows = Vec::with_capacity(total);
    let mut flagged = Vec::with_capacity(total);
    for _ in 0..total {
        let cluster = if rng.random_bool(0.5) { 1 } else { 2 };
        let psi = sample_series_params(&centers, cluster, &cp, hp, rng)?;
        let syn = synthesize_series(&psi, shape.s, hp, rng)?;
        windows.push(syn.v);
        flagged.push(syn.flagged);
        series.push(psi);
    }
    let mut si = Vec::with_capacity(shape.n_h * si_count);
    for psi in &series[shape.n..] {
        si.extend(si_targets(psi, hp, si_count)?.into_iter().map(|x| x as f32));
    }
    let si = Tensor::new(&[shape.n_h, si_count], si)?;
    let batch = assemble_batch(&windows[..shape.n], &windows[shape.n..], shape.h, Some(si))?;
    Ok(PriorDraw {
        batch,
        context_params: cp,
        centers,
        series,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn log_map_fixtures() {
        assert_eq!(map_log_uniform(0.0, 507.0).unwrap(), 0.0);
        let y = map_log_uniform(1.0016, 507.0).unwrap();
        // log2(1.0016 * 507 + 1) = log2(508.8112)
        assert!((y - 508.8112f64.log2()).abs() < 1e-12);
        assert!((y - 8.99099).abs() < 1e-4);
        assert!((unmap_log_uniform(y, 507.0).unwrap() - 1.0016).abs() < 1e-12);
        assert!(map_log_uniform(-1.0, 2.0).is_err());
        assert!(map_log_uniform(1.0, 0.0).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let hp = HyperPrior::default();
        hp.validate().unwrap();
        assert_eq!(hp.kappa_rho, 53.6);
        assert_eq!(hp.annual_scale, Range::new(-8.0, 8.0));
    }

    #[test]
    fn degenerate_range_gives_point_subrange() {
        let mut hp = HyperPrior::default();
        hp.monthly_scale = Range::new(1.5, 1.5);
        let mut rng = stream_rng(1, 0);
        let cp = sample_context_params(&hp, &mut rng).unwrap();
        assert_eq!(cp.range(Param::Monthly), Range::new(1.5, 1.5));
        let c = sample_cluster_centers(&cp, &mut rng);
        assert_eq!(c.mu[Param::Monthly.index()], [1.5, 1.5]);
    }

    #[test]
    fn zero_std_series_sit_on_centres() {
        let mut hp = HyperPrior::default();
        hp.seasonality_std = 0.0;
        hp.linear_std = 0.0;
        hp.exp_std = 0.0;
        let mut rng = stream_rng(2, 0);
        let cp = sample_context_params(&hp, &mut rng).unwrap();
        let c = sample_cluster_centers(&cp, &mut rng);
        let psi = sample_series_params(&c, 2, &cp, &hp, &mut rng).unwrap();
        assert_eq!(psi.m_annual, c.get(Param::Annual, 2));
        assert_eq!(psi.m_weekly, c.get(Param::Weekly, 2));
        assert_eq!(psi.m_exp, c.get(Param::Exponential, 2));
        assert_eq!(psi.rho, c.get(Param::Resolution, 2));
        assert!(sample_series_params(&c, 3, &cp, &hp, &mut rng).is_err());
    }

    #[test]
    fn trend_neutral_cases() {
        let mut psi = SeriesParams::flat(1.0);
        psi.m_exp = 1.003;
        psi.c_exp = 0.5;
        for t in [0.0, 1.5, 100.0] {
            assert_eq!(eval_trend(t, &psi, TrendForm::Compound, 1e6), (1.0, false));
        }
        let mut psi = SeriesParams::flat(1.0);
        psi.m_lin = 0.01;
        psi.c_lin = 0.3;
        psi.m_exp = 0.0;
        psi.c_exp = 1.2;
        for t in [0.0, 1.5, 100.0] {
            assert_eq!(eval_trend(t, &psi, TrendForm::Literal, 1e6), (1.0, false));
        }
    }

    #[test]
    fn trend_matches_direct_formula_and_caps() {
        let mut psi = SeriesParams::flat(1.0);
        psi.m_lin = 0.012;
        psi.c_lin = -0.4;
        psi.m_exp = 1.0011;
        psi.c_exp = 1.3;
        let t = 3.5;
        let expected = 1.0 + (0.012 * 3.5 - 0.4) * (1.0011f64.ln() * (3.5 - 1.3)).exp();
        assert!((eval_trend(t, &psi, TrendForm::Compound, 1e6).0 - expected).abs() < 1e-10);
        let literal = 1.0 + (0.012 * 3.5 - 0.4) * 1.0011 * (1.3f64.ln() * 3.5).exp();
        assert!((eval_trend(t, &psi, TrendForm::Literal, 1e6).0 - literal).abs() < 1e-10);
        psi.m_exp = 2.0;
        let (v, flag) = eval_trend(200.0, &psi, TrendForm::Compound, 1e6);
        assert!(flag);
        assert_eq!(v, 1e6);
    }

    #[test]
    fn seasonality_is_periodic_and_mean_one() {
        let hp = HyperPrior::default();
        let mut rng = stream_rng(3, 0);
        let mut psi = SeriesParams::flat(1.0);
        psi.m_weekly = 0.7;
        psi.coeffs[0] = (0..5)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let t = 2.3;
        let a = eval_seasonality(t, &psi, &hp);
        let b = eval_seasonality(t + hp.p_week, &psi, &hp);
        assert!((a - b).abs() < 1e-12);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| eval_component(i as f64 * hp.p_week / n as f64, &psi, Season::Week, hp.p_week))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 1e-6);
        assert_eq!(eval_seasonality(t, &SeriesParams::flat(1.0), &hp), 1.0);
    }

    #[test]
    fn noise_is_unit_without_amplitude() {
        let mut rng = stream_rng(4, 0);
        assert!(sample_noise(100, 2.0, 0.0, &mut rng).unwrap().iter().all(|&z| z == 1.0));
        assert!(sample_noise(10, 0.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn synthesis_grid_and_determinism() {
        let hp = HyperPrior::default();
        let psi = SeriesParams::flat(1.0);
        let s = synthesize_series(&psi, 240, &hp, &mut stream_rng(5, 0)).unwrap();
        assert_eq!(s.t[0], 0.0);
        assert_eq!(s.t[239], 239.0);
        assert!(s.v.iter().all(|&v| v == 1.0));
        let psi = SeriesParams::flat(53.6);
        let s = synthesize_series(&psi, 240, &hp, &mut stream_rng(5, 0)).unwrap();
        assert!((s.t[239] - 4.459).abs() < 1e-3);

        let mut rng = stream_rng(6, 0);
        let cp = sample_context_params(&hp, &mut rng).unwrap();
        let c = sample_cluster_centers(&cp, &mut rng);
        let psi = sample_series_params(&c, 1, &cp, &hp, &mut rng).unwrap();
        let a = synthesize_series(&psi, 50, &hp, &mut stream_rng(9, 1)).unwrap();
        let b = synthesize_series(&psi, 50, &hp, &mut stream_rng(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_shapes() {
        let hp = HyperPrior::default();
        let d = generate_context_batch(&hp, BatchShape::default(), 9, &mut stream_rng(7, 0)).unwrap();
        assert_eq!(d.batch.context.shape(), &[14, 240, 3]);
        assert_eq!(d.batch.history.shape(), &[2, 180, 3]);
        assert_eq!(d.batch.target.shape(), &[2, 60]);
        assert_eq!(d.batch.si_target.as_ref().unwrap().shape(), &[2, 9]);
        let one = BatchShape {
            n: 1,
            n_h: 1,
            s: 20,
            h: 5,
        };
        let d = generate_context_batch(&hp, one, 9, &mut stream_rng(7, 1)).unwrap();
        assert_eq!(d.batch.n(), 1);
        let again = generate_context_batch(&hp, one, 9, &mut stream_rng(7, 1)).unwrap();
        assert_eq!(d.batch, again.batch);
        let bad = BatchShape {
            n: 1,
            n_h: 1,
            s: 20,
            h: 20,
        };
        assert!(generate_context_batch(&hp, bad, 9, &mut stream_rng(7, 1)).is_err());
    }
}
