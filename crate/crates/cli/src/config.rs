//! Experiment configuration (TOML, schema version 1).

use entdyn::fokker_planck::{FluxScheme, TimeScheme};
use entdyn::kernel::QuadraticForm;
use entdyn::{Model, Point};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub kernel_check: KernelCheckSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub moments: MomentsSection,
    #[serde(default)]
    pub reciprocity: ReciprocitySection,
    #[serde(default)]
    pub fpe: FpeSection,
    #[serde(default)]
    pub onsager: OnsagerSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_seed() -> u64 {
    20_260_115
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            workers: 0,
            model: ModelSpec::default(),
            geometry: Default::default(),
            kernel_check: Default::default(),
            simulate: Default::default(),
            moments: Default::default(),
            reciprocity: Default::default(),
            fpe: Default::default(),
            onsager: Default::default(),
            verify: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// One of the built-in family names.
    pub family: String,
    /// Distance kept from the domain boundary.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1e-9
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: "bernoulli".into(),
            margin: default_margin(),
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> entdyn::Result<Model> {
        Ok(Model::by_name(&self.family)?.with_margin(self.margin))
    }
}

/// Explicit points, or a tensor grid of points.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub model: Option<ModelSpec>,
    pub points: Option<Vec<Vec<f64>>>,
    pub bounds: Option<Vec<[f64; 2]>>,
    pub counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckSection {
    pub model: Option<ModelSpec>,
    pub point: Option<Vec<f64>>,
    #[serde(default = "default_check_taus")]
    pub taus: Vec<f64>,
    /// Draws per τ for the KS comparison (1-D families).
    #[serde(default = "default_ks_samples")]
    pub ks_samples: usize,
    #[serde(default)]
    pub form: QuadraticForm,
}

fn default_check_taus() -> Vec<f64> {
    vec![1e-2, 1e-3]
}

fn default_ks_samples() -> usize {
    100_000
}

impl Default for KernelCheckSection {
    fn default() -> Self {
        Self {
            model: None,
            point: None,
            taus: default_check_taus(),
            ks_samples: default_ks_samples(),
            form: QuadraticForm::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub model: Option<ModelSpec>,
    pub start: Option<Vec<f64>>,
    pub tau: f64,
    pub steps: usize,
    pub trajectories: usize,
    /// Record every k-th step; 0 records only the endpoints.
    pub record_every: usize,
    pub burn_in: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            model: None,
            start: None,
            tau: 0.01,
            steps: 100,
            trajectories: 100,
            record_every: 1,
            burn_in: entdyn::Step::DEFAULT_BURN_IN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsSection {
    pub model: Option<ModelSpec>,
    pub point: Option<Vec<f64>>,
    pub taus: Vec<f64>,
    pub samples_per_tau: usize,
    pub burn_in: usize,
    pub antithetic: bool,
    pub max_relative_se: f64,
}

impl Default for MomentsSection {
    fn default() -> Self {
        Self {
            model: None,
            point: None,
            taus: vec![0.01, 0.005, 0.0025],
            samples_per_tau: 100_000,
            burn_in: entdyn::Step::DEFAULT_BURN_IN,
            antithetic: false,
            max_relative_se: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReciprocitySection {
    pub model: Option<ModelSpec>,
    pub points: Option<Vec<Vec<f64>>>,
    pub taus: Vec<f64>,
    pub samples_per_tau: usize,
    pub batches: usize,
    pub burn_in: usize,
    pub antithetic: bool,
}

impl Default for ReciprocitySection {
    fn default() -> Self {
        Self {
            model: Some(ModelSpec {
                family: "gaussian-mean-second-moment".into(),
                margin: default_margin(),
            }),
            points: None,
            taus: vec![0.01, 0.005, 0.0025],
            samples_per_tau: 200_000,
            batches: 10,
            burn_in: 8,
            antithetic: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialDensity {
    /// Scalar density `P ∝ exp(−Σ (A_i − mean_i)² / 2sd_i²)`.
    Normal { mean: Vec<f64>, sd: Vec<f64> },
    /// `p_∞ ∝ e^{2S}`.
    Stationary,
    /// Constant invariant density `p`.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleComparison {
    pub trajectories: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpeSection {
    pub model: Option<ModelSpec>,
    pub cells: Option<Vec<usize>>,
    pub bounds: Option<Vec<[f64; 2]>>,
    pub flux: FluxScheme,
    pub time: TimeScheme,
    /// Defaults to the explicit stability bound.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Output times; `t_end` is always included.
    pub snapshots: Vec<f64>,
    pub initial: InitialDensity,
    /// Also simulate an ensemble from the initial density and report the
    /// total-variation distance at each snapshot.
    pub ensemble: Option<EnsembleComparison>,
}

impl Default for FpeSection {
    fn default() -> Self {
        Self {
            model: Some(ModelSpec {
                family: "gaussian-mean".into(),
                margin: default_margin(),
            }),
            cells: None,
            bounds: None,
            flux: FluxScheme::Fitted,
            time: TimeScheme::ExplicitRk2,
            dt: None,
            t_end: 1.0,
            snapshots: vec![0.0, 0.5],
            initial: InitialDensity::Normal {
                mean: vec![2.0],
                sd: vec![0.1],
            },
            ensemble: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnsagerSection {
    pub model: Option<ModelSpec>,
    /// Finite-difference step; defaults to `1e-5 (1 + |A*|)`.
    pub h: Option<f64>,
    pub displacement: Option<Vec<f64>>,
    pub t_max: f64,
    pub dt: f64,
}

impl Default for OnsagerSection {
    fn default() -> Self {
        Self {
            model: None,
            h: None,
            displacement: None,
            t_max: 3.0,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub quick: bool,
    pub criteria: Vec<u32>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            quick: false,
            criteria: (1..=7).collect(),
        }
    }
}

/// A sensible interior point for each built-in family.
pub fn default_point(model: &Model) -> Vec<f64> {
    match model.name() {
        "bernoulli" => vec![0.75],
        "gaussian-mean" => vec![1.0],
        "gaussian-mean-second-moment" => vec![0.3, 1.5],
        _ => vec![0.2, 0.5],
    }
}

/// Points around the fixed point with linearly independent gradients.
pub fn default_cluster(model: &Model) -> Vec<Vec<f64>> {
    match model.name() {
        "bernoulli" => vec![vec![0.4], vec![0.45], vec![0.55], vec![0.6]],
        "gaussian-mean" => vec![vec![-0.3], vec![-0.1], vec![0.1], vec![0.3]],
        "gaussian-mean-second-moment" => entdyn::acceptance::reciprocity_points(entdyn::acceptance::RECIPROCITY_RADIUS)
            .iter()
            .map(|p| p.to_f64())
            .collect(),
        _ => (0..6)
            .map(|k| {
                let t = std::f64::consts::PI * (k as f64 + 0.5) / 3.0;
                vec![1.0 / 3.0 + 0.1 * t.cos(), 1.0 / 3.0 + 0.1 * t.sin()]
            })
            .collect(),
    }
}

/// Collects every violation instead of stopping at the first.
#[derive(Default)]
pub struct Violations(pub Vec<String>);

impl Violations {
    fn push(&mut self, field: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{field}: {msg}"));
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be positive and finite, got {v}"));
        }
    }

    fn positive_count(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.push(field, "must be at least 1");
        }
    }

    fn ladder(&mut self, field: &str, taus: &[f64]) {
        for (i, &t) in taus.iter().enumerate() {
            self.positive(&format!("{field}[{i}]"), t);
        }
        if taus.len() < 3 {
            self.push(field, format!("needs at least 3 step sizes, got {}", taus.len()));
        }
        if taus.windows(2).any(|w| w[1] >= w[0]) {
            self.push(field, "must be strictly decreasing");
        }
    }

    fn point(&mut self, field: &str, model: &Model, a: &[f64]) {
        if a.len() != model.dim() {
            self.push(field, format!("needs {} coordinates for `{}`, got {}", model.dim(), model.name(), a.len()));
        } else if !model.contains(a) {
            self.push(field, format!("{a:?} is outside the domain of `{}`", model.name()));
        }
    }

    /// Builds a section's model, recording a violation if it is invalid.
    fn model(&mut self, field: &str, spec: &ModelSpec) -> Option<Model> {
        if !(spec.margin > 0.0 && spec.margin < 0.1) {
            self.push(&format!("{field}.margin"), format!("must lie in (0, 0.1), got {}", spec.margin));
            return None;
        }
        match spec.build() {
            Ok(m) => Some(m),
            Err(e) => {
                self.push(&format!("{field}.family"), e);
                None
            }
        }
    }
}

impl Config {
    pub fn model_for(&self, section: &Option<ModelSpec>) -> entdyn::Result<Model> {
        section.as_ref().unwrap_or(&self.model).build()
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut v = Violations::default();
        if self.schema_version != SCHEMA_VERSION {
            v.push(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        let global = v.model("model", &self.model);
        let section_model = |v: &mut Violations, name: &str, spec: &Option<ModelSpec>| match spec {
            Some(s) => v.model(&format!("{name}.model"), s),
            None => global.clone(),
        };

        if let Some(m) = section_model(&mut v, "geometry", &self.geometry.model) {
            let g = &self.geometry;
            if let Some(points) = &g.points {
                for (i, p) in points.iter().enumerate() {
                    v.point(&format!("geometry.points[{i}]"), &m, p);
                }
            }
            match (&g.bounds, &g.counts) {
                (Some(b), Some(c)) => {
                    if b.len() != m.dim() || c.len() != m.dim() {
                        v.push("geometry.bounds", format!("bounds and counts need {} entries", m.dim()));
                    }
                    for (i, r) in b.iter().enumerate() {
                        if !(r[0] <= r[1]) {
                            v.push(&format!("geometry.bounds[{i}]"), "must be increasing");
                        }
                    }
                    for (i, &n) in c.iter().enumerate() {
                        v.positive_count(&format!("geometry.counts[{i}]"), n);
                    }
                }
                (None, None) => {}
                _ => v.push("geometry.bounds", "bounds and counts must be given together"),
            }
            if g.points.is_some() && g.bounds.is_some() {
                v.push("geometry.points", "give either points or bounds/counts, not both");
            }
        }

        if let Some(m) = section_model(&mut v, "kernel_check", &self.kernel_check.model) {
            let k = &self.kernel_check;
            if let Some(p) = &k.point {
                v.point("kernel_check.point", &m, p);
            }
            if k.taus.is_empty() {
                v.push("kernel_check.taus", "must not be empty");
            }
            for (i, &t) in k.taus.iter().enumerate() {
                v.positive(&format!("kernel_check.taus[{i}]"), t);
            }
            if m.dim() > 2 {
                v.push("kernel_check.model", "normalization needs a 1-D or 2-D family");
            }
        }

        if let Some(m) = section_model(&mut v, "simulate", &self.simulate.model) {
            let s = &self.simulate;
            if let Some(p) = &s.start {
                v.point("simulate.start", &m, p);
            }
            v.positive("simulate.tau", s.tau);
            v.positive_count("simulate.trajectories", s.trajectories);
        }

        if let Some(m) = section_model(&mut v, "moments", &self.moments.model) {
            let s = &self.moments;
            if let Some(p) = &s.point {
                v.point("moments.point", &m, p);
            }
            v.ladder("moments.taus", &s.taus);
            if s.samples_per_tau < 2 {
                v.push("moments.samples_per_tau", "must be at least 2");
            }
            if !(s.max_relative_se > 0.0) {
                v.push("moments.max_relative_se", format!("must be positive, got {}", s.max_relative_se));
            }
        }

        if let Some(m) = section_model(&mut v, "reciprocity", &self.reciprocity.model) {
            let s = &self.reciprocity;
            if let Some(points) = &s.points {
                let needed = (m.dim() * (m.dim() + 1) / 2).max(2);
                if points.len() < needed {
                    v.push("reciprocity.points", format!("needs at least {needed} points, got {}", points.len()));
                }
                for (i, p) in points.iter().enumerate() {
                    v.point(&format!("reciprocity.points[{i}]"), &m, p);
                }
            }
            v.ladder("reciprocity.taus", &s.taus);
            if s.batches < 2 {
                v.push("reciprocity.batches", "must be at least 2");
            }
            if s.samples_per_tau < 2 * s.batches.max(1) {
                v.push("reciprocity.samples_per_tau", "must give each batch at least 2 samples");
            }
        }

        if let Some(m) = section_model(&mut v, "fpe", &self.fpe.model) {
            let f = &self.fpe;
            if !(1..=2).contains(&m.dim()) {
                v.push("fpe.model", "the solver handles 1-D and 2-D families");
            }
            if let Some(c) = &f.cells {
                if c.len() != m.dim() {
                    v.push("fpe.cells", format!("needs {} entries", m.dim()));
                }
                for (i, &n) in c.iter().enumerate() {
                    if n < 3 {
                        v.push(&format!("fpe.cells[{i}]"), format!("must be at least 3, got {n}"));
                    }
                }
            }
            if let Some(b) = &f.bounds {
                if b.len() != m.dim() {
                    v.push("fpe.bounds", format!("needs {} entries", m.dim()));
                }
                let d = m.domain();
                for (i, r) in b.iter().enumerate().take(m.dim()) {
                    let (lo, hi) = (d.bounds[i].0 + d.margin, d.bounds[i].1 - d.margin);
                    if !(r[0] < r[1]) || r[0] < lo || r[1] > hi {
                        v.push(
                            &format!("fpe.bounds[{i}]"),
                            format!("[{}, {}] must be increasing and inside [{lo}, {hi}]", r[0], r[1]),
                        );
                    }
                }
            }
            if let Some(dt) = f.dt {
                v.positive("fpe.dt", dt);
            }
            if !(f.t_end >= 0.0 && f.t_end.is_finite()) {
                v.push("fpe.t_end", format!("must be non-negative, got {}", f.t_end));
            }
            for (i, &t) in f.snapshots.iter().enumerate() {
                if !(t >= 0.0 && t <= f.t_end) {
                    v.push(&format!("fpe.snapshots[{i}]"), format!("{t} is outside [0, t_end]"));
                }
            }
            if f.snapshots.windows(2).any(|w| w[1] <= w[0]) {
                v.push("fpe.snapshots", "must be strictly increasing");
            }
            if let InitialDensity::Normal { mean, sd } = &f.initial {
                if mean.len() != m.dim() || sd.len() != m.dim() {
                    v.push("fpe.initial", format!("mean and sd need {} entries", m.dim()));
                }
                for (i, &s) in sd.iter().enumerate() {
                    v.positive(&format!("fpe.initial.sd[{i}]"), s);
                }
            }
            if let Some(e) = &f.ensemble {
                v.positive_count("fpe.ensemble.trajectories", e.trajectories);
                v.positive("fpe.ensemble.tau", e.tau);
                for (i, &t) in f.snapshots.iter().enumerate() {
                    let k = t / e.tau;
                    if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                        v.push(&format!("fpe.snapshots[{i}]"), "must be a multiple of fpe.ensemble.tau");
                    }
                }
            }
        }

        if let Some(m) = section_model(&mut v, "onsager", &self.onsager.model) {
            let o = &self.onsager;
            if let Some(h) = o.h {
                v.positive("onsager.h", h);
            }
            if let Some(d) = &o.displacement {
                if d.len() != m.dim() {
                    v.push("onsager.displacement", format!("needs {} entries", m.dim()));
                }
            }
            v.positive("onsager.t_max", o.t_max);
            v.positive("onsager.dt", o.dt);
        }

        for (i, &c) in self.verify.criteria.iter().enumerate() {
            if !(1..=7).contains(&c) {
                v.push(&format!("verify.criteria[{i}]"), format!("unknown criterion {c}; expected 1-7"));
            }
        }

        if v.0.is_empty() {
            Ok(())
        } else {
            Err(v.0)
        }
    }
}

/// Family-appropriate point, falling back to [`default_point`].
pub fn point_or_default(model: &Model, p: &Option<Vec<f64>>) -> Point {
    Point::from_f64(&p.clone().unwrap_or_else(|| default_point(model)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn every_violation_is_listed() {
        let mut c = Config::default();
        c.simulate.tau = -0.1;
        c.moments.taus = vec![0.01, 0.02];
        c.schema_version = 7;
        let errs = c.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("simulate.tau")));
        assert!(errs.iter().any(|e| e.starts_with("moments.taus")));
        assert!(errs.iter().any(|e| e.starts_with("schema_version")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<Config>("schema_version = 1\nsede = 3\n").unwrap_err();
        assert!(err.to_string().contains("sede"));
        let err = toml::from_str::<Config>("schema_version = 1\n[simulate]\ntaus = 3\n").unwrap_err();
        assert!(err.to_string().contains("taus"));
    }

    #[test]
    fn points_are_checked_against_the_domain() {
        let mut c = Config::default();
        c.moments.point = Some(vec![1.5]);
        let errs = c.validate().unwrap_err();
        assert!(errs[0].contains("moments.point"), "{errs:?}");
    }

    #[test]
    fn shipped_config_parses_and_validates() {
        let text = include_str!("../../../configs/default.toml");
        let c: Config = toml::from_str(text).unwrap();
        c.validate().unwrap();
    }
}
