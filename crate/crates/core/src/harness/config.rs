use std::path::PathBuf;

use crate::analysis::GridSpec;
use crate::error::{Error, Result};
use crate::inference::PriorSpec;
use crate::klgap::GapSettings;
use crate::kv::KvRecord;
use crate::model::{validate_params, ModelParams, ParamBounds};
use crate::simulate::VolumeDesign;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    /// Posterior error against horizon.
    Concentration,
    /// Outcome accuracy against the informed share `omega1`.
    Identifiability,
    /// Bayes-factor sensitivity to perturbed increments.
    Stability,
    /// Realized information gain along the history.
    Infogain,
    /// Projection gap against `omega1`.
    Klgap,
    /// Design-based separation predicate against `omega1`.
    Predicate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Concentration,
        ExperimentKind::Identifiability,
        ExperimentKind::Stability,
        ExperimentKind::Infogain,
        ExperimentKind::Klgap,
        ExperimentKind::Predicate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::Identifiability => "identifiability",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Infogain => "infogain",
            ExperimentKind::Klgap => "klgap",
            ExperimentKind::Predicate => "predicate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config(format!("unknown experiment kind `{name}`")))
    }

    /// Kind-specific record columns after the common ones.
    pub fn aux_columns(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Concentration => &["posterior_log_odds", "log_error"],
            ExperimentKind::Identifiability => &["posterior_log_odds", "log_error", "correct"],
            ExperimentKind::Stability => &[
                "baseline_log_bf",
                "observed_bf_diff",
                "bf_bound",
                "posterior_bound",
                "sum_abs_dx_diff",
                "sum_abs_v_diff",
                "on_event",
                "contained",
                "perturb_resamples",
                "lx_R",
                "lv_R",
                "R",
            ],
            ExperimentKind::Infogain => &["posterior_log_odds", "log_error"],
            ExperimentKind::Klgap => &["delta_t", "std_error", "flipped_value", "flipped_std_error", "converged"],
            ExperimentKind::Predicate => &["fraction", "holds", "active_steps"],
        }
    }

    /// Column summarized per grid point.
    pub fn metric(self) -> &'static str {
        match self {
            ExperimentKind::Concentration => "log_error",
            ExperimentKind::Identifiability => "correct",
            ExperimentKind::Stability => "observed_bf_diff",
            ExperimentKind::Infogain => "ig",
            ExperimentKind::Klgap => "delta_t",
            ExperimentKind::Predicate => "fraction",
        }
    }

    /// Meaning of the grid column.
    pub fn grid_label(self) -> &'static str {
        match self {
            ExperimentKind::Concentration | ExperimentKind::Infogain => "T",
            ExperimentKind::Stability => "sigma",
            _ => "omega1",
        }
    }
}

/// How `omega2, omega3` follow a grid value of `omega1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaSplit {
    /// `omega2 = omega3 = (1 - omega1) / 2`
    Equal,
    /// Remaining mass split in the ratio of the truth's `omega2 : omega3`.
    Proportional,
}

impl OmegaSplit {
    pub fn apply(self, theta: &ModelParams, omega1: f64) -> ModelParams {
        let rest = 1.0 - omega1;
        let w = match self {
            OmegaSplit::Equal => [omega1, rest / 2.0, rest / 2.0],
            OmegaSplit::Proportional => {
                let s = theta.omega[1] + theta.omega[2];
                if s > 0.0 {
                    [omega1, rest * theta.omega[1] / s, rest * theta.omega[2] / s]
                } else {
                    [omega1, rest / 2.0, rest / 2.0]
                }
            }
        };
        theta.clone().with_omega(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub replications: usize,
    /// Horizons (concentration) or checkpoints (infogain).
    pub t_grid: Vec<usize>,
    pub omega1_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    /// Horizon for the kinds that do not sweep it.
    pub horizon: usize,
    pub theta_star: ModelParams,
    pub omega_split: OmegaSplit,
    pub prior_name: String,
    pub prior: PriorSpec,
    pub prior_p1: f64,
    pub particles: usize,
    pub base_seed: u64,
    pub design: VolumeDesign,
    pub out_dir: Option<PathBuf>,
    pub gap: GapSettings,
    /// Let the drift magnitudes change sign in the gap search.
    pub free_orientation: bool,
    /// Per-period gap drawn as the reference slope in the concentration plot.
    pub reference_gap: Option<f64>,
    pub rho_lb: f64,
    pub m_lb: f64,
    pub lipschitz_theta_draws: usize,
    pub lipschitz_grid: GridSpec,
}

impl ExperimentConfig {
    /// Scaled-down design that runs on a desktop in minutes.
    pub fn desk(kind: ExperimentKind) -> Self {
        let mut c = Self {
            kind,
            replications: 200,
            t_grid: vec![25, 100, 400],
            omega1_grid: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            sigma_grid: vec![0.01, 0.05, 0.1, 0.2],
            horizon: 100,
            theta_star: ModelParams::paper_defaults(),
            omega_split: OmegaSplit::Equal,
            prior_name: "default".into(),
            prior: PriorSpec::default(),
            prior_p1: 0.5,
            particles: 500,
            base_seed: 20_240_601,
            design: VolumeDesign::default(),
            out_dir: None,
            gap: GapSettings::default(),
            free_orientation: false,
            reference_gap: None,
            rho_lb: 0.2,
            m_lb: 0.01,
            lipschitz_theta_draws: 512,
            lipschitz_grid: GridSpec::default(),
        };
        match kind {
            ExperimentKind::Stability => c.replications = 50,
            ExperimentKind::Infogain => {
                c.replications = 100;
                c.horizon = 600;
                c.t_grid = vec![1, 5, 10, 25, 50, 100, 200, 300, 400, 500, 600];
            }
            ExperimentKind::Klgap => {
                c.replications = 1;
                c.omega1_grid = vec![0.05, 0.5];
            }
            _ => {}
        }
        c
    }

    /// The full-size design: 1000 replications, 1000 particles, full grids.
    pub fn paper(kind: ExperimentKind) -> Self {
        let mut c = Self::desk(kind);
        c.particles = 1000;
        match kind {
            ExperimentKind::Concentration => {
                c.replications = 1000;
                c.t_grid = vec![10, 25, 50, 100, 200, 500];
            }
            ExperimentKind::Identifiability | ExperimentKind::Stability | ExperimentKind::Infogain => {
                c.replications = 1000;
            }
            ExperimentKind::Klgap => c.omega1_grid = vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            ExperimentKind::Predicate => c.replications = 1000,
        }
        c
    }

    /// Reads a config record. `kind` is required; `scale = desk | paper`
    /// selects the base design and every other key overrides it.
    pub fn from_kv(rec: &KvRecord) -> Result<Self> {
        let kind = ExperimentKind::from_name(rec.get("kind").ok_or_else(|| Error::config("missing key `kind`"))?)?;
        let mut c = match rec.get("scale").unwrap_or("desk") {
            "desk" => Self::desk(kind),
            "paper" => Self::paper(kind),
            other => return Err(Error::config(format!("unknown scale `{other}`"))),
        };
        c.apply_overrides(rec)?;
        Ok(c)
    }

    /// Applies every recognized key in `rec`; unknown keys are an error.
    pub fn apply_overrides(&mut self, rec: &KvRecord) -> Result<()> {
        let usize_of = |k: &str| -> Result<Option<usize>> { Ok(rec.get_u64(k)?.map(|x| x as usize)) };
        for key in rec.keys() {
            let known = matches!(
                key,
                "kind"
                    | "scale"
                    | "replications"
                    | "t_grid"
                    | "omega1_grid"
                    | "sigma_grid"
                    | "horizon"
                    | "omega_split"
                    | "prior"
                    | "prior_p1"
                    | "particles"
                    | "base_seed"
                    | "volume_shape"
                    | "volume_scale"
                    | "volume_constant"
                    | "out_dir"
                    | "gap_samples"
                    | "gap_search_samples"
                    | "gap_restarts"
                    | "gap_max_evals"
                    | "gap_polish_evals"
                    | "free_orientation"
                    | "reference_gap"
                    | "rho_lb"
                    | "m_lb"
                    | "lipschitz_theta_draws"
                    | "lipschitz_x_points"
                    | "lipschitz_v_points"
            ) || ModelParams::is_param_key(key);
            if !known {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
        }
        if let Some(k) = rec.get("kind") {
            self.kind = ExperimentKind::from_name(k)?;
        }
        if let Some(x) = usize_of("replications")? {
            self.replications = x;
        }
        if let Some(xs) = rec.get_f64_list("t_grid")? {
            self.t_grid = xs
                .into_iter()
                .map(|x| if x >= 1.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(Error::config(format!("bad horizon {x}"))) })
                .collect::<Result<_>>()?;
        }
        if let Some(xs) = rec.get_f64_list("omega1_grid")? {
            self.omega1_grid = xs;
        }
        if let Some(xs) = rec.get_f64_list("sigma_grid")? {
            self.sigma_grid = xs;
        }
        if let Some(x) = usize_of("horizon")? {
            self.horizon = x;
        }
        if let Some(s) = rec.get("omega_split") {
            self.omega_split = match s {
                "equal" => OmegaSplit::Equal,
                "proportional" => OmegaSplit::Proportional,
                _ => return Err(Error::config(format!("omega_split must be equal or proportional, got `{s}`"))),
            };
        }
        if let Some(p) = rec.get("prior") {
            self.prior = PriorSpec::from_name(p)?;
            self.prior_name = p.to_string();
        }
        if let Some(x) = rec.get_f64("prior_p1")? {
            self.prior_p1 = x;
        }
        if let Some(x) = usize_of("particles")? {
            self.particles = x;
        }
        if let Some(x) = rec.get_u64("base_seed")? {
            self.base_seed = x;
        }
        match (rec.get_f64("volume_constant")?, rec.get_f64("volume_shape")?, rec.get_f64("volume_scale")?) {
            (Some(v), None, None) => self.design = VolumeDesign::Constant(v),
            (Some(_), _, _) => return Err(Error::config("volume_constant excludes volume_shape/volume_scale")),
            (None, shape, scale) => {
                if shape.is_some() || scale.is_some() {
                    let (s0, k0) = match self.design {
                        VolumeDesign::GammaIid { shape, scale } => (shape, scale),
                        _ => (2.0, 0.5),
                    };
                    self.design = VolumeDesign::GammaIid { shape: shape.unwrap_or(s0), scale: scale.unwrap_or(k0) };
                }
            }
        }
        if let Some(d) = rec.get("out_dir") {
            self.out_dir = Some(PathBuf::from(d));
        }
        if let Some(x) = usize_of("gap_samples")? {
            self.gap.samples = x;
        }
        if let Some(x) = usize_of("gap_search_samples")? {
            self.gap.search_samples = x;
        }
        if let Some(x) = usize_of("gap_restarts")? {
            self.gap.restarts = x;
        }
        if let Some(x) = usize_of("gap_max_evals")? {
            self.gap.max_evals = x;
        }
        if let Some(x) = usize_of("gap_polish_evals")? {
            self.gap.polish_evals = x;
        }
        if let Some(b) = rec.get("free_orientation") {
            self.free_orientation = parse_bool("free_orientation", b)?;
        }
        if let Some(x) = rec.get_f64("reference_gap")? {
            self.reference_gap = Some(x);
        }
        if let Some(x) = rec.get_f64("rho_lb")? {
            self.rho_lb = x;
        }
        if let Some(x) = rec.get_f64("m_lb")? {
            self.m_lb = x;
        }
        if let Some(x) = usize_of("lipschitz_theta_draws")? {
            self.lipschitz_theta_draws = x;
        }
        if let Some(x) = usize_of("lipschitz_x_points")? {
            self.lipschitz_grid.x_points = x;
        }
        if let Some(x) = usize_of("lipschitz_v_points")? {
            self.lipschitz_grid.v_points = x;
        }
        self.theta_star = self.theta_star.clone().overridden_by(rec)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvRecord {
        let join = |xs: Vec<String>| xs.join(",");
        let mut r = KvRecord::new();
        r.set("kind", self.kind.name());
        r.set("replications", self.replications);
        r.set("t_grid", join(self.t_grid.iter().map(|x| x.to_string()).collect()));
        r.set("omega1_grid", join(self.omega1_grid.iter().map(|x| x.to_string()).collect()));
        r.set("sigma_grid", join(self.sigma_grid.iter().map(|x| x.to_string()).collect()));
        r.set("horizon", self.horizon);
        r.set("omega_split", match self.omega_split {
            OmegaSplit::Equal => "equal",
            OmegaSplit::Proportional => "proportional",
        });
        r.set("prior", &self.prior_name);
        r.set_f64("prior_p1", self.prior_p1);
        r.set("particles", self.particles);
        r.set("base_seed", self.base_seed);
        match &self.design {
            VolumeDesign::GammaIid { shape, scale } => {
                r.set_f64("volume_shape", *shape);
                r.set_f64("volume_scale", *scale);
            }
            VolumeDesign::Constant(v) => r.set_f64("volume_constant", *v),
            VolumeDesign::Explicit(_) => {}
        }
        if let Some(d) = &self.out_dir {
            r.set("out_dir", d.display());
        }
        r.set("gap_samples", self.gap.samples);
        r.set("gap_search_samples", self.gap.search_samples);
        r.set("gap_restarts", self.gap.restarts);
        r.set("gap_max_evals", self.gap.max_evals);
        r.set("gap_polish_evals", self.gap.polish_evals);
        r.set("free_orientation", self.free_orientation);
        if let Some(g) = self.reference_gap {
            r.set_f64("reference_gap", g);
        }
        r.set_f64("rho_lb", self.rho_lb);
        r.set_f64("m_lb", self.m_lb);
        r.set("lipschitz_theta_draws", self.lipschitz_theta_draws);
        r.set("lipschitz_x_points", self.lipschitz_grid.x_points);
        r.set("lipschitz_v_points", self.lipschitz_grid.v_points);
        r.extend(&self.theta_star.to_kv());
        r
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.particles == 0 {
            return Err(Error::config("particles must be at least 1"));
        }
        if !(self.prior_p1 > 0.0 && self.prior_p1 < 1.0) {
            return Err(Error::config(format!("prior_p1 must lie in (0, 1), got {}", self.prior_p1)));
        }
        let grid_ok = match self.kind {
            ExperimentKind::Concentration | ExperimentKind::Infogain => !self.t_grid.is_empty(),
            ExperimentKind::Stability => !self.sigma_grid.is_empty(),
            _ => !self.omega1_grid.is_empty(),
        };
        if !grid_ok {
            return Err(Error::config(format!("{} grid is empty", self.kind.grid_label())));
        }
        if self.t_grid.contains(&0) || self.horizon == 0 {
            return Err(Error::config("horizons must be at least 1"));
        }
        if self.omega1_grid.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::config("omega1 grid values must lie in [0, 1]"));
        }
        if self.sigma_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("noise levels must be positive"));
        }
        if !(self.rho_lb > 0.0 && self.m_lb > 0.0) {
            return Err(Error::config("rho_lb and m_lb must be positive"));
        }
        if self.kind == ExperimentKind::Stability && self.replications < 2 {
            return Err(Error::config("stability needs at least 2 replications to set the radius"));
        }
        self.design.validate()?;
        self.prior.validate()?;
        self.gap.validate()?;
        let report = validate_params(&self.theta_star, &ParamBounds::default());
        if !report.is_empty() {
            return Err(Error::config(format!("invalid theta_star: {report}")));
        }
        Ok(())
    }
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("`{key}` must be true or false, got `{s}`"))),
    }
}
