//! Experiment configuration and the commands behind the CLI.
//!
//! Configs are flat `[section]` blocks of `key = value` lines; `#` starts a
//! comment and lists are comma separated. Every report carries the config
//! hash, the seed and the build version.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::coupling::{
    check_contraction, coincidence_probability, kappa, random_subsets, subsets_up_to, ContractionMode,
    ContractionReport, Estimate, GrandCoupling, Joint, JointLaw, OptimalCoupling,
};
use crate::dynamics::{CftpRecord, Dynamics, Exclusion, Schedule};
use crate::error::{invalid, Error, Result};
use crate::exactgibbs::{
    check_disagreement_percolation, check_dobrushin, check_high_noise, gamma_with, log_linear_fit, mixing_profile_with,
    preset_boxes, torus_gibbs, Limits, MixingKind, MixingReport, Verdict,
};
use crate::lattice::{ball, Region, Torus, Vertex};
use crate::model::{make_model, Params, Spec, Symbol};
use crate::par::map_range;
use crate::randomness::RandomField;
use crate::schedules::{fixed_schedule, CouplingKind, GrowingPlan, DEFAULT_MAX_STAGES};

/// Build version, with the commit when built from a git checkout.
pub fn version() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), option_env!("CFTP_GIT_HASH").unwrap_or("unknown"))
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

/// Parse `[section]` / `key = value` text.
pub fn parse_sections(text: &str) -> Result<Sections> {
    let mut out = Sections::new();
    let mut current: Option<String> = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: &str| Error::Parse(format!("line {}: {msg}", no + 1));
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| at("unterminated section header"))?.trim();
            if name.is_empty() {
                return Err(at("empty section name"));
            }
            if out.contains_key(name) {
                return Err(at(&format!("section [{name}] appears twice")));
            }
            out.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| at("expected `key = value`"))?;
        let sec = current.as_ref().ok_or_else(|| at("key outside any section"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(at("empty key"));
        }
        if out.get_mut(sec).unwrap().insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(at(&format!("key `{k}` repeated in [{sec}]")));
        }
    }
    Ok(out)
}

fn render_sections(s: &Sections) -> String {
    let mut out = String::new();
    for (name, kv) in s {
        let _ = writeln!(out, "[{name}]");
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

/// Where the dynamics run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SubstrateChoice {
    Torus(Vec<u32>),
    /// Z^d, observed at the origin.
    Window,
}

impl SubstrateChoice {
    /// `torus:WxH` (any number of sides) or `window`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "window" {
            return Ok(SubstrateChoice::Window);
        }
        let sides = s
            .strip_prefix("torus:")
            .ok_or_else(|| invalid("substrate", format!("expected torus:WxH or window, got `{s}`")))?;
        let sides = sides
            .split('x')
            .map(|t| t.trim().parse::<u32>().map_err(|_| invalid("substrate", format!("bad side `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        Torus::new(&sides)?;
        Ok(SubstrateChoice::Torus(sides))
    }

    fn render(&self) -> String {
        match self {
            SubstrateChoice::Window => "window".into(),
            SubstrateChoice::Torus(s) => {
                format!("torus:{}", s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x"))
            }
        }
    }
}

/// Block dynamics used by `sample` and `tails`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ScheduleChoice {
    SingleSite,
    /// `Δ = Λ_block` with a coupling optimal on `Λ_u`.
    FixedOptimal { block: u32, u: u32 },
    FixedContracting { block: u32, r: u32, s: u32 },
    FixedProduct { block: u32 },
    Growing { delta: f64, epsilon: f64, ell1: u64, stages: usize },
}

/// Statistical thresholds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatSettings {
    pub significance: f64,
    pub tv_threshold: f64,
    pub min_expected: f64,
    pub z: f64,
    /// Survival level down to which tails are fitted.
    pub tail_floor: f64,
}

/// Coupling diagnostic settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagSettings {
    pub block: u32,
    pub u: u32,
    pub max_a: usize,
    pub random_a: usize,
    pub draws: u64,
    /// Explicit single-site laws (rows), replacing the model family.
    pub pmfs: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub model: String,
    pub params: Params,
    pub dim: usize,
    pub substrate: SubstrateChoice,
    pub schedule: ScheduleChoice,
    pub exclusion: Exclusion,
    pub seed: u64,
    pub replicas: u64,
    pub out: Option<PathBuf>,
    pub horizon_cap: u32,
    pub exhaustion_limit: usize,
    pub stats: StatSettings,
    pub diag: DiagSettings,
    pub p_c: Option<f64>,
    #[serde(skip)]
    sections: Sections,
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<u64>,
    pub out: Option<PathBuf>,
    pub substrate: Option<String>,
    pub horizon_cap: Option<u32>,
    pub exhaustion_limit: Option<usize>,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["seed", "replicas", "out", "horizon_cap", "exhaustion_limit"]),
    ("substrate", &["kind"]),
    (
        "schedule",
        &["kind", "block", "u", "r", "s", "exclusion", "delta", "epsilon", "ell1", "stages"],
    ),
    ("stats", &["significance", "tv_threshold", "min_expected", "z", "tail_floor"]),
    ("diag", &["block", "u", "max_a", "random_a", "draws", "pmfs"]),
    ("conditions", &["p_c"]),
];

fn get<T: std::str::FromStr>(s: &Sections, sec: &str, key: &str, default: T) -> Result<T> {
    match s.get(sec).and_then(|m| m.get(key)) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| invalid(&format!("{sec}.{key}"), format!("cannot parse `{raw}`"))),
    }
}

fn get_opt<T: std::str::FromStr>(s: &Sections, sec: &str, key: &str) -> Result<Option<T>> {
    match s.get(sec).and_then(|m| m.get(key)) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| invalid(&format!("{sec}.{key}"), format!("cannot parse `{raw}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::with_overrides(text, &Overrides::default())
    }

    pub fn load(path: &std::path::Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::with_overrides(&text, ov)
    }

    /// Parse, apply overrides and validate every parameter.
    pub fn with_overrides(text: &str, ov: &Overrides) -> Result<Self> {
        let mut s = parse_sections(text)?;
        for (sec, kv) in &s {
            if sec == "model" {
                continue;
            }
            let keys = KNOWN
                .iter()
                .find(|(n, _)| n == sec)
                .map(|(_, k)| *k)
                .ok_or_else(|| Error::Parse(format!("unknown section [{sec}]")))?;
            if let Some(k) = kv.keys().find(|k| !keys.contains(&k.as_str())) {
                return Err(Error::Parse(format!("unknown key `{k}` in [{sec}]")));
            }
        }
        let mut set = |sec: &str, key: &str, v: String| {
            s.entry(sec.to_string()).or_default().insert(key.to_string(), v);
        };
        if let Some(x) = ov.seed {
            set("run", "seed", x.to_string());
        }
        if let Some(x) = ov.replicas {
            set("run", "replicas", x.to_string());
        }
        if let Some(x) = &ov.out {
            set("run", "out", x.display().to_string());
        }
        if let Some(x) = &ov.substrate {
            set("substrate", "kind", x.clone());
        }
        if let Some(x) = ov.horizon_cap {
            set("run", "horizon_cap", x.to_string());
        }
        if let Some(x) = ov.exhaustion_limit {
            set("run", "exhaustion_limit", x.to_string());
        }

        let model_sec = s.get("model").ok_or_else(|| Error::Parse("missing [model] section".into()))?;
        let model = model_sec
            .get("name")
            .ok_or_else(|| Error::Parse("[model] needs `name`".into()))?
            .clone();
        let dim: usize = get(&s, "model", "dim", 2)?;
        let params: Params = model_sec
            .iter()
            .filter(|(k, _)| k.as_str() != "name" && k.as_str() != "dim")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();

        let substrate = match s.get("substrate").and_then(|m| m.get("kind")) {
            Some(k) => SubstrateChoice::parse(k)?,
            None => SubstrateChoice::Window,
        };
        if let SubstrateChoice::Torus(sides) = &substrate {
            if sides.len() != dim {
                return Err(invalid("substrate", format!("torus has {} sides but dim = {dim}", sides.len())));
            }
        }

        let kind: String = get(&s, "schedule", "kind", "single-site".to_string())?;
        let block: u32 = get(&s, "schedule", "block", 1)?;
        let schedule = match kind.as_str() {
            "single-site" => ScheduleChoice::SingleSite,
            "fixed" | "fixed-optimal" => ScheduleChoice::FixedOptimal {
                block,
                u: get(&s, "schedule", "u", block)?,
            },
            "fixed-contracting" => ScheduleChoice::FixedContracting {
                block,
                r: get(&s, "schedule", "r", 1)?,
                s: get(&s, "schedule", "s", 2)?,
            },
            "fixed-product" => ScheduleChoice::FixedProduct { block },
            "growing" => ScheduleChoice::Growing {
                delta: get(&s, "schedule", "delta", 0.25)?,
                epsilon: get(&s, "schedule", "epsilon", 0.1)?,
                ell1: get(&s, "schedule", "ell1", 1)?,
                stages: get(&s, "schedule", "stages", DEFAULT_MAX_STAGES)?,
            },
            other => return Err(invalid("schedule.kind", format!("unknown schedule `{other}`"))),
        };
        let exclusion = match get(&s, "schedule", "exclusion", "l1".to_string())?.as_str() {
            "l1" => Exclusion::L1Ball,
            "box" => Exclusion::Box,
            other => return Err(invalid("schedule.exclusion", format!("expected l1 or box, got `{other}`"))),
        };

        let pmfs = match s.get("diag").and_then(|m| m.get("pmfs")) {
            None => None,
            Some(raw) => Some(
                raw.split(';')
                    .map(|row| {
                        row.split(',')
                            .map(|t| t.trim().parse::<f64>().map_err(|_| invalid("diag.pmfs", format!("`{t}`"))))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let cfg = ExperimentConfig {
            dim,
            substrate,
            schedule,
            exclusion,
            seed: get(&s, "run", "seed", 1)?,
            replicas: get(&s, "run", "replicas", 1000)?,
            out: get_opt::<String>(&s, "run", "out")?.map(PathBuf::from),
            horizon_cap: get(&s, "run", "horizon_cap", 1 << 20)?,
            exhaustion_limit: get(&s, "run", "exhaustion_limit", 12)?,
            stats: StatSettings {
                significance: get(&s, "stats", "significance", 1e-3)?,
                tv_threshold: get(&s, "stats", "tv_threshold", 0.02)?,
                min_expected: get(&s, "stats", "min_expected", 5.0)?,
                z: get(&s, "stats", "z", 3.0)?,
                tail_floor: get(&s, "stats", "tail_floor", 1e-3)?,
            },
            diag: DiagSettings {
                block: get(&s, "diag", "block", 1)?,
                u: get(&s, "diag", "u", 1)?,
                max_a: get(&s, "diag", "max_a", 3)?,
                random_a: get(&s, "diag", "random_a", 200)?,
                draws: get(&s, "diag", "draws", 1 << 20)?,
                pmfs,
            },
            p_c: get_opt(&s, "conditions", "p_c")?,
            model,
            params,
            sections: s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.replicas == 0 {
            return Err(invalid("run.replicas", "must be positive"));
        }
        if self.horizon_cap == 0 {
            return Err(invalid("run.horizon_cap", "must be positive"));
        }
        let st = &self.stats;
        if !(st.significance > 0.0 && st.significance < 1.0) {
            return Err(invalid("stats.significance", "must lie in (0,1)"));
        }
        if !(st.tail_floor > 0.0 && st.tail_floor < 1.0) {
            return Err(invalid("stats.tail_floor", "must lie in (0,1)"));
        }
        if let Some(p) = self.p_c {
            if !(p > 0.0 && p <= 1.0) {
                return Err(invalid("conditions.p_c", "must lie in (0,1]"));
            }
        }
        if let ScheduleChoice::Growing { delta, epsilon, .. } = self.schedule {
            for (n, x) in [("schedule.delta", delta), ("schedule.epsilon", epsilon)] {
                if !(x > 0.0 && x < 1.0 / 3.0) {
                    return Err(invalid(n, "must lie in (0, 1/3)"));
                }
            }
        }
        if let Some(rows) = &self.diag.pmfs {
            if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                return Err(invalid("diag.pmfs", "rows must be non-empty and of equal length"));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<Spec> {
        make_model(&self.model, &self.params, self.dim)
    }

    /// Canonical text of the effective configuration.
    pub fn canonical(&self) -> String {
        let mut s = self.sections.clone();
        s.entry("substrate".into())
            .or_default()
            .insert("kind".into(), self.substrate.render());
        render_sections(&s)
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            config_hash: self.hash(),
            seed: self.seed,
            version: version(),
        }
    }

    pub fn limits(&self) -> Limits {
        Limits::default()
    }

    /// The schedule named by the config.
    pub fn build_schedule(&self, spec: &Spec) -> Result<Schedule> {
        let lim = self.limits();
        let d = spec.dim();
        match &self.schedule {
            ScheduleChoice::SingleSite => {
                let v = Region::singleton(Vertex::origin(d));
                fixed_schedule(spec, &v, &CouplingKind::Optimal { u: v.clone() }, &lim, self.exclusion)
            }
            ScheduleChoice::FixedOptimal { block, u } => {
                fixed_schedule(spec, &ball(*block, d), &CouplingKind::Optimal { u: ball(*u, d) }, &lim, self.exclusion)
            }
            ScheduleChoice::FixedContracting { block, r, s } => fixed_schedule(
                spec,
                &ball(*block, d),
                &CouplingKind::Contracting { n: *block, r: *r, s: *s },
                &lim,
                self.exclusion,
            ),
            ScheduleChoice::FixedProduct { block } => {
                fixed_schedule(spec, &ball(*block, d), &CouplingKind::Product, &lim, self.exclusion)
            }
            ScheduleChoice::Growing { delta, epsilon, ell1, stages } => {
                GrowingPlan::build(spec, *delta, *epsilon, *ell1, *stages, &lim)?.schedule(spec, &lim, self.exclusion)
            }
        }
    }
}

/// Provenance attached to every output.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// Either a computed value or the error that stopped it.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Error { message: String, suggestion: Option<String> },
}

impl<T> Outcome<T> {
    fn from(r: Result<T>, suggestion: &str) -> Self {
        match r {
            Ok(v) => Outcome::Ok(v),
            Err(e) => {
                let cap = matches!(e, Error::Capacity { .. });
                Outcome::Error {
                    message: e.to_string(),
                    suggestion: cap.then(|| suggestion.to_string()),
                }
            }
        }
    }

    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok(v) => Some(v),
            Outcome::Error { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaEntry {
    pub v: String,
    pub u: String,
    pub gamma: Outcome<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionsReport {
    pub meta: Meta,
    pub model: String,
    pub high_noise: Outcome<Verdict>,
    pub dobrushin: Outcome<Verdict>,
    /// Absent when no `p_c` was configured.
    pub disagreement_percolation: Option<Outcome<Verdict>>,
    pub gamma: Vec<GammaEntry>,
    pub weak_mixing: Outcome<MixingReport>,
    pub strong_mixing: Outcome<MixingReport>,
}

/// Condition checkers plus small γ and mixing presets.
pub fn cmd_conditions(cfg: &ExperimentConfig) -> Result<ConditionsReport> {
    let spec = cfg.spec()?;
    let d = spec.dim();
    let lim = cfg.limits();
    let hint = "use a smaller preset: boxes up to n = 0, or d = 1";
    let gamma = [(0u32, 0u32), (1, 0), (1, 1)]
        .iter()
        .map(|&(n, m)| GammaEntry {
            v: format!("Λ_{n}"),
            u: format!("Λ_{m}"),
            gamma: Outcome::from(gamma_with(&spec, &ball(n, d), &ball(m, d), &lim), hint),
        })
        .collect();
    let boxes = preset_boxes(&[0, 1], d);
    // All boundary pairs on Λ_1 is too many for d >= 2.
    let strong_boxes = if d == 1 { boxes.clone() } else { preset_boxes(&[0], d) };
    Ok(ConditionsReport {
        meta: cfg.meta(),
        model: spec.name().to_string(),
        high_noise: Outcome::from(check_high_noise(&spec), hint),
        dobrushin: Outcome::from(check_dobrushin(&spec), hint),
        disagreement_percolation: cfg.p_c.map(|p| Outcome::from(check_disagreement_percolation(&spec, p), hint)),
        gamma,
        weak_mixing: Outcome::from(mixing_profile_with(&spec, MixingKind::Weak, &boxes, &lim), hint),
        strong_mixing: Outcome::from(mixing_profile_with(&spec, MixingKind::Strong, &strong_boxes, &lim), hint),
    })
}

/// Chi-square goodness of fit with cells pooled (in order of increasing
/// expected count) until each has expected count at least `min_expected`.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub cells: usize,
}

pub fn chi_square(observed: &[u64], probs: &[f64], min_expected: f64) -> Result<ChiSquare> {
    if observed.len() != probs.len() {
        return Err(invalid("chi_square", "observed and expected differ in length"));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(invalid("chi_square", "no observations"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut e, mut o) = (0.0, 0.0);
    for i in order {
        e += probs[i] * n as f64;
        o += observed[i] as f64;
        if e >= min_expected {
            cells.push((o, e));
            e = 0.0;
            o = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).map_err(|e| invalid("dof", e.to_string()))?.cdf(statistic)
    };
    Ok(ChiSquare {
        statistic,
        dof,
        p_value,
        cells: cells.len(),
    })
}

/// Exactness test of torus samples against the enumerated Gibbs law.
#[derive(Clone, Debug, Serialize)]
pub struct TorusFit {
    pub states: usize,
    pub draws: u64,
    pub tv: f64,
    pub tv_threshold: f64,
    pub chi_square: ChiSquare,
    pub significance: f64,
    pub tv_pass: bool,
    pub chi_pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleReport {
    pub meta: Meta,
    pub model: String,
    pub substrate: SubstrateChoice,
    pub replicas: u64,
    pub censored: u64,
    pub mean_horizon: f64,
    pub widened_steps: u64,
    /// Torus mode only.
    pub fit: Option<TorusFit>,
    /// Window mode: frequency of each symbol at the origin.
    pub site_frequencies: Option<Vec<f64>>,
    #[serde(skip)]
    pub lines: Vec<String>,
}

fn replica_field(seed: u64, i: u64) -> RandomField {
    RandomField::new(seed).substream(i)
}

/// Perfect samples: whole-torus configurations (checked against the exact
/// law) or values at the origin of Z^d.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<SampleReport> {
    let spec = cfg.spec()?;
    let schedule = cfg.build_schedule(&spec)?;
    let n = cfg.replicas;
    let mut report = SampleReport {
        meta: cfg.meta(),
        model: spec.name().to_string(),
        substrate: cfg.substrate.clone(),
        replicas: n,
        censored: 0,
        mean_horizon: 0.0,
        widened_steps: 0,
        fit: None,
        site_frequencies: None,
        lines: Vec::new(),
    };
    match &cfg.substrate {
        SubstrateChoice::Torus(sides) => {
            let torus = Torus::new(sides)?;
            let law = torus_gibbs(&spec, &torus)?;
            let index: std::collections::HashMap<&[Symbol], usize> =
                law.support().iter().enumerate().map(|(i, c)| (c.as_slice(), i)).collect();
            let draws = map_range(n as usize, |i| {
                let f = replica_field(cfg.seed, i as u64);
                let dy = Dynamics::on_torus(&spec, &schedule, &f, &torus)?.with_exhaustion_limit(cfg.exhaustion_limit);
                match dy.cftp_torus(cfg.horizon_cap) {
                    Ok(s) => Ok(Some(s)),
                    Err(Error::NoCoalescence { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            });
            let mut counts = vec![0u64; law.len()];
            let mut total_h = 0u64;
            for (i, d) in draws.into_iter().enumerate() {
                match d? {
                    Some(s) => {
                        let k = *index
                            .get(s.values.as_slice())
                            .ok_or_else(|| invalid("sample", "configuration outside the support"))?;
                        counts[k] += 1;
                        total_h += s.horizon as u64;
                        report.widened_steps += s.work.widened_steps;
                        report.lines.push(format!(
                            "{{\"replica\":{i},\"horizon\":{},\"state\":{k}}}",
                            s.horizon
                        ));
                    }
                    None => {
                        report.censored += 1;
                        report.lines.push(format!("{{\"replica\":{i},\"censored\":true}}"));
                    }
                }
            }
            let good = n - report.censored;
            report.mean_horizon = total_h as f64 / good.max(1) as f64;
            if good > 0 {
                let tv = counts
                    .iter()
                    .zip(law.probs())
                    .map(|(c, p)| (*c as f64 / good as f64 - p).abs())
                    .sum::<f64>()
                    / 2.0;
                let chi = chi_square(&counts, law.probs(), cfg.stats.min_expected)?;
                report.fit = Some(TorusFit {
                    states: law.len(),
                    draws: good,
                    tv,
                    tv_threshold: cfg.stats.tv_threshold,
                    tv_pass: tv < cfg.stats.tv_threshold,
                    chi_pass: chi.p_value > cfg.stats.significance,
                    chi_square: chi,
                    significance: cfg.stats.significance,
                });
            }
        }
        SubstrateChoice::Window => {
            let origin = Vertex::origin(spec.dim());
            let draws = map_range(n as usize, |i| {
                let f = replica_field(cfg.seed, i as u64);
                let dy = Dynamics::new(&spec, &schedule, &f)?.with_exhaustion_limit(cfg.exhaustion_limit);
                match dy.cftp_value(&origin, cfg.horizon_cap) {
                    Ok(r) => Ok(Some(r)),
                    Err(Error::NoCoalescence { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            });
            let mut freq = vec![0u64; spec.q()];
            let mut total_t = 0u64;
            for (i, d) in draws.into_iter().enumerate() {
                match d? {
                    Some(r) => {
                        freq[r.value as usize] += 1;
                        total_t += r.t as u64;
                        report.widened_steps += r.work.widened_steps;
                        report.lines.push(CftpRecord::new(cfg.seed.wrapping_add(i as u64), &r).to_json());
                    }
                    None => {
                        report.censored += 1;
                        report.lines.push(format!("{{\"replica\":{i},\"censored\":true}}"));
                    }
                }
            }
            let good = (n - report.censored).max(1);
            report.mean_horizon = total_t as f64 / good as f64;
            report.site_frequencies = Some(freq.iter().map(|c| *c as f64 / good as f64).collect());
        }
    }
    Ok(report)
}

/// One row of a survival table.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TailRow {
    pub n: u32,
    pub survivors: u64,
    pub survival: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Empirical survival curve `P(T > n)` with a geometric fit.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TailTable {
    pub rows: Vec<TailRow>,
    pub replicas: u64,
    pub censored: u64,
    /// Least-squares slope of `ln P(T > n)` over rows with survival at
    /// least the floor.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// RMS deviation of `ln P(T > n)` from the fitted line.
    pub residual: Option<f64>,
    /// `ln(1 - h)` for the maximum-likelihood per-step hazard `h` of a
    /// geometric law on `{1, 2, ...}`, and its standard error.
    pub geometric_slope: Option<f64>,
    pub geometric_se: Option<f64>,
    pub floor: f64,
}

impl TailTable {
    /// `times` are coalescence times; `censored` draws exceeded `cap`.
    pub fn from_times(times: &[u32], censored: u64, cap: u32, z: f64, floor: f64) -> TailTable {
        let total = times.len() as u64 + censored;
        let max_t = times.iter().copied().max().unwrap_or(0).min(cap);
        let mut hist = vec![0u64; max_t as usize + 1];
        for &t in times {
            hist[t.min(max_t) as usize] += 1;
        }
        let mut rows = Vec::with_capacity(hist.len());
        let mut surv = total;
        for (n, h) in hist.iter().enumerate() {
            surv -= h;
            let p = surv as f64 / total.max(1) as f64;
            let (lo, hi) = wilson(surv, total, z);
            rows.push(TailRow {
                n: n as u32,
                survivors: surv,
                survival: p,
                ci_low: lo,
                ci_high: hi,
            });
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.survival >= floor && r.survival > 0.0)
            .map(|r| (r.n as f64, r.survival))
            .collect();
        let fit = log_linear_fit(&pts);
        let (geometric_slope, geometric_se) = if censored == 0 && !times.is_empty() && times.iter().all(|t| *t >= 1) {
            let m = times.len() as f64;
            let h = m / times.iter().map(|t| *t as f64).sum::<f64>();
            if h < 1.0 {
                let se_h = h * ((1.0 - h) / m).sqrt();
                (Some((1.0 - h).ln()), Some(se_h / (1.0 - h)))
            } else {
                (None, None)
            }
        } else {
            (None, None)
        };
        TailTable {
            rows,
            replicas: total,
            censored,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            residual: fit.map(|f| f.2),
            geometric_slope,
            geometric_se,
            floor,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,survivors,survival,ci_low,ci_high\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e},{:e},{:e}", r.n, r.survivors, r.survival, r.ci_low, r.ci_high);
        }
        s
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let den = 1.0 + z * z / n;
    let c = (p + z * z / (2.0 * n)) / den;
    let w = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / den;
    ((c - w).max(0.0), (c + w).min(1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct TailsReport {
    pub meta: Meta,
    pub model: String,
    pub table: TailTable,
    pub widened_steps: u64,
}

/// Coalescence times at the origin over independent replicas.
pub fn cmd_tails(cfg: &ExperimentConfig) -> Result<TailsReport> {
    let spec = cfg.spec()?;
    let schedule = cfg.build_schedule(&spec)?;
    let origin = Vertex::origin(spec.dim());
    let torus = match &cfg.substrate {
        SubstrateChoice::Torus(s) => Some(Torus::new(s)?),
        SubstrateChoice::Window => None,
    };
    let runs = map_range(cfg.replicas as usize, |i| {
        let f = replica_field(cfg.seed, i as u64);
        let dy = match &torus {
            Some(t) => Dynamics::on_torus(&spec, &schedule, &f, t)?,
            None => Dynamics::new(&spec, &schedule, &f)?,
        }
        .with_exhaustion_limit(cfg.exhaustion_limit);
        match dy.cftp_value(&origin, cfg.horizon_cap) {
            Ok(r) => Ok(Some((r.t, r.work.widened_steps))),
            Err(Error::NoCoalescence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut times = Vec::new();
    let mut censored = 0;
    let mut widened = 0;
    for r in runs {
        match r? {
            Some((t, w)) => {
                times.push(t);
                widened += w;
            }
            None => censored += 1,
        }
    }
    Ok(TailsReport {
        meta: cfg.meta(),
        model: spec.name().to_string(),
        table: TailTable::from_times(&times, censored, cfg.horizon_cap, cfg.stats.z, cfg.stats.tail_floor),
        widened_steps: widened,
    })
}

/// Pairwise structure of an explicit family of single-site laws.
#[derive(Clone, Debug, Serialize)]
pub struct PmfFamilyReport {
    pub pairwise_tv: Vec<Vec<f64>>,
    pub sum_min: f64,
    pub coincidence: f64,
    pub worst_pair_disagreement: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagReport {
    pub meta: Meta,
    pub coupling_id: String,
    pub exact: bool,
    pub gamma: Option<f64>,
    pub coincidence: Option<Estimate>,
    pub kappa: Estimate,
    pub contraction: Option<ContractionReport>,
    pub pmf_family: Option<PmfFamilyReport>,
}

fn pmf_family(pmfs: &[Vec<f64>]) -> Result<(PmfFamilyReport, OptimalCoupling)> {
    let c = OptimalCoupling::from_pmfs(pmfs)?;
    let joint = Joint::exact(&c, 1 << 20)?;
    let JointLaw::Exact(atoms) = joint.law() else { unreachable!() };
    let k = pmfs.len();
    let norm: Vec<Vec<f64>> = pmfs
        .iter()
        .map(|p| {
            let s: f64 = p.iter().sum();
            p.iter().map(|x| x / s).collect()
        })
        .collect();
    let mut tv = vec![vec![0.0; k]; k];
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            tv[i][j] = norm[i].iter().zip(&norm[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            if i < j {
                let dis: f64 = atoms.iter().filter(|(_, o)| o[i] != o[j]).map(|(p, _)| p).sum();
                worst = worst.max(dis);
            }
        }
    }
    let sum_min: f64 = (0..norm[0].len())
        .map(|a| norm.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min))
        .sum();
    let coincidence: f64 = atoms
        .iter()
        .filter(|(_, o)| o.iter().all(|x| *x == o[0]))
        .map(|(p, _)| p)
        .sum::<f64>()
        + 0.0;
    Ok((
        PmfFamilyReport {
            pairwise_tv: tv,
            sum_min,
            coincidence,
            worst_pair_disagreement: worst,
        },
        c,
    ))
}

/// Coincidence, κ and the `(τ, A)` contraction sweep for the coupling
/// optimal on `Λ_u` over `Λ_block`; or the pairwise structure of an
/// explicit family of laws.
pub fn cmd_coupling_diag(cfg: &ExperimentConfig) -> Result<(DiagReport, Vec<String>)> {
    if let Some(pmfs) = &cfg.diag.pmfs {
        let (fam, c) = pmf_family(pmfs)?;
        let joint = Joint::exact(&c, 1 << 20)?;
        let k = kappa(&joint);
        return Ok((
            DiagReport {
                meta: cfg.meta(),
                coupling_id: c.id(),
                exact: true,
                gamma: Some(c.gamma()),
                coincidence: Some(Estimate {
                    value: fam.coincidence,
                    se: 0.0,
                    exact: true,
                    draws: 0,
                }),
                kappa: k,
                contraction: None,
                pmf_family: Some(fam),
            },
            Vec::new(),
        ));
    }
    let spec = cfg.spec()?;
    let d = spec.dim();
    let v = ball(cfg.diag.block, d);
    let u = ball(cfg.diag.u.min(cfg.diag.block), d);
    let c = OptimalCoupling::new(&spec, &v, &u, &cfg.limits())?;
    let field = RandomField::new(cfg.seed);
    let joint = Joint::auto(&c, field.clone(), cfg.diag.draws)?;
    let all: Vec<usize> = (0..joint.members().len()).collect();
    let coincidence = coincidence_probability(&joint, &u, &all)?;
    let k = kappa(&joint);
    let nb = v.boundary().len();
    let mut sets = subsets_up_to(nb, cfg.diag.max_a);
    if cfg.diag.max_a < nb && cfg.diag.random_a > 0 {
        sets.extend(random_subsets(nb, cfg.diag.random_a, cfg.diag.max_a + 1, &field.substream(1)));
    }
    let report = check_contraction(&joint, &ContractionMode::TauA { sets }, cfg.stats.z)?;
    let lines = report.records.iter().map(|r| r.to_json()).collect();
    Ok((
        DiagReport {
            meta: cfg.meta(),
            coupling_id: c.id(),
            exact: joint.is_exact(),
            gamma: Some(c.gamma()),
            coincidence: Some(coincidence),
            kappa: k,
            contraction: Some(report),
            pmf_family: None,
        },
        lines,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedSummary {
    pub block_sites: usize,
    pub r: u32,
    pub p: f64,
    pub coupling_id: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScheduleReport {
    pub meta: Meta,
    pub fixed: Option<FixedSummary>,
    pub growing: Option<GrowingPlan>,
    pub growth_ok: Option<bool>,
    pub stage_bounds: Vec<f64>,
    /// Config text that reproduces a growing plan.
    pub config_text: Option<String>,
}

/// Build the configured schedule and report its parameters.
pub fn cmd_schedule_build(cfg: &ExperimentConfig) -> Result<ScheduleReport> {
    let spec = cfg.spec()?;
    let mut rep = ScheduleReport {
        meta: cfg.meta(),
        fixed: None,
        growing: None,
        growth_ok: None,
        stage_bounds: Vec::new(),
        config_text: None,
    };
    if let ScheduleChoice::Growing { delta, epsilon, ell1, stages } = cfg.schedule {
        let plan = GrowingPlan::build(&spec, delta, epsilon, ell1, stages, &cfg.limits())?;
        rep.growth_ok = Some(plan.satisfies_growth());
        rep.stage_bounds = (1..=plan.stages.len()).filter_map(|n| plan.stage_success_bound(n)).collect();
        rep.config_text = Some(plan.to_config_text());
        rep.growing = Some(plan);
    } else {
        let s = cfg.build_schedule(&spec)?;
        let st = s.stage(1).expect("fixed schedules have a first stage");
        rep.fixed = Some(FixedSummary {
            block_sites: st.block().len(),
            r: st.r(),
            p: st.p(),
            coupling_id: st.coupling().id(),
        });
    }
    Ok(rep)
}
