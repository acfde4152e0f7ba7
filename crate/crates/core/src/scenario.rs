//! Scenario configs and the runners that turn them into CSV reports.
//!
//! Config text is flat `key = value` lines. Site spectra live in
//! `[site NAME]` sections made of `level = energy,degeneracy` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::infospec::rate_crossover;
use crate::isothermal::{first_law_decomposition, max_work, q_limit, IsothermalScenario, Schedule};
use crate::ldp::{rate_analytic, rate_estimate};
use crate::protocol::{
    build_adiabatic_plan_with_ladder, execute_plan, sample_work, Macrostate, Part, ProtocolParams,
};
use crate::spectrum::{parse_rational, potentials, SiteSpectrum};
use crate::storage::LadderState;
use crate::verify::{
    converse_bound, theorem1_direct, toy_exhaustive_search, ConverseScenario, DirectScenario, ParamChoice,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Direct,
    Converse,
    Isothermal,
    Infospec,
    Rate,
}

impl Mode {
    fn parse(s: &str) -> Option<Mode> {
        Some(match s {
            "direct" => Mode::Direct,
            "converse" => Mode::Converse,
            "isothermal" => Mode::Isothermal,
            "infospec" => Mode::Infospec,
            "rate" => Mode::Rate,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Converse => "converse",
            Mode::Isothermal => "isothermal",
            Mode::Infospec => "infospec",
            Mode::Rate => "rate",
        }
    }

    fn keys(&self) -> &'static [&'static str] {
        match self {
            Mode::Direct => &[
                "src_sites", "src_betas", "dst_sites", "dst_betas", "params", "eps", "eps_prime", "delta",
                "delta_prime", "u_w", "num_rungs", "samples",
            ],
            Mode::Converse => &[
                "src_sites", "src_betas", "dst_sites", "dst_betas", "eps", "eps_prime", "storage_slack", "toy_n",
                "toy_depth", "toy_weights",
            ],
            Mode::Isothermal => &["system_src", "system_dst", "bath", "beta", "m_grid", "work"],
            Mode::Infospec => &["site", "beta", "band"],
            Mode::Rate => &["site", "beta", "x_grid"],
        }
    }
}

const GLOBAL_KEYS: &[&str] = &[
    "name", "mode", "n_grid", "src_sites", "src_betas", "dst_sites", "dst_betas", "params", "eps", "eps_prime",
    "delta", "delta_prime", "u_w", "num_rungs", "samples", "storage_slack", "toy_n", "toy_depth", "toy_weights",
    "system_src", "system_dst", "bath", "beta", "m_grid", "work", "site", "band", "x_grid",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    Direct { scn: DirectScenario, samples: usize },
    Converse { scn: ConverseScenario, toy_n: Vec<u64>, toy_depth: usize, toy_weights: Vec<f64> },
    Isothermal { scn: IsothermalScenario, work: Option<f64> },
    Infospec { site: SiteSpectrum, beta: f64, band: f64 },
    Rate { site: SiteSpectrum, beta: f64, x_grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    /// System sizes n; bath sizes M in isothermal mode.
    pub n_grid: Vec<u64>,
    pub kind: ScenarioKind,
}

fn invalid(field: &str, msg: impl Into<String>) -> Error {
    Error::Validation { field: field.into(), msg: msg.into() }
}

struct Raw {
    keys: BTreeMap<String, (usize, String)>,
    sites: BTreeMap<String, (usize, Vec<(usize, String)>)>,
}

impl Raw {
    fn get(&self, key: &str) -> Option<&(usize, String)> {
        self.keys.get(key)
    }

    fn req(&self, key: &str) -> Result<&(usize, String)> {
        self.get(key).ok_or_else(|| invalid(key, "missing"))
    }

    fn str(&self, key: &str) -> Result<&str> {
        Ok(self.req(key)?.1.as_str())
    }

    fn f64_at(line: usize, key: &str, v: &str) -> Result<f64> {
        v.trim().parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("`{key}` expects a number, got `{v}`") })
    }

    fn u64_at(line: usize, key: &str, v: &str) -> Result<u64> {
        v.trim().parse::<u64>().map_err(|_| Error::Parse { line, msg: format!("`{key}` expects an integer, got `{v}`") })
    }

    fn num(&self, key: &str) -> Result<f64> {
        let (l, v) = self.req(key)?;
        Self::f64_at(*l, key, v)
    }

    fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some((l, v)) => Self::f64_at(*l, key, v),
            None => Ok(default),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<(usize, String)>> {
        let (l, v) = self.req(key)?;
        let items: Vec<(usize, String)> =
            v.split(',').map(|s| (*l, s.trim().to_string())).filter(|(_, s)| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(invalid(key, "empty list"));
        }
        Ok(items)
    }

    fn nums(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)?.iter().map(|(l, s)| Self::f64_at(*l, key, s)).collect()
    }

    fn ints(&self, key: &str) -> Result<Vec<u64>> {
        self.list(key)?.iter().map(|(l, s)| Self::u64_at(*l, key, s)).collect()
    }

    fn site(&self, key: &str, name: &str) -> Result<SiteSpectrum> {
        let (_, lines) = self.sites.get(name).ok_or_else(|| invalid(key, format!("no [site {name}] section")))?;
        let mut levels = Vec::new();
        for (l, v) in lines {
            let (e, d) = v
                .split_once(',')
                .ok_or_else(|| Error::Parse { line: *l, msg: "level expects `energy,degeneracy`".into() })?;
            let e = parse_rational(e.trim()).ok_or_else(|| Error::Parse { line: *l, msg: format!("bad energy `{e}`") })?;
            let d = d
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Parse { line: *l, msg: format!("bad degeneracy `{d}`") })?;
            levels.push((e, d));
        }
        SiteSpectrum::new(&levels).map_err(|e| invalid(key, format!("site {name}: {e}")))
    }

    fn named_site(&self, key: &str) -> Result<SiteSpectrum> {
        let name = self.str(key)?.trim().to_string();
        self.site(key, &name)
    }

    fn beta(&self, key: &str) -> Result<f64> {
        let b = self.num(key)?;
        if !(b > 0.0 && b.is_finite()) {
            return Err(invalid(key, format!("inverse temperature must be positive, got {b}")));
        }
        Ok(b)
    }

    fn macrostate(&self, side: &str) -> Result<Macrostate> {
        let sk = format!("{side}_sites");
        let bk = format!("{side}_betas");
        let names = self.list(&sk)?;
        let betas = self.nums(&bk)?;
        if names.len() != betas.len() {
            return Err(invalid(&bk, format!("{} betas for {} sites", betas.len(), names.len())));
        }
        let mut parts = Vec::new();
        for ((_, name), beta) in names.iter().zip(betas) {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(invalid(&bk, format!("inverse temperature must be positive, got {beta}")));
            }
            parts.push(Part { site: self.site(&sk, name)?, beta });
        }
        Ok(Macrostate::new(parts))
    }
}

fn tokenize(text: &str) -> Result<Raw> {
    let mut keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut sites: BTreeMap<String, (usize, Vec<(usize, String)>)> = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(head) = body.strip_prefix('[') {
            let head = head
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?;
            let mut it = head.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("site"), Some(name), None) => {
                    if sites.contains_key(name) {
                        return Err(Error::Parse { line, msg: format!("site `{name}` defined twice") });
                    }
                    sites.insert(name.to_string(), (line, Vec::new()));
                    section = Some(name.to_string());
                }
                _ => return Err(Error::Parse { line, msg: format!("unknown section `[{head}]`") }),
            }
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, msg: "expected `key = value`".into() })?;
        let (k, v) = (k.trim(), v.trim());
        match &section {
            Some(s) => {
                if k != "level" {
                    return Err(Error::Parse { line, msg: format!("unknown key `{k}` in site section") });
                }
                sites.get_mut(s).unwrap().1.push((line, v.to_string()));
            }
            None => {
                if !GLOBAL_KEYS.contains(&k) {
                    return Err(Error::Parse { line, msg: format!("unknown key `{k}`") });
                }
                if keys.insert(k.to_string(), (line, v.to_string())).is_some() {
                    return Err(Error::Parse { line, msg: format!("duplicate key `{k}`") });
                }
            }
        }
    }
    for (name, (line, levels)) in &sites {
        if levels.is_empty() {
            return Err(Error::Parse { line: *line, msg: format!("site `{name}` has no levels") });
        }
    }
    Ok(Raw { keys, sites })
}

pub fn parse_config(text: &str) -> Result<Scenario> {
    let raw = tokenize(text)?;
    let name = raw.str("name")?.to_string();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(invalid("name", "use letters, digits, '-' or '_'"));
    }
    let mode_s = raw.str("mode")?;
    let mode = Mode::parse(mode_s).ok_or_else(|| invalid("mode", format!("unknown mode `{mode_s}`")))?;
    for k in raw.keys.keys() {
        if k != "name" && k != "mode" && k != "n_grid" && !mode.keys().contains(&k.as_str()) {
            return Err(invalid(k, format!("not used in {} mode", mode.name())));
        }
    }
    let n_grid = if mode == Mode::Isothermal {
        if raw.get("n_grid").is_some() {
            return Err(invalid("n_grid", "isothermal mode takes m_grid"));
        }
        let m = raw.nums("m_grid")?;
        if m.iter().any(|&x| !(x >= 1.0 && x.fract() == 0.0)) {
            return Err(invalid("m_grid", "bath sizes must be positive integers"));
        }
        m.iter().map(|&x| x as u64).collect()
    } else {
        raw.ints("n_grid")?
    };
    if n_grid.contains(&0) {
        return Err(invalid("n_grid", "sizes must be positive"));
    }
    let kind = match mode {
        Mode::Direct => {
            let src = raw.macrostate("src")?;
            let dst = raw.macrostate("dst")?;
            let params = match raw.get("params").map(|p| p.1.as_str()).unwrap_or("auto") {
                "auto" => {
                    for k in ["eps", "eps_prime", "delta", "u_w"] {
                        if raw.get(k).is_some() {
                            return Err(invalid(k, "only used with params = explicit"));
                        }
                    }
                    ParamChoice::Auto { delta_prime: raw.num("delta_prime")? }
                }
                "explicit" => ParamChoice::Explicit(ProtocolParams {
                    eps: raw.num("eps")?,
                    eps_prime: raw.num("eps_prime")?,
                    delta: raw.num("delta")?,
                    delta_prime: raw.num("delta_prime")?,
                    u_w: raw.num("u_w")?,
                }),
                other => return Err(invalid("params", format!("expected auto or explicit, got `{other}`"))),
            };
            let num_rungs = match raw.get("num_rungs") {
                Some((l, v)) => Some(Raw::u64_at(*l, "num_rungs", v)?),
                None => None,
            };
            let samples = match raw.get("samples") {
                Some((l, v)) => Raw::u64_at(*l, "samples", v)? as usize,
                None => 1000,
            };
            let scn = DirectScenario { src, dst, params, num_rungs };
            if scn.src != scn.dst {
                let field = if matches!(params, ParamChoice::Auto { .. }) { "delta_prime" } else { "params" };
                scn.resolved_params().map_err(|e| invalid(field, e.to_string()))?;
            }
            ScenarioKind::Direct { scn, samples }
        }
        Mode::Converse => {
            let scn = ConverseScenario {
                src: raw.macrostate("src")?,
                dst: raw.macrostate("dst")?,
                eps: raw.num("eps")?,
                eps_prime: raw.num("eps_prime")?,
                storage_slack: raw.num_or("storage_slack", 0.0)?,
            };
            if !(scn.eps > 0.0 && scn.eps_prime > 0.0) {
                return Err(invalid("eps", "shell widths must be positive"));
            }
            let toy_n = if raw.get("toy_n").is_some() { raw.ints("toy_n")? } else { Vec::new() };
            if toy_n.iter().any(|&n| n == 0 || n > 6) {
                return Err(invalid("toy_n", "toy sizes must lie in 1..=6"));
            }
            let toy_depth = raw.num_or("toy_depth", 2.0)?;
            if !(1.0..=3.0).contains(&toy_depth) || toy_depth.fract() != 0.0 {
                return Err(invalid("toy_depth", "depth must be 1, 2 or 3"));
            }
            let toy_weights =
                if raw.get("toy_weights").is_some() { raw.nums("toy_weights")? } else { (1..=8).map(|k| k as f64 / 8.0).collect() };
            if toy_weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
                return Err(invalid("toy_weights", "weights must lie in (0, 1]"));
            }
            let (_, _, ss) = crate::spectrum::ThermoPotentials::total(&scn.src.potentials()?);
            let (_, _, sd) = crate::spectrum::ThermoPotentials::total(&scn.dst.potentials()?);
            if sd >= ss {
                return Err(invalid("dst_betas", "destination entropy is not below the source, not a converse case"));
            }
            ScenarioKind::Converse { scn, toy_n, toy_depth: toy_depth as usize, toy_weights }
        }
        Mode::Isothermal => {
            let scn = IsothermalScenario {
                system_src: raw.named_site("system_src")?,
                system_dst: raw.named_site("system_dst")?,
                beta: raw.beta("beta")?,
                bath_site: raw.named_site("bath")?,
            };
            let work = match raw.get("work") {
                Some((l, v)) => Some(Raw::f64_at(*l, "work", v)?),
                None => None,
            };
            ScenarioKind::Isothermal { scn, work }
        }
        Mode::Infospec => {
            let band = raw.num_or("band", 0.1)?;
            if !(band > 0.0 && band < 0.5) {
                return Err(invalid("band", "must lie in (0, 1/2)"));
            }
            ScenarioKind::Infospec { site: raw.named_site("site")?, beta: raw.beta("beta")?, band }
        }
        Mode::Rate => {
            let x_grid = raw.nums("x_grid")?;
            if x_grid.iter().any(|&x| x == 0.0 || !x.is_finite()) {
                return Err(invalid("x_grid", "deviations must be nonzero"));
            }
            if n_grid.iter().any(|&n| n < 2) {
                return Err(invalid("n_grid", "rate estimates need n >= 2"));
            }
            ScenarioKind::Rate { site: raw.named_site("site")?, beta: raw.beta("beta")?, x_grid }
        }
    };
    Ok(Scenario { name, mode, n_grid, kind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Rate,
    Protocol,
    VerifyDirect,
    VerifyConverse,
    Isothermal,
    Infospec,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rate => "rate",
            Command::Protocol => "protocol",
            Command::VerifyDirect => "verify-direct",
            Command::VerifyConverse => "verify-converse",
            Command::Isothermal => "isothermal",
            Command::Infospec => "infospec",
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Command::Rate => Mode::Rate,
            Command::Protocol | Command::VerifyDirect => Mode::Direct,
            Command::VerifyConverse => Mode::Converse,
            Command::Isothermal => Mode::Isothermal,
            Command::Infospec => Mode::Infospec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub violations: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

pub fn fmt_num(x: f64) -> String {
    format!("{x:.11e}")
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &[&str]) -> Self {
        Csv { text: format!("{}\n", header.join(",")) }
    }

    fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.text, "{}", cells.join(","));
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| Error::Io(e.to_string()))?;
    tmp.persist(path).map_err(|e| Error::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

struct Emitter<'a> {
    dir: PathBuf,
    outcome: &'a mut RunOutcome,
}

impl Emitter<'_> {
    fn emit(&mut self, file: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(file);
        write_atomic(&path, contents)?;
        self.outcome.files.push(path);
        Ok(())
    }
}

impl Scenario {
    pub fn with_n_grid(mut self, grid: Vec<u64>) -> Result<Self> {
        if grid.is_empty() || grid.contains(&0) {
            return Err(invalid("n_grid", "sizes must be positive"));
        }
        self.n_grid = grid;
        Ok(self)
    }
}

pub fn run(scenario: &Scenario, command: Command, opts: &RunOptions) -> Result<RunOutcome> {
    if command.mode() != scenario.mode {
        return Err(invalid(
            "mode",
            format!("`{}` needs a {} scenario, `{}` is {}", command.name(), command.mode().name(), scenario.name, scenario.mode.name()),
        ));
    }
    if opts.seed.is_some() && command != Command::Protocol {
        return Err(invalid("seed", "the sampler only runs with the protocol command"));
    }
    let mut outcome = RunOutcome::default();
    let mut em = Emitter { dir: opts.out_dir.join(&scenario.name), outcome: &mut outcome };
    let grid = &scenario.n_grid;
    match (&scenario.kind, command) {
        (ScenarioKind::Rate { site, beta, x_grid }, _) => {
            let mut csv = Csv::new(&["x", "n", "rate_estimate", "rate_analytic"]);
            for &x in x_grid {
                let curve = rate_estimate(site, *beta, x, grid)?;
                let exact = rate_analytic(site, *beta, x)?;
                for (n, r) in curve.n_used.iter().zip(&curve.rate) {
                    csv.row(&[fmt_num(x), n.to_string(), fmt_num(*r), fmt_num(exact)]);
                }
            }
            em.emit("rate.csv", &csv.text)?;
        }
        (ScenarioKind::Direct { scn, .. }, Command::VerifyDirect) => {
            let reports = theorem1_direct(scn, grid)?;
            let mut csv = Csv::new(&[
                "n", "tv_system", "tv_storage", "entropy_gap_rate", "work_measured", "work_expected",
                "concentration_mass", "first_law_bound", "kept_src", "kept_dst", "reached_tv", "steps",
                "energy_violations", "subadditivity_slack",
            ]);
            let mut violations = Vec::new();
            for r in &reports {
                csv.row(&[
                    r.n.to_string(),
                    fmt_num(r.tv_system),
                    fmt_num(r.tv_storage),
                    fmt_num(r.entropy_gap_rate),
                    fmt_num(r.work_measured),
                    fmt_num(r.work_expected),
                    fmt_num(r.concentration_mass),
                    fmt_num(r.first_law_bound),
                    fmt_num(r.kept_src),
                    fmt_num(r.kept_dst),
                    fmt_num(r.reached_tv),
                    r.steps.to_string(),
                    r.energy_violations.to_string(),
                    fmt_num(r.subadditivity.lhs - r.subadditivity.rhs),
                ]);
                if r.energy_violations > 0 {
                    violations.push(format!("n={}: {} branches change total energy", r.n, r.energy_violations));
                }
                if !r.subadditivity.holds {
                    violations.push(format!("n={}: subadditivity bookkeeping fails", r.n));
                }
                if (r.work_measured - r.work_expected).abs() > r.first_law_bound {
                    violations.push(format!("n={}: work {} outside first-law bound", r.n, r.work_measured));
                }
            }
            em.emit("theorem1.csv", &csv.text)?;
            em.outcome.violations.extend(violations);
        }
        (ScenarioKind::Direct { scn, samples }, Command::Protocol) => {
            let params = scn.resolved_params()?;
            let mut csv = Csv::new(&[
                "n", "branches", "steps", "log_dim_src", "log_dim_dst", "kept_src", "kept_dst", "reached_tv",
                "num_rungs", "window_lo", "window_hi", "energy_violations",
            ]);
            let mut samples_csv = Csv::new(&["n", "sample", "work"]);
            for &n in grid {
                let plan = build_adiabatic_plan_with_ladder(&scn.src, &scn.dst, n, &params, scn.num_rungs)?;
                let rho = scn.src.gibbs(&plan.grid, n)?;
                let pi = LadderState::uniform(plan.window);
                let joint = execute_plan(&plan, &rho, &pi)?;
                if joint.audit.violations > 0 {
                    em.outcome.violations.push(format!("n={n}: {} branches change total energy", joint.audit.violations));
                }
                csv.row(&[
                    n.to_string(),
                    plan.branch_count().to_string(),
                    plan.steps.len().to_string(),
                    fmt_num(plan.log_dim_src),
                    fmt_num(plan.log_total),
                    fmt_num(plan.kept_src),
                    fmt_num(plan.kept_dst),
                    fmt_num(plan.reached_tv),
                    plan.ladder.num_rungs.to_string(),
                    plan.window.lo.to_string(),
                    plan.window.hi.to_string(),
                    joint.audit.violations.to_string(),
                ]);
                em.emit(&format!("plan_n{n}.txt"), &plan.to_manifest())?;
                if let Some(seed) = opts.seed {
                    for (i, w) in sample_work(&plan, &rho, &pi, *samples, seed)?.iter().enumerate() {
                        samples_csv.row(&[n.to_string(), i.to_string(), fmt_num(*w)]);
                    }
                }
            }
            em.emit("plans.csv", &csv.text)?;
            if opts.seed.is_some() {
                em.emit("work_samples.csv", &samples_csv.text)?;
            }
        }
        (ScenarioKind::Converse { scn, toy_n, toy_depth, toy_weights }, _) => {
            let mut csv = Csv::new(&["n", "delta_s_rate", "entropy_deficit", "log_dim", "t_min", "full_t_min"]);
            for &n in grid {
                let r = converse_bound(scn, n)?;
                csv.row(&[
                    n.to_string(),
                    fmt_num(r.delta_s_rate),
                    fmt_num(r.entropy_deficit),
                    fmt_num(r.log_dim),
                    fmt_num(r.t_min),
                    fmt_num(r.full_t_min),
                ]);
            }
            em.emit("converse.csv", &csv.text)?;
            if !toy_n.is_empty() {
                let mut toy = Csv::new(&["n", "best_tv", "bound", "plans_checked"]);
                for &n in toy_n {
                    let r = toy_exhaustive_search(scn, n, *toy_depth, toy_weights)?;
                    toy.row(&[n.to_string(), fmt_num(r.best_tv), fmt_num(r.bound), r.plans_checked.to_string()]);
                    if r.best_tv < r.bound - 1e-12 {
                        em.outcome.violations.push(format!("n={n}: toy search beats the converse bound"));
                    }
                }
                em.emit("toy_search.csv", &toy.text)?;
            }
        }
        (ScenarioKind::Isothermal { scn, work }, _) => {
            let ms: Vec<f64> = grid.iter().map(|&m| m as f64).collect();
            let pts = max_work(scn, &ms)?;
            let mut csv = Csv::new(&["M", "W_max", "minus_dF", "residual", "beta_prime", "Q"]);
            for p in &pts {
                csv.row(&[
                    fmt_num(p.m),
                    fmt_num(p.w_max),
                    fmt_num(p.minus_delta_f),
                    fmt_num(p.residual),
                    fmt_num(p.beta_prime),
                    fmt_num(p.q),
                ]);
                if p.w_max > p.minus_delta_f + 1e-12 {
                    em.outcome.violations.push(format!("M={}: W_max exceeds the free-energy drop", p.m));
                }
            }
            em.emit("isothermal.csv", &csv.text)?;
            let target = match work {
                Some(w) => *w,
                None => -scn.delta_f()?,
            };
            let mut fl = Csv::new(&["schedule", "M", "W_M", "Q_M", "beta_prime", "residual"]);
            let mut limits = Csv::new(&["schedule", "points", "q_limit"]);
            for (label, sched) in [("inv_sqrt", Schedule::InvSqrt), ("inv", Schedule::Inv)] {
                let mut feasible = Vec::new();
                for &m in &ms {
                    match first_law_decomposition(scn, m, target, sched) {
                        Ok(p) => {
                            fl.row(&[
                                label.into(),
                                fmt_num(m),
                                fmt_num(p.work),
                                fmt_num(p.heat),
                                fmt_num(p.beta_prime),
                                fmt_num(p.residual),
                            ]);
                            if p.residual.abs() > 1e-9 {
                                em.outcome.violations.push(format!("M={m}: first-law residual {}", p.residual));
                            }
                            feasible.push(p);
                        }
                        Err(Error::InfeasibleAtThisM { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                if feasible.len() >= 2 {
                    limits.row(&[label.into(), feasible.len().to_string(), fmt_num(q_limit(&feasible, sched))]);
                }
            }
            em.emit("first_law.csv", &fl.text)?;
            em.emit("q_limit.csv", &limits.text)?;
        }
        (ScenarioKind::Infospec { site, beta, band }, _) => {
            let s = potentials(site, *beta)?.s_tilde;
            let mut csv = Csv::new(&["n", "gamma_lo", "gamma_hi", "s_tilde"]);
            for c in rate_crossover(site, *beta, grid, *band)? {
                csv.row(&[c.n.to_string(), fmt_num(c.gamma_lo), fmt_num(c.gamma_hi), fmt_num(s)]);
            }
            em.emit("infospec.csv", &csv.text)?;
        }
        (ScenarioKind::Direct { .. }, _) => unreachable!("mode checked above"),
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUBITS: &str = "[site qubit]\nlevel = 0,1\nlevel = 1,1\n";

    fn direct(extra: &str) -> String {
        format!(
            "name = t\nmode = direct\nn_grid = 40\nsrc_sites = qubit\nsrc_betas = 1\ndst_sites = qubit\ndst_betas = 0.5\n{extra}{QUBITS}"
        )
    }

    #[test]
    fn minimal_direct_is_auto() {
        let s = parse_config(&direct("delta_prime = 0.04\n")).unwrap();
        match s.kind {
            ScenarioKind::Direct { scn, .. } => assert_eq!(scn.params, ParamChoice::Auto { delta_prime: 0.04 }),
            _ => panic!(),
        }
    }

    #[test]
    fn missing_beta_list() {
        let t = direct("delta_prime = 0.04\n").replace("src_betas = 1\n", "");
        assert_eq!(parse_config(&t).unwrap_err(), invalid("src_betas", "missing"));
    }

    #[test]
    fn delta_prime_too_large() {
        match parse_config(&direct("delta_prime = 0.09\n")).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "delta_prime"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_key_has_line() {
        let t = direct("delta_prime = 0.04\nfoo = 1\n");
        assert_eq!(parse_config(&t).unwrap_err(), Error::Parse { line: 9, msg: "unknown key `foo`".into() });
        let t = direct("delta_prime = 0.04\n").replace("level = 1,1", "energy = 1");
        assert!(matches!(parse_config(&t).unwrap_err(), Error::Parse { line: 11, .. }));
    }

    #[test]
    fn bad_number_has_line() {
        let t = direct("delta_prime = abc\n");
        assert!(matches!(parse_config(&t).unwrap_err(), Error::Parse { line: 8, .. }));
    }

    #[test]
    fn key_from_other_mode() {
        match parse_config(&direct("delta_prime = 0.04\nband = 0.1\n")).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "band"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn command_must_match_mode() {
        let s = parse_config(&direct("delta_prime = 0.04\n")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { out_dir: dir.path().into(), seed: None };
        assert!(matches!(run(&s, Command::Infospec, &opts), Err(Error::Validation { .. })));
        let seeded = RunOptions { seed: Some(1), ..opts };
        assert!(matches!(run(&s, Command::VerifyDirect, &seeded), Err(Error::Validation { .. })));
    }

    #[test]
    fn violations_exit_two() {
        let mut o = RunOutcome::default();
        assert_eq!(o.exit_code(), 0);
        o.violations.push("x".into());
        assert_eq!(o.exit_code(), 2);
    }

    #[test]
    fn number_format() {
        assert_eq!(fmt_num(0.1), "1.00000000000e-1");
        assert_eq!(fmt_num(-1234.5), "-1.23450000000e3");
    }
}
