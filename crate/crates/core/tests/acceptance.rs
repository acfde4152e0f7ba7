//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ldthermo::infospec::{bands_nest, rate_crossover, shrink_exponent};
use ldthermo::isothermal::{finite_bath_constant, first_law_decomposition, max_work, q_limit, Schedule};
use ldthermo::ldp::rate_estimate;
use ldthermo::majorize::{closest_majorized, t_transform_chain, tv_distance};
use ldthermo::scenario::{parse_config, run, Command, Mode, RunOptions, Scenario, ScenarioKind};
use ldthermo::shells::{dim_bounds_check, excluded_log_mass, fit_tail_exponent, site_gibbs, Shell};
use ldthermo::spectrum::{potentials, SiteSpectrum};
use ldthermo::verify::{converse_bound, theorem1_direct, toy_exhaustive_search, Theorem1Report};
use ldthermo::{Block, DiagonalState};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    let text = std::fs::read_to_string(scenarios_dir().join(name)).unwrap();
    parse_config(&text).unwrap()
}

fn qubit() -> SiteSpectrum {
    SiteSpectrum::new(&[(Ratio::new(0, 1), 1), (Ratio::new(1, 1), 1)]).unwrap()
}

/// Closed-form qubit potentials (unit gap): (U, F, S).
fn qubit_oracle(beta: f64) -> (f64, f64, f64) {
    let z = 1.0 + (-beta).exp();
    let u = (-beta).exp() / z;
    let f = -z.ln() / beta;
    (u, f, beta * (u - f))
}

/// Binary relative entropy D(a‖b).
fn binary_kl(a: f64, b: f64) -> f64 {
    a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
}

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    if el > limit {
        o.ok = false;
    }
    o.detail = format!("{} [{:.2}s, limit {}s]", o.detail, el.as_secs_f64(), limit.as_secs());
    o
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(2..=4);
        let den = rng.gen_range(1..=4);
        let mut energies: Vec<i64> = (0..12).collect();
        energies.sort_by_key(|_| rng.gen::<u32>());
        let levels: Vec<(Ratio<i64>, i64)> =
            energies[..k].iter().map(|&e| (Ratio::new(e - 3, den), rng.gen_range(1..=3))).collect();
        let site = SiteSpectrum::new(&levels).unwrap();
        let beta = rng.gen_range(0.1..3.0);
        let p = potentials(&site, beta).unwrap();
        worst = worst.max((p.s_tilde - beta * (p.u_tilde - p.f_tilde)).abs());
    }
    check(worst <= 1e-9, format!("max |S - beta(U - F)| = {worst:.2e} over 20 random sites"))
}

fn criterion_2() -> Outcome {
    let (u, _, _) = qubit_oracle(1.0);
    let grid = [100, 200, 400, 800];
    let mut ok = true;
    let mut parts = Vec::new();
    for x in [0.2, -0.2] {
        let exact = binary_kl(u + x, u);
        let curve = rate_estimate(&qubit(), 1.0, x, &grid).unwrap();
        let errs: Vec<f64> = curve.rate.iter().map(|r| (r - exact).abs()).collect();
        let monotone = errs.windows(2).all(|w| w[1] < w[0]);
        ok &= monotone && errs[3] <= 0.01;
        parts.push(format!("x={x:+}: I={exact:.6}, |err| at 800 = {:.4}, monotone={monotone}", errs[3]));
    }
    check(ok, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let mut ok = true;
    let mut worst_margin = f64::INFINITY;
    let mut worst_alpha: f64 = 0.0;
    let mut narrow_worst: f64 = 0.0;
    let fit_grid = [200u64, 400, 800, 1600, 3200, 6400];
    for beta in [0.5, 1.0, 2.0] {
        for eps in [0.02, 0.05] {
            for n in [200, 400] {
                let r = dim_bounds_check(&qubit(), beta, eps, n).unwrap();
                ok &= r.lower_ok && r.upper_ok;
                worst_margin = worst_margin.min(r.lower_margin.min(r.upper_margin));
            }
            let (u, _, _) = qubit_oracle(beta);
            let alpha_oracle = binary_kl(u + eps, u).min(binary_kl(u - eps, u));
            let points: Vec<(u64, f64)> = fit_grid
                .iter()
                .map(|&n| {
                    let st = site_gibbs(&qubit(), beta, n).unwrap();
                    let shell = Shell::around(u, eps, n, &qubit().grid());
                    (n, excluded_log_mass(&st, &shell).unwrap())
                })
                .collect();
            let rel = (fit_tail_exponent(&points) / alpha_oracle - 1.0).abs();
            let narrow = (fit_tail_exponent(&points[..2]) / alpha_oracle - 1.0).abs();
            worst_alpha = worst_alpha.max(rel);
            narrow_worst = narrow_worst.max(narrow);
            ok &= rel <= 0.2;
        }
    }
    check(
        ok,
        format!(
            "bracket min margin {worst_margin:.4}; tail exponent off by <= {:.1}% (n up to 6400; {:.1}% from n in {{200,400}} alone)",
            100.0 * worst_alpha,
            100.0 * narrow_worst
        ),
    )
}

fn random_blocks(rng: &mut ChaCha8Rng, counts: &[u64]) -> DiagonalState {
    let blocks = counts
        .iter()
        .map(|&c| {
            let w: f64 = rng.gen_range(0.0..1.0f64).powi(3) + 1e-6;
            Block::new(w.ln(), (c as f64).ln(), None)
        })
        .collect();
    DiagonalState::normalized(blocks).unwrap()
}

fn random_partition(rng: &mut ChaCha8Rng, total: u64, parts: usize) -> Vec<u64> {
    let parts = parts.min(total as usize).max(1);
    let mut cuts: Vec<u64> = Vec::new();
    while cuts.len() < parts - 1 {
        let c = rng.gen_range(1..total);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::new();
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_tv, mut uniform_ok, mut entropy_ok) = (0.0f64, true, true);
    let mut steps_total = 0usize;
    for _ in 0..200 {
        let total = rng.gen_range(64..4000u64);
        let (ka, kb) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let a = random_partition(&mut rng, total, ka);
        let b = random_partition(&mut rng, total, kb);
        let src = random_blocks(&mut rng, &a);
        let target = random_blocks(&mut rng, &b);
        let reached = closest_majorized(&target, &src).unwrap();
        let chain = t_transform_chain(&src, &reached).unwrap();
        steps_total += chain.steps.len();
        let out = chain.to_state(&chain.output()).unwrap();
        worst_tv = worst_tv.max(tv_distance(&out, &reached).unwrap());
        let ones = vec![1.0; chain.source.len()];
        uniform_ok &= chain.apply(&ones) == ones;
        let mut v = chain.source.clone();
        let mut s = chain.to_state(&v).unwrap().entropy();
        for step in &chain.steps {
            step.apply(&chain.log_counts, &mut v);
            let s2 = chain.to_state(&v).unwrap().entropy();
            entropy_ok &= s2 >= s - 1e-12;
            s = s2;
        }
    }
    check(
        worst_tv <= 1e-9 && uniform_ok && entropy_ok,
        format!("200 pairs, {steps_total} steps: max TV to target {worst_tv:.2e}, uniform fixed={uniform_ok}, entropy monotone={entropy_ok}"),
    )
}

fn strictly_down(r: &[Theorem1Report], f: impl Fn(&Theorem1Report) -> f64) -> bool {
    f(r.last().unwrap()) < f(&r[0])
}

fn criterion_5(reports: &[Theorem1Report]) -> Outcome {
    let (u1, _, s1) = qubit_oracle(1.0);
    let (u2, _, s2) = qubit_oracle(0.5);
    let (ds, du) = (s2 - s1, u2 - u1);
    let oracle_ok = (ds - 0.080645).abs() < 1e-6 && (du - 0.108600).abs() < 1e-6;
    let down = strictly_down(reports, |r| r.tv_system)
        && strictly_down(reports, |r| r.tv_storage)
        && strictly_down(reports, |r| r.entropy_gap_rate);
    let work_ok = reports.iter().all(|r| (r.work_measured - r.work_expected).abs() <= r.first_law_bound)
        && reports.iter().all(|r| (r.work_expected + du).abs() < 1e-12);
    let conc = reports.last().unwrap().concentration_mass;
    let f = |g: &dyn Fn(&Theorem1Report) -> f64| {
        reports.iter().map(|r| format!("{:.4}", g(r))).collect::<Vec<_>>().join("/")
    };
    check(
        oracle_ok && down && work_ok && conc >= 0.95,
        format!(
            "dS={ds:.6} dU={du:.6}; tv_system {}; tv_storage {}; gap rate {}; work in bound={work_ok}; concentration {conc:.4}",
            f(&|r| r.tv_system),
            f(&|r| r.tv_storage),
            f(&|r| r.entropy_gap_rate)
        ),
    )
}

fn criterion_6(reports: &[Theorem1Report]) -> Outcome {
    let checked: u64 = reports.iter().map(|r| r.energy_entries_checked).sum();
    let bad: u64 = reports.iter().map(|r| r.energy_violations).sum();
    check(bad == 0 && checked > 0, format!("{checked} branch entries checked, {bad} change total energy"))
}

fn criterion_7() -> Outcome {
    let s = load("qubit-cooling.conf");
    let ScenarioKind::Converse { scn, toy_weights, .. } = &s.kind else { panic!("converse scenario expected") };
    let mut ok = true;
    let mut bounds = Vec::new();
    for n in [100, 200, 400] {
        let r = converse_bound(scn, n).unwrap();
        ok &= r.t_min > 0.0;
        bounds.push(format!("{:.4}", r.t_min));
    }
    let mut toys = Vec::new();
    for (n, depth) in [(2, 3), (4, 3), (6, 2)] {
        let r = toy_exhaustive_search(scn, n, depth, toy_weights).unwrap();
        ok &= r.best_tv >= r.bound;
        toys.push(format!("n={n}: best {:.4} >= {:.4} over {} chains", r.best_tv, r.bound, r.plans_checked));
    }
    check(ok, format!("T_min at n=100/200/400: {}; {}", bounds.join("/"), toys.join("; ")))
}

fn criterion_8(all: &[Theorem1Report]) -> Outcome {
    let worst = all.iter().map(|r| r.subadditivity.lhs - r.subadditivity.rhs).fold(f64::INFINITY, f64::min);
    check(all.iter().all(|r| r.subadditivity.holds), format!("{} executed plans, min slack {worst:.4e}", all.len()))
}

fn criterion_9() -> Outcome {
    let s = load("gap-change.conf");
    let ScenarioKind::Isothermal { scn, .. } = &s.kind else { panic!("isothermal scenario expected") };
    let oracle = (1.0 + (-2f64).exp()).ln() - (1.0 + (-1f64).exp()).ln();
    let minus_df = -scn.delta_f().unwrap();
    let ms = [8.0, 16.0, 32.0, 64.0];
    let pts = max_work(scn, &ms).unwrap();
    let below = pts.iter().all(|p| p.w_max <= minus_df);
    let (c, spread) = finite_bath_constant(&pts);
    let within = pts.iter().all(|p| (p.w_max - minus_df).abs() <= 2.0 * c / p.m);
    let mut residual: f64 = 0.0;
    let mut limits = Vec::new();
    for sched in [Schedule::InvSqrt, Schedule::Inv] {
        let fl: Vec<_> = ms.iter().map(|&m| first_law_decomposition(scn, m, minus_df, sched).unwrap()).collect();
        residual = fl.iter().fold(residual, |a, p| a.max(p.residual.abs()));
        limits.push(q_limit(&fl, sched));
    }
    let agree = (limits[0] - limits[1]).abs();
    check(
        (minus_df - oracle).abs() < 1e-12
            && (minus_df + 0.186334).abs() < 1e-6
            && below
            && within
            && spread <= 2.0
            && residual <= 1e-9
            && agree <= 1e-6,
        format!(
            "-dF={minus_df:.6}; W_max <= -dF: {below}; C={c:.4} (M*residual spread {spread:.3}); first-law residual {residual:.1e}; Q limits differ by {agree:.1e}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let (_, _, s) = qubit_oracle(1.0);
    let c = rate_crossover(&qubit(), 1.0, &[100, 200, 400, 800], 0.1).unwrap();
    let last = c.last().unwrap();
    let close = (last.gamma_lo - s).abs() <= 0.05 && (last.gamma_hi - s).abs() <= 0.05;
    let k = shrink_exponent(&c);
    let nest = bands_nest(&c);
    check(
        close && nest && (0.4..=0.6).contains(&k),
        format!("n=800 band [{:.4}, {:.4}] around {s:.6}; nested={nest}; shrink exponent {k:.3}", last.gamma_lo, last.gamma_hi),
    )
}

fn commands_for(mode: Mode) -> Vec<Command> {
    match mode {
        Mode::Direct => vec![Command::VerifyDirect, Command::Protocol],
        Mode::Converse => vec![Command::VerifyConverse],
        Mode::Isothermal => vec![Command::Isothermal],
        Mode::Infospec => vec![Command::Infospec],
        Mode::Rate => vec![Command::Rate],
    }
}

fn run_all(out: &Path) -> Vec<(String, std::result::Result<Vec<(PathBuf, Vec<u8>)>, String>)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "conf"))
        .collect();
    names.sort();
    let mut results = Vec::new();
    for path in names {
        let s = parse_config(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for cmd in commands_for(s.mode) {
            let seeds: &[Option<u64>] = if cmd == Command::Protocol { &[None, Some(3)] } else { &[None] };
            for &seed in seeds {
                let label = format!("{}:{}:{seed:?}", s.name, cmd.name());
                let dir = out.join(label.replace(':', "_"));
                let r = run(&s, cmd, &RunOptions { out_dir: dir.clone(), seed })
                    .map(|o| {
                        o.files
                            .iter()
                            .map(|f| (f.strip_prefix(&dir).unwrap().to_path_buf(), std::fs::read(f).unwrap()))
                            .collect()
                    })
                    .map_err(|e| e.to_string());
                results.push((label, r));
            }
        }
    }
    results
}

fn criterion_11() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_all(a.path()), run_all(b.path()));
    let files: usize = ra.iter().map(|r| r.1.as_ref().map_or(0, |f| f.len())).sum();
    let errors = ra.iter().filter(|r| r.1.is_err()).count();
    check(!ra.is_empty() && ra == rb, format!("{} runs, {files} files byte-identical, {errors} runs end in the same error", ra.len()))
}

#[test]
fn acceptance() {
    let heating = load("qubit-heating.conf");
    let ScenarioKind::Direct { scn, .. } = &heating.kind else { panic!("direct scenario expected") };
    let mut reports = Vec::new();
    let c5 = timed(Duration::from_secs(60), || {
        reports = theorem1_direct(scn, &[40, 80, 160, 320]).unwrap();
        criterion_5(&reports)
    });
    let mut executed = reports.clone();
    for name in ["qubit-heating-auto.conf", "qutrit-mixture.conf"] {
        let s = load(name);
        if let ScenarioKind::Direct { scn, .. } = &s.kind {
            executed.extend(theorem1_direct(scn, &s.n_grid).unwrap());
        }
    }
    let results = vec![
        ("thermo identities", timed(Duration::from_secs(1), criterion_1)),
        ("rate function", timed(Duration::from_secs(5), criterion_2)),
        ("shell bounds", timed(Duration::from_secs(10), criterion_3)),
        ("majorization engine", timed(Duration::from_secs(10), criterion_4)),
        ("direct conversion", c5),
        ("energy conservation", criterion_6(&executed)),
        ("converse bound", timed(Duration::from_secs(60), criterion_7)),
        ("subadditivity", criterion_8(&executed)),
        ("isothermal corollaries", timed(Duration::from_secs(30), criterion_9)),
        ("information spectrum", timed(Duration::from_secs(10), criterion_10)),
        ("determinism", criterion_11()),
    ];
    let mut failed = Vec::new();
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<24} {}  {}", i + 1, name, if o.ok { "PASS" } else { "FAIL" }, o.detail);
        if !o.ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
