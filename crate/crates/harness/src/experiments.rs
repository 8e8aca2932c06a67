//! One function per subcommand. Each returns artifacts plus the checks that
//! decide the exit code.

use anyhow::{bail, Result};
use nalgebra::DMatrix;
use serde_json::json;

use hamiltonian_lab::heat_probe::{self, GridFunction, Growth};
use hamiltonian_lab::linear_flow::{self, PhaseVector, TimeMatrixPath};
use hamiltonian_lab::mc::McConfig;
use hamiltonian_lab::modulus::{self, ModulusFn, Verdict};
use hamiltonian_lab::rng::Purpose;
use hamiltonian_lab::sde_lab::{self, SdeModel};
use hamiltonian_lab::stats::Moments;
use hamiltonian_lab::volterra;
use hamiltonian_lab::zvonkin::{self, GradMethod, Source, UConfig};

use crate::acceptance::{self, SuiteConfig};
use crate::config::{ExperimentConfig, Subcommand};
use crate::report::{csv, num, Artifact, Report};

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.subcommand {
        Subcommand::Modulus => modulus(cfg),
        Subcommand::Resolvent => resolvent(cfg),
        Subcommand::Linear => linear(cfg),
        Subcommand::Heat => heat(cfg),
        Subcommand::Sde => sde(cfg),
        Subcommand::Stability => stability(cfg),
        Subcommand::Zvonkin => zvonkin(cfg),
        Subcommand::Acceptance => acceptance(cfg),
    }
}

fn modulus_key(cfg: &ExperimentConfig, key: &str) -> Result<ModulusFn> {
    let s = cfg.str(key);
    s.parse().map_err(|e| anyhow::anyhow!("key `{key}`: {e}"))
}

fn dyadic(kmin: usize, kmax: usize) -> Result<Vec<f64>> {
    if kmin >= kmax {
        bail!("need kmin < kmax, got {kmin} >= {kmax}");
    }
    Ok((kmin..=kmax).map(|k| 2f64.powi(-(k as i32))).collect())
}

fn modulus(cfg: &ExperimentConfig) -> Result<Report> {
    let phi = modulus_key(cfg, "phi")?;
    let rep = modulus::dini_integral(&phi, cfg.f64("tol")?);
    let defect = modulus::slow_variation_defect(&phi, &cfg.f64_list("lambdas")?)?;
    let mut r = Report::default();
    r.artifacts.push(csv(
        "increments.csv",
        &["cell", "increment"],
        rep.increments.iter().enumerate().map(|(k, v)| vec![k.to_string(), num(*v)]),
    )?);
    r.json.push((
        "dini".into(),
        json!({
            "phi": phi.to_string(),
            "verdict": format!("{:?}", rep.verdict),
            "value": rep.value,
            "tail": rep.tail,
            "decay_exponent": rep.decay_exponent,
            "holder_order": phi.holder_order(),
            "slow_variation_defect": defect,
        }),
    ));
    r.check("classified", rep.verdict != Verdict::Inconclusive, format!("{phi}: {:?}, integral {:.6e}", rep.verdict, rep.value));
    Ok(r)
}

fn resolvent(cfg: &ExperimentConfig) -> Result<Report> {
    let phi = modulus_key(cfg, "phi")?;
    let t = cfg.f64("T")?;
    let kg = volterra::resolvent(&phi, t, cfg.usize("steps")?)?;
    let mut bytes = Vec::new();
    kg.write_csv(&mut bytes)?;
    let mut r = Report::default();
    r.artifacts.push(Artifact { name: "resolvent.csv".into(), bytes });
    let l1: f64 = kg.a1_mass.iter().sum();
    let bound = 10.0 * kg.h * l1 * l1;
    r.check("renewal", kg.renewal_residual <= bound, format!("renewal residual {:.2e} (tol {bound:.2e})", kg.renewal_residual));
    let expect = match cfg.str("expect") {
        "none" => None,
        "auto" => (phi == ModulusFn::power(1.0)?).then(|| t.exp()),
        _ => Some(cfg.f64("expect")?),
    };
    let a_end = kg.resolvent_at_end();
    if let Some(e) = expect {
        let tol = cfg.f64("expect_tol")?;
        r.check("a(T)", (a_end - e).abs() <= tol, format!("a({t}) = {a_end:.8}, expected {e:.8} +- {tol:e}"));
    }
    r.json.push((
        "resolvent".into(),
        json!({"phi": phi.to_string(), "a_end": a_end, "tail": kg.tail, "iterates": kg.iterates.len(), "domination": volterra::check_domination(&kg)}),
    ));
    Ok(r)
}

fn linear(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.usize("n")?;
    let mc = McConfig::new(n, cfg.seed);
    let one = DMatrix::identity(1, 1);
    let mut r = Report::default();
    match cfg.one_of("probe", &["scaling", "covariance", "gradient"])? {
        "scaling" => {
            let deltas = dyadic(cfg.usize("kmin")?, cfg.usize("kmax")?)?;
            let rep = linear_flow::scaling_probe(&one, &one, &deltas, cfg.f64("p")?, &mc)?;
            let mut bytes = Vec::new();
            linear_flow::write_probe_csv(&rep.rows, &mut bytes)?;
            r.artifacts.push(Artifact { name: "scaling.csv".into(), bytes });
            let (s1, s2) = (rep.slope_x1.slope, rep.slope_x2.slope);
            r.check("x1_slope", (s1 - 1.5).abs() <= 0.05, format!("slope ||X1||_p = {s1:.4} (1.5 +- 0.05)"));
            r.check("x2_slope", (s2 - 0.5).abs() <= 0.05, format!("slope ||X2||_p = {s2:.4} (0.5 +- 0.05)"));
        }
        "covariance" => {
            let t = cfg.f64("t")?;
            let law = linear_flow::joint_law(&TimeMatrixPath::unit(t)?, 0.0, t, &PhaseVector::zeros(1, 1), &[], &[])?;
            let oracle = [t.powi(3) / 3.0, t * t / 2.0, t];
            let m: Vec<Moments> = law.monte_carlo(&mc, Purpose::GaussianLaw, 3, |z, acc| {
                acc[0].push(z[0] * z[0]);
                acc[1].push(z[0] * z[1]);
                acc[2].push(z[1] * z[1]);
            })?;
            let names = ["11", "12", "22"];
            r.artifacts.push(csv(
                "covariance.csv",
                &["entry", "oracle", "mc", "stderr"],
                (0..3).map(|k| vec![names[k].to_string(), num(oracle[k]), num(m[k].mean), num(m[k].stderr())]),
            )?);
            for k in 0..3 {
                let z = (m[k].mean - oracle[k]).abs() / m[k].stderr();
                r.check(format!("cov_{}", names[k]), z <= 3.0, format!("entry {}: |mc - oracle| = {z:.2} stderr", names[k]));
            }
        }
        _ => {
            let deltas = dyadic(cfg.usize("kmin")?, cfg.usize("kmax")?)?;
            let f = |z: &[f64]| (z[0] + z[1]).cos();
            let x = PhaseVector::new(&[0.3], &[0.2]);
            let (rows, fit) = linear_flow::gradient_probe(&one, &one, &x, &f, &deltas, &mc)?;
            let mut bytes = Vec::new();
            linear_flow::write_probe_csv(&rows, &mut bytes)?;
            r.artifacts.push(Artifact { name: "gradient.csv".into(), bytes });
            // a smooth observable keeps its x1-gradient bounded as delta -> 0
            r.check("bounded", fit.slope.abs() <= 0.1, format!("slope |grad1 P f| for cos(x1+x2) = {:.4} (0 +- 0.1)", fit.slope));
        }
    }
    Ok(r)
}

fn heat(cfg: &ExperimentConfig) -> Result<Report> {
    let f: fn(f64) -> f64 = match cfg.one_of("f", &["sqrt_abs", "sign", "cos", "abs"])? {
        "sqrt_abs" => heat_probe::sqrt_abs_clipped,
        "sign" => f64::signum,
        "cos" => f64::cos,
        _ => f64::abs,
    };
    let growth = if cfg.str("f") == "abs" { Growth::Polynomial } else { Growth::Bounded };
    let grid = GridFunction::from_fn_1d(cfg.f64("L")?, cfg.usize("n")?, growth, f)?;
    let phi = modulus_key(cfg, "phi")?;
    let mut r = Report::default();
    if cfg.one_of("probe", &["modulus", "commutator"])? == "modulus" {
        let est = heat_probe::modulus_estimate(&grid, &phi, &heat_probe::default_ladder(&grid))?;
        let semi = heat_probe::seminorm(&grid, &phi);
        r.artifacts.push(csv("ladder.csv", &["theta", "term"], est.rows.iter().map(|l| vec![num(l.theta), num(l.term)]))?);
        r.json.push(("estimate".into(), json!({"value": est.value, "seminorm": semi, "slope": est.slope, "divergent": est.divergent})));
        if est.divergent {
            r.check("estimate", true, format!("ladder diverges (slope {:.3}); seminorm {semi:.4e}", est.slope));
        } else {
            let ratio = est.value / semi;
            r.check("comparable", (0.1..=10.0).contains(&ratio), format!("estimator {:.4e}, seminorm {semi:.4e}, ratio {ratio:.4}", est.value));
        }
    } else {
        let g = GridFunction::from_fn_1d(cfg.f64("L")?, cfg.usize("n")?, Growth::Bounded, f64::cos)?;
        let psi = modulus_key(cfg, "psi")?;
        let thetas: Vec<f64> = (2..=8).map(|k| 2f64.powi(-k)).collect();
        let ladder = heat_probe::commutator_ladder(&grid, &g, &thetas, &psi, &phi)?;
        r.artifacts.push(csv(
            "commutator.csv",
            &["theta", "seminorm", "implied_constant"],
            ladder.iter().map(|c| vec![num(c.theta), num(c.seminorm), num(c.implied_constant)]),
        )?);
        let mut cs: Vec<f64> = ladder.iter().map(|c| c.implied_constant).collect();
        cs.sort_by(f64::total_cmp);
        let med = cs[cs.len() / 2];
        r.check("stable_constant", cs[0] > 0.0 && cs[cs.len() - 1] <= 3.0 * med && med <= 3.0 * cs[0], format!("implied constants in [{:.3}, {:.3}]", cs[0], cs[cs.len() - 1]));
    }
    Ok(r)
}

fn sde_model(cfg: &ExperimentConfig) -> Result<SdeModel> {
    let one = DMatrix::identity(1, 1);
    Ok(match cfg.one_of("model", &["example_1_1", "holder", "linear"])? {
        "example_1_1" => sde_lab::example_1_1_mollified(cfg.f64("alpha")?, 1.0, 0.0, 1, one, cfg.f64("delta")?)?,
        "holder" => sde_lab::holder_drift(cfg.f64("gamma")?, cfg.f64("delta")?)?,
        _ => sde_lab::linear(one.clone(), one)?,
    })
}

fn sde(cfg: &ExperimentConfig) -> Result<Report> {
    let model = sde_model(cfg)?;
    let t = cfg.f64("T")?;
    let mc = McConfig::new(cfg.usize("n")?, cfg.seed);
    let x0 = PhaseVector::zeros(model.d1, model.d2);
    let mut r = Report::default();
    match cfg.one_of("probe", &["gap", "moments", "lyapunov"])? {
        "gap" => {
            let hs: Vec<f64> = cfg.f64_list("levels")?.iter().map(|l| t / 2f64.powf(*l)).collect();
            let rep = sde_lab::pathwise_gap(&model, &x0, t, &hs, &mc)?;
            r.artifacts.push(csv(
                "gap.csv",
                &["h", "gap", "stderr", "flag_rate"],
                rep.rows.iter().map(|l| vec![num(l.key), num(l.estimate.value), num(l.estimate.stderr), num(l.flag_rate)]),
            )?);
            let clean = rep.rows.iter().all(|l| l.flag_rate == 0.0);
            let order = rep.order.map(|f| f.slope).unwrap_or(f64::NAN);
            r.check("no_blow_up", clean, "no sample exceeded the blow-up bound");
            r.check("converging", order > 0.0, format!("{}: observed strong order {order:.3}", model.name));
        }
        "moments" => {
            let h = t / 256.0;
            let caps = [1.0, 2.0, 4.0, 8.0];
            let rep = sde_lab::moment_diag(&model, &x0, t, h, 0.5 * model.eps_lyap, &caps, &mc)?;
            r.artifacts.push(csv(
                "moments.csv",
                &["cap", "estimate", "stderr", "cap_hit_rate"],
                (0..caps.len()).map(|k| vec![num(caps[k]), num(rep.estimates[k].value), num(rep.estimates[k].stderr), num(rep.cap_hit_rates[k])]),
            )?);
            let finite = rep.estimates.iter().all(|e| e.value.is_finite());
            r.check("finite", finite && rep.blow_up_rate == 0.0, format!("blow-up rate {}, quantiles {:?}", rep.blow_up_rate, rep.quantiles));
        }
        _ => {
            let grid = sde_lab::box_grid(model.dim(), 4.0, 41);
            let rep = sde_lab::lyapunov_check(&model, &grid, &[0.0, t])?;
            r.json.push(("lyapunov".into(), serde_json::to_value(&rep)?));
            r.check("finite", rep.generator_ratio.is_finite() && rep.gradient_ratio.is_finite(), format!("LH/H <= {:.4}, gradient ratio {:.4}", rep.generator_ratio, rep.gradient_ratio));
        }
    }
    Ok(r)
}

fn stability(cfg: &ExperimentConfig) -> Result<Report> {
    let gamma = cfg.f64("gamma")?;
    let t = cfg.f64("T")?;
    let ks: Vec<u32> = (1..=cfg.usize("kmax")? as u32).collect();
    let h = t / 2f64.powi(cfg.usize("level")? as i32);
    let rep = sde_lab::stability_experiment(
        |k| sde_lab::holder_drift(gamma, 2f64.powi(-(k as i32))),
        &PhaseVector::zeros(1, 1),
        t,
        h,
        cfg.f64("eps")?,
        &McConfig::new(cfg.usize("n")?, cfg.seed),
        &ks,
    )?;
    let mut r = Report::default();
    r.artifacts.push(csv(
        "stability.csv",
        &["k", "p", "stderr", "flag_rate"],
        rep.rows.iter().map(|l| vec![num(l.key), num(l.estimate.value), num(l.estimate.stderr), num(l.flag_rate)]),
    )?);
    r.check("non_increasing", rep.non_increasing, format!("reference k = {}, p = {:?}", rep.reference_k, rep.rows.iter().map(|l| l.estimate.value).collect::<Vec<_>>()));
    Ok(r)
}

fn zvonkin(cfg: &ExperimentConfig) -> Result<Report> {
    if cfg.one_of("probe", &["sweep", "lipschitz"])? == "lipschitz" {
        // the demo settings are tied to the scale analysis of the sweep defaults
        return acceptance::regularization(cfg.seed, 1.0);
    }
    let model = acceptance::sweep_model(cfg.f64("alpha")?, cfg.f64("delta")?)?;
    let lambdas = cfg.f64_list("lambdas")?;
    let ucfg = UConfig { horizon: 1.0, h: 2f64.powi(-(cfg.usize("level")? as i32)), n_samples: cfg.usize("n")?, seed: cfg.seed, fd_eps: cfg.f64("fd")? };
    let sweep = zvonkin::lambda_sweep(&model, &Source::drift(&model), &lambdas, &ucfg, &acceptance::sweep_probes(), GradMethod::CrnFd)?;
    let mut r = Report::default();
    r.artifacts.push(csv(
        "sweep.csv",
        &["lambda", "contraction", "stderr"],
        sweep.rows.iter().map(|s| vec![num(s.lambda), num(s.contraction), num(s.stderr)]),
    )?);
    r.json.push(("sweep".into(), json!({"threshold_lambda": sweep.threshold_lambda, "non_increasing": sweep.non_increasing})));
    r.check("non_increasing", sweep.non_increasing, format!("threshold lambda {:?}", sweep.threshold_lambda));
    Ok(r)
}

fn acceptance(cfg: &ExperimentConfig) -> Result<Report> {
    let ids: Vec<u8> = match cfg.str("only") {
        "all" => acceptance::IDS.to_vec(),
        s => s
            .split(',')
            .map(|t| t.trim().parse::<u8>().ok().filter(|k| acceptance::IDS.contains(k)).ok_or_else(|| anyhow::anyhow!("key `only`: `{t}` is not a criterion id")))
            .collect::<Result<_>>()?,
    };
    let tol_scale = cfg.f64("tol_scale")?;
    if !(tol_scale > 0.0) {
        bail!("key `tol_scale`: must be > 0");
    }
    let suite = SuiteConfig { seed: cfg.seed, tol_scale };
    let outcomes = acceptance::run_suite(&suite, &ids, |o| println!("{}", o.line()))?;
    let mut r = Report::default();
    for o in &outcomes {
        r.artifacts.extend(o.report.artifacts.iter().cloned());
        r.check(format!("criterion_{}", o.id), o.pass(), format!("{}: {}", o.name, o.detail()));
    }
    r.json.push(("acceptance".into(), acceptance::suite_json(&outcomes)));
    Ok(r)
}
