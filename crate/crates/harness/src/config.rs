//! Flat `--key value` experiment configuration and per-subcommand schemas.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Subcommand {
    Modulus,
    Resolvent,
    Linear,
    Heat,
    Sde,
    Stability,
    Zvonkin,
    Acceptance,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Modulus => "modulus",
            Self::Resolvent => "resolvent",
            Self::Linear => "linear",
            Self::Heat => "heat",
            Self::Sde => "sde",
            Self::Stability => "stability",
            Self::Zvonkin => "zvonkin",
            Self::Acceptance => "acceptance",
        };
        f.write_str(s)
    }
}

/// One schema entry. `default: None` marks a required key.
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

macro_rules! key {
    ($name:expr, $default:expr, $help:expr) => {
        Key { name: $name, default: $default, help: $help }
    };
}

pub fn schema(sub: Subcommand) -> &'static [Key] {
    use Subcommand::*;
    match sub {
        Modulus => &[
            key!("phi", None, "modulus expression, e.g. pow(0.5), logpow(2), gamma(1)"),
            key!("tol", Some("1e-10"), "Dini ladder tolerance"),
            key!("lambdas", Some("0.5,2"), "dilations for the slow-variation defect"),
        ],
        Resolvent => &[
            key!("phi", None, "modulus expression of the kernel phi(t)/t"),
            key!("T", Some("1"), "horizon"),
            key!("steps", Some("4096"), "grid cells"),
            key!("expect", Some("auto"), "expected a(T): a number, `auto` (e^T for pow(1)) or `none`"),
            key!("expect_tol", Some("1e-5"), "absolute tolerance on a(T)"),
        ],
        Linear => &[
            key!("probe", None, "scaling | covariance | gradient"),
            key!("p", Some("2"), "moment order for the scaling probe"),
            key!("n", Some("100000"), "Monte-Carlo samples"),
            key!("kmin", Some("3"), "finest ladder exponent is 2^-kmax, coarsest 2^-kmin"),
            key!("kmax", Some("10"), "see kmin"),
            key!("t", Some("1"), "horizon of the covariance probe"),
        ],
        Heat => &[
            key!("f", None, "sqrt_abs | sign | cos | abs"),
            key!("probe", Some("modulus"), "modulus | commutator"),
            key!("phi", Some("pow(0.5)"), "modulus for the estimator (phi of the commutator)"),
            key!("psi", Some("pow(0.25)"), "seminorm modulus of the commutator"),
            key!("L", Some("2"), "grid half-width"),
            key!("n", Some("2049"), "grid points (odd)"),
        ],
        Sde => &[
            key!("model", None, "example_1_1 | holder | linear"),
            key!("probe", Some("gap"), "gap | moments | lyapunov"),
            key!("alpha", Some("1"), "Holder order of example_1_1"),
            key!("gamma", Some("2/3"), "Holder order of the holder model"),
            key!("delta", Some("0"), "mollification"),
            key!("T", Some("1"), "horizon"),
            key!("levels", Some("4,5,6,7,8"), "gap ladder: h = T/2^level"),
            key!("n", Some("2000"), "Monte-Carlo samples"),
        ],
        Stability => &[
            key!("gamma", Some("2/3"), "Holder order of the drift"),
            key!("kmax", Some("8"), "mollification ladder delta_k = 2^-k, k = 1..kmax"),
            key!("eps", Some("0.05"), "exceedance threshold"),
            key!("level", Some("8"), "h = T/2^level"),
            key!("T", Some("1"), "horizon"),
            key!("n", Some("2000"), "paths"),
        ],
        Zvonkin => &[
            key!("probe", Some("sweep"), "sweep | lipschitz"),
            key!("lambdas", Some("1,4,16,64"), "lambda ladder of the sweep"),
            key!("alpha", Some("2/3"), "Holder order of the drift"),
            key!("delta", Some("1e-4"), "mollification of the sweep"),
            key!("fd", Some("1e-3"), "finite-difference step of the sweep"),
            key!("level", Some("8"), "h = T/2^level for the sweep"),
            key!("n", Some("2000"), "Monte-Carlo samples of the sweep"),
        ],
        Acceptance => &[
            key!("only", Some("all"), "comma-separated criterion ids, or `all`"),
            key!("tol_scale", Some("1"), "multiplies every tolerance band"),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    pub seed: u64,
    pub shards: usize,
    /// Every schema key, defaults filled in.
    pub params: BTreeMap<String, String>,
    pub out_dir: PathBuf,
}

pub fn default_shards() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl ExperimentConfig {
    /// Parse `--key value` pairs. `--seed`, `--shards` and `--out` are global.
    pub fn parse(subcommand: Subcommand, args: &[String]) -> Result<Self> {
        let mut given: BTreeMap<String, String> = BTreeMap::new();
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let name = flag.strip_prefix("--").ok_or_else(|| anyhow!("expected `--key`, found `{flag}`"))?;
            let (name, value) = match name.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => (name.to_string(), it.next().ok_or_else(|| anyhow!("key `{name}` is missing a value"))?.clone()),
            };
            if given.insert(name.clone(), value).is_some() {
                bail!("key `{name}` given twice");
            }
        }
        let seed = match given.remove("seed") {
            Some(v) => v.parse().with_context(|| format!("key `seed`: `{v}` is not an unsigned integer"))?,
            None => 1,
        };
        let shards = match given.remove("shards") {
            Some(v) => v.parse().ok().filter(|s: &usize| *s >= 1).ok_or_else(|| anyhow!("key `shards`: `{v}` must be an integer >= 1"))?,
            None => default_shards(),
        };
        let out_dir = PathBuf::from(given.remove("out").ok_or_else(|| anyhow!("key `out` is required"))?);
        let keys = schema(subcommand);
        if let Some(unknown) = given.keys().find(|k| !keys.iter().any(|s| s.name == k.as_str())) {
            bail!("unknown key `{unknown}` for `{subcommand}` (known: {})", keys.iter().map(|k| k.name).collect::<Vec<_>>().join(", "));
        }
        let mut params = BTreeMap::new();
        for k in keys {
            let v = match (given.remove(k.name), k.default) {
                (Some(v), _) => v,
                (None, Some(d)) => d.to_string(),
                (None, None) => bail!("key `{}` is required for `{subcommand}` ({})", k.name, k.help),
            };
            params.insert(k.name.to_string(), v);
        }
        Ok(Self { subcommand, seed, shards, params, out_dir })
    }

    pub fn str(&self, key: &str) -> &str {
        self.params.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not in the schema of {}", self.subcommand))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        parse_number(self.str(key)).with_context(|| format!("key `{key}`"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.str(key);
        v.parse().with_context(|| format!("key `{key}`: `{v}` is not a non-negative integer"))
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.str(key).split(',').map(|s| parse_number(s.trim())).collect::<Result<_>>().with_context(|| format!("key `{key}`"))
    }

    pub fn one_of<'a>(&'a self, key: &str, allowed: &[&str]) -> Result<&'a str> {
        let v = self.str(key);
        if allowed.contains(&v) {
            Ok(v)
        } else {
            bail!("key `{key}`: `{v}` is not one of {}", allowed.join(" | "))
        }
    }
}

/// Reals, with `a/b` fractions allowed.
pub fn parse_number(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>()? / b.trim().parse::<f64>()?,
        None => s.parse::<f64>().map_err(|_| anyhow!("`{s}` is not a number"))?,
    };
    if !v.is_finite() {
        bail!("`{s}` is not finite");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn defaults_are_filled_and_globals_split_off() {
        let c = ExperimentConfig::parse(Subcommand::Resolvent, &args("--phi pow(1) --seed 7 --shards 2 --out /tmp/x")).unwrap();
        assert_eq!((c.seed, c.shards), (7, 2));
        assert_eq!(c.str("steps"), "4096");
        assert_eq!(c.params.len(), schema(Subcommand::Resolvent).len());
    }

    #[test]
    fn schema_violations_name_the_key() {
        let e = ExperimentConfig::parse(Subcommand::Resolvent, &args("--phi pow(1) --bogus 1 --out d")).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = ExperimentConfig::parse(Subcommand::Resolvent, &args("--out d")).unwrap_err();
        assert!(e.to_string().contains("phi"));
        let e = ExperimentConfig::parse(Subcommand::Resolvent, &args("--phi pow(1)")).unwrap_err();
        assert!(e.to_string().contains("out"));
        assert!(ExperimentConfig::parse(Subcommand::Resolvent, &args("--phi pow(1) --out d --shards 0")).is_err());
        assert!(ExperimentConfig::parse(Subcommand::Resolvent, &args("--phi pow(1) --out d --phi pow(2)")).is_err());
    }

    #[test]
    fn numbers_and_fractions() {
        assert_eq!(parse_number("2/3").unwrap(), 2.0 / 3.0);
        assert_eq!(parse_number("1e-4").unwrap(), 1e-4);
        assert!(parse_number("inf").is_err());
        assert!(parse_number("x").is_err());
    }
}
