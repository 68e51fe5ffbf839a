//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! model.kind = hierarchical
//! model.depths = 2, 2
//! bench.batch_sizes = 1, 2, 4
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use revprop_core::layers::FusionKind;
use revprop_core::{DType, EngineKind, ModelConfig, ModelKind};

use crate::CliError;

/// Environment fallback for the lane count when `--threads` is absent.
pub const THREADS_ENV: &str = "REVPROP_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub engines: Vec<EngineKind>,
    pub batch_sizes: Vec<usize>,
    pub steps: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub threads: usize,
    pub out_path: String,
    /// Batches whose predicted activation peak exceeds this are skipped.
    pub budget_bytes: Option<u64>,
    pub lr: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            engines: EngineKind::ALL.to_vec(),
            batch_sizes: vec![1, 2, 4],
            steps: 10,
            warmup: 2,
            repeats: 3,
            threads: 2,
            out_path: "bench.csv".into(),
            budget_bytes: None,
            lr: 0.01,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dtype: Option<DType>,
    pub out: Option<String>,
    pub threads: Option<usize>,
    pub engines: Option<Vec<EngineKind>>,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("bench.steps must be at least 1");
        }
        if self.repeats == 0 {
            return bad("bench.repeats must be at least 1");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("bench.batch_sizes must be a non-empty list of positive integers");
        }
        if self.engines.is_empty() {
            return bad("at least one engine is required");
        }
        if !self.lr.is_finite() {
            return bad("bench.lr must be finite");
        }
        Ok(())
    }

    /// Applies flag overrides. The thread count falls back to
    /// [`THREADS_ENV`] when no flag is given.
    pub fn apply(&mut self, o: &Overrides, env_threads: Option<&str>) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
        }
        if let Some(dtype) = o.dtype {
            self.model.dtype = dtype;
        }
        if let Some(out) = &o.out {
            self.out_path = out.clone();
        }
        if let Some(engines) = &o.engines {
            self.engines = engines.clone();
        }
        match (o.threads, env_threads) {
            (Some(t), _) => self.threads = t,
            (None, Some(v)) => {
                self.threads = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer")))?
            }
            (None, None) => {}
        }
        self.validate()
    }
}

pub fn load(path: &Path) -> Result<BenchConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<BenchConfig, CliError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim().to_string();
        if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }

    let mut cfg = BenchConfig::default();
    for (key, (line, value)) in &entries {
        let at = |e: String| CliError::Config(format!("line {line}: {key}: {e}"));
        let v = value.as_str();
        match key.as_str() {
            "model.kind" => cfg.model.kind = v.parse::<ModelKind>().map_err(at)?,
            "model.depth" => cfg.model.depths = vec![one(v).map_err(at)?],
            "model.depths" => cfg.model.depths = list(v).map_err(at)?,
            "model.width" => cfg.model.width = one(v).map_err(at)?,
            "model.heads" => cfg.model.heads = one(v).map_err(at)?,
            "model.mlp_ratio" => cfg.model.mlp_ratio = one(v).map_err(at)?,
            "model.seq_len" => cfg.model.seq_len = one(v).map_err(at)?,
            "model.in_dim" => cfg.model.in_dim = one(v).map_err(at)?,
            "model.window" => {
                cfg.model.window = match v {
                    "none" | "global" => None,
                    _ => Some(one(v).map_err(at)?),
                }
            }
            "model.num_classes" => cfg.model.num_classes = one(v).map_err(at)?,
            "model.fusion" => cfg.model.fusion = v.parse::<FusionKind>().map_err(at)?,
            "model.merge_factor" => cfg.model.merge_factor = one(v).map_err(at)?,
            "model.dtype" => cfg.model.dtype = v.parse::<DType>().map_err(at)?,
            "model.seed" => cfg.model.seed = one(v).map_err(at)?,
            "bench.engines" => cfg.engines = list(v).map_err(at)?,
            "bench.batch_sizes" => cfg.batch_sizes = list(v).map_err(at)?,
            "bench.steps" => cfg.steps = one(v).map_err(at)?,
            "bench.warmup" => cfg.warmup = one(v).map_err(at)?,
            "bench.repeats" => cfg.repeats = one(v).map_err(at)?,
            "bench.threads" => cfg.threads = one(v).map_err(at)?,
            "bench.out" => cfg.out_path = v.to_string(),
            "bench.budget_bytes" => cfg.budget_bytes = Some(one(v).map_err(at)?),
            "bench.lr" => cfg.lr = one(v).map_err(at)?,
            _ => return Err(CliError::Config(format!("line {line}: unknown key `{key}`"))),
        }
    }
    Ok(cfg)
}

fn one<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

pub fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(one).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let cfg = parse(
            "# sweep\n\
             model.kind = hierarchical\n\
             model.depths = 2, 3\n\
             model.width = 4\n\
             model.heads = 2\n\
             model.mlp_ratio = 3\n\
             model.seq_len = 16   # tokens\n\
             model.in_dim = 5\n\
             model.window = 4\n\
             model.num_classes = 7\n\
             model.fusion = mlp\n\
             model.merge_factor = 4\n\
             model.dtype = f32\n\
             model.seed = 9\n\
             bench.engines = reprop,pareprop\n\
             bench.batch_sizes = 1,2,8\n\
             bench.steps = 3\n\
             bench.warmup = 0\n\
             bench.repeats = 5\n\
             bench.threads = 1\n\
             bench.out = out/x.csv\n\
             bench.budget_bytes = 123456\n\
             bench.lr = 0.5\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Hierarchical);
        assert_eq!(cfg.model.depths, vec![2, 3]);
        assert_eq!(cfg.model.window, Some(4));
        assert_eq!(cfg.model.fusion, FusionKind::Mlp);
        assert_eq!(cfg.model.dtype, DType::F32);
        assert_eq!(cfg.engines, vec![EngineKind::Reprop, EngineKind::Pareprop]);
        assert_eq!(cfg.batch_sizes, vec![1, 2, 8]);
        assert_eq!((cfg.steps, cfg.warmup, cfg.repeats, cfg.threads), (3, 0, 5, 1));
        assert_eq!(cfg.out_path, "out/x.csv");
        assert_eq!(cfg.budget_bytes, Some(123456));
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn defaults() {
        let cfg = parse("").unwrap();
        assert_eq!((cfg.steps, cfg.warmup, cfg.repeats), (10, 2, 3));
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("model.width").is_err());
        assert!(parse("model.colour = red").is_err());
        assert!(parse("model.width = 4\nmodel.width = 8").is_err());
        assert!(parse("model.width = four").is_err());
        assert!(parse("bench.engines = vanilla, turbo").is_err());
        assert!(parse("bench.steps = 0").unwrap().validate().is_err());
        assert!(parse("bench.batch_sizes = ").unwrap().validate().is_err());
        assert!(parse("bench.repeats = 0").unwrap().validate().is_err());
    }

    #[test]
    fn flags_override_file_and_env_is_fallback() {
        let mut cfg = parse("bench.threads = 1\nmodel.seed = 3").unwrap();
        cfg.apply(&Overrides::default(), Some("2")).unwrap();
        assert_eq!(cfg.threads, 2);
        let o = Overrides { threads: Some(4), seed: Some(11), dtype: Some(DType::F32), ..Default::default() };
        cfg.apply(&o, Some("2")).unwrap();
        assert_eq!((cfg.threads, cfg.model.seed, cfg.model.dtype), (4, 11, DType::F32));
        assert!(cfg.apply(&Overrides::default(), Some("lots")).is_err());
    }
}
