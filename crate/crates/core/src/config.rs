//! Flat `key = value` run configuration with command-line overrides.
//!
//! ```text
//! # comments run to end of line
//! alpha = 0.2
//! mode = vp+sp+rg
//! synth.noise = 1.0
//! ```
//!
//! Unknown keys, unparsable values and out-of-range values are errors that
//! name the key and where it was set.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::episodes::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{AblationMode, AuxConstraint};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    /// Embedding files; when absent the synthetic generator is used.
    pub features: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    /// Parameter file read by `eval`.
    pub params: Option<PathBuf>,
    /// Shot counts for the λ sweep.
    pub shots: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            synth_seed: 0,
            features: None,
            attributes: None,
            params: None,
            shots: vec![1, 5],
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "epochs",
    "episodes_per_epoch",
    "val_episodes",
    "eval_episodes",
    "n_way",
    "k_shot",
    "queries",
    "alpha",
    "mu",
    "lr",
    "lr_decay",
    "decay_every",
    "embed_dim",
    "hidden",
    "seed",
    "mode",
    "vp",
    "sp",
    "rg",
    "aux",
    "features",
    "attributes",
    "params",
    "shots",
    "synth.seed",
    "synth.train_classes",
    "synth.val_classes",
    "synth.test_classes",
    "synth.samples_per_class",
    "synth.d_v",
    "synth.d_a",
    "synth.noise",
    "synth.perturbation",
    "synth.coupling",
    "synth.sparsity",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as {}", std::any::type_name::<T>()))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

/// `baseline`, `full`, or flags joined by `+` such as `vp+sp+rg+ic`.
pub fn parse_mode(value: &str) -> std::result::Result<AblationMode, String> {
    match value.to_ascii_lowercase().as_str() {
        "baseline" | "none" => return Ok(AblationMode::BASELINE),
        "full" => return Ok(AblationMode::FULL),
        _ => {}
    }
    let mut mode = AblationMode::BASELINE;
    for part in value.split('+') {
        match part.trim().to_ascii_lowercase().as_str() {
            "vp" => mode.vp = true,
            "sp" => mode.sp = true,
            "rg" => mode.rg = true,
            "ic" => mode.aux = AuxConstraint::InstanceConstraint,
            "rc" => mode.aux = AuxConstraint::RelationConstraint,
            other => return Err(format!("unknown mode flag `{other}`")),
        }
    }
    Ok(mode)
}

fn in_range<T: PartialOrd + std::fmt::Display>(v: T, ok: bool, what: &str) -> std::result::Result<T, String> {
    if ok {
        Ok(v)
    } else {
        Err(format!("{v} is out of range: {what}"))
    }
}

fn positive(v: usize) -> std::result::Result<usize, String> {
    in_range(v, v > 0, "must be positive")
}

impl RunConfig {
    /// Applies one assignment. Errors carry only the message; callers add
    /// the key and location.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "epochs" => t.epochs = parse(value)?,
            "episodes_per_epoch" => t.episodes_per_epoch = positive(parse(value)?)?,
            "val_episodes" => t.val_episodes = positive(parse(value)?)?,
            "eval_episodes" => t.eval_episodes = positive(parse(value)?)?,
            "n_way" => t.n_way = positive(parse(value)?)?,
            "k_shot" => t.k_shot = positive(parse(value)?)?,
            "queries" => t.queries = positive(parse(value)?)?,
            "alpha" => {
                let a: f64 = parse(value)?;
                t.alpha = in_range(a, a > 0.0 && a < 1.0, "must lie in (0, 1)")?;
            }
            "mu" => {
                let m: f64 = parse(value)?;
                t.mu = in_range(m, m >= 0.0 && m.is_finite(), "must be >= 0")?;
            }
            "lr" => {
                let l: f64 = parse(value)?;
                t.lr = in_range(l, l > 0.0 && l.is_finite(), "must be > 0")?;
            }
            "lr_decay" => {
                let d: f64 = parse(value)?;
                t.lr_decay = in_range(d, d > 0.0 && d <= 1.0, "must lie in (0, 1]")?;
            }
            "decay_every" => t.decay_every = positive(parse(value)?)?,
            "embed_dim" => t.embed_dim = positive(parse(value)?)?,
            "hidden" => t.hidden = positive(parse(value)?)?,
            "seed" => t.seed = parse(value)?,
            "mode" => t.mode = AblationMode { aux: t.mode.aux, ..parse_mode(value)? },
            "vp" => t.mode.vp = parse_bool(value)?,
            "sp" => t.mode.sp = parse_bool(value)?,
            "rg" => t.mode.rg = parse_bool(value)?,
            "aux" => t.mode.aux = value.parse()?,
            "features" => self.features = Some(PathBuf::from(value)),
            "attributes" => self.attributes = Some(PathBuf::from(value)),
            "params" => self.params = Some(PathBuf::from(value)),
            "shots" => {
                let shots = value
                    .split(',')
                    .map(|v| parse::<usize>(v.trim()).and_then(positive))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if shots.is_empty() {
                    return Err("shot list is empty".into());
                }
                self.shots = shots;
            }
            "synth.seed" => self.synth_seed = parse(value)?,
            "synth.train_classes" => s.train_classes = parse(value)?,
            "synth.val_classes" => s.val_classes = parse(value)?,
            "synth.test_classes" => s.test_classes = parse(value)?,
            "synth.samples_per_class" => s.samples_per_class = positive(parse(value)?)?,
            "synth.d_v" => s.d_v = positive(parse(value)?)?,
            "synth.d_a" => s.d_a = positive(parse(value)?)?,
            "synth.noise" => {
                let v: f64 = parse(value)?;
                s.noise = in_range(v, v > 0.0 && v.is_finite(), "must be > 0")?;
            }
            "synth.perturbation" => {
                let v: f64 = parse(value)?;
                s.perturbation = in_range(v, v >= 0.0 && v.is_finite(), "must be >= 0")?;
            }
            "synth.coupling" => {
                let v: f64 = parse(value)?;
                s.coupling = in_range(v, v > 0.0 && v.is_finite(), "must be > 0")?;
            }
            "synth.sparsity" => {
                let v: f64 = parse(value)?;
                s.sparsity = in_range(v, (0.0..1.0).contains(&v), "must lie in [0, 1)")?;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn assign(&mut self, key: &str, value: &str, location: String) -> Result<()> {
        self.set(key, value).map_err(|message| Error::ConfigKey {
            key: key.to_owned(),
            location,
            message,
        })
    }

    /// Cross-field checks once every assignment is in.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.features.is_some() != self.attributes.is_some() {
            return Err(Error::InvalidConfig(
                "features and attributes must be given together".into(),
            ));
        }
        Ok(())
    }

    /// Resolved values as `key = value` lines, readable back by
    /// [`parse_config_str`].
    pub fn render(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines: Vec<(&str, Option<String>)> = vec![
            ("epochs", Some(t.epochs.to_string())),
            ("episodes_per_epoch", Some(t.episodes_per_epoch.to_string())),
            ("val_episodes", Some(t.val_episodes.to_string())),
            ("eval_episodes", Some(t.eval_episodes.to_string())),
            ("n_way", Some(t.n_way.to_string())),
            ("k_shot", Some(t.k_shot.to_string())),
            ("queries", Some(t.queries.to_string())),
            ("alpha", Some(t.alpha.to_string())),
            ("mu", Some(t.mu.to_string())),
            ("lr", Some(t.lr.to_string())),
            ("lr_decay", Some(t.lr_decay.to_string())),
            ("decay_every", Some(t.decay_every.to_string())),
            ("embed_dim", Some(t.embed_dim.to_string())),
            ("hidden", Some(t.hidden.to_string())),
            ("seed", Some(t.seed.to_string())),
            ("vp", Some(t.mode.vp.to_string())),
            ("sp", Some(t.mode.sp.to_string())),
            ("rg", Some(t.mode.rg.to_string())),
        ];
        let aux = match t.mode.aux {
            AuxConstraint::None => "none",
            AuxConstraint::InstanceConstraint => "ic",
            AuxConstraint::RelationConstraint => "rc",
        };
        lines.push(("aux", Some(aux.into())));
        lines.push(("features", path(&self.features)));
        lines.push(("attributes", path(&self.attributes)));
        lines.push(("params", path(&self.params)));
        let shots: Vec<String> = self.shots.iter().map(usize::to_string).collect();
        lines.push(("shots", Some(shots.join(","))));
        lines.extend([
            ("synth.seed", Some(self.synth_seed.to_string())),
            ("synth.train_classes", Some(s.train_classes.to_string())),
            ("synth.val_classes", Some(s.val_classes.to_string())),
            ("synth.test_classes", Some(s.test_classes.to_string())),
            ("synth.samples_per_class", Some(s.samples_per_class.to_string())),
            ("synth.d_v", Some(s.d_v.to_string())),
            ("synth.d_a", Some(s.d_a.to_string())),
            ("synth.noise", Some(s.noise.to_string())),
            ("synth.perturbation", Some(s.perturbation.to_string())),
            ("synth.coupling", Some(s.coupling.to_string())),
            ("synth.sparsity", Some(s.sparsity.to_string())),
        ]);
        lines
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k} = {v}\n")))
            .collect()
    }
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

/// Parses config text; `source` names it in error locations.
pub fn parse_config_str(text: &str, source: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let Some((key, value)) = split_assignment(line) else {
            return Err(Error::ConfigKey {
                key: line.to_owned(),
                location,
                message: "expected `key = value`".into(),
            });
        };
        cfg.assign(key, value, location)?;
    }
    for (i, ov) in overrides.iter().enumerate() {
        let location = format!("--set #{}", i + 1);
        let Some((key, value)) = split_assignment(ov) else {
            return Err(Error::ConfigKey {
                key: ov.clone(),
                location,
                message: "expected `key=value`".into(),
            });
        };
        cfg.assign(key, value, location)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and applies `overrides` on top of the defaults.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_str(&text, &p.display().to_string(), overrides)
        }
        None => parse_config_str("", "<defaults>", overrides),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", "x", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.train.mode, AblationMode::FULL);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# schedule\nepochs = 3 # short\n\nalpha=0.3\nmode = vp+sp\n";
        let cfg = parse_config_str(text, "run.cfg", &["alpha=0.2".into(), "aux=rc".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.train.mode, AblationMode { aux: AuxConstraint::RelationConstraint, ..AblationMode::flags(true, true, false) });
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = parse_config_str("epochs = 2\nalpha = 1.5\n", "run.cfg", &[]).unwrap_err();
        match err {
            Error::ConfigKey { key, location, .. } => {
                assert_eq!(key, "alpha");
                assert_eq!(location, "run.cfg:2");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_config_str("", "run.cfg", &["bogus=1".into()]).unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, ref location, .. } if key == "bogus" && location == "--set #1"));
        assert!(parse_config_str("epochs = many\n", "r", &[]).is_err());
        assert!(parse_config_str("just words\n", "r", &[]).is_err());
        assert!(parse_config_str("mode = rg\n", "r", &[]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_config_str(
            "features = a.txt\nattributes = b.txt\nshots = 1,3\nsynth.noise = 0.25\nmode = sp+rg+ic\n",
            "r",
            &[],
        )
        .unwrap();
        let again = parse_config_str(&cfg.render(), "r", &[]).unwrap();
        assert_eq!(cfg, again);
        for line in cfg.render().lines() {
            let key = line.split(" = ").next().unwrap();
            assert!(KEYS.contains(&key), "{key}");
        }
    }
}
