//! Flat `key=value` run configuration with `#` comments and dotted keys.
//! Seeds are mandatory: runs are reproducible by contract, never wall-clock
//! seeded.

use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::LfdsKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset cache path; bare names resolve inside `LFDS_DATA_DIR`.
    pub data: String,
    /// `None` trains the max-pool baseline.
    pub head: Option<LfdsKind>,
    pub m: Option<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub folds: usize,
    pub dropout_classifier: f64,
    pub dropout_input: f64,
    pub dropout_element: f64,
    pub backbone_dims: Vec<usize>,
    pub classifier_hidden: usize,
    pub normalize_adjacency: bool,
    pub fuse_before_dropout: bool,
    pub spectral_orthonormal_init: bool,
    pub out_dir: String,
    pub jobs: usize,
}

impl RunConfig {
    /// Defaults for everything except `data` and `seed`, which the parser
    /// requires explicitly.
    pub fn template() -> Self {
        RunConfig {
            data: String::new(),
            head: None,
            m: None,
            lr_start: 0.005,
            lr_end: 0.0001,
            epochs: 100,
            batch_size: 32,
            lambda: 1e-3,
            seed: 0,
            folds: 10,
            dropout_classifier: 0.5,
            dropout_input: 0.2,
            dropout_element: 0.4,
            backbone_dims: vec![64, 64, 64],
            classifier_hidden: 128,
            normalize_adjacency: false,
            fuse_before_dropout: true,
            spectral_orthonormal_init: true,
            out_dir: "runs".into(),
            jobs: 1,
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::template();
        let mut have_seed = false;
        let mut have_data = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: idx + 1,
                    key: line.to_string(),
                    msg: "expected key=value".into(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| Error::Config {
                line: idx + 1,
                key: key.to_string(),
                msg: e.to_string(),
            })?;
            match key {
                "seed" => have_seed = true,
                "data" => have_data = true,
                _ => {}
            }
        }
        if !have_seed {
            return Err(Error::Config {
                line: 0,
                key: "seed".into(),
                msg: "seed is mandatory; wall-clock seeding is not supported".into(),
            });
        }
        if !have_data {
            return Err(Error::Config {
                line: 0,
                key: "data".into(),
                msg: "data= must name a dataset cache".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` assignment; also used for CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("`{value}` is not a valid value for {key}")))
        }
        match key {
            "data" => self.data = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "head.kind" => {
                self.head = match value {
                    "max-pool" | "none" => None,
                    other => Some(LfdsKind::parse(other)?),
                }
            }
            "head.m" => self.m = Some(num(key, value)?),
            "head.fuse_before_dropout" => self.fuse_before_dropout = bool_value(value)?,
            "head.spectral_orthonormal_init" => {
                self.spectral_orthonormal_init = bool_value(value)?
            }
            "lr.start" => self.lr_start = num(key, value)?,
            "lr.end" => self.lr_end = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "jobs" => self.jobs = num(key, value)?,
            "dropout.classifier" => self.dropout_classifier = num(key, value)?,
            "dropout.input" => self.dropout_input = num(key, value)?,
            "dropout.element" => self.dropout_element = num(key, value)?,
            "classifier.hidden" => self.classifier_hidden = num(key, value)?,
            "backbone.normalize_adjacency" => self.normalize_adjacency = bool_value(value)?,
            "backbone.dims" => {
                let dims: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| num("backbone.dims", p.trim()))
                    .collect();
                let dims = dims?;
                if dims.is_empty() {
                    return Err(Error::invalid("backbone.dims must not be empty"));
                }
                self.backbone_dims = dims;
            }
            other => {
                return Err(Error::invalid(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::invalid(format!(
                "need lr.start > lr.end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        for (name, p) in [
            ("dropout.classifier", self.dropout_classifier),
            ("dropout.input", self.dropout_input),
            ("dropout.element", self.dropout_element),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} not in [0,1)")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return Err(Error::invalid(
                "epochs, batch_size and folds must be positive",
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }

    /// Stable key/value echo for reports and determinism checks.
    pub fn echo(&self) -> Vec<(String, String)> {
        let head = match self.head {
            None => "max-pool".to_string(),
            Some(k) => k.name().to_string(),
        };
        let dims = self
            .backbone_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("data".into(), self.data.clone()),
            ("head.kind".into(), head),
            (
                "head.m".into(),
                self.m.map(|m| m.to_string()).unwrap_or_else(|| "default".into()),
            ),
            ("lr.start".into(), self.lr_start.to_string()),
            ("lr.end".into(), self.lr_end.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("folds".into(), self.folds.to_string()),
            ("dropout.classifier".into(), self.dropout_classifier.to_string()),
            ("dropout.input".into(), self.dropout_input.to_string()),
            ("dropout.element".into(), self.dropout_element.to_string()),
            ("backbone.dims".into(), dims),
            ("classifier.hidden".into(), self.classifier_hidden.to_string()),
            (
                "backbone.normalize_adjacency".into(),
                self.normalize_adjacency.to_string(),
            ),
            (
                "head.fuse_before_dropout".into(),
                self.fuse_before_dropout.to_string(),
            ),
            (
                "head.spectral_orthonormal_init".into(),
                self.spectral_orthonormal_init.to_string(),
            ),
        ]
    }

    /// Resolves the dataset path: bare names live in `LFDS_DATA_DIR`
    /// (default `./data`).
    pub fn data_path(&self) -> std::path::PathBuf {
        resolve_data_path(&self.data)
    }
}

pub fn resolve_data_path(name: &str) -> std::path::PathBuf {
    let p = std::path::Path::new(name);
    if p.components().count() > 1 || p.is_absolute() {
        return p.to_path_buf();
    }
    let dir = std::env::var("LFDS_DATA_DIR").unwrap_or_else(|_| "data".into());
    std::path::Path::new(&dir).join(name)
}

fn bool_value(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::invalid(format!("`{other}` is not a boolean"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data=sep.bin\nseed=7\n";

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = RunConfig::from_str_checked(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr_start, 0.005);
        assert_eq!(cfg.lr_end, 0.0001);
        assert_eq!(cfg.folds, 10);
        assert_eq!(cfg.backbone_dims, vec![64, 64, 64]);
        assert!(cfg.head.is_none());
    }

    #[test]
    fn comments_and_dotted_keys() {
        let text = "# experiment\ndata=x.bin # inline comment\nseed=1\nhead.kind=loop\nhead.m=8\n";
        let cfg = RunConfig::from_str_checked(text).unwrap();
        assert_eq!(cfg.head, Some(LfdsKind::LoopGraph));
        assert_eq!(cfg.m, Some(8));
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let err = RunConfig::from_str_checked("data=x\nseed=1\nbogus.key=3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn missing_seed_is_rejected() {
        let err = RunConfig::from_str_checked("data=x\n").unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn lr_ordering_is_enforced() {
        let err =
            RunConfig::from_str_checked("data=x\nseed=1\nlr.start=0.0001\nlr.end=0.005\n")
                .unwrap_err();
        assert!(err.to_string().contains("lr.start"));
    }

    #[test]
    fn dropout_range_is_enforced() {
        let err =
            RunConfig::from_str_checked("data=x\nseed=1\ndropout.element=1.0\n").unwrap_err();
        assert!(err.to_string().contains("dropout.element"));
    }

    #[test]
    fn echo_round_trips_through_set() {
        let text = "data=x\nseed=3\nhead.kind=param-spectral\nlambda=0.01\nbackbone.dims=8,8,8\n";
        let cfg = RunConfig::from_str_checked(text).unwrap();
        let mut rebuilt = RunConfig::template();
        for (k, v) in cfg.echo() {
            if v != "default" {
                rebuilt.set(&k, &v).unwrap();
            }
        }
        assert_eq!(cfg, rebuilt);
    }
}
