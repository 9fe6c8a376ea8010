//! Parameter tables, config-file parsing and the resolved run configuration.
//!
//! Every command lists its parameters with a default. Values resolve in three layers:
//! the default, then the `--config` file, then the command-line flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Marks a parameter that has no usable default and must be supplied.
pub const REQUIRED: &str = "";

#[derive(Debug, Clone, Copy)]
pub struct Param {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn p(key: &'static str, default: &'static str, help: &'static str) -> Param {
    Param { key, default, help }
}

pub const DETECT_EVAL: &[Param] = &[
    p("gt", REQUIRED, "ground-truth JSON: array of {image_path, class_id, x, y, w, h}"),
    p("detections", REQUIRED, "detections JSON: array of {image_path, class_id, score, x, y, w, h}"),
    p("iou-thresholds", "0.5:0.05:0.95", "IoU thresholds as start:step:end, a comma list, or one value"),
    p("classes", "auto", "comma list of class ids to average over; auto = classes with ground truth"),
    p("out", "-", "report path (JSON); - writes JSON to stdout"),
];

pub const PREPROCESS: &[Param] = &[
    p("manifest", REQUIRED, "manifest CSV or JSON; image paths are relative to its directory"),
    p("out", REQUIRED, "output directory"),
    p("ops", "rescale", "comma list of rescale, periocular, occlude, hybrid, applied in order"),
    p("seed", "0", "top-level seed; per-image mask seeds are hashed from it"),
    p("fill", "0", "grey level painted by occlude"),
];

pub const SPLIT: &[Param] = &[
    p("manifest", REQUIRED, "manifest CSV or JSON"),
    p("mode", "holdout", "holdout or kfold"),
    p("fractions", "0.7,0.2,0.1", "train,validation,test fractions for holdout"),
    p("folds", "5", "number of folds for kfold"),
    p("unit", "subject", "split unit: subject or sample"),
    p("seed", "0", "shuffle seed"),
    p("out", "-", "plan path (JSON); - writes JSON to stdout"),
];

pub const VERIFY: &[Param] = &[
    p("manifest", REQUIRED, "manifest CSV or JSON"),
    p("plan", "none", "split plan JSON (one plan or an array); none = generate k folds"),
    p("folds", "5", "number of folds when no plan is given"),
    p("unit", "subject", "fold unit when no plan is given: subject or sample"),
    p("seed", "0", "seed for fold assignment and impostor pair sampling"),
    p("spectrum", "visual", "spectrum whose images are compared: visual or thermal"),
    p("features", "blockmean", "blockmean, periocular or precomputed"),
    p("embeddings", "none", "precomputed embedding CSV (image_path,v0,v1,...)"),
    p("grid", "8", "block-mean grid size g (g x g cells)"),
    p("margin", "1.0", "contrastive margin used for the per-fold loss summary"),
    p("max-pairs", "2000", "pair budget per fold, condition and partition"),
    p("out", "none", "output directory for verification.json, verification.txt, fold_results.csv"),
];

pub const IDENTIFY: &[Param] = &[
    p("manifest", "none", "manifest CSV or JSON (not needed with --reference-tables)"),
    p("folds", "5", "number of frame folds"),
    p("seed", "0", "fold assignment seed"),
    p(
        "domains",
        "visual,masked-visual,thermal,masked-thermal,hybrid",
        "comma list of visual, masked-visual, thermal, masked-thermal, hybrid",
    ),
    p("features", "blockmean", "blockmean, periocular or precomputed"),
    p("embeddings", "none", "precomputed embedding CSV; hybrids use keys hybrid:<subject>#<ordinal>"),
    p("grid", "8", "block-mean grid size g"),
    p("reference-tables", "false", "print the published identification table and its deltas instead"),
    p("out", "none", "output directory for identification.json, identification.txt, fold_results.csv"),
];

pub const CHECKPOINT: &[Param] = &[
    p("visual", REQUIRED, "visual probe image"),
    p("thermal", "none", "thermal probe image (read only on the masked route)"),
    p("masked", "manifest", "true, false, or manifest (look up the probe's mask_state in --manifest)"),
    p("manifest", "none", "manifest listing the probe, for --masked manifest"),
    p("gallery", REQUIRED, "gallery manifest; unmasked probes match its visual images, masked probes its hybrids"),
    p("features", "blockmean", "blockmean or periocular"),
    p("grid", "8", "block-mean grid size g"),
    p("out", "none", "output directory for trace.json and hybrid.png"),
];

pub const REPORT: &[Param] = &[
    p("fold-results", "none", "CSV train_cond,test_cond,fold,accuracy; none = reference tables"),
    p("rows", "auto", "row (train) condition order; auto = order of first appearance"),
    p("cols", "auto", "column (test) condition order; auto = order of first appearance"),
    p("title", "accuracy", "table title"),
    p("baseline", "none", "baseline cell as train:test, for a degradation delta"),
    p("degraded", "none", "degraded cell as train:test"),
    p("out", "none", "output directory for report.json and report.txt"),
];

pub const GRAD_CHECK: &[Param] = &[
    p("loss", "all", "bce, smooth_l1, box, multitask, contrastive or all"),
    p("points", "100", "random points per loss"),
    p("step", "1e-5", "central-difference step"),
    p("tol", "1e-4", "maximum relative error"),
    p("seed", "0", "point sampling seed"),
    p("out", "none", "report path (JSON)"),
];

pub const SYNTH: &[Param] = &[
    p("out", REQUIRED, "output directory"),
    p("subjects", "40", "number of subjects"),
    p("frames", "5", "frames per subject"),
    p("noise", "12", "per-pixel noise standard deviation"),
    p("jitter", "3", "per-frame brightness offset standard deviation"),
    p("seed", "2022", "generator seed"),
];

pub const ALL_TABLES: &[&[Param]] = &[
    DETECT_EVAL, PREPROCESS, SPLIT, VERIFY, IDENTIFY, CHECKPOINT, REPORT, GRAD_CHECK, SYNTH,
];

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped, keys may use
/// `-` or `_`.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("{origin}:{}: expected key=value", i + 1)));
        };
        let key = k.trim().replace('_', "-");
        if !ALL_TABLES.iter().any(|t| t.iter().any(|p| p.key == key)) {
            return Err(CliError::Config(format!("{origin}:{}: unknown key {key:?}", i + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Fully resolved parameters of one command run; serialized into every report.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct RunConfig {
    pub command: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        table: &[Param],
        file: &BTreeMap<String, String>,
        flags: &BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for param in table {
            let v = flags
                .get(param.key)
                .or_else(|| file.get(param.key))
                .cloned()
                .unwrap_or_else(|| param.default.to_string());
            if v.is_empty() {
                return Err(CliError::Config(format!("--{} is required", param.key)));
            }
            values.insert(param.key.to_string(), v);
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a parameter of {}", self.command))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .parse()
            .map_err(|e| CliError::Config(format!("--{key} {:?}: {e}", self.str(key))))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(CliError::Config(format!("--{key} {other:?}: expected true or false"))),
        }
    }

    /// `None` for the literal value `none`.
    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|v| *v != "none")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.optional(key).map(PathBuf::from)
    }

    pub fn required_path(&self, key: &str) -> PathBuf {
        Path::new(self.str(key)).to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let file = parse_config("seed = 9\n# comment\nfolds=3\n", "cfg").unwrap();
        let flags = BTreeMap::from([("folds".to_string(), "4".to_string()), ("manifest".to_string(), "m.csv".to_string())]);
        let rc = RunConfig::resolve("verify", VERIFY, &file, &flags).unwrap();
        assert_eq!(rc.str("seed"), "9");
        assert_eq!(rc.str("folds"), "4");
        assert_eq!(rc.str("grid"), "8");
        assert_eq!(rc.parse::<u32>("grid").unwrap(), 8);
    }

    #[test]
    fn missing_required_and_unknown_keys() {
        let err = RunConfig::resolve("verify", VERIFY, &BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("--manifest"));
        assert!(parse_config("colour = red", "cfg").is_err());
        assert!(parse_config("just words", "cfg").is_err());
        assert_eq!(parse_config("max_pairs=10", "cfg").unwrap()["max-pairs"], "10");
    }

    #[test]
    fn every_param_documented() {
        for table in ALL_TABLES {
            for p in *table {
                assert!(!p.help.is_empty(), "{}", p.key);
            }
        }
    }
}
