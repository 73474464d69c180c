//! `key = value` run configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rank1cnn::data::{load_idx, synth_blobs_split, Dataset};
use rank1cnn::layers::ConvMode;
use rank1cnn::network::NetworkSpec;
use rank1cnn::train::TrainConfig;

const REQUIRED: &[&str] = &[
    "mode",
    "arch",
    "data.train",
    "data.test",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "out_dir",
    "deterministic",
];

const OPTIONAL: &[&str] = &["train_limit", "test_limit", "eval_every", "momentum", "threads"];

/// Problems with the configuration itself, as opposed to failures while
/// running it.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// IDX pair `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte`.
    Idx(PathBuf),
    Synth {
        classes: usize,
        per_class: usize,
        shape: (usize, usize, usize),
        seed: u64,
        /// Independent sample set around the same class prototypes.
        split: u64,
    },
}

impl DataSource {
    /// `synth:classes=2,per_class=50,shape=1x8x8,seed=0,split=1` or an IDX prefix,
    /// resolved against `base`.
    pub fn parse(value: &str, base: &Path) -> Result<Self> {
        let Some(rest) = value.strip_prefix("synth:") else {
            return Ok(DataSource::Idx(base.join(value)));
        };
        let mut fields = BTreeMap::new();
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("synthetic data field `{item}` is not `key=value`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let num = |k: &str, default: Option<&str>| -> Result<usize> {
            let v = fields.get(k).copied().or(default).ok_or_else(|| usage(format!("synthetic data needs `{k}`")))?;
            v.parse().map_err(|_| usage(format!("synthetic data `{k}` must be an integer, got `{v}`")))
        };
        let shape = fields.get("shape").copied().unwrap_or("1x28x28");
        let dims: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| usage(format!("bad synthetic shape `{shape}`"))))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else {
            return Err(usage(format!("synthetic shape must be `CxHxW`, got `{shape}`")));
        };
        Ok(DataSource::Synth {
            classes: num("classes", None)?,
            per_class: num("per_class", None)?,
            shape: (c, h, w),
            seed: num("seed", Some("0"))? as u64,
            split: num("split", Some("0"))? as u64,
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Idx(prefix) => {
                let images = suffixed(prefix, "-images-idx3-ubyte");
                let labels = suffixed(prefix, "-labels-idx1-ubyte");
                load_idx(&images, &labels).with_context(|| format!("loading {} and {}", images.display(), labels.display()))
            }
            &DataSource::Synth {
                classes,
                per_class,
                shape,
                seed,
                split,
            } => Ok(synth_blobs_split(classes, per_class, shape, seed, split)?),
        }
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A preset name or an inline `input ...; ...` description.
pub fn parse_arch(value: &str) -> Result<NetworkSpec> {
    let spec = if value.trim_start().starts_with("input") {
        value.parse()
    } else {
        NetworkSpec::preset(value.trim())
    };
    spec.map_err(|e| usage(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch_name: String,
    pub arch: NetworkSpec,
    pub train_data: DataSource,
    pub test_data: DataSource,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !REQUIRED.contains(&k) && !OPTIONAL.contains(&k) {
                return Err(usage(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(usage(format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !kv.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(usage(format!("missing config keys: {}", missing.join(", "))));
        }
        let get = |k: &str| kv.get(k).map(String::as_str);
        fn parsed<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| usage(format!("`{k}` has invalid value `{v}`")))
        }
        let opt = |k: &str| -> Result<Option<usize>> { get(k).map(|v| parsed(k, v)).transpose() };

        let mode: ConvMode = get("mode").unwrap().parse().map_err(|e: rank1cnn::Error| usage(e.to_string()))?;
        let deterministic = match get("deterministic").unwrap() {
            "true" | "yes" | "1" => true,
            "false" | "no" | "0" => false,
            other => return Err(usage(format!("`deterministic` must be true or false, got `{other}`"))),
        };
        let arch_name = get("arch").unwrap().to_string();
        let train = TrainConfig {
            learning_rate: parsed("lr", get("lr").unwrap())?,
            batch_size: parsed("batch_size", get("batch_size").unwrap())?,
            epochs: parsed("epochs", get("epochs").unwrap())?,
            seed: parsed("seed", get("seed").unwrap())?,
            mode,
            eval_every: opt("eval_every")?.unwrap_or(0),
            deterministic,
            momentum: get("momentum").map(|v| parsed("momentum", v)).transpose()?.unwrap_or(0.0),
            threads: opt("threads")?,
        };
        train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(RunConfig {
            arch: parse_arch(&arch_name)?,
            arch_name,
            train_data: DataSource::parse(get("data.train").unwrap(), base)?,
            test_data: DataSource::parse(get("data.test").unwrap(), base)?,
            out_dir: base.join(get("out_dir").unwrap()),
            train,
            train_limit: opt("train_limit")?,
            test_limit: opt("test_limit")?,
        })
    }
}

/// Applies a `RANK1_THREADS` cap to the configured thread count.
pub fn cap_threads(configured: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let Some(raw) = env else {
        return Ok(configured);
    };
    let cap: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("RANK1_THREADS must be a positive integer, got `{raw}`"))?;
    Ok(Some(configured.map_or(cap, |c| c.min(cap))))
}

pub fn is_usage_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<UsageError>().is_some()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
# desk run
mode = rank1
arch = mnist-small
data.train = data/train
data.test = synth:classes=3,per_class=4,shape=1x28x28,seed=2,split=1
lr = 0.05
batch_size = 32
epochs = 5   # five passes
seed = 7
out_dir = runs/a
deterministic = true
momentum = 0.5
";

    #[test]
    fn parses_full_config() {
        let cfg = RunConfig::parse(FULL, Path::new("/base")).unwrap();
        assert_eq!(cfg.train.mode, ConvMode::Rank1);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.momentum, 0.5);
        assert!(cfg.train.deterministic);
        assert_eq!(cfg.out_dir, Path::new("/base/runs/a"));
        assert_eq!(cfg.train_data, DataSource::Idx(PathBuf::from("/base/data/train")));
        assert_eq!(
            cfg.test_data,
            DataSource::Synth {
                classes: 3,
                per_class: 4,
                shape: (1, 28, 28),
                seed: 2,
                split: 1
            }
        );
        assert_eq!(cfg.test_data.load().unwrap().len(), 12);
    }

    #[test]
    fn usage_errors() {
        let cases = [
            FULL.replace("mode = rank1", "mode = rank7"),
            FULL.replace("seed = 7\n", ""),
            FULL.replace("lr = 0.05", "lr = fast"),
            FULL.replace("lr = 0.05", "lr = 0"),
            FULL.replace("arch = mnist-small", "arch = mnist-huge"),
            FULL.replace("deterministic = true", "deterministic = maybe"),
            format!("{FULL}colour = blue\n"),
            format!("{FULL}seed = 8\n"),
            format!("{FULL}no equals sign\n"),
            FULL.replace("seed=2", "seed=x"),
        ];
        for text in cases {
            let err = RunConfig::parse(&text, Path::new(".")).unwrap_err();
            assert!(is_usage_error(&err), "{err}");
        }
    }

    #[test]
    fn inline_arch() {
        let text = FULL.replace("arch = mnist-small", "arch = input 1x28x28; conv 1->2 3x3; fc 1568->10");
        let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.arch.layers.len(), 2);
    }

    #[test]
    fn thread_cap() {
        assert_eq!(cap_threads(None, None).unwrap(), None);
        assert_eq!(cap_threads(Some(8), Some("2")).unwrap(), Some(2));
        assert_eq!(cap_threads(Some(1), Some("4")).unwrap(), Some(1));
        assert_eq!(cap_threads(None, Some("3")).unwrap(), Some(3));
        assert!(cap_threads(None, Some("0")).is_err());
        assert!(cap_threads(None, Some("many")).is_err());
    }
}
