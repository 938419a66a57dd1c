//! Run configuration: a `key=value` file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use defocus::{Error, Result};

macro_rules! run_keys {
    ($($key:ident: $help:literal,)*) => {
        /// Every key accepted in a config file; each is also a `--flag`.
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        #[derive(Debug, Clone, Default, Args)]
        pub struct Params {
            $(
                #[arg(long, help = $help, value_name = "VALUE", allow_hyphen_values = true)]
                pub $key: Option<String>,
            )*
        }

        impl Params {
            fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
                vec![$((stringify!($key), self.$key.as_ref())),*]
            }
        }
    };
}

run_keys! {
    scene: "scene kind: single_plane, two_plane, occluder, textured_random",
    seed: "random seed",
    size: "scene or instance size in pixels",
    model: "renderer: lf or comp (gradcheck also accepts smooth and all)",
    grid: "aperture grid size m",
    focus: "focus disparity, or a comma-separated list for simulate",
    expansion_iters: "depth expansion iterations",
    plane_min: "lowest compositional plane",
    plane_max: "highest compositional plane",
    sigma_xy: "smoothing spatial scale",
    sigma_color: "smoothing color scale",
    smooth_lambda: "smoothing strength",
    smooth_max_iters: "smoothing solver iteration cap",
    smooth_tolerance: "smoothing solver relative tolerance",
    smoothing: "in_loop, post_hoc or off",
    steps: "optimizer steps",
    lr_depth: "depth learning rate",
    lr_logits: "logit learning rate",
    lr_focus: "focus learning rate",
    lambda_d: "ray-depth regularizer weight",
    lambda_tv: "total-variation weight",
    beta1: "Adam beta1",
    beta2: "Adam beta2",
    adam_eps: "Adam epsilon",
    depth_min: "lower depth bound",
    depth_max: "upper depth bound",
    init_depth: "initial disparity",
    init_focus: "initial focus disparity",
    image: "all-in-focus input image (PNG or PFM)",
    depth: "disparity map (PFM)",
    pmf: "stacked plane PMF (PFM)",
    targets: "comma-separated supervision images",
    out: "output file or directory",
    out_pfm: "additional float output (PFM)",
    pred: "predicted image",
    reference: "reference image",
    pred_depth: "predicted disparity map",
    ref_depth: "reference disparity map",
    csv: "CSV output path",
}

/// Keys naming files that must exist when the configuration is loaded.
const INPUT_KEYS: &[&str] = &["image", "depth", "pmf", "targets", "pred", "reference", "pred_depth", "ref_depth"];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .copied()
        .find(|k| *k == key)
        .ok_or_else(|| Error::invalid(format!("unknown config key {key:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", n + 1)))?;
            values.insert(known(k.trim())?, v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// File values overridden by any flag given on the command line.
    pub fn resolve(file: Option<&Path>, flags: &Params) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in flags.pairs() {
            if let Some(v) = v {
                cfg.values.insert(k, v.clone());
            }
        }
        cfg.check_inputs()?;
        Ok(cfg)
    }

    fn check_inputs(&self) -> Result<()> {
        for key in INPUT_KEYS {
            for p in self.paths(key) {
                if !p.exists() {
                    return Err(Error::invalid(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse().map_err(|e| Error::invalid(format!("{key}={v}: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| Error::invalid(format!("{key}={v}: {e}"))))
                .collect(),
        }
    }

    pub fn paths(&self, key: &str) -> Vec<PathBuf> {
        match self.raw(key) {
            None => Vec::new(),
            Some(v) if key == "targets" => v.split(',').map(|s| PathBuf::from(s.trim())).collect(),
            Some(v) => vec![PathBuf::from(v)],
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::invalid(format!("missing required path {key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("steps=3\nbogus=1\n").is_err());
        assert!(RunConfig::parse("steps 3\n").is_err());
        let c = RunConfig::parse("# comment\nsteps = 3\nfocus=-1,2.5\n").unwrap();
        assert_eq!(c.get::<usize>("steps").unwrap(), Some(3));
        assert_eq!(c.list::<f64>("focus").unwrap(), vec![-1.0, 2.5]);
        assert!(c.get::<usize>("focus").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "steps=10\nlr_depth=0.5\n").unwrap();
        let flags = Params {
            steps: Some("20".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!(c.get::<usize>("steps").unwrap(), Some(20));
        assert_eq!(c.get::<f64>("lr_depth").unwrap(), Some(0.5));
    }

    #[test]
    fn missing_inputs_rejected() {
        let flags = Params {
            image: Some("/nonexistent/aif.png".into()),
            ..Default::default()
        };
        assert!(RunConfig::resolve(None, &flags).is_err());
    }
}
