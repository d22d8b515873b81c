//! Run configuration: preset defaults, then a flat `key = value` file, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use lucid_core::pipeline::{resolve_preset, Settings};
use lucid_core::InitPolicy;

use crate::error::{CliError, CliResult};

/// Keys that hold paths; relative values in a config file are taken
/// relative to the file's directory.
const PATH_KEYS: [&str; 5] = ["network", "weights", "frames", "flows", "out"];

pub const KEYS: [&str; 26] = [
    "preset",
    "class",
    "seed",
    "alpha",
    "beta",
    "gamma",
    "delta",
    "j",
    "k_base",
    "k_over",
    "lr",
    "shot_threshold",
    "disagreement_ratio",
    "disagreement_offset",
    "boundary_ratio",
    "boundary_offset",
    "mark_out_of_bounds",
    "trail_masked",
    "origins",
    "steps",
    "init",
    "network",
    "weights",
    "frames",
    "flows",
    "out",
];

pub type Entries = Vec<(String, String)>;

pub fn parse_config(text: &str) -> CliResult<Entries> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::validation(format!("config line {}: expected `key = value`", n + 1))
        })?;
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::validation(format!(
                "config line {}: unknown key `{key}`",
                n + 1
            )));
        }
        let value = value.trim().trim_matches('"').to_string();
        out.push((key, value));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> CliResult<Entries> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::missing(format!("config file {}", path.display())),
        _ => e.into(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(parse_config(&text)?
        .into_iter()
        .map(|(k, v)| {
            if PATH_KEYS.contains(&k.as_str()) && Path::new(&v).is_relative() {
                let joined = base.join(&v).display().to_string();
                (k, joined)
            } else {
                (k, v)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub settings: Settings,
    pub network: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::validation(format!("invalid value `{value}` for `{key}`")))
}

fn find<'a>(entries: &'a Entries, key: &str) -> Option<&'a str> {
    entries
        .iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

impl RunConfig {
    /// Resolves `file` then `cli` overrides on top of the selected preset.
    pub fn resolve(default_preset: &str, file: &Entries, cli: &Entries) -> CliResult<Self> {
        let name = find(cli, "preset")
            .or_else(|| find(file, "preset"))
            .unwrap_or(default_preset);
        let preset = resolve_preset(name)?;
        let mut cfg = RunConfig {
            settings: Settings::new(preset, 0),
            network: None,
            weights: None,
            frames: None,
            flows: None,
            out: None,
        };
        for (k, v) in file.iter().chain(cli) {
            cfg.apply(k, v)?;
        }
        cfg.settings.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> CliResult<()> {
        let s = &mut self.settings;
        let p = &mut s.preset;
        let c = &mut s.consistency;
        match key {
            "preset" => {}
            "class" => s.class = parse(key, value)?,
            "seed" => s.seed = parse(key, value)?,
            "alpha" => p.weights.alpha = parse(key, value)?,
            "beta" => p.weights.beta = parse(key, value)?,
            "gamma" => p.weights.gamma = parse(key, value)?,
            "delta" => p.weights.delta = parse(key, value)?,
            "j" => {
                p.offsets = value
                    .split(|ch: char| ch == ',' || ch.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| parse(key, t))
                    .collect::<CliResult<_>>()?
            }
            "k_base" => p.k_base = parse(key, value)?,
            "k_over" => p.k_over = parse(key, value)?,
            "lr" => s.lr = parse(key, value)?,
            "shot_threshold" => s.shot_threshold = parse(key, value)?,
            "disagreement_ratio" => c.disagreement_ratio = parse(key, value)?,
            "disagreement_offset" => c.disagreement_offset = parse(key, value)?,
            "boundary_ratio" => c.boundary_ratio = parse(key, value)?,
            "boundary_offset" => c.boundary_offset = parse(key, value)?,
            "mark_out_of_bounds" => c.mark_out_of_bounds = parse(key, value)?,
            "trail_masked" => s.trail_masked = parse(key, value)?,
            "origins" => s.origins = Some(parse(key, value)?),
            "steps" => s.steps = Some(parse(key, value)?),
            "init" => p.init = value.parse::<InitPolicy>()?,
            "network" => self.network = Some(value.into()),
            "weights" => self.weights = Some(value.into()),
            "frames" => self.frames = Some(value.into()),
            "flows" => self.flows = Some(value.into()),
            "out" => self.out = Some(value.into()),
            _ => return Err(CliError::validation(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn require(path: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        path.clone()
            .ok_or_else(|| CliError::validation(format!("`--{}` is required", key.replace('_', "-"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(&str, &str)]) -> Entries {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_flat_files() {
        let e = parse_config("# run\npreset = long_term\n\nk-base = 3 # fewer\nnetwork = \"net.toml\"\n").unwrap();
        assert_eq!(
            e,
            entries(&[("preset", "long_term"), ("k_base", "3"), ("network", "net.toml")])
        );
        assert!(parse_config("nonsense").is_err());
        assert!(parse_config("colour = red").is_err());
    }

    #[test]
    fn precedence_cli_over_file_over_preset() {
        let file = entries(&[("preset", "long_term"), ("gamma", "5"), ("lr", "0.1")]);
        let cli = entries(&[("gamma", "7")]);
        let cfg = RunConfig::resolve("per_frame", &file, &cli).unwrap();
        let s = &cfg.settings;
        assert_eq!(s.preset.weights.gamma, 7.0);
        assert_eq!(s.lr, 0.1);
        assert_eq!(s.preset.offsets, vec![1, 2, 4, 8, 16, 32]);
        assert_eq!(s.preset.weights.alpha, 10000.0);

        let cli = entries(&[("preset", "trail")]);
        let cfg = RunConfig::resolve("per_frame", &file, &cli).unwrap();
        assert_eq!(cfg.settings.preset.weights.delta, 500.0);
        assert_eq!(cfg.settings.preset.weights.gamma, 5.0);
    }

    #[test]
    fn overrides_are_validated() {
        let bad = |pairs: &[(&str, &str)]| RunConfig::resolve("short_term", &Vec::new(), &entries(pairs));
        assert!(bad(&[("k_base", "40")]).is_err());
        assert!(bad(&[("beta", "-1")]).is_err());
        assert!(bad(&[("j", "4,2")]).is_err());
        assert!(bad(&[("class", "x")]).is_err());
        assert!(bad(&[("preset", "octave")]).is_err());
        assert!(bad(&[("shot_threshold", "2")]).is_err());
        let ok = bad(&[("j", "1, 3,9"), ("init", "warped_previous")]).unwrap();
        assert_eq!(ok.settings.preset.offsets, vec![1, 3, 9]);
    }
}
