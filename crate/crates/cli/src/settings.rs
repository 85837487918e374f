//! Resolved run settings: config file, then `--set` overrides, then
//! `--seed`. Every run writes them back out as a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use diver_core::checkpoint::Precision;
use diver_core::config::{apply_all, parse_kv, parse_override, render, KeyValue};
use diver_core::model::ModelConfig;
use diver_core::signal::PrepConfig;
use diver_core::synth::SynthConfig;
use diver_core::train::{FinetuneConfig, PretrainConfig};
use diver_core::verify::VerifyConfig;
use diver_core::Error;

/// Settings that belong to no single module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSettings {
    pub precision: Precision,
}

impl KeyValue for RunSettings {
    fn set(&mut self, key: &str, v: &str) -> diver_core::Result<bool> {
        match key {
            "checkpoint.precision" => self.precision = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![("checkpoint.precision".into(), self.precision.to_string())]
    }
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub prep: PrepConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub verify: VerifyConfig,
    pub run: RunSettings,
    /// Keys given explicitly, in order.
    pub given: Vec<String>,
}

/// Which sections a subcommand records in its manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Prep,
    Synth,
    Pretrain,
    Finetune,
    Verify,
    Run,
}

impl Settings {
    /// Read `config` (if any) and apply `overrides` on top of defaults,
    /// with `model` as the starting model configuration.
    pub fn resolve(config: Option<&Path>, overrides: &[String], model: ModelConfig) -> Result<Self> {
        let base = Settings {
            model,
            ..Settings::default()
        };
        Self::resolve_from(config, overrides, base)
    }

    /// As `resolve`, starting from `base` instead of defaults.
    pub fn resolve_from(config: Option<&Path>, overrides: &[String], base: Settings) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(invalid)?;
            pairs.extend(parse_kv(&text)?);
        }
        for o in overrides {
            pairs.push(parse_override(o)?);
        }
        let mut s = base;
        apply_all(
            &pairs,
            &mut [
                &mut s.model,
                &mut s.prep,
                &mut s.synth,
                &mut s.pretrain,
                &mut s.finetune,
                &mut s.verify,
                &mut s.run,
            ],
        )?;
        s.given = pairs.into_iter().map(|(k, _)| k).collect();
        Ok(s)
    }

    pub fn was_given(&self, key: &str) -> bool {
        self.given.iter().any(|k| k == key)
    }

    fn target(&self, s: Section) -> &dyn KeyValue {
        match s {
            Section::Model => &self.model,
            Section::Prep => &self.prep,
            Section::Synth => &self.synth,
            Section::Pretrain => &self.pretrain,
            Section::Finetune => &self.finetune,
            Section::Verify => &self.verify,
            Section::Run => &self.run,
        }
    }

    pub fn render(&self, sections: &[Section]) -> String {
        let targets: Vec<&dyn KeyValue> = sections.iter().map(|&s| self.target(s)).collect();
        render(&targets)
    }
}

/// Manifest text: comment lines for provenance, then the resolved
/// settings as a config file that reproduces the run.
pub fn manifest(command: &str, inputs: &[(&str, &Path)], settings: &Settings, sections: &[Section]) -> String {
    let mut m = format!(
        "# diver manifest\n# command: {command}\n# diver-cli: {}\n# diver-core: {}\n",
        env!("CARGO_PKG_VERSION"),
        diver_core::VERSION
    );
    for (name, path) in inputs {
        m.push_str(&format!("# input.{name}: {}\n", path.display()));
    }
    m.push_str(&settings.render(sections));
    m
}

/// Create `out` and write `name` into it.
pub fn write_out(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Marks an error as bad input or configuration (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub anyhow::Error);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(e.into()))
}

/// Exit code for a failed run: 2 for invalid input or configuration,
/// 1 for anything that went wrong while running.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::MissingChannels(_)
                | Error::Format(_)
                | Error::Shape { .. }
                | Error::Empty(_) => 2,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# comment\nd_model = 64\npretrain.steps = 10\n").unwrap();
        let s = Settings::resolve(Some(&cfg), &["pretrain.steps=3".into()], ModelConfig::default()).unwrap();
        assert_eq!(s.model.d_model, 64);
        assert_eq!(s.pretrain.steps, 3);
        assert!(s.was_given("d_model"));
        assert!(!s.was_given("heads"));
    }

    #[test]
    fn unknown_keys_are_invalid() {
        let e = Settings::resolve(None, &["nope=1".into()], ModelConfig::default()).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn manifest_replays_as_config() {
        let s = Settings::resolve(None, &["synth.seed=9".into()], ModelConfig::default()).unwrap();
        let m = manifest("synth", &[], &s, &[Section::Synth]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        fs::write(&p, &m).unwrap();
        let back = Settings::resolve(Some(&p), &[], ModelConfig::default()).unwrap();
        assert_eq!(back.synth, s.synth);
        assert!(m.contains("# command: synth"));
    }

    #[test]
    fn runtime_errors_exit_one() {
        let e = anyhow::Error::new(Error::Diverged {
            step: 3,
            detail: "nan".into(),
        });
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&invalid(anyhow::anyhow!("bad"))), 2);
    }
}
