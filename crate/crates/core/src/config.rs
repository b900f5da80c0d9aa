//! Flat `key = value` text used for config files, run provenance and
//! checkpoint metadata.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Values are unquoted. Writing is canonical: one entry per line
//! in the order given, so identical configs serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::degrade::{DegradationKind, DegradationSpec};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    /// Parses `text`, collecting every malformed or duplicated line.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut doc = KvDoc::default();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got `{line}`", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                errors.push(format!("line {}: empty key", i + 1));
            } else if doc.entries.insert(k.to_string(), v.to_string()).is_some() {
                errors.push(format!("line {}: duplicate key `{k}`", i + 1));
            }
        }
        if errors.is_empty() {
            Ok(doc)
        } else {
            Err(errors)
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Entries of `other` replace ours.
    pub fn merge(&mut self, other: KvDoc) {
        self.entries.extend(other.entries);
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            doc: self,
            used: BTreeSet::new(),
            errors: Vec::new(),
        }
    }
}

/// Typed access to a [`KvDoc`] that records every problem instead of
/// stopping at the first.
pub struct KvReader<'a> {
    doc: &'a KvDoc,
    used: BTreeSet<&'a str>,
    errors: Vec<String>,
}

impl<'a> KvReader<'a> {
    /// Overwrites `target` when `key` is present and parses.
    pub fn read<T: FromStr>(&mut self, key: &str, target: &mut T)
    where
        T::Err: Display,
    {
        if let Some((k, v)) = self.doc.entries.get_key_value(key) {
            self.used.insert(k.as_str());
            match v.parse::<T>() {
                Ok(parsed) => *target = parsed,
                Err(e) => self.errors.push(format!("{key}: cannot parse `{v}`: {e}")),
            }
        }
    }

    pub fn read_opt<T: FromStr>(&mut self, key: &str, target: &mut Option<T>)
    where
        T::Err: Display,
    {
        if let Some((k, v)) = self.doc.entries.get_key_value(key) {
            self.used.insert(k.as_str());
            if v.is_empty() || v == "none" {
                *target = None;
                return;
            }
            match v.parse::<T>() {
                Ok(parsed) => *target = Some(parsed),
                Err(e) => self.errors.push(format!("{key}: cannot parse `{v}`: {e}")),
            }
        }
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    /// Reports unread keys as unknown and returns every collected problem.
    pub fn finish(mut self) -> Vec<String> {
        for k in self.doc.entries.keys() {
            if !self.used.contains(k.as_str()) {
                self.errors.push(format!("unknown key `{k}`"));
            }
        }
        self.errors
    }
}

/// Canonical text for ordered entries.
pub fn write_kv(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn push(out: &mut Vec<(String, String)>, prefix: &str, key: &str, v: impl Display) {
    out.push((format!("{prefix}{key}"), v.to_string()));
}

impl ModelConfig {
    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        push(out, prefix, "blocks", self.blocks);
        push(out, prefix, "layers", self.layers);
        push(out, prefix, "growth", self.growth);
        push(out, prefix, "features", self.features);
        push(out, prefix, "scale", self.scale);
        push(out, prefix, "cm", self.cm);
        push(out, prefix, "lrl", self.lrl);
        push(out, prefix, "gff", self.gff);
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader<'_>) {
        r.read(&format!("{prefix}blocks"), &mut self.blocks);
        r.read(&format!("{prefix}layers"), &mut self.layers);
        r.read(&format!("{prefix}growth"), &mut self.growth);
        r.read(&format!("{prefix}features"), &mut self.features);
        r.read(&format!("{prefix}scale"), &mut self.scale);
        r.read(&format!("{prefix}cm"), &mut self.cm);
        r.read(&format!("{prefix}lrl"), &mut self.lrl);
        r.read(&format!("{prefix}gff"), &mut self.gff);
    }
}

impl DegradationSpec {
    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        push(out, prefix, "kind", self.kind);
        push(out, prefix, "scale", self.scale);
        push(out, prefix, "noise_sigma", self.noise_sigma);
        push(out, prefix, "seed", self.seed);
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader<'_>) {
        let mut kind: DegradationKind = self.kind;
        r.read(&format!("{prefix}kind"), &mut kind);
        if kind != self.kind {
            // Switching model resets the model-specific defaults.
            *self = match kind {
                DegradationKind::Bi => DegradationSpec::bi(self.scale),
                DegradationKind::Bd => DegradationSpec::bd(),
                DegradationKind::Dn => DegradationSpec::dn(self.seed),
            };
        }
        r.read(&format!("{prefix}scale"), &mut self.scale);
        r.read(&format!("{prefix}noise_sigma"), &mut self.noise_sigma);
        r.read(&format!("{prefix}seed"), &mut self.seed);
    }
}

impl TrainConfig {
    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        push(out, prefix, "batch", self.batch);
        push(out, prefix, "patch", self.patch);
        push(out, prefix, "lr", self.lr);
        push(out, prefix, "halve_every", self.halve_every);
        push(out, prefix, "iters_per_epoch", self.iters_per_epoch);
        push(out, prefix, "epochs", self.epochs);
        push(out, prefix, "seed", self.seed);
        push(out, prefix, "augment", self.augment);
        push(out, prefix, "log_every", self.log_every);
        push(out, prefix, "loss", "l1");
    }

    pub fn read_kv(&mut self, prefix: &str, r: &mut KvReader<'_>) {
        r.read(&format!("{prefix}batch"), &mut self.batch);
        r.read(&format!("{prefix}patch"), &mut self.patch);
        r.read(&format!("{prefix}lr"), &mut self.lr);
        r.read(&format!("{prefix}halve_every"), &mut self.halve_every);
        r.read(&format!("{prefix}iters_per_epoch"), &mut self.iters_per_epoch);
        r.read(&format!("{prefix}epochs"), &mut self.epochs);
        r.read(&format!("{prefix}seed"), &mut self.seed);
        r.read(&format!("{prefix}augment"), &mut self.augment);
        r.read(&format!("{prefix}log_every"), &mut self.log_every);
        let mut loss = String::from("l1");
        r.read(&format!("{prefix}loss"), &mut loss);
        if loss != "l1" {
            r.error(format!("{prefix}loss: only `l1` is supported, got `{loss}`"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_collects_all_errors() {
        let errs = KvDoc::parse("a = 1\nbogus\na = 2\n = 3\n").unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn reader_reports_bad_values_and_unknown_keys() {
        let doc = KvDoc::parse("# comment\nmodel.blocks = x\nmodel.growth = 8\nnope = 1\n").unwrap();
        let mut cfg = ModelConfig::default();
        let mut r = doc.reader();
        cfg.read_kv("model.", &mut r);
        let errs = r.finish();
        assert_eq!(cfg.growth, 8);
        assert_eq!(errs.len(), 2, "{errs:?}");
    }

    #[test]
    fn model_config_round_trip() {
        let cfg = ModelConfig::new(3, 4, 16, 32, 4).with_toggles(false, true, false);
        let mut out = Vec::new();
        cfg.write_kv("m.", &mut out);
        let doc = KvDoc::parse(&write_kv(&out)).unwrap();
        let mut back = ModelConfig::default();
        let mut r = doc.reader();
        back.read_kv("m.", &mut r);
        assert!(r.finish().is_empty());
        assert_eq!(back, cfg);
    }
}
