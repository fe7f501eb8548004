use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use rtseg_core::dataset::{CaseField, CaseNaming, NamePattern};
use rtseg_core::report::ReportMetadata;
use sha2::{Digest, Sha256};

use crate::NamingArgs;

/// Bad invocation: exits with status 1.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError::new(msg).into()
}

pub fn parse_pattern(flag: &str, text: &str) -> anyhow::Result<NamePattern> {
    text.parse().map_err(|e| usage(format!("{flag}: {e}")))
}

fn parse_field(name: &str) -> Option<CaseField> {
    Some(match name {
        "pre_rt_image" => CaseField::PreRtImage,
        "pre_rt_mask" => CaseField::PreRtMask,
        "mid_rt_image" => CaseField::MidRtImage,
        "mid_rt_mask" => CaseField::MidRtMask,
        "reg_pre_rt_image" => CaseField::RegPreRtImage,
        "reg_pre_rt_mask" => CaseField::RegPreRtMask,
        _ => return None,
    })
}

pub fn case_field(name: &str) -> anyhow::Result<CaseField> {
    parse_field(name).ok_or_else(|| usage(format!("unknown case field {name:?}")))
}

impl NamingArgs {
    pub fn naming(&self) -> anyhow::Result<CaseNaming> {
        let mut naming = CaseNaming::default();
        for spec in &self.patterns {
            let (field, pattern) =
                spec.split_once('=').ok_or_else(|| usage(format!("--pattern {spec:?}: expected FIELD=PATTERN")))?;
            naming = naming.with(case_field(field.trim())?, parse_pattern("--pattern", pattern.trim())?);
        }
        Ok(naming)
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// UTC time from `SOURCE_DATE_EPOCH` when set, otherwise now.
pub fn timestamp() -> anyhow::Result<String> {
    let time = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v.trim().parse().map_err(|_| usage(format!("SOURCE_DATE_EPOCH {v:?} is not an integer")))?;
            DateTime::<Utc>::from_timestamp(secs, 0).ok_or_else(|| usage("SOURCE_DATE_EPOCH out of range"))?
        }
        Err(_) => Utc::now(),
    };
    Ok(time.to_rfc3339_opts(SecondsFormat::Secs, true))
}

/// Metadata with a digest per input, keyed by the path as given.
pub fn metadata<'a>(inputs: impl IntoIterator<Item = &'a Path>) -> anyhow::Result<ReportMetadata> {
    let mut meta = ReportMetadata::current();
    meta.timestamp = Some(timestamp()?);
    let digests: BTreeMap<String, String> = inputs
        .into_iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<anyhow::Result<_>>()?;
    meta.input_digests = digests;
    Ok(meta)
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    rtseg_core::dataset::write_atomic(path, text.as_bytes())?;
    Ok(())
}
