//! Versioned JSON files for polynomial surrogates.

use std::path::Path;

use anyhow::{bail, Context, Result};
use psm_core::basis::Basis;
use psm_core::{BoxDomain, Surrogate};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateFile {
    pub format_version: u32,
    pub m: usize,
    pub n: usize,
    pub basis: Basis,
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    pub coeffs: Vec<f64>,
}

impl SurrogateFile {
    pub fn from_surrogate(s: &Surrogate) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            m: s.m,
            n: s.n,
            basis: s.basis,
            bounds: s.domain.intervals().iter().map(|&(a, b)| [a, b]).collect(),
            coeffs: s.coeffs.clone(),
        }
    }

    pub fn into_surrogate(self) -> Result<Surrogate> {
        if self.format_version != FORMAT_VERSION {
            bail!(
                "unsupported surrogate format version {} (expected {FORMAT_VERSION})",
                self.format_version
            );
        }
        if self.bounds.len() != self.m {
            bail!("box has {} intervals but m = {}", self.bounds.len(), self.m);
        }
        let domain = BoxDomain::new(self.bounds.iter().map(|b| (b[0], b[1])).collect())?;
        Ok(Surrogate::new(self.n, self.basis, domain, self.coeffs)?)
    }
}

pub fn to_json(s: &Surrogate) -> Result<String> {
    Ok(serde_json::to_string_pretty(
        &SurrogateFile::from_surrogate(s),
    )?)
}

pub fn from_json(text: &str) -> Result<Surrogate> {
    let file: SurrogateFile = serde_json::from_str(text).context("malformed surrogate file")?;
    file.into_surrogate()
}

pub fn save_surrogate(s: &Surrogate, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, to_json(s)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load_surrogate(path: &Path) -> Result<Surrogate> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    from_json(&text).with_context(|| format!("loading {}", path.display()))
}
