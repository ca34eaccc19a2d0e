use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RftfError};

const BUILTIN_VARIANTS: &str = include_str!("../../assets/variants.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantId {
    A,
    B,
    C,
    D,
}

impl VariantId {
    pub const ALL: [VariantId; 4] = [VariantId::A, VariantId::B, VariantId::C, VariantId::D];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for VariantId {
    type Err = RftfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(VariantId::A),
            "B" | "b" => Ok(VariantId::B),
            "C" | "c" => Ok(VariantId::C),
            "D" | "d" => Ok(VariantId::D),
            other => Err(RftfError::Config(format!("unknown environment variant `{other}`"))),
        }
    }
}

/// Parses `"A,B,C"`.
pub fn parse_variant_list(s: &str) -> Result<Vec<VariantId>> {
    let ids = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(VariantId::from_str)
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(RftfError::Config("empty variant list".into()));
    }
    Ok(ids)
}

/// Nominal object placement before reset jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub effector: [f64; 2],
    pub target: [f64; 2],
    pub block: [f64; 2],
    pub zone: [f64; 2],
    pub button: [f64; 2],
    pub switch: [f64; 2],
}

impl Layout {
    pub fn positions(&self) -> [(&'static str, [f64; 2]); 6] {
        [
            ("effector", self.effector),
            ("target", self.target),
            ("block", self.block),
            ("zone", self.zone),
            ("button", self.button),
            ("switch", self.switch),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvVariant {
    pub id: VariantId,
    pub layout: Layout,
    pub obs_noise_sigma: f64,
}

#[derive(Deserialize)]
struct VariantEntry {
    obs_noise_sigma: f64,
    layout: Layout,
}

impl EnvVariant {
    pub fn builtin(id: VariantId) -> EnvVariant {
        builtin_variants()
            .into_iter()
            .find(|v| v.id == id)
            .expect("all four variants ship with the crate")
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.obs_noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.obs_noise_sigma >= 0.0 && self.obs_noise_sigma.is_finite()) {
            return Err(RftfError::Config(format!(
                "variant {}: noise sigma must be >= 0",
                self.id
            )));
        }
        for (name, p) in self.layout.positions() {
            if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(RftfError::Config(format!(
                    "variant {}: {name} at {p:?} is outside the unit workspace",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_variants(json: &str) -> Result<Vec<EnvVariant>> {
    let raw: BTreeMap<String, VariantEntry> =
        serde_json::from_str(json).map_err(|e| RftfError::Format(format!("variant config: {e}")))?;
    let mut out = Vec::with_capacity(raw.len());
    for (key, entry) in raw {
        let v = EnvVariant {
            id: key.parse()?,
            layout: entry.layout,
            obs_noise_sigma: entry.obs_noise_sigma,
        };
        v.validate()?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_variants(path: &Path) -> Result<Vec<EnvVariant>> {
    let text = std::fs::read_to_string(path).map_err(|e| RftfError::io(path, e))?;
    parse_variants(&text)
}

pub fn builtin_variants() -> Vec<EnvVariant> {
    parse_variants(BUILTIN_VARIANTS).expect("shipped variant config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_layouts_are_valid_and_d_is_distinct() {
        let all = builtin_variants();
        assert_eq!(all.len(), 4);
        let d = EnvVariant::builtin(VariantId::D);
        for other in all.iter().filter(|v| v.id != VariantId::D) {
            for ((name, p), (_, q)) in d.layout.positions().iter().zip(other.layout.positions()) {
                assert_ne!(*p, q, "{name} of D coincides with {}", other.id);
            }
            assert!(d.obs_noise_sigma > other.obs_noise_sigma);
        }
    }

    #[test]
    fn variant_lists_parse() {
        assert_eq!(
            parse_variant_list("A,B,C").unwrap(),
            vec![VariantId::A, VariantId::B, VariantId::C]
        );
        assert!(parse_variant_list("A,E").is_err());
        assert!(parse_variant_list("").is_err());
    }

    #[test]
    fn out_of_workspace_layout_is_rejected() {
        let json = BUILTIN_VARIANTS.replace("[0.45, 0.15]", "[1.45, 0.15]");
        assert!(parse_variants(&json).is_err());
    }
}
