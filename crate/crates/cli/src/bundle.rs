//! The run bundle: everything needed to reproduce or audit one training run
//! in a single JSON file.

use std::path::Path;

use anyhow::{bail, Context};
use avicert::{AviRun, Certificate, LinearActor, LinearCritic, SystemModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub c: f64,
    pub upper: AviRun,
    pub lower: AviRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub created: String,
    pub tool_version: String,
    /// Digest of the final critic weights; see [`critic_digest`].
    pub critic_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub created: String,
    /// Must equal the bundle's critic digest.
    pub critic_sha256: String,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunBundle {
    pub format_version: u32,
    pub config: RunConfig,
    pub model: SystemModel,
    pub run: AviRun,
    pub actor: LinearActor,
    pub bounds: Option<Bounds>,
    pub certificate: Option<CertificateRecord>,
    pub provenance: Provenance,
}

/// SHA-256 over the little-endian bit patterns of the weights, hex encoded.
pub fn critic_digest(critic: &LinearCritic) -> String {
    let mut h = Sha256::new();
    for w in critic.weights() {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

impl RunBundle {
    pub fn critic(&self) -> LinearCritic {
        self.run.final_critic()
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let bundle: RunBundle = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a valid run bundle", path.display()))?;
        if bundle.format_version != FORMAT_VERSION {
            bail!(
                "{}: unsupported bundle format {} (expected {FORMAT_VERSION})",
                path.display(),
                bundle.format_version
            );
        }
        bundle.verify()?;
        Ok(bundle)
    }

    /// Checks the hash links between critic, provenance and certificate.
    pub fn verify(&self) -> anyhow::Result<()> {
        let digest = critic_digest(&self.critic());
        if digest != self.provenance.critic_sha256 {
            bail!("critic weights do not match the recorded digest");
        }
        if let Some(rec) = &self.certificate {
            if rec.critic_sha256 != digest
                || rec.certificate.critic.weights() != self.critic().weights()
            {
                bail!("certificate was issued for different critic weights");
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
