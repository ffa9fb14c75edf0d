//! Versioned JSON checkpoints of trained models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PrivacyConfig;
use crate::schema::TableSchema;
use crate::trainer::TrainedModel;

pub const FORMAT: &str = "tablegan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub schema_hash: String,
    pub privacy: PrivacyConfig,
    pub epochs_completed: usize,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn new(model: TrainedModel) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            schema_hash: model.schema.hash(),
            privacy: model.config.privacy,
            epochs_completed: model.history.len(),
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        ck.verify()?;
        Ok(ck)
    }

    fn verify(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let m = &self.model;
        if self.schema_hash != m.schema.hash() {
            return Err(Error::Checkpoint("stored schema hash does not match the embedded schema".into()));
        }
        let side = m.layout.side();
        let dim = m.discriminator.feature_dim();
        let consistent = m.generator.side() == side
            && m.discriminator.side() == side
            && m.classifier.side() == side
            && m.layout.attributes() == m.schema.len()
            && m.discriminator.signature() == m.classifier.signature()
            && [&m.ewma.mean_x, &m.ewma.sd_x, &m.ewma.mean_z, &m.ewma.sd_z]
                .iter()
                .all(|v| v.len() == dim);
        if !consistent {
            return Err(Error::Checkpoint("checkpoint components have inconsistent dimensions".into()));
        }
        Ok(())
    }

    /// Fails unless the checkpoint was trained on `schema`.
    pub fn expect_schema(&self, schema: &TableSchema) -> Result<()> {
        let hash = schema.hash();
        if hash != self.schema_hash {
            return Err(Error::Checkpoint(format!(
                "schema hash mismatch: checkpoint {}, data {}",
                self.schema_hash, hash
            )));
        }
        Ok(())
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::toy;
    use crate::trainer::{synthesize, train, TrainConfig};

    fn small_model() -> TrainedModel {
        let t = toy::toy_table(40, 1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            net: NetConfig {
                latent_dim: 4,
                base_filters: 2,
                leaky_slope: 0.2,
            },
            ..TrainConfig::default()
        };
        train(&t, &cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_model_exactly() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ck = Checkpoint::new(model.clone());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert_eq!(synthesize(&back.model, 20, 3).unwrap(), synthesize(&model, 20, 3).unwrap());
        back.expect_schema(&model.schema).unwrap();
    }

    #[test]
    fn rejects_other_schema_and_corruption() {
        let ck = Checkpoint::new(small_model());
        let other = crate::schema::TableSchema::build(
            &["a", "y"],
            &[
                crate::schema::ColumnDecl::new("a", crate::schema::ColumnKind::Continuous).range(0.0, 1.0),
                crate::schema::ColumnDecl::new("y", crate::schema::ColumnKind::Label),
            ],
            &[],
        )
        .unwrap();
        assert!(ck.expect_schema(&other).unwrap_err().to_string().contains("hash mismatch"));

        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());

        let mut tampered = ck.clone();
        tampered.schema_hash = "00".into();
        assert!(Checkpoint::from_bytes(&tampered.to_bytes().unwrap()).is_err());
    }
}
