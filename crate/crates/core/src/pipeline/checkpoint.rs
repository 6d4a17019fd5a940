//! Single-file JSON checkpoint: config echo, variant, threshold and named
//! parameter arrays for student and teacher.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, Variant};
use crate::config::ModelConfig;
use crate::distill::TeacherState;
use crate::error::Result;
use crate::numcore::ParamSet;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    variant: Variant,
    threshold: f64,
    params: ParamSet,
    teacher: TeacherState,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        config: model.config.clone(),
        variant: model.variant,
        threshold: model.threshold,
        params: model.params.clone(),
        teacher: model.teacher.clone(),
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    ck.config.validate()?;
    Model::from_parts(ck.config, ck.variant, ck.params, Some(ck.teacher), ck.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restores_bit_identical_state() {
        let mut cfg = ModelConfig::default();
        cfg.seed = 11;
        let mut model = Model::new(&cfg, Variant::NoSe).unwrap();
        model.threshold = 0.0123456789;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.teacher, model.teacher);
        assert_eq!(back.threshold, model.threshold);
        assert_eq!(back.variant, Variant::NoSe);
    }
}
