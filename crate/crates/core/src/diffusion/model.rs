use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionBundle, EncoderConfig, LayoutEncoder};
use crate::denoiser::{UNet, UNetConfig, UNetOutput};
use crate::layout::Layout;
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}


/// Layout encoder plus denoiser over a single parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: LayoutEncoder,
    pub unet: UNet,
}

/// Which condition feeds one noise prediction.
#[derive(Clone, Copy, Debug)]
pub enum Cond<'a> {
    Null,
    Layout { layout: &'a Layout, alphas: (f64, f64) },
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        if config.encoder.dim != config.unet.cond_dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from the denoiser condition width {}",
                config.encoder.dim, config.unet.cond_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = LayoutEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let unet = UNet::new(config.unet.clone(), &mut store, &mut rng)?;
        Ok(Model { config, store, encoder, unet })
    }

    pub fn image_size(&self) -> usize {
        self.config.unet.image_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.image_size();
        [self.config.unet.in_channels, s, s]
    }

    pub fn bundle(&self, g: &mut Graph<'_>, cond: Cond<'_>) -> Result<ConditionBundle> {
        match cond {
            Cond::Null => self.encoder.null_bundle(g),
            Cond::Layout { layout, alphas } => self.encoder.condition(g, layout, self.image_size(), false, alphas),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, t: usize, bundle: &ConditionBundle) -> Result<UNetOutput> {
        self.unet.forward(g, x, t, bundle)
    }

    /// ε prediction without recording gradients.
    pub fn predict(&self, x: &Tensor, t: usize, cond: Cond<'_>) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let bundle = self.bundle(&mut g, cond)?;
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, t, &bundle)?;
        Ok(g.value(out.eps).clone())
    }

    /// Writes every parameter plus `extra` tensors; the model config lands in
    /// the manifest metadata under "model" next to the caller's `meta`.
    pub fn save(&self, path: &Path, extra: &[(String, &Tensor)], meta: serde_json::Value) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = self.store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
        tensors.extend(extra.iter().cloned());
        let meta = serde_json::json!({ "model": self.config, "run": meta });
        save_checkpoint(path, &tensors, &meta)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model, the tensors that are not
    /// parameters, and the caller metadata.
    pub fn load(path: &Path) -> Result<(Model, Vec<(String, Tensor)>, serde_json::Value)> {
        let (tensors, meta) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::data(path, format!("checkpoint model config: {e}")))?;
        let mut model = Model::new(config)?;
        let mut extra = Vec::new();
        let mut seen = 0;
        for (name, t) in tensors {
            match model.store.id(&name) {
                Some(id) => {
                    let p = model.store.get_mut(id);
                    if p.value.shape() != t.shape() {
                        return Err(Error::data(
                            path,
                            format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), p.value.shape()),
                        ));
                    }
                    p.value = t;
                    seen += 1;
                }
                None => extra.push((name, t)),
            }
        }
        if seen != model.store.len() {
            return Err(Error::data(path, format!("checkpoint holds {seen} of {} parameters", model.store.len())));
        }
        Ok((model, extra, meta["run"].clone()))
    }
}
