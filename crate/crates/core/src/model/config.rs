use crate::dataset::MAX_LEN;
use crate::error::{Error, Result};
use crate::world::CANVAS;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub ff_dim: usize,
    /// Apply the loss at the length-token position (whose target is w1).
    pub loss_on_first: bool,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            image_size: CANVAS,
            patch: 8,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            vocab,
            max_len: MAX_LEN,
            ff_dim: 256,
            loss_on_first: true,
        }
    }

    /// Small configuration used for gradient checks.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_dim: 32,
            ..Self::new(vocab)
        }
    }

    /// Number of vision tokens.
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    /// Vision tokens plus the box token.
    pub fn prefix_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch,
            self.d_model,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.vocab,
            self.max_len,
            self.ff_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}
