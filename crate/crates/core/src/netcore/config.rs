use crate::error::{invalid, Result};

/// Architecture hyperparameters shared by the decoder, encoder and heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub dec_depth: usize,
    pub enc_depth: usize,
    /// 0 collapses each projector to a single linear map.
    pub proj_hidden: usize,
    pub proj_bottleneck: usize,
    pub n_prototypes: usize,
    pub d_t: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            seq_len: 8,
            d_model: 256,
            n_heads: 4,
            dec_depth: 4,
            enc_depth: 2,
            proj_hidden: 1024,
            proj_bottleneck: 128,
            n_prototypes: 1024,
            d_t: 768,
        }
    }
}

pub const MLP_RATIO: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.seq_len.is_power_of_two() {
            return Err(invalid(format!(
                "seq_len {}: power of two required",
                self.seq_len
            )));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.n_prototypes < 2 {
            return Err(invalid("n_prototypes must be at least 2"));
        }
        if self.dec_depth == 0 {
            return Err(invalid("dec_depth must be at least 1"));
        }
        if self.d_t == 0 {
            return Err(invalid("d_t must be positive"));
        }
        if self.proj_hidden > 0 && self.proj_bottleneck == 0 {
            return Err(invalid("proj_bottleneck must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.seq_len = 6));
        assert!(bad(|c| c.n_heads = 3));
        assert!(bad(|c| c.vocab_size = 1));
        assert!(bad(|c| c.n_prototypes = 1));
    }
}
