use rand::Rng;

use super::vocab::*;
use super::TokenSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmConfig {
    pub rate: f64,
    /// Share of selected positions replaced by MASK.
    pub mask_frac: f64,
    /// Share of selected positions replaced by a random token.
    pub random_frac: f64,
    /// Whether ATT, VS, VE and SEP can be selected alongside concepts.
    pub mask_special_tokens: bool,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            mask_special_tokens: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmMasked {
    pub input_ids: Vec<u32>,
    /// Original ids at every position.
    pub labels: Vec<u32>,
    /// 1 at selected positions, else 0.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VtpMasked {
    pub masked_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub weights: Vec<f64>,
}

fn maskable(token: u32, real: bool, specials: bool) -> bool {
    real && token != PAD && token != MASK && (specials || token >= FIRST_CONCEPT || token == UNK)
}

/// Selects each maskable position with probability `rate`; selected tokens
/// become MASK, a random non-reserved token, or stay unchanged.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    cfg: &MlmConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MlmMasked> {
    if !(0.0..=1.0).contains(&cfg.rate) || cfg.mask_frac + cfg.random_frac > 1.0 + 1e-12 {
        return Err(Error::Config(format!("bad MLM config {cfg:?}")));
    }
    let n = seq.len();
    let mut input_ids = seq.token_ids.clone();
    let mut weights = vec![0.0; n];
    let mut any_maskable = false;
    let mut selected = 0usize;
    for i in 0..n {
        if !maskable(seq.token_ids[i], seq.attention_mask[i], cfg.mask_special_tokens) {
            continue;
        }
        any_maskable = true;
        if rng.gen::<f64>() >= cfg.rate {
            continue;
        }
        selected += 1;
        weights[i] = 1.0;
        let u: f64 = rng.gen();
        if u < cfg.mask_frac {
            input_ids[i] = MASK;
        } else if u < cfg.mask_frac + cfg.random_frac {
            input_ids[i] = rng.gen_range(SEP..vocab_size as u32);
        }
    }
    if !any_maskable {
        return Err(Error::NothingMaskable("no maskable token"));
    }
    if selected == 0 {
        return Err(Error::NothingMaskable("no position selected"));
    }
    Ok(MlmMasked {
        input_ids,
        labels: seq.token_ids.clone(),
        weights,
    })
}

/// Masks typed positions (visit type >= 2) with probability `rate`.
pub fn apply_vtp_mask<R: Rng + ?Sized>(visit_type_ids: &[u32], rate: f64, rng: &mut R) -> Result<VtpMasked> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("VTP rate {rate}")));
    }
    if !visit_type_ids.iter().any(|&t| t > TYPE_MASK) {
        return Err(Error::NothingMaskable("no typed position"));
    }
    let mut masked_ids = visit_type_ids.to_vec();
    let mut weights = vec![0.0; visit_type_ids.len()];
    for (i, &t) in visit_type_ids.iter().enumerate() {
        if t > TYPE_MASK && rng.gen::<f64>() < rate {
            masked_ids[i] = TYPE_MASK;
            weights[i] = 1.0;
        }
    }
    Ok(VtpMasked {
        masked_ids,
        labels: visit_type_ids.to_vec(),
        weights,
    })
}
