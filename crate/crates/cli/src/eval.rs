//! Conditional-generation check on utterances the model never trained on.

use blockflow_core::corpus::{class_accuracy, synth_utterance, CorpusConfig};
use blockflow_core::flow::SamplerConfig;
use blockflow_core::streaming::generate_full;
use blockflow_core::{Model, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutAccuracy {
    pub utterances: usize,
    pub hits: usize,
    pub segments: usize,
}

impl HeldoutAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.segments == 0 {
            return 0.0;
        }
        self.hits as f64 / self.segments as f64
    }
}

/// Samples `count` utterances with indices past the training range, each from
/// its own noise seed, and labels every token segment by nearest prototype.
pub fn heldout_accuracy(
    model: &Model,
    corpus: &CorpusConfig,
    count: usize,
    sampler: &SamplerConfig,
) -> Result<HeldoutAccuracy> {
    let per_utt = (0..count)
        .into_par_iter()
        .map(|i| {
            let utt = synth_utterance(corpus, corpus.num_utterances + i);
            let ids = utt.frame_ids(corpus.upsample_factor);
            let noise_seed = sampler.seed.wrapping_add(i as u64);
            let out = generate_full(model, &ids, &utt.speaker, sampler, noise_seed)?;
            class_accuracy(corpus, &utt.tokens, &utt.speaker, &out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeldoutAccuracy {
        utterances: count,
        hits: per_utt.iter().map(|p| p.0).sum(),
        segments: per_utt.iter().map(|p| p.1).sum(),
    })
}
