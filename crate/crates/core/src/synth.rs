//! Built-in synthetic interaction generators. Real datasets are too large to
//! validate correctness cheaply, so cyclic and Markov-chain item patterns
//! ship as a first-class dataset format.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Interaction, InteractionLog, ItemCatalog, PAD_ITEM_TITLE};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPattern {
    /// Item i is followed by item i+1 (mod n_items), with optional noise.
    Cyclic,
    /// Each item has three preferred successors with fixed probabilities,
    /// mixed with uniform noise.
    Markov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pattern: SynthPattern,
    pub n_users: usize,
    pub n_items: usize,
    pub seq_len: usize,
    /// Probability that a transition ignores the pattern and jumps uniformly.
    pub noise: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items < 2 || self.seq_len < 2 {
            return Err(Error::Config(
                "synthetic spec needs n_users >= 1, n_items >= 2, seq_len >= 2".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("synthetic noise must be in [0,1)".to_string()));
        }
        Ok(())
    }
}

/// Generate a log and catalog. Titles are `item <n>`, so each item carries
/// one discriminative token. All randomness flows from `(seed, "synth:*")`
/// substreams.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(InteractionLog, ItemCatalog)> {
    spec.validate()?;
    let n = spec.n_items as u32;
    let mut rng = substream(seed, "synth:walk");

    // Markov preferred successors, built once per dataset.
    let successors: Vec<[u32; 3]> = match spec.pattern {
        SynthPattern::Cyclic => Vec::new(),
        SynthPattern::Markov => {
            let mut srng = substream(seed, "synth:chain");
            (1..=n)
                .map(|_| {
                    let a = srng.gen_range(1..=n);
                    let b = srng.gen_range(1..=n);
                    let c = srng.gen_range(1..=n);
                    [a, b, c]
                })
                .collect()
        }
    };

    let next_item = |current: u32, rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
        if rng.gen_range(0.0..1.0) < spec.noise {
            return rng.gen_range(1..=n);
        }
        match spec.pattern {
            SynthPattern::Cyclic => current % n + 1,
            SynthPattern::Markov => {
                let opts = successors[(current - 1) as usize];
                let r: f64 = rng.gen_range(0.0..1.0);
                if r < 0.6 {
                    opts[0]
                } else if r < 0.85 {
                    opts[1]
                } else {
                    opts[2]
                }
            }
        }
    };

    let mut interactions = Vec::with_capacity(spec.n_users * spec.seq_len);
    for user in 0..spec.n_users as u32 {
        let mut current = rng.gen_range(1..=n);
        for pos in 0..spec.seq_len {
            interactions.push(Interaction {
                user,
                item: current,
                timestamp: pos as i64,
                rating: None,
            });
            current = next_item(current, &mut rng);
        }
    }

    let user_ids = (0..spec.n_users).map(|u| format!("u{u}")).collect();
    let mut item_ids = vec![PAD_ITEM_TITLE.to_string()];
    let mut titles = vec![PAD_ITEM_TITLE.to_string()];
    for i in 1..=n {
        item_ids.push(format!("{i}"));
        titles.push(format!("item {i}"));
    }

    Ok((
        InteractionLog {
            interactions,
            user_ids,
            item_ids,
        },
        ItemCatalog { titles },
    ))
}
