//! Per-epoch training plans: reference shuffling and random triplet mining.
//!
//! With shuffling on, the reference utterance fed to the encoder for a
//! target is drawn uniformly from all of the target speaker's training
//! utterances, so the only property reference and target are guaranteed to
//! share is the speaker. The triplet for each entry is anchored on the
//! reference utterance.
//!
//! A plan is a pure function of `(corpus, epoch, base_seed, shuffle)`: the
//! epoch's substream seed is `derive_seed(base_seed, [EPOCH_PLAN, epoch])`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from, tags};
use crate::toycorpus::Corpus;

/// `(anchor, positive, negative)` utterance indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub target: usize,
    pub reference: usize,
    /// `None` only when the reference speaker has a single utterance.
    pub triplet: Option<Triplet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: u64,
    pub seed: u64,
    pub entries: Vec<PlanEntry>,
    /// Entries whose speaker had a single utterance, so the reference had
    /// to be the target itself and no positive exists.
    pub fallback_count: usize,
}

/// Utterance indices of the training speakers, grouped by speaker.
#[derive(Debug, Clone)]
pub struct SpeakerIndex {
    by_speaker: BTreeMap<u32, Vec<usize>>,
    speakers: Vec<u32>,
    speaker_of: Vec<u32>,
}

impl SpeakerIndex {
    /// Index over the corpus's training speakers.
    pub fn train(corpus: &Corpus) -> Self {
        Self::over(corpus, &corpus.train_speakers())
    }

    pub fn over(corpus: &Corpus, speakers: &[u32]) -> Self {
        let by_speaker = corpus.utterances_by_speaker(speakers);
        Self {
            speakers: by_speaker.keys().copied().collect(),
            by_speaker,
            speaker_of: corpus.utterances.iter().map(|u| u.speaker_id).collect(),
        }
    }

    pub fn speakers(&self) -> &[u32] {
        &self.speakers
    }

    pub fn utterances_of(&self, speaker: u32) -> &[usize] {
        self.by_speaker.get(&speaker).map_or(&[], Vec::as_slice)
    }

    pub fn speaker_of(&self, utterance: usize) -> u32 {
        self.speaker_of[utterance]
    }

    /// All indexed utterances in ascending index order.
    pub fn utterances(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.by_speaker.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// Random triplet anchored at `anchor`: a uniformly chosen different
/// utterance of the same speaker, and an utterance of a uniformly chosen
/// other speaker.
pub fn mine_triplet<R: Rng + ?Sized>(index: &SpeakerIndex, anchor: usize, rng: &mut R) -> Result<Triplet> {
    if index.speakers.len() < 2 {
        return Err(Error::Mining("need at least two speakers to draw a negative".into()));
    }
    let speaker = *index
        .speaker_of
        .get(anchor)
        .ok_or_else(|| Error::Mining(format!("utterance {anchor} out of range")))?;
    let own = index.utterances_of(speaker);
    if !own.contains(&anchor) {
        return Err(Error::Mining(format!("utterance {anchor} is not indexed")));
    }
    if own.len() < 2 {
        return Err(Error::Mining(format!(
            "speaker {speaker} has a single utterance; no positive exists"
        )));
    }
    let mut k = rng.random_range(0..own.len() - 1);
    if own[k] == anchor {
        k = own.len() - 1;
    }
    let positive = own[k];

    let mut s = rng.random_range(0..index.speakers.len() - 1);
    if index.speakers[s] == speaker {
        s = index.speakers.len() - 1;
    }
    let others = index.utterances_of(index.speakers[s]);
    let negative = others[rng.random_range(0..others.len())];
    Ok(Triplet {
        anchor,
        positive,
        negative,
    })
}

/// Convenience wrapper over the corpus's training speakers.
pub fn mine_triplet_in<R: Rng + ?Sized>(corpus: &Corpus, anchor: usize, rng: &mut R) -> Result<Triplet> {
    mine_triplet(&SpeakerIndex::train(corpus), anchor, rng)
}

pub fn make_epoch_plan(corpus: &Corpus, epoch: u64, base_seed: u64, shuffle_on: bool) -> Result<EpochPlan> {
    make_epoch_plan_indexed(&SpeakerIndex::train(corpus), epoch, base_seed, shuffle_on)
}

pub fn make_epoch_plan_indexed(
    index: &SpeakerIndex,
    epoch: u64,
    base_seed: u64,
    shuffle_on: bool,
) -> Result<EpochPlan> {
    if index.speakers.len() < 2 {
        return Err(Error::Mining(
            "an epoch plan needs at least two training speakers".into(),
        ));
    }
    let seed = derive_seed(base_seed, &[tags::EPOCH_PLAN, epoch]);
    let mut rng = rng_from(seed, &[]);
    let mut entries = Vec::new();
    let mut fallback_count = 0;
    for target in index.utterances() {
        let own = index.utterances_of(index.speaker_of(target));
        let reference = if shuffle_on {
            own[rng.random_range(0..own.len())]
        } else {
            target
        };
        let triplet = if own.len() < 2 {
            fallback_count += 1;
            None
        } else {
            Some(mine_triplet(index, reference, &mut rng)?)
        };
        entries.push(PlanEntry {
            target,
            reference,
            triplet,
        });
    }
    entries.shuffle(&mut rng);
    Ok(EpochPlan {
        epoch,
        seed,
        entries,
        fallback_count,
    })
}
