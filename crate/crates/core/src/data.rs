//! Procedural paired dataset: concept signatures rendered into patch grids,
//! concept words sampled into captions.

use std::collections::HashSet;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{TokenBatch, PAD_ID};
use crate::error::{Error, Result};
use crate::model::PairBatch;
use crate::tensor::{Real, Tensor};

/// Dedicated caption ids per concept.
pub const WORDS_PER_CONCEPT: usize = 4;
/// Side of the square patch block carrying one concept signature.
pub const SIGNATURE_SIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpec {
    pub num_concepts: usize,
    /// Patches per row/column; images hold `grid_side²` patches.
    pub grid_side: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub caption_min: usize,
    pub caption_max: usize,
    pub noise_sigma: f64,
    /// Concepts per example are drawn uniformly from `1..=max_concepts`.
    pub max_concepts: usize,
    pub function_word_frac: f64,
}

impl Default for ConceptSpec {
    fn default() -> Self {
        ConceptSpec {
            num_concepts: 16,
            grid_side: 4,
            patch_dim: 12,
            vocab_size: 80,
            caption_min: 4,
            caption_max: 12,
            noise_sigma: 0.5,
            max_concepts: 3,
            function_word_frac: 0.3,
        }
    }
}

impl ConceptSpec {
    pub fn patches_per_image(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// First id that is not owned by a concept.
    pub fn first_function_word(&self) -> usize {
        1 + WORDS_PER_CONCEPT * self.num_concepts
    }

    pub fn concept_words(&self, c: usize) -> std::ops::Range<usize> {
        let start = 1 + WORDS_PER_CONCEPT * c;
        start..start + WORDS_PER_CONCEPT
    }

    /// Concept owning a token id, if any.
    pub fn concept_of_word(&self, id: usize) -> Option<usize> {
        (id != PAD_ID && id < self.first_function_word()).then(|| (id - 1) / WORDS_PER_CONCEPT)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_concepts;
        if c == 0 || self.patch_dim == 0 {
            return Err(Error::config("num_concepts and patch_dim must be positive"));
        }
        if c > self.vocab_size / WORDS_PER_CONCEPT || self.first_function_word() > self.vocab_size {
            return Err(Error::config(format!(
                "{c} concepts need {} word ids plus padding, vocab_size is {}",
                WORDS_PER_CONCEPT * c,
                self.vocab_size
            )));
        }
        if self.function_word_frac > 0.0 && self.first_function_word() >= self.vocab_size {
            return Err(Error::config("no ids left for function words"));
        }
        if !(0.0..1.0).contains(&self.function_word_frac) {
            return Err(Error::config("function_word_frac must be in [0, 1)"));
        }
        if self.max_concepts == 0 || self.max_concepts > c {
            return Err(Error::config(format!("max_concepts must be in 1..={c}")));
        }
        if self.grid_side < SIGNATURE_SIDE {
            return Err(Error::config(format!("grid_side must be at least {SIGNATURE_SIDE}")));
        }
        if self.caption_min == 0 || self.caption_min > self.caption_max {
            return Err(Error::config("caption length range is empty"));
        }
        let shortest_content = self.caption_min - self.function_words_for(self.caption_min);
        if shortest_content < self.max_concepts {
            return Err(Error::config("shortest caption cannot name every concept of an example"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    fn function_words_for(&self, len: usize) -> usize {
        (self.function_word_frac * len as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: usize,
    /// `[patches_per_image * patch_dim]`, row-major by patch.
    pub image: Vec<f64>,
    pub caption: Vec<usize>,
    /// Sorted ground-truth concept ids.
    pub concepts: Vec<usize>,
}

impl PairedExample {
    fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in &self.image {
            x.to_bits().hash(&mut h);
        }
        self.caption.hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ConceptSpec,
    /// Per concept, `SIGNATURE_SIDE²` patch vectors.
    pub signatures: Vec<Vec<f64>>,
    pub train: Vec<PairedExample>,
    pub val: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[PairedExample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// 80/10/10, each rounded down, remainder to train.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let val = total / 10;
    let test = total / 10;
    (total - val - test, val, test)
}

/// Adds `sig` to `image` with its top-left patch at grid cell (`row`, `col`).
fn stamp(image: &mut [f64], sig: &[f64], spec: &ConceptSpec, row: usize, col: usize) {
    let pd = spec.patch_dim;
    for dr in 0..SIGNATURE_SIDE {
        for dc in 0..SIGNATURE_SIDE {
            let patch = (row + dr) * spec.grid_side + col + dc;
            let src = &sig[(dr * SIGNATURE_SIDE + dc) * pd..][..pd];
            for (dst, &s) in image[patch * pd..][..pd].iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
}

fn sample_example(
    rng: &mut ChaCha8Rng,
    spec: &ConceptSpec,
    signatures: &[Vec<f64>],
    first: usize,
    id: usize,
) -> PairedExample {
    let c = spec.num_concepts;
    let m = rng.random_range(1..=spec.max_concepts);
    let mut others: Vec<usize> = (0..c).filter(|&k| k != first).collect();
    others.shuffle(rng);
    let mut order = vec![first];
    order.extend_from_slice(&others[..m - 1]);
    order.shuffle(rng);

    let mut image = vec![0.0; spec.patches_per_image() * spec.patch_dim];
    let offsets = spec.grid_side - SIGNATURE_SIDE + 1;
    for &k in &order {
        let (r, col) = (rng.random_range(0..offsets), rng.random_range(0..offsets));
        stamp(&mut image, &signatures[k], spec, r, col);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for x in image.iter_mut() {
            *x += noise.sample(rng);
        }
    }

    let len = rng.random_range(spec.caption_min..=spec.caption_max);
    let n_func = spec.function_words_for(len);
    let n_content = len - n_func;
    let mut caption = Vec::with_capacity(len);
    for (slot, &k) in order.iter().enumerate() {
        // content words are spread round-robin, so every concept gets at least one
        let count = n_content / m + usize::from(slot < n_content % m);
        let words = spec.concept_words(k);
        caption.extend((0..count).map(|_| rng.random_range(words.clone())));
    }
    for _ in 0..n_func {
        let w = rng.random_range(spec.first_function_word()..spec.vocab_size);
        let at = rng.random_range(0..=caption.len());
        caption.insert(at, w);
    }
    order.sort_unstable();
    PairedExample { id, image, caption, concepts: order }
}

/// Deterministic train/val/test splits of `size` examples in total.
pub fn generate_dataset(spec: &ConceptSpec, seed: u64, size: usize) -> Result<Dataset> {
    spec.validate()?;
    let sizes = split_sizes(size);
    let smallest = sizes.0.min(sizes.1).min(sizes.2);
    if smallest < spec.num_concepts {
        return Err(Error::config(format!(
            "{size} examples leave a split of {smallest}, fewer than {} concepts",
            spec.num_concepts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig_len = SIGNATURE_SIDE * SIGNATURE_SIDE * spec.patch_dim;
    let signatures: Vec<Vec<f64>> = (0..spec.num_concepts)
        .map(|_| (0..sig_len).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect();

    let mut seen = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (stream, n) in [sizes.0, sizes.1, sizes.2].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut attempts = 0;
            let ex = loop {
                let ex = sample_example(&mut rng, spec, &signatures, i % spec.num_concepts, i);
                if seen.insert(ex.content_hash()) {
                    break ex;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::config("cannot draw enough distinct examples for this spec"));
                }
            };
            out.push(ex);
        }
        splits.push(out);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { spec: spec.clone(), signatures, train, val, test })
}

/// Shuffled batch index lists for one epoch; the final short batch is dropped.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::contract(format!("batch size {batch_size} for a split of {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks examples into model input; captions are right-padded.
pub fn make_batch<T: Real>(spec: &ConceptSpec, examples: &[&PairedExample]) -> Result<PairBatch<T>> {
    let n = spec.patches_per_image();
    let mut data = Vec::with_capacity(examples.len() * n * spec.patch_dim);
    for ex in examples {
        data.extend(ex.image.iter().map(|&x| T::c(x)));
    }
    let patches = Tensor::new(vec![examples.len(), n, spec.patch_dim], data)?;
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.caption.clone()).collect();
    Ok(PairBatch { patches, tokens: TokenBatch::from_sequences(&seqs)? })
}

/// Concept set named by a caption.
pub fn decode_caption(spec: &ConceptSpec, caption: &[usize]) -> Vec<usize> {
    let mut cs: Vec<usize> = caption.iter().filter_map(|&w| spec.concept_of_word(w)).collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Best single-concept explanation of an image: the signature and offset with the smallest residual.
pub fn decode_image_single(spec: &ConceptSpec, signatures: &[Vec<f64>], image: &[f64]) -> usize {
    let offsets = spec.grid_side - SIGNATURE_SIDE + 1;
    let mut best = (f64::INFINITY, 0);
    for (k, sig) in signatures.iter().enumerate() {
        for r in 0..offsets {
            for c in 0..offsets {
                let mut rendered = vec![0.0; image.len()];
                stamp(&mut rendered, sig, spec, r, c);
                let err: f64 = rendered.iter().zip(image).map(|(a, b)| (a - b) * (a - b)).sum();
                if err < best.0 {
                    best = (err, k);
                }
            }
        }
    }
    best.1
}

/// Text-to-image top-1 accuracy (percent) of a matcher that decodes captions by vocabulary
/// and images by nearest signature, counting a hit when the retrieved concept set is correct.
pub fn oracle_retrieval_accuracy(data: &Dataset, split: Split) -> f64 {
    let ex = data.split(split);
    let images: Vec<usize> = ex.iter().map(|e| decode_image_single(&data.spec, &data.signatures, &e.image)).collect();
    let hits = ex
        .iter()
        .filter(|e| {
            let want = decode_caption(&data.spec, &e.caption);
            // first image (lowest index) whose decoded concept matches the caption
            let pick = (0..ex.len()).find(|&j| want == [images[j]]).unwrap_or(0);
            ex[pick].concepts == e.concepts
        })
        .count();
    100.0 * hits as f64 / ex.len() as f64
}
