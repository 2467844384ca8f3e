//! Masked-language-model further pre-training.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{log_softmax, read_params, write_params, Adam, EncoderConfig, LossSum, MlmModel, ParamSet, Tensor};
use crate::tokenizer::{is_special, TokenSequence, Vocab, MASK_ID, SPECIAL_TOKENS};

pub const CHECKPOINT_FORMAT: &str = "dapt-checkpoint-v1";

/// Sequences per gradient work unit. Fixed so that the reduction order, and
/// therefore every parameter update, is independent of the thread count.
pub(crate) const GRAD_CHUNK: usize = 4;

const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_MASK: u64 = 2 << 32;

/// Seeded generator for one (purpose, index) stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_prob, self.mask_token_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("masking probabilities must lie in [0, 1]"));
        }
        let sum = self.mask_token_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("corruption fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<u32>>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Vec<Option<u32>>>,
    pub masked_positions: Vec<Vec<usize>>,
    /// Parallel to `masked_positions`.
    pub corruption: Vec<Vec<Corruption>>,
}

impl MaskedBatch {
    pub fn labeled_count(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }

    fn targets(&self, i: usize) -> Vec<(usize, u32)> {
        self.masked_positions[i]
            .iter()
            .map(|&p| (p, self.labels[i][p].expect("label at masked position")))
            .collect()
    }
}

/// Selects each non-special position with probability `mask_prob` and
/// corrupts it as `[MASK]`, a random non-special id, or leaves it as is.
pub fn mask_batch<R: Rng>(batch: &[TokenSequence], vocab_size: usize, cfg: &MaskingConfig, rng: &mut R) -> MaskedBatch {
    let first_regular = SPECIAL_TOKENS.len() as u32;
    let mut out = MaskedBatch {
        input_ids: Vec::with_capacity(batch.len()),
        labels: Vec::with_capacity(batch.len()),
        masked_positions: Vec::with_capacity(batch.len()),
        corruption: Vec::with_capacity(batch.len()),
    };
    for seq in batch {
        let mut input = seq.ids.clone();
        let mut labels = vec![None; input.len()];
        let mut positions = Vec::new();
        let mut kinds = Vec::new();
        for (p, &id) in seq.ids.iter().enumerate() {
            if is_special(id) || rng.random::<f64>() >= cfg.mask_prob {
                continue;
            }
            let u: f64 = rng.random();
            let kind = if u < cfg.mask_token_frac {
                input[p] = MASK_ID;
                Corruption::Mask
            } else if u < cfg.mask_token_frac + cfg.random_frac && vocab_size as u32 > first_regular {
                input[p] = rng.random_range(first_regular..vocab_size as u32);
                Corruption::Random
            } else {
                Corruption::Keep
            };
            labels[p] = Some(id);
            positions.push(p);
            kinds.push(kind);
        }
        out.input_ids.push(input);
        out.labels.push(labels);
        out.masked_positions.push(positions);
        out.corruption.push(kinds);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    pub labeled: usize,
    /// Set when no position carried a label; `value` is then 0.
    pub no_labels: bool,
}

/// Mean cross-entropy over labeled positions. `logits[i]` holds
/// `len_i × vocab` scores for sequence `i` of the batch.
pub fn mlm_loss(logits: &[Tensor], mb: &MaskedBatch) -> Result<MlmLoss> {
    if logits.len() != mb.input_ids.len() {
        return Err(Error::invalid(format!(
            "{} logit blocks for {} sequences",
            logits.len(),
            mb.input_ids.len()
        )));
    }
    let vocab = logits.first().map(|l| l.ncols()).unwrap_or(0);
    let mut sum = LossSum::default();
    for (i, block) in logits.iter().enumerate() {
        if block.nrows() != mb.input_ids[i].len() || block.ncols() != vocab {
            return Err(Error::invalid(format!(
                "logits for sequence {i} have shape {:?}, expected ({}, {vocab})",
                block.dim(),
                mb.input_ids[i].len()
            )));
        }
        for &p in &mb.masked_positions[i] {
            let gold = mb.labels[i][p].expect("label at masked position") as usize;
            if gold >= vocab {
                return Err(Error::invalid(format!("label {gold} outside vocabulary of {vocab}")));
            }
            let row = block.row(p).to_vec();
            sum.add(LossSum {
                total: -log_softmax(&row)[gold],
                count: 1,
            });
        }
    }
    if sum.count == 0 {
        warn!("MLM loss requested over a batch with no labeled positions");
    }
    Ok(MlmLoss {
        value: sum.mean(),
        labeled: sum.count,
        no_labels: sum.count == 0,
    })
}

/// Summed loss and gradient for a masked batch, reduced in fixed chunk order.
pub fn batch_gradient(model: &MlmModel, mb: &MaskedBatch) -> Result<(LossSum, MlmModel)> {
    let n = mb.input_ids.len();
    let chunks: Vec<Result<(LossSum, MlmModel)>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut grad = model.zeros_like();
            let mut loss = LossSum::default();
            for &i in idx {
                loss.add(model.accumulate_gradient(&mb.input_ids[i], &mb.targets(i), &mut grad)?);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = LossSum::default();
    let mut grad: Option<MlmModel> = None;
    for chunk in chunks {
        let (l, g) = chunk?;
        total.add(l);
        match grad.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grad = Some(g),
        }
    }
    Ok((total, grad.unwrap_or_else(|| model.zeros_like())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for RetrainConfig {
    /// Full-scale schedule: 100 epochs, batches of 64, 512 tokens, Adam at 5e-5.
    fn default() -> Self {
        RetrainConfig {
            epochs: 100,
            batch_size: 64,
            max_len: 512,
            learning_rate: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len < 3 {
            return Err(Error::invalid("batch_size must be positive and max_len at least 3"));
        }
        if !(self.learning_rate > 0.0 && self.adam_epsilon > 0.0) {
            return Err(Error::invalid("learning_rate and adam_epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub labeled_positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlmModel,
    pub vocab: Vocab,
    pub history: Vec<EpochRecord>,
    pub retrain: Option<RetrainConfig>,
    pub masking: MaskingConfig,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    encoder: EncoderConfig,
    retrain: Option<RetrainConfig>,
    masking: MaskingConfig,
    steps: u64,
    seed: u64,
    num_params: usize,
}

impl Checkpoint {
    /// A freshly initialized model with no training history.
    pub fn init(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "encoder vocabulary {} does not match tokenizer vocabulary {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let model = MlmModel::init(config, &mut stream_rng(seed, 0))?;
        Ok(Checkpoint {
            model,
            vocab,
            history: Vec::new(),
            retrain: None,
            masking: MaskingConfig::default(),
            steps: 0,
            seed,
        })
    }

    /// Writes `params.bin`, `config.json`, `vocab.txt` and `history.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = dir.join("params.bin");
        let file = File::create(&params).map_err(|e| Error::io(&params, e))?;
        write_params(&self.model, BufWriter::new(file)).map_err(|e| Error::io(&params, e))?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            encoder: self.model.config().clone(),
            retrain: self.retrain.clone(),
            masking: self.masking,
            steps: self.steps,
            seed: self.seed,
            num_params: self.model.num_params(),
        };
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let mut history = String::from("epoch\tmean_loss\tbatches\tlabeled_positions\n");
        for r in &self.history {
            history.push_str(&format!("{}\t{:?}\t{}\t{}\n", r.epoch, r.mean_loss, r.batches, r.labeled_positions));
        }
        let hist_path = dir.join("history.tsv");
        std::fs::write(&hist_path, history).map_err(|e| Error::io(&hist_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", format!("unsupported format {}", meta.format)));
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let mut model = MlmModel::init(meta.encoder, &mut stream_rng(0, 0))?;
        let params = dir.join("params.bin");
        let file = File::open(&params).map_err(|e| Error::io(&params, e))?;
        read_params(&mut model, BufReader::new(file))?;
        let hist_path = dir.join("history.tsv");
        let hist = std::fs::read_to_string(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
        let mut history = Vec::new();
        for line in hist.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let parse_err = || Error::format("checkpoint history", line.to_string());
            if f.len() != 4 {
                return Err(parse_err());
            }
            history.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| parse_err())?,
                mean_loss: f[1].parse().map_err(|_| parse_err())?,
                batches: f[2].parse().map_err(|_| parse_err())?,
                labeled_positions: f[3].parse().map_err(|_| parse_err())?,
            });
        }
        Ok(Checkpoint {
            model,
            vocab,
            history,
            retrain: meta.retrain,
            masking: meta.masking,
            steps: meta.steps,
            seed: meta.seed,
        })
    }
}

fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<TokenSequence> {
    corpus
        .texts()
        .flat_map(|t| vocab.encode_chunks(t, max_len))
        .collect()
}

/// Further pre-trains `ckpt.model` on `corpus` and returns the updated checkpoint.
pub fn retrain(ckpt: &Checkpoint, corpus: &Corpus, cfg: &RetrainConfig, mcfg: &MaskingConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    mcfg.validate()?;
    let mut model = ckpt.model.clone();
    let max_len = cfg.max_len.min(model.config().max_positions);
    let sequences = encode_corpus(corpus, &ckpt.vocab, max_len);
    let vocab_size = ckpt.vocab.len();
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut history = ckpt.history.clone();
    let first_epoch = history.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE | epoch as u64));
        let mut mask_rng = stream_rng(cfg.seed, STREAM_MASK | epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut labeled = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| sequences[i].clone()).collect();
            let mb = mask_batch(&batch, vocab_size, mcfg, &mut mask_rng);
            let (loss, mut grad) = batch_gradient(&model, &mb)?;
            if loss.count == 0 {
                warn!("epoch {epoch} batch {b}: no masked positions, update skipped");
                continue;
            }
            let mean = loss.mean();
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    learning_rate: cfg.learning_rate,
                    loss: mean,
                });
            }
            grad.scale(1.0 / loss.count as f64);
            opt.update(&mut model, &grad, cfg.learning_rate);
            epoch_loss += mean;
            batches += 1;
            labeled += loss.count;
        }
        let mean_loss = if batches == 0 { 0.0 } else { epoch_loss / batches as f64 };
        info!("epoch {epoch}: mean MLM loss {mean_loss:.4} over {batches} batches");
        history.push(EpochRecord {
            epoch: first_epoch + epoch,
            mean_loss,
            batches,
            labeled_positions: labeled,
        });
    }

    Ok(Checkpoint {
        model,
        vocab: ckpt.vocab.clone(),
        history,
        retrain: Some(cfg.clone()),
        masking: *mcfg,
        steps: ckpt.steps + opt.steps(),
        seed: cfg.seed,
    })
}

/// `exp` of the mean cross-entropy over every masked position of `corpus`,
/// masked with a generator seeded from `seed`.
pub fn perplexity(model: &MlmModel, vocab: &Vocab, corpus: &Corpus, mcfg: &MaskingConfig, seed: u64, max_len: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity over an empty corpus"));
    }
    mcfg.validate()?;
    let max_len = max_len.min(model.config().max_positions);
    let sequences = encode_corpus(corpus, vocab, max_len);
    let mb = mask_batch(&sequences, vocab.len(), mcfg, &mut stream_rng(seed, STREAM_MASK));
    let sums: Vec<Result<LossSum>> = (0..sequences.len())
        .into_par_iter()
        .map(|i| {
            let positions = &mb.masked_positions[i];
            let mut sum = LossSum::default();
            if positions.is_empty() {
                return Ok(sum);
            }
            let logits = model.logits_at(&mb.input_ids[i], positions)?;
            for (r, &p) in positions.iter().enumerate() {
                let gold = mb.labels[i][p].unwrap() as usize;
                sum.add(LossSum {
                    total: -log_softmax(logits.row(r).as_slice().unwrap())[gold],
                    count: 1,
                });
            }
            Ok(sum)
        })
        .collect();
    let mut total = LossSum::default();
    for s in sums {
        total.add(s?);
    }
    if total.count == 0 {
        return Err(Error::invalid("no positions were masked in the evaluation corpus"));
    }
    Ok(total.mean().exp())
}
