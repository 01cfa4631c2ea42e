//! Tagged back-translation, iterative joint training, ensemble and R2L
//! distillation, and multilingual pretraining with direction tokens.

use crate::corpus::{consumer_part, read_parallel_tsv, write_parallel_tsv, Direction, MonoCorpus, Origin, ParallelCorpus, Provenance, Sampling, Sentence};
use crate::error::{Error, Result};
use crate::eval::DevScorer;
use crate::model::{beam_decode_batch, BeamOptions, Checkpoint, Model, ModelConfig};
use crate::textkit::{direction_token, Vocabulary, BT_TAG};
use crate::training::{train, TrainPlan};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Decodes `sources` with one model or an ensemble.
pub fn translate(models: &[&Checkpoint], sources: &[Sentence], opts: &BeamOptions) -> Result<Vec<Sentence>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let nets = models.iter().map(|c| Model::new(c)).collect::<Result<Vec<Model>>>()?;
    let refs: Vec<&Model> = nets.iter().collect();
    beam_decode_batch(&refs, sources, opts)
}

fn ensemble_id(models: &[&Checkpoint]) -> String {
    let ids: Vec<String> = models.iter().map(|c| c.id()).collect();
    if ids.len() == 1 {
        ids.into_iter().next().unwrap_or_default()
    } else {
        format!("ens({})", ids.join("+"))
    }
}

/// Synthetic sources for target-side monolingual text. Pairs follow mono
/// order; with `tag` every synthetic source starts with the BT tag.
pub fn back_translate(t2s: &Checkpoint, mono_tgt: &MonoCorpus, source_language: &str, opts: &BeamOptions, tag: bool, stage: &str) -> Result<ParallelCorpus> {
    back_translate_with(|s| translate(&[t2s], s, opts), &t2s.id(), mono_tgt, source_language, tag, stage)
}

/// [`back_translate`] over any target-to-source translator.
pub fn back_translate_with<F>(translator: F, generator: &str, mono_tgt: &MonoCorpus, source_language: &str, tag: bool, stage: &str) -> Result<ParallelCorpus>
where
    F: FnOnce(&[Sentence]) -> Result<Vec<Sentence>>,
{
    let direction = Direction::new(source_language, &mono_tgt.language);
    if mono_tgt.is_empty() {
        return Ok(ParallelCorpus::empty(direction));
    }
    let sources = translator(&mono_tgt.sentences)?;
    let pairs = sources
        .into_iter()
        .zip(&mono_tgt.sentences)
        .map(|(mut s, t)| {
            if tag {
                s.insert(0, BT_TAG);
            }
            (s, t.clone())
        })
        .collect();
    ParallelCorpus::new(direction, pairs, Origin::synthetic(Provenance::BackTranslated, generator, mono_tgt.shard_id, stage))
}

/// Index and dev BLEU of the best checkpoint; ties go to the later one.
pub fn best_checkpoint(run: &[Checkpoint], dev: &ParallelCorpus, scorer: &DevScorer, opts: &BeamOptions) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in run.iter().enumerate() {
        let b = scorer.score(&[c], dev, opts)?.bleu;
        if best.map_or(true, |(_, x)| b >= x) {
            best = Some((i, b));
        }
    }
    best.ok_or_else(|| Error::invalid("no checkpoints to choose from"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainPlan {
    pub max_iters: usize,
    /// Stop once neither direction gains more than this much dev BLEU.
    pub convergence: f64,
    pub tag: bool,
    pub beam: usize,
    pub train: TrainPlan,
}

impl Default for JointTrainPlan {
    fn default() -> Self {
        JointTrainPlan { max_iters: 3, convergence: 0.2, tag: true, beam: 4, train: TrainPlan::default() }
    }
}

/// Inputs for one source/target model pair. Corpora are unprefixed;
/// `prefix` holds the direction token (if any) put in front of s2t and t2s sources.
#[derive(Clone, Debug)]
pub struct JointData {
    /// Source-to-target natural data.
    pub natural: ParallelCorpus,
    pub mono_src: MonoCorpus,
    pub mono_tgt: MonoCorpus,
    /// Source-to-target dev set.
    pub dev: ParallelCorpus,
    pub prefix: [Option<u32>; 2],
}

pub fn prefixed(token: Option<u32>, s: &[u32]) -> Sentence {
    token.into_iter().chain(s.iter().copied()).collect()
}

/// Copy of `corpus` with `token` in front of every source.
pub fn prefix_sources(corpus: &ParallelCorpus, token: Option<u32>) -> ParallelCorpus {
    match token {
        None => corpus.clone(),
        Some(_) => corpus.with_pairs(corpus.pairs().iter().map(|(s, t)| (prefixed(token, s), t.clone())).collect()),
    }
}

/// Back-translation where the decoder input gets `input_prefix` and the
/// synthetic source (after its tag) gets `output_prefix` in front.
fn back_translate_prefixed(
    t2s: &Checkpoint,
    mono: &MonoCorpus,
    language: &str,
    opts: &BeamOptions,
    tag: bool,
    stage: &str,
    input_prefix: Option<u32>,
    output_prefix: Option<u32>,
) -> Result<ParallelCorpus> {
    let translator = |xs: &[Sentence]| {
        let inputs: Vec<Sentence> = xs.iter().map(|x| prefixed(input_prefix, x)).collect();
        translate(&[t2s], &inputs, opts)
    };
    let c = back_translate_with(translator, &t2s.id(), mono, language, tag, stage)?;
    Ok(prefix_sources(&c, output_prefix))
}

#[derive(Clone, Debug)]
pub struct JointTrainRound {
    pub iteration: usize,
    /// Best dev checkpoint of the round in each direction.
    pub s2t: Checkpoint,
    pub t2s: Checkpoint,
    /// Every checkpoint the round emitted (empty at round 0).
    pub s2t_run: Vec<Checkpoint>,
    pub t2s_run: Vec<Checkpoint>,
    /// Training data for s2t (natural plus back-translated), empty at round 0.
    pub s2t_data: Option<ParallelCorpus>,
    pub t2s_data: Option<ParallelCorpus>,
    pub s2t_bleu: f64,
    pub t2s_bleu: f64,
}

/// Alternating back-translation: each round both directions translate fresh
/// monolingual data for the other and continue training from their last
/// checkpoint on natural plus that round's synthetic data.
pub fn joint_train(
    s2t0: &Checkpoint,
    t2s0: &Checkpoint,
    data: &JointData,
    plan: &JointTrainPlan,
    scorer: &DevScorer,
    seed: u64,
) -> Result<Vec<JointTrainRound>> {
    let opts = BeamOptions::with_beam(plan.beam);
    let [p_s2t, p_t2s] = data.prefix;
    let dev = prefix_sources(&data.dev, p_s2t);
    let dev_rev = prefix_sources(&data.dev.swapped(), p_t2s);
    let natural = prefix_sources(&data.natural, p_s2t);
    let natural_rev = prefix_sources(&data.natural.swapped(), p_t2s);
    let (src_lang, tgt_lang) = (data.natural.direction.source.clone(), data.natural.direction.target.clone());
    let mut rounds = vec![JointTrainRound {
        iteration: 0,
        s2t: s2t0.clone(),
        t2s: t2s0.clone(),
        s2t_run: Vec::new(),
        t2s_run: Vec::new(),
        s2t_data: None,
        t2s_data: None,
        s2t_bleu: scorer.score(&[s2t0], &dev, &opts)?.bleu,
        t2s_bleu: scorer.score(&[t2s0], &dev_rev, &opts)?.bleu,
    }];
    for it in 1..=plan.max_iters {
        let prev = rounds.last().expect("round 0 exists");
        let stage = format!("joint_train.{it}");
        let synth_s2t = back_translate_prefixed(&prev.t2s, &data.mono_tgt, &src_lang, &opts, plan.tag, &stage, p_t2s, p_s2t)?;
        let synth_t2s = back_translate_prefixed(&prev.s2t, &data.mono_src, &tgt_lang, &opts, plan.tag, &stage, p_s2t, p_t2s)?;
        let s2t_data = ParallelCorpus::concat([&natural, &synth_s2t])?;
        let t2s_data = ParallelCorpus::concat([&natural_rev, &synth_t2s])?;
        let mut p = plan.train.clone();
        p.seed = crate::seed::derive(seed, &format!("{stage}.s2t"));
        let s2t_run = train(&prev.s2t.config, Some(&prev.s2t), std::slice::from_ref(&s2t_data), &p)?.checkpoints;
        p.seed = crate::seed::derive(seed, &format!("{stage}.t2s"));
        let t2s_run = train(&prev.t2s.config, Some(&prev.t2s), std::slice::from_ref(&t2s_data), &p)?.checkpoints;
        let (s2t, s2t_bleu) = best_checkpoint(&s2t_run, &dev, scorer, &opts)?;
        let (t2s, t2s_bleu) = best_checkpoint(&t2s_run, &dev_rev, scorer, &opts)?;
        let round = JointTrainRound {
            iteration: it,
            s2t: s2t_run[s2t].clone(),
            t2s: t2s_run[t2s].clone(),
            s2t_run,
            t2s_run,
            s2t_data: Some(s2t_data),
            t2s_data: Some(t2s_data),
            s2t_bleu,
            t2s_bleu,
        };
        let gain = (round.s2t_bleu - prev.s2t_bleu).max(round.t2s_bleu - prev.t2s_bleu);
        log::info!("joint training round {it}: {:.2} / {:.2}", round.s2t_bleu, round.t2s_bleu);
        rounds.push(round);
        if gain < plan.convergence {
            break;
        }
    }
    Ok(rounds)
}

/// Partition of single models into teacher groups, one R2L teacher per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub groups: Vec<Vec<usize>>,
    pub students_per_group: usize,
}

impl DistillPlan {
    /// `models` consecutive indices split into `k` equal groups.
    pub fn new(models: usize, k: usize, students_per_group: usize) -> Result<Self> {
        if k == 0 || models == 0 || models % k != 0 {
            return Err(Error::invalid(format!("{models} models cannot form {k} equal groups")));
        }
        if students_per_group == 0 {
            return Err(Error::invalid("each group needs at least one student"));
        }
        let g = models / k;
        Ok(DistillPlan { groups: (0..k).map(|i| (i * g..(i + 1) * g).collect()).collect(), students_per_group })
    }

    pub fn students(&self) -> usize {
        self.groups.len() * self.students_per_group
    }
}

/// Student corpora: for each student, its shard translated by the group's
/// ensemble and by the group's R2L teacher, concatenated 1:1.
pub fn distill_generate(
    plan: &DistillPlan,
    models: &[Checkpoint],
    r2l_teachers: &[Checkpoint],
    mono_src: &[MonoCorpus],
    target_language: &str,
    opts: &BeamOptions,
) -> Result<Vec<ParallelCorpus>> {
    let n: usize = plan.groups.iter().map(Vec::len).sum();
    if n != models.len() || plan.groups.iter().flatten().any(|&i| i >= models.len()) {
        return Err(Error::invalid(format!("groups cover {n} models but {} were given", models.len())));
    }
    if r2l_teachers.len() != plan.groups.len() {
        return Err(Error::invalid(format!("{} R2L teachers for {} groups", r2l_teachers.len(), plan.groups.len())));
    }
    if mono_src.is_empty() {
        return Err(Error::EmptyCorpus("distillation shards".into()));
    }
    let mut out = Vec::with_capacity(plan.students());
    for (g, group) in plan.groups.iter().enumerate() {
        let members: Vec<&Checkpoint> = group.iter().map(|&i| &models[i]).collect();
        let r2l = &r2l_teachers[g];
        for j in 0..plan.students_per_group {
            let shard = &mono_src[consumer_part(g * plan.students_per_group + j, mono_src.len())];
            let direction = Direction::new(&shard.language, target_language);
            let ens = translate(&members, &shard.sentences, opts)?;
            let rev = translate(&[r2l], &shard.sentences, opts)?;
            let pairs = |hyps: Vec<Sentence>| shard.sentences.iter().cloned().zip(hyps).collect::<Vec<_>>();
            let stage = format!("distill.g{g}");
            let a = ParallelCorpus::new(direction.clone(), pairs(ens), Origin::synthetic(Provenance::DistilledEnsemble, &ensemble_id(&members), shard.shard_id, &stage))?;
            let b = ParallelCorpus::new(direction, pairs(rev), Origin::synthetic(Provenance::DistilledR2l, &r2l.id(), shard.shard_id, &stage))?;
            out.push(ParallelCorpus::concat([&a, &b])?);
        }
    }
    Ok(out)
}

/// Trains a student on distilled data only.
pub fn distill_student(cfg: &ModelConfig, kd: &ParallelCorpus, plan: &TrainPlan, init: Option<&Checkpoint>) -> Result<Checkpoint> {
    if let Some(span) = kd.spans().iter().find(|s| !matches!(s.origin.provenance, Provenance::DistilledEnsemble | Provenance::DistilledR2l)) {
        return Err(Error::NaturalDataPresent(format!("{:?} data from {}", span.origin.provenance, span.origin.stage.as_deref().unwrap_or("input"))));
    }
    Ok(train(cfg, init, std::slice::from_ref(kd), plan)?.last().clone())
}

pub fn direction_id(vocab: &Vocabulary, target_language: &str) -> Result<u32> {
    let token = direction_token(target_language);
    vocab.special_id(&token).map_err(|_| Error::UnknownSpecial(token))
}

/// Every source prefixed with the target-language direction token.
pub fn with_direction_token(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<ParallelCorpus> {
    Ok(prefix_sources(corpus, Some(direction_id(vocab, &corpus.direction.target)?)))
}

fn check_ids(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Result<()> {
    let v = vocab.len() as u32;
    if corpus.pairs().iter().flat_map(|(s, t)| s.iter().chain(t)).any(|&id| id >= v) {
        return Err(Error::VocabMismatch(format!("{} data uses ids outside the shared vocabulary", corpus.direction)));
    }
    Ok(())
}

/// One model over all directions, each source prefixed with its direction token.
pub fn mrasp_pretrain(corpora: &[ParallelCorpus], vocab: &Vocabulary, cfg: &ModelConfig, plan: &TrainPlan) -> Result<Checkpoint> {
    if corpora.is_empty() {
        return Err(Error::EmptyCorpus("pretraining corpora".into()));
    }
    if cfg.vocab_size != vocab.len() || cfg.num_specials != vocab.num_specials() {
        return Err(Error::VocabMismatch(format!(
            "model has {} ids and {} specials, shared vocabulary {} and {}",
            cfg.vocab_size,
            cfg.num_specials,
            vocab.len(),
            vocab.num_specials()
        )));
    }
    let multi = Direction::new("multi", "multi");
    let mut tagged = Vec::with_capacity(corpora.len());
    for c in corpora {
        check_ids(c, vocab)?;
        let t = with_direction_token(c, vocab)?;
        tagged.push(ParallelCorpus::new(multi.clone(), t.pairs().to_vec(), Origin::natural())?);
    }
    let data = ParallelCorpus::concat(tagged.iter())?;
    let mut ckpt = train(cfg, None, &[data], plan)?.last().clone();
    let dirs: Vec<String> = corpora.iter().map(|c| c.direction.to_string()).collect();
    ckpt.meta.insert("pretrain_directions".into(), dirs.join(","));
    Ok(ckpt)
}

/// Continues a pretrained model on one direction, optionally resampled.
pub fn mrasp_finetune(pretrained: &Checkpoint, pair: &ParallelCorpus, sampling: Sampling, vocab: &Vocabulary, plan: &TrainPlan) -> Result<Checkpoint> {
    check_ids(pair, vocab)?;
    let data = sampling.apply(&with_direction_token(pair, vocab)?, crate::seed::derive(plan.seed, "sampling"))?;
    let mut ckpt = train(&pretrained.config, Some(pretrained), &[data], plan)?.last().clone();
    ckpt.meta.insert("pretrain_id".into(), pretrained.id());
    ckpt.meta.insert("sampling".into(), sampling.label());
    ckpt.step += pretrained.step;
    Ok(ckpt)
}

/// What a synthetic corpus file was produced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub direction: String,
    pub pairs: usize,
    pub tag: bool,
    pub beam: usize,
    pub spans: Vec<SidecarSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarSpan {
    pub len: usize,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard: Option<usize>,
}

impl Sidecar {
    pub fn describe(corpus: &ParallelCorpus, stage: &str, tag: bool, beam: usize) -> Self {
        Sidecar {
            stage: stage.into(),
            direction: corpus.direction.to_string(),
            pairs: corpus.len(),
            tag,
            beam,
            spans: corpus
                .spans()
                .iter()
                .map(|s| SidecarSpan {
                    len: s.len,
                    provenance: s.origin.provenance,
                    stage: s.origin.stage.clone(),
                    generator: s.origin.generator.clone(),
                    shard: s.origin.shard,
                })
                .collect(),
        }
    }
}

fn ids_line(s: &[u32]) -> String {
    s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes `path` as source/target text lines, plus `path.ids` (token ids)
/// and `path.prov` (provenance) beside it.
pub fn write_corpus(path: &Path, corpus: &ParallelCorpus, vocab: &Vocabulary, sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text: Vec<(String, String)> = corpus.pairs().iter().map(|(s, t)| (vocab.decode(s), vocab.decode(t))).collect();
    write_parallel_tsv(path, &text)?;
    let ids: Vec<(String, String)> = corpus.pairs().iter().map(|(s, t)| (ids_line(s), ids_line(t))).collect();
    write_parallel_tsv(&path.with_extension("ids"), &ids)?;
    let side = path.with_extension("prov");
    let body = toml::to_string(sidecar).map_err(|e| Error::format("sidecar", e.to_string()))?;
    fs::write(&side, body).map_err(|e| Error::io(&side, e))
}

/// Reads back a corpus written by [`write_corpus`], provenance included.
pub fn read_corpus(path: &Path) -> Result<ParallelCorpus> {
    let side = path.with_extension("prov");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::format("sidecar", e.to_string()))?;
    let parse = |s: &str| -> Result<Sentence> {
        s.split_whitespace().map(|x| x.parse().map_err(|_| Error::format("corpus ids", format!("bad id `{x}`")))).collect()
    };
    let pairs = read_parallel_tsv(&path.with_extension("ids"))?
        .into_iter()
        .map(|(s, t)| Ok((parse(&s)?, parse(&t)?)))
        .collect::<Result<Vec<_>>>()?;
    if pairs.len() != sidecar.pairs || sidecar.spans.iter().map(|s| s.len).sum::<usize>() != pairs.len() {
        return Err(Error::format("corpus", format!("{} disagrees with its sidecar", path.display())));
    }
    let (src, tgt) = sidecar.direction.split_once('-').ok_or_else(|| Error::format("sidecar", "bad direction"))?;
    let direction = Direction::new(src, tgt);
    if pairs.is_empty() {
        return Ok(ParallelCorpus::empty(direction));
    }
    let mut parts = Vec::with_capacity(sidecar.spans.len());
    let mut at = 0;
    for span in &sidecar.spans {
        let origin = Origin { provenance: span.provenance, generator: span.generator.clone(), shard: span.shard, stage: span.stage.clone() };
        parts.push(ParallelCorpus::new(direction.clone(), pairs[at..at + span.len].to_vec(), origin)?);
        at += span.len;
    }
    ParallelCorpus::concat(parts.iter())
}

#[cfg(test)]
mod tests;
