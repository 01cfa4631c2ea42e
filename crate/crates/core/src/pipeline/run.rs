//! Stage execution with ledger-based skipping.

use super::ledger::{write_atomic, Artifact, Ledger, StageRecord, StageStatus};
use super::manifest::{Manifest, StudentInit, SyntheticData, DIRECTIONS};
use super::report::{Report, ReportRow};
use crate::corpus::{read_lines, read_parallel_tsv, split_disjoint, Direction, MonoCorpus, ParallelCorpus, SyntheticTask, SyntheticTaskSpec};
use crate::ensemble::{average_checkpoints, random_ensemble_search, select_final, topk_checkpoints, FinalCandidate, FinalKind};
use crate::error::{Error, Result};
use crate::eval::{DevScorer, MAX_ORDER};
use crate::model::{BeamOptions, Checkpoint, TargetOrder};
use crate::synthesis::{
    best_checkpoint, direction_id, distill_generate, joint_train, mrasp_finetune, mrasp_pretrain, prefix_sources, read_corpus, write_corpus, DistillPlan,
    JointData, JointTrainPlan, Sidecar,
};
use crate::textkit::{learn_bpe, BpeOptions, Vocabulary};
use crate::training::{fine_tune, train, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run only this stage; earlier stages must already be done.
    pub stage: Option<String>,
    /// Worker threads; `0` uses every core.
    pub jobs: usize,
    /// Allow continuing a ledger that shows an interrupted stage.
    pub resume: bool,
    pub seed_override: Option<u64>,
}

#[derive(Debug)]
pub enum RunError {
    Validation(Vec<String>),
    Stage { stage: String, error: Error },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(v) => write!(f, "manifest is not runnable:\n  {}", v.join("\n  ")),
            RunError::Stage { stage, error } => write!(f, "stage `{stage}` failed: {error}"),
        }
    }
}

impl std::error::Error for RunError {}

/// Encoded experiment data. Corpora are unprefixed; `prefix[d]` is the
/// direction token put in front of every source for direction `d`.
#[derive(Clone, Debug)]
pub struct Data {
    pub vocab: Vocabulary,
    pub pair: (String, String),
    pub natural: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub mono_src: MonoCorpus,
    pub mono_tgt: MonoCorpus,
    pub indomain: Option<ParallelCorpus>,
    /// Extra pretraining pairs, one corpus per direction.
    pub auxiliary: Vec<ParallelCorpus>,
    pub prefix: [Option<u32>; 2],
}

fn oriented(c: &ParallelCorpus, d: usize) -> ParallelCorpus {
    if d == 0 {
        c.clone()
    } else {
        c.swapped()
    }
}

impl Data {
    pub fn natural(&self, d: usize) -> ParallelCorpus {
        prefix_sources(&oriented(&self.natural, d), self.prefix[d])
    }

    pub fn dev(&self, d: usize) -> ParallelCorpus {
        prefix_sources(&oriented(&self.dev, d), self.prefix[d])
    }

    pub fn indomain(&self, d: usize) -> Option<ParallelCorpus> {
        self.indomain.as_ref().map(|c| prefix_sources(&oriented(c, d), self.prefix[d]))
    }

    /// Source-side monolingual text of direction `d`, unprefixed.
    pub fn mono(&self, d: usize) -> &MonoCorpus {
        if d == 0 {
            &self.mono_src
        } else {
            &self.mono_tgt
        }
    }
}

fn synthetic_task(s: &SyntheticData, vocab: &Vocabulary) -> Result<SyntheticTask> {
    SyntheticTask::with_vocabulary(s.task.clone(), vocab.clone())
}

fn clean(spec: &SyntheticTaskSpec, domain: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec { noise_rate: 0.0, domain, ..spec.clone() }
}

fn languages(m: &Manifest) -> Vec<String> {
    let mut langs = Vec::new();
    let mut push = |l: &str| {
        if !langs.iter().any(|x| x == l) {
            langs.push(l.to_string());
        }
    };
    if let Some(s) = &m.data.synthetic {
        push(&s.task.source_language);
        push(&s.task.target_language);
    }
    if let Some(f) = &m.data.files {
        push(&f.source_language);
        push(&f.target_language);
    }
    if let Some(mr) = &m.mrasp {
        for a in &mr.auxiliary {
            push(&a.task.source_language);
            push(&a.task.target_language);
        }
    }
    langs
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Builds the vocabulary and encodes every corpus. File paths are relative to `base`.
pub fn prepare_data(m: &Manifest, base: &Path) -> Result<Data> {
    let mrasp = m.has_stage("mrasp");
    let direction_languages = if mrasp { languages(m) } else { Vec::new() };
    let aux_specs: Vec<&SyntheticData> = m.mrasp.iter().filter(|_| mrasp).flat_map(|x| x.auxiliary.iter()).collect();
    let mut data = if let Some(s) = &m.data.synthetic {
        let mut specs: Vec<&SyntheticTaskSpec> = vec![&s.task];
        specs.extend(aux_specs.iter().map(|a| &a.task));
        let vocab = SyntheticTask::lexicon_vocabulary(&specs, &direction_languages)?;
        let task = synthetic_task(s, &vocab)?;
        let (natural, mono_src, mono_tgt) = task.generate(s.parallel, s.mono_src, s.mono_tgt);
        let clean_task = SyntheticTask::with_vocabulary(clean(&s.task, s.dev_domain), vocab.clone())?;
        let dev = clean_task.sample_parallel(s.dev, "dev");
        let indomain = (s.indomain > 0).then(|| clean_task.sample_parallel(s.indomain, "indomain"));
        let mut auxiliary = Vec::new();
        for a in &aux_specs {
            let c = synthetic_task(a, &vocab)?.sample_parallel(a.parallel, "parallel");
            auxiliary.push(c.swapped());
            auxiliary.insert(auxiliary.len() - 1, c);
        }
        Data {
            vocab,
            pair: (s.task.source_language.clone(), s.task.target_language.clone()),
            natural,
            dev,
            mono_src,
            mono_tgt,
            indomain,
            auxiliary,
            prefix: [None, None],
        }
    } else if let Some(f) = &m.data.files {
        let parallel = read_parallel_tsv(&resolve(base, &f.parallel))?;
        let dev = read_parallel_tsv(&resolve(base, &f.dev))?;
        let indomain = f.indomain.as_ref().map(|p| read_parallel_tsv(&resolve(base, p))).transpose()?;
        let mono_src = read_lines(&resolve(base, &f.mono_src))?;
        let mono_tgt = read_lines(&resolve(base, &f.mono_tgt))?;
        let src_side: Vec<String> = parallel.iter().map(|(s, _)| s.clone()).chain(mono_src.iter().cloned()).collect();
        let tgt_side: Vec<String> = parallel.iter().map(|(_, t)| t.clone()).chain(mono_tgt.iter().cloned()).collect();
        let opts = BpeOptions {
            merges: m.vocab.merges,
            min_frequency: m.vocab.min_frequency,
            upsample_low_resource: m.vocab.upsample_low_resource,
            direction_languages,
            ..Default::default()
        };
        let vocab = learn_bpe(&[src_side, tgt_side], &opts)?;
        let direction = Direction::new(&f.source_language, &f.target_language);
        let encode_pairs = |pairs: &[(String, String)]| -> Result<ParallelCorpus> {
            let ids = pairs
                .iter()
                .map(|(s, t)| (vocab.encode(s), vocab.encode(t)))
                .filter(|(s, t)| !s.is_empty() && !t.is_empty())
                .collect();
            ParallelCorpus::natural(direction.clone(), ids)
        };
        let encode_mono = |lang: &str, lines: &[String]| {
            MonoCorpus::new(lang, lines.iter().map(|l| vocab.encode(l)).filter(|s| !s.is_empty()).collect())
        };
        Data {
            natural: encode_pairs(&parallel)?,
            dev: encode_pairs(&dev)?,
            indomain: indomain.as_deref().map(encode_pairs).transpose()?,
            mono_src: encode_mono(&f.source_language, &mono_src),
            mono_tgt: encode_mono(&f.target_language, &mono_tgt),
            pair: (f.source_language.clone(), f.target_language.clone()),
            auxiliary: Vec::new(),
            prefix: [None, None],
            vocab,
        }
    } else {
        return Err(Error::invalid("manifest has no data section"));
    };
    if data.natural.is_empty() || data.dev.is_empty() {
        return Err(Error::EmptyCorpus("training or dev data".into()));
    }
    if mrasp {
        data.prefix = [Some(direction_id(&data.vocab, &data.pair.1)?), Some(direction_id(&data.vocab, &data.pair.0)?)];
    }
    Ok(data)
}

/// One trained model in one direction, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    model: String,
    direction: String,
    /// `model`, `student`, `finetuned`, `r2l`, `pretrain` or `average`.
    role: String,
    checkpoints: Vec<String>,
    best: usize,
    best_bleu: f64,
    /// Training corpus of the run, when it was written out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corpus: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StageOutput {
    #[serde(default)]
    runs: Vec<RunRecord>,
    #[serde(default)]
    rows: Vec<ReportRow>,
    /// Every file the stage wrote, relative to the experiment directory.
    #[serde(default)]
    files: Vec<String>,
}

const CURRENT_ROLES: [&str; 3] = ["model", "student", "finetuned"];

struct Ctx<'a> {
    m: &'a Manifest,
    root: &'a Path,
    data: &'a Data,
    scorer: DevScorer,
    seed: u64,
}

fn dir_index(name: &str) -> usize {
    DIRECTIONS.iter().position(|d| *d == name).unwrap_or(0)
}

fn collect<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

fn best_row(system: &str, direction: &str, runs: &[&RunRecord]) -> Option<ReportRow> {
    let best = runs.iter().filter(|r| r.direction == direction).fold(None::<&RunRecord>, |b, r| match b {
        Some(b) if b.best_bleu >= r.best_bleu => Some(b),
        _ => Some(r),
    })?;
    Some(ReportRow { system: system.into(), direction: direction.into(), bleu: best.best_bleu, detail: best.model.clone() })
}

impl Ctx<'_> {
    fn beam(&self) -> BeamOptions {
        BeamOptions::with_beam(self.m.eval.beam)
    }

    fn seed_for(&self, label: &str) -> u64 {
        crate::seed::derive(self.seed, label)
    }

    fn load(&self, rel: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.root.join(rel))
    }

    fn best_of(&self, r: &RunRecord) -> Result<Checkpoint> {
        self.load(&r.checkpoints[r.best])
    }

    fn run_of(&self, r: &RunRecord) -> Result<Vec<Checkpoint>> {
        r.checkpoints.iter().map(|p| self.load(p)).collect()
    }

    /// Saves the run's checkpoints (with ids naming their place on disk), scores them and picks the best.
    #[allow(clippy::too_many_arguments)]
    fn record(&self, stage: &str, model: &str, d: usize, role: &str, mut run: Vec<Checkpoint>, log: Option<&TrainOutcome>, dev: &ParallelCorpus) -> Result<RunRecord> {
        let dir = format!("models/{stage}/{model}.{}", DIRECTIONS[d]);
        let mut paths = Vec::with_capacity(run.len());
        for c in run.iter_mut() {
            let rel = format!("{dir}/step_{}.ckpt", c.step);
            c.meta.insert("id".into(), format!("{stage}/{model}.{}/step_{}", DIRECTIONS[d], c.step));
            write_atomic(&self.root.join(&rel), &c.to_bytes())?;
            paths.push(rel);
        }
        if let Some(out) = log {
            let rel = format!("{dir}/train.log");
            write_atomic(&self.root.join(&rel), out.log.to_text().as_bytes())?;
        }
        let (best, best_bleu) = best_checkpoint(&run, dev, &self.scorer, &self.beam())?;
        Ok(RunRecord { model: model.into(), direction: DIRECTIONS[d].into(), role: role.into(), checkpoints: paths, best, best_bleu, corpus: None })
    }

    fn write_corpus(&self, rel: &str, corpus: &ParallelCorpus, stage: &str, tag: bool, beam: usize) -> Result<Vec<String>> {
        write_corpus(&self.root.join(rel), corpus, &self.data.vocab, &Sidecar::describe(corpus, stage, tag, beam))?;
        let p = Path::new(rel);
        Ok(vec![rel.to_string(), p.with_extension("ids").to_string_lossy().into_owned(), p.with_extension("prov").to_string_lossy().into_owned()])
    }
}

/// The latest stage's models for direction `d`.
fn current<'a>(done: &'a [(String, StageOutput)], d: &str) -> Vec<&'a RunRecord> {
    for (_, out) in done.iter().rev() {
        let runs: Vec<&RunRecord> = out.runs.iter().filter(|r| r.direction == d && CURRENT_ROLES.contains(&r.role.as_str())).collect();
        if !runs.is_empty() {
            return runs;
        }
    }
    Vec::new()
}

fn stage_baseline(ctx: &Ctx) -> Result<StageOutput> {
    let m = ctx.m;
    let jobs: Vec<(usize, usize)> = (0..m.models.len()).flat_map(|i| (0..2).map(move |d| (i, d))).collect();
    let runs = collect(crate::par::map(&jobs, |&(i, d)| {
        let entry = &m.models[i];
        let label = format!("baseline.{}.{}", entry.name, DIRECTIONS[d]);
        let seed = ctx.seed_for(&label);
        let data = entry.sampling.apply(&ctx.data.natural(d), crate::seed::derive(seed, "sampling"))?;
        let cfg = m.model_config(entry, ctx.data.vocab.len(), ctx.data.vocab.num_specials())?;
        let mut plan = m.plan(m.baseline.steps);
        plan.seed = seed;
        let out = train(&cfg, None, &[data], &plan)?;
        log::info!("trained {label}");
        ctx.record("baseline", &entry.name, d, "model", out.checkpoints.clone(), Some(&out), &ctx.data.dev(d))
    }))?;
    let refs: Vec<&RunRecord> = runs.iter().collect();
    let rows = DIRECTIONS.iter().filter_map(|d| best_row("Baseline", d, &refs)).collect();
    Ok(StageOutput { runs, rows, files: Vec::new() })
}

fn stage_mrasp(ctx: &Ctx, done: &[(String, StageOutput)]) -> Result<StageOutput> {
    let m = ctx.m;
    let sec = m.mrasp.as_ref().ok_or_else(|| Error::invalid("missing [mrasp] section"))?;
    let data = ctx.data;
    let mut corpora = vec![data.natural.clone(), data.natural.swapped()];
    corpora.extend(data.auxiliary.iter().cloned());
    let probe = super::manifest::RosterEntry { name: "pretrain".into(), preset: sec.preset.clone(), sampling: crate::corpus::Sampling::None };
    let cfg = m.model_config(&probe, data.vocab.len(), data.vocab.num_specials())?;
    let mut plan = m.plan(Some(sec.steps));
    plan.seed = ctx.seed_for("mrasp.pretrain");
    let pre = mrasp_pretrain(&corpora, &data.vocab, &cfg, &plan)?;
    let pre_rec = ctx.record("mrasp", "pretrain", 0, "pretrain", vec![pre], None, &data.dev(0))?;
    let pre = ctx.best_of(&pre_rec)?;
    let mut jobs = Vec::new();
    for d in 0..2 {
        for r in current(done, DIRECTIONS[d]) {
            jobs.push((d, r.clone()));
        }
    }
    let results = collect(crate::par::map(&jobs, |(d, base)| -> Result<(RunRecord, Option<RunRecord>)> {
        let entry = m.models.iter().find(|e| e.name == base.model).ok_or_else(|| Error::invalid(format!("unknown model {}", base.model)))?;
        if entry.preset != sec.preset {
            return Ok((base.clone(), None));
        }
        let mut plan = m.plan(sec.finetune_steps.or(m.baseline.steps));
        plan.seed = ctx.seed_for(&format!("mrasp.{}.{}", entry.name, DIRECTIONS[*d]));
        let ft = mrasp_finetune(&pre, &oriented(&data.natural, *d), entry.sampling, &data.vocab, &plan)?;
        let rec = ctx.record("mrasp", &entry.name, *d, "model", vec![ft], None, &data.dev(*d))?;
        let chosen = if rec.best_bleu > base.best_bleu { rec.clone() } else { base.clone() };
        Ok((chosen, Some(rec)))
    }))?;
    let tuned: Vec<RunRecord> = results.iter().filter_map(|(_, t)| t.clone()).collect();
    let tuned_refs: Vec<&RunRecord> = tuned.iter().collect();
    let rows = DIRECTIONS.iter().filter_map(|d| best_row("mRASP", d, &tuned_refs)).collect();
    let mut runs = vec![pre_rec];
    runs.extend(results.into_iter().map(|(chosen, _)| chosen));
    Ok(StageOutput { runs, rows, files: Vec::new() })
}

fn stage_joint_train(ctx: &Ctx, done: &[(String, StageOutput)]) -> Result<StageOutput> {
    let m = ctx.m;
    let sec = &m.joint_train;
    let n = m.models.len();
    let shards = sec.shards.unwrap_or(n);
    let src_shards = split_disjoint(&ctx.data.mono_src, shards, ctx.seed_for("joint_train.shards.src"))?;
    let tgt_shards = split_disjoint(&ctx.data.mono_tgt, shards, ctx.seed_for("joint_train.shards.tgt"))?;
    let (s2t_runs, t2s_runs) = (current(done, "s2t"), current(done, "t2s"));
    let plan = JointTrainPlan { max_iters: sec.max_iters, convergence: sec.convergence, tag: sec.tag, beam: sec.beam, train: m.plan(sec.steps) };
    let idx: Vec<usize> = (0..n).collect();
    let per_model = collect(crate::par::map(&idx, |&i| -> Result<(Vec<RunRecord>, Vec<(usize, f64, f64)>, Vec<String>)> {
        let entry = &m.models[i];
        let find = |runs: &[&RunRecord]| runs.iter().find(|r| r.model == entry.name).map(|r| (*r).clone()).ok_or_else(|| Error::invalid(format!("no model {}", entry.name)));
        let (s2t_base, t2s_base) = (find(&s2t_runs)?, find(&t2s_runs)?);
        let label = format!("joint_train.{}", entry.name);
        let seed = ctx.seed_for(&label);
        let natural = entry.sampling.apply(&ctx.data.natural, crate::seed::derive(seed, "sampling"))?;
        let part = crate::corpus::consumer_part(i, shards);
        let jd = JointData {
            natural,
            mono_src: src_shards[part].clone(),
            mono_tgt: tgt_shards[part].clone(),
            dev: ctx.data.dev.clone(),
            prefix: ctx.data.prefix,
        };
        let rounds = joint_train(&ctx.best_of(&s2t_base)?, &ctx.best_of(&t2s_base)?, &jd, &plan, &ctx.scorer, seed)?;
        log::info!("{label}: {} rounds", rounds.len() - 1);
        let curve: Vec<(usize, f64, f64)> = rounds.iter().map(|r| (r.iteration, r.s2t_bleu, r.t2s_bleu)).collect();
        let mut out = Vec::new();
        let mut files = Vec::new();
        for d in 0..2 {
            let bleu = |r: &crate::synthesis::JointTrainRound| if d == 0 { r.s2t_bleu } else { r.t2s_bleu };
            let best = rounds.iter().fold(&rounds[0], |b, r| if bleu(r) > bleu(b) { r } else { b });
            if best.iteration == 0 {
                out.push(if d == 0 { s2t_base.clone() } else { t2s_base.clone() });
                continue;
            }
            let (run, corpus) = if d == 0 { (&best.s2t_run, &best.s2t_data) } else { (&best.t2s_run, &best.t2s_data) };
            let mut rec = ctx.record("joint_train", &entry.name, d, "model", run.clone(), None, &ctx.data.dev(d))?;
            if let Some(c) = corpus {
                let rel = format!("corpora/joint_train/{}.{}.iter{}.tsv", entry.name, DIRECTIONS[d], best.iteration);
                files.extend(ctx.write_corpus(&rel, c, &format!("joint_train.{}", best.iteration), sec.tag, sec.beam)?);
                rec.corpus = Some(rel);
            }
            out.push(rec);
        }
        Ok((out, curve, files))
    }))?;
    let mut runs = Vec::new();
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let max_round = per_model.iter().map(|(_, c, _)| c.len()).max().unwrap_or(0);
    for it in 1..max_round {
        for (d, dir) in DIRECTIONS.iter().enumerate() {
            let best = per_model
                .iter()
                .filter_map(|(_, c, _)| c.get(it))
                .map(|&(_, a, b)| if d == 0 { a } else { b })
                .fold(f64::NEG_INFINITY, f64::max);
            rows.push(ReportRow { system: format!("Iterative BT (round {it})"), direction: dir.to_string(), bleu: best, detail: String::new() });
        }
    }
    for (r, _, f) in per_model {
        runs.extend(r);
        files.extend(f);
    }
    let refs: Vec<&RunRecord> = runs.iter().collect();
    rows.extend(DIRECTIONS.iter().filter_map(|d| best_row("Iterative BT", d, &refs)));
    Ok(StageOutput { runs, rows, files })
}

fn stage_distill(ctx: &Ctx, done: &[(String, StageOutput)]) -> Result<StageOutput> {
    let m = ctx.m;
    let sec = &m.distill;
    let mut out = StageOutput::default();
    for dir in &sec.directions {
        let d = dir_index(dir);
        let teachers = current(done, dir);
        let plan = DistillPlan::new(teachers.len(), sec.k, sec.students_per_group)?;
        let models = teachers.iter().map(|r| ctx.best_of(r)).collect::<Result<Vec<_>>>()?;
        let dev = ctx.data.dev(d);
        let groups: Vec<usize> = (0..plan.groups.len()).collect();
        let r2l_runs = collect(crate::par::map(&groups, |&g| {
            let member = teachers[plan.groups[g][0]];
            let mut cfg = models[plan.groups[g][0]].config.clone();
            cfg.target_order = TargetOrder::R2l;
            let corpus = match &member.corpus {
                Some(rel) => read_corpus(&ctx.root.join(rel))?,
                None => ctx.data.natural(d),
            };
            let mut p = m.plan(sec.r2l_steps.or(sec.steps));
            p.seed = ctx.seed_for(&format!("distill.r2l.{g}.{dir}"));
            // Only the decoder's reading order changes; the member's weights are a far better start than noise.
            let init = match sec.r2l_init {
                StudentInit::Bt => {
                    let mut c = models[plan.groups[g][0]].clone();
                    c.config.target_order = TargetOrder::R2l;
                    Some(c)
                }
                StudentInit::Random => None,
            };
            let trained = train(&cfg, init.as_ref(), &[corpus], &p)?;
            ctx.record("distill", &format!("r2l{g}"), d, "r2l", trained.checkpoints.clone(), Some(&trained), &dev)
        }))?;
        let r2l = r2l_runs.iter().map(|r| ctx.best_of(r)).collect::<Result<Vec<_>>>()?;
        let prefix = ctx.data.prefix[d];
        let all = ctx.data.mono(d);
        let prefixed = MonoCorpus { sentences: all.sentences.iter().map(|s| crate::synthesis::prefixed(prefix, s)).collect(), ..all.clone() };
        let shards = split_disjoint(&prefixed, plan.students(), ctx.seed_for(&format!("distill.shards.{dir}")))?;
        let target_language = if d == 0 { &ctx.data.pair.1 } else { &ctx.data.pair.0 };
        let corpora = distill_generate(&plan, &models, &r2l, &shards, target_language, &BeamOptions::with_beam(sec.beam))?;
        let students: Vec<(usize, usize, usize)> =
            plan.groups.iter().enumerate().flat_map(|(g, grp)| (0..plan.students_per_group).map(move |j| (g, grp[j % grp.len()], g * plan.students_per_group + j))).collect();
        let student_runs = collect(crate::par::map(&students, |&(_, member, s)| {
            let init = match sec.student_init {
                StudentInit::Bt => Some(&models[member]),
                StudentInit::Random => None,
            };
            let mut p = m.plan(sec.steps);
            p.seed = ctx.seed_for(&format!("distill.student{s}.{dir}"));
            let kd = &corpora[s];
            let cfg = &models[member].config;
            if kd.spans().iter().any(|sp| !sp.origin.provenance.is_synthetic() || sp.origin.provenance == crate::corpus::Provenance::BackTranslated) {
                return Err(Error::NaturalDataPresent("distillation corpus".into()));
            }
            let trained = train(cfg, init, std::slice::from_ref(kd), &p)?;
            let name = format!("student{s}");
            let mut rec = ctx.record("distill", &name, d, "student", trained.checkpoints.clone(), Some(&trained), &dev)?;
            let rel = format!("corpora/distill/{name}.{dir}.tsv");
            let files = ctx.write_corpus(&rel, kd, "distill", false, sec.beam)?;
            rec.corpus = Some(rel);
            Ok((rec, files))
        }))?;
        let mut recs: Vec<RunRecord> = Vec::new();
        for (r, f) in student_runs {
            recs.push(r);
            out.files.extend(f);
        }
        let refs: Vec<&RunRecord> = recs.iter().collect();
        out.rows.extend(best_row("KD", dir, &refs));
        out.runs.extend(r2l_runs);
        out.runs.extend(recs);
    }
    Ok(out)
}

fn stage_finetune(ctx: &Ctx, done: &[(String, StageOutput)]) -> Result<StageOutput> {
    let m = ctx.m;
    let mut jobs = Vec::new();
    for (d, dir) in DIRECTIONS.iter().enumerate() {
        for r in current(done, dir) {
            jobs.push((d, r.clone()));
        }
    }
    let runs = collect(crate::par::map(&jobs, |(d, r)| {
        let indomain = ctx.data.indomain(*d).ok_or_else(|| Error::EmptyCorpus("in-domain data".into()))?;
        let mut p = m.train.clone();
        p.seed = ctx.seed_for(&format!("finetune.{}.{}", r.model, r.direction));
        let tuned = ctx.run_of(r)?.iter().map(|c| fine_tune(c, &indomain, m.finetune.epochs, &p)).collect::<Result<Vec<_>>>()?;
        ctx.record("finetune", &r.model, *d, "finetuned", tuned, None, &ctx.data.dev(*d))
    }))?;
    let refs: Vec<&RunRecord> = runs.iter().collect();
    let rows = DIRECTIONS.iter().filter_map(|d| best_row("Fine-tuned", d, &refs)).collect();
    Ok(StageOutput { runs, rows, files: Vec::new() })
}

fn stage_ensemble_search(ctx: &Ctx, done: &[(String, StageOutput)]) -> Result<StageOutput> {
    let sec = &ctx.m.ensemble_search;
    let opts = BeamOptions::with_beam(sec.beam);
    let mut out = StageOutput::default();
    for dir in &sec.directions {
        let d = dir_index(dir);
        let dev = ctx.data.dev(d);
        let runs = current(done, dir);
        let mut lists = Vec::with_capacity(runs.len());
        for r in &runs {
            let run = ctx.run_of(r)?;
            let k = sec.top_k.min(run.len());
            lists.push(topk_checkpoints(&run, &dev, k, &ctx.scorer, &opts)?);
        }
        let single = lists
            .iter()
            .map(|l| &l[0])
            .fold(None::<&Checkpoint>, |b, c| match b {
                Some(b) if b.dev_bleu >= c.dev_bleu => Some(b),
                _ => Some(c),
            })
            .ok_or_else(|| Error::invalid(format!("no models for {dir}")))?;
        let mut averages = Vec::new();
        for (r, l) in runs.iter().zip(&lists) {
            let refs: Vec<&Checkpoint> = l.iter().collect();
            let mut avg = average_checkpoints(&refs)?;
            avg.dev_bleu = Some(ctx.scorer.score(&[&avg], &dev, &opts)?.bleu);
            averages.push((r.model.clone(), avg));
        }
        let (avg_model, best_avg) = averages
            .iter()
            .fold(None::<&(String, Checkpoint)>, |b, c| match b {
                Some(b) if b.1.dev_bleu >= c.1.dev_bleu => Some(b),
                _ => Some(c),
            })
            .expect("at least one model");
        let rec = ctx.record("ensemble_search", &format!("{avg_model}.avg"), d, "average", vec![best_avg.clone()], None, &dev)?;
        let search = random_ensemble_search(&lists, sec.n_draws, &dev, &ctx.scorer, &opts, ctx.seed_for(&format!("ensemble_search.{dir}")))?;
        let log_rel = format!("search/{dir}.log");
        write_atomic(&ctx.root.join(&log_rel), search.log_text().as_bytes())?;
        out.files.push(log_rel);
        let candidates = [
            FinalCandidate { kind: FinalKind::Single, ids: vec![single.id()], dev_bleu: single.dev_bleu.unwrap_or(0.0) },
            FinalCandidate { kind: FinalKind::Average, ids: vec![best_avg.meta.get("averaged").cloned().unwrap_or_else(|| best_avg.id())], dev_bleu: rec.best_bleu },
            FinalCandidate { kind: FinalKind::Ensemble, ids: search.best.ids.clone(), dev_bleu: search.best.dev_bleu },
        ];
        let fin = select_final(&candidates).expect("three candidates");
        out.rows.push(ReportRow { system: "Average".into(), direction: dir.clone(), bleu: rec.best_bleu, detail: avg_model.clone() });
        out.rows.push(ReportRow { system: "Ensemble".into(), direction: dir.clone(), bleu: search.best.dev_bleu, detail: search.best.ids.join(",") });
        out.rows.push(ReportRow { system: "Final".into(), direction: dir.clone(), bleu: fin.dev_bleu, detail: format!("{:?}: {}", fin.kind, fin.ids.join(",")).to_lowercase() });
        out.runs.push(rec);
    }
    Ok(out)
}

fn stage_key(m: &Manifest, name: &str) -> String {
    let section = match name {
        "baseline" => format!("{:?}", m.baseline),
        "mrasp" => format!("{:?}", m.mrasp),
        "joint_train" => format!("{:?}", m.joint_train),
        "distill" => format!("{:?}", m.distill),
        "finetune" => format!("{:?}", m.finetune),
        _ => format!("{:?}", m.ensemble_search),
    };
    format!(
        "{}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{name}|{section}",
        m.experiment, m.seed, m.data, m.vocab, m.eval, m.overrides, m.models, m.train
    )
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::seed::content_hash(&bytes))
}

fn stage_failed(stage: &str) -> impl Fn(Error) -> RunError + '_ {
    move |error| RunError::Stage { stage: stage.to_string(), error }
}

/// Runs (or resumes) the manifest's stages in `root` and returns the report.
/// `base` resolves relative data paths in the manifest.
pub fn run(manifest: &Manifest, base: &Path, root: &Path, opts: &RunOptions) -> std::result::Result<Report, RunError> {
    let setup = stage_failed("setup");
    let ledger_path = root.join("ledger.toml");
    let existing = Ledger::load(&ledger_path).map_err(&setup)?;
    let mut m = manifest.clone();
    let mut violations = Vec::new();
    if let Some(s) = opts.seed_override {
        if existing.as_ref().is_some_and(|l| !l.is_empty()) {
            violations.push(format!("--seed-override is rejected: {} already holds a ledger", root.display()));
        }
        m.seed = Some(s);
    }
    violations.extend(m.validate());
    if let Some(f) = &opts.stage {
        if !m.has_stage(f) {
            violations.push(format!("stage `{f}` is not in the manifest's stage list"));
        }
    }
    if !violations.is_empty() {
        return Err(RunError::Validation(violations));
    }
    if let Some(stage) = existing.as_ref().and_then(|l| l.interrupted()) {
        if !opts.resume {
            return Err(RunError::Stage {
                stage: stage.to_string(),
                error: Error::invalid("the ledger shows this stage was interrupted; pass --resume to continue"),
            });
        }
    }
    crate::par::set_jobs(opts.jobs);
    let mut ledger = existing.unwrap_or_else(|| Ledger::new(&m.experiment, &m.hash(), m.seed()));
    ledger.manifest_hash = m.hash();
    ledger.seed = format!("{:016x}", m.seed());
    let data = prepare_data(&m, base).map_err(&setup)?;
    write_atomic(&root.join("data/vocab.txt"), data.vocab.to_text().as_bytes()).map_err(&setup)?;
    let ctx = Ctx {
        m: &m,
        root,
        data: &data,
        scorer: DevScorer::new(data.vocab.clone(), m.eval.quotes, m.eval.tokenization),
        seed: m.seed(),
    };
    let mut done: Vec<(String, StageOutput)> = Vec::new();
    let mut upstream = String::new();
    for name in &m.stages {
        let fail = stage_failed(name);
        let inputs_hash = crate::seed::content_hash(format!("{}|{upstream}", stage_key(&m, name)).as_bytes());
        let index_rel = format!("stages/{name}.toml");
        let selected = opts.stage.as_deref().map_or(true, |f| f == name);
        let output = if ledger.reusable(name, &inputs_hash, root) {
            log::info!("stage {name}: up to date");
            let text = fs::read_to_string(root.join(&index_rel)).map_err(|e| fail(Error::io(&root.join(&index_rel), e)))?;
            toml::from_str::<StageOutput>(&text).map_err(|e| fail(Error::format("stage index", e.to_string())))?
        } else if !selected {
            if opts.stage.as_deref().is_some_and(|f| m.stages.iter().position(|s| s == f) < m.stages.iter().position(|s| s == name)) {
                break;
            }
            return Err(fail(Error::invalid(format!("stage `{name}` has not completed; run it before `{}`", opts.stage.as_deref().unwrap_or("")))));
        } else {
            let seed = ctx.seed_for(name);
            ledger.upsert(StageRecord { name: name.clone(), status: StageStatus::Running, inputs_hash: inputs_hash.clone(), seed: format!("{seed:016x}"), outputs: Vec::new() });
            ledger.save(&ledger_path).map_err(&fail)?;
            let started = Instant::now();
            log::info!("stage {name}: running");
            let output = match name.as_str() {
                "baseline" => stage_baseline(&ctx),
                "mrasp" => stage_mrasp(&ctx, &done),
                "joint_train" => stage_joint_train(&ctx, &done),
                "distill" => stage_distill(&ctx, &done),
                "finetune" => stage_finetune(&ctx, &done),
                "ensemble_search" => stage_ensemble_search(&ctx, &done),
                other => Err(Error::invalid(format!("unknown stage {other}"))),
            }
            .map_err(&fail)?;
            let text = toml::to_string(&output).map_err(|e| fail(Error::format("stage index", e.to_string())))?;
            write_atomic(&root.join(&index_rel), text.as_bytes()).map_err(&fail)?;
            let mut paths: Vec<String> = vec![index_rel.clone()];
            for r in &output.runs {
                paths.extend(r.checkpoints.iter().cloned());
            }
            paths.extend(output.files.iter().cloned());
            paths.sort();
            paths.dedup();
            let outputs = paths.into_iter().map(|p| Ok(Artifact { hash: file_hash(&root.join(&p))?, path: p })).collect::<Result<Vec<_>>>().map_err(&fail)?;
            ledger.upsert(StageRecord { name: name.clone(), status: StageStatus::Done, inputs_hash: inputs_hash.clone(), seed: format!("{seed:016x}"), outputs });
            ledger.save(&ledger_path).map_err(&fail)?;
            let timing = root.join("timings.tsv");
            let line = format!("{name}\t{:.1}\n", started.elapsed().as_secs_f64());
            fs::OpenOptions::new().create(true).append(true).open(&timing).and_then(|mut f| f.write_all(line.as_bytes())).map_err(|e| fail(Error::io(&timing, e)))?;
            output
        };
        let rec = ledger.get(name).expect("stage recorded");
        for a in &rec.outputs {
            upstream.push_str(&a.hash);
        }
        done.push((name.clone(), output));
    }
    let report = Report {
        experiment: m.experiment.clone(),
        pair: data.pair.clone(),
        signature: format!("BLEU nrefs:1|tok:{}|n:{MAX_ORDER}|smooth:none|beam:{}|dev:{}", m.eval.tokenization.tag(), m.eval.beam, data.dev.len()),
        rows: done.iter().flat_map(|(_, o)| o.rows.iter().cloned()).collect(),
    };
    write_atomic(&root.join("report.txt"), report.table().as_bytes()).map_err(&setup)?;
    write_atomic(&root.join("report.tsv"), report.tsv().as_bytes()).map_err(&setup)?;
    Ok(report)
}
