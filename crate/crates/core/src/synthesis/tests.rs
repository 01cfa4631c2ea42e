use super::*;
use crate::corpus::{split_disjoint, SyntheticTask, SyntheticTaskSpec};
use crate::model::preset_config;
use crate::textkit::QuoteStyle;
use crate::training::Budget;

fn task() -> SyntheticTask {
    let mut spec = SyntheticTaskSpec::cipher("xx", "yy", 20, 3);
    spec.max_len = 6;
    SyntheticTask::new(spec).unwrap()
}

fn tiny(v: usize, seed: u64) -> Checkpoint {
    let mut cfg = preset_config("base", v).unwrap();
    cfg.embed_dim = 16;
    cfg.ffn_dim = 32;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    Checkpoint::init(&cfg, seed).unwrap()
}

fn quick(steps: u64) -> TrainPlan {
    TrainPlan { max_tokens: 256, accumulation: 1, budget: Budget::Steps(steps), warmup_steps: 5, max_lr: 3e-3, checkpoint_every: 100, ..Default::default() }
}

#[test]
fn oracle_back_translation_recovers_parallel_data() {
    let t = task();
    let (par, _, _) = t.generate(30, 0, 0);
    let mono = MonoCorpus::new("yy", par.targets().cloned().collect());
    let oracle = |xs: &[Sentence]| Ok(xs.iter().map(|x| t.oracle_back_translate(x).unwrap()).collect());
    let plain = back_translate_with(oracle, "oracle", &mono, "xx", false, "bt").unwrap();
    assert_eq!(plain.pairs(), par.pairs());
    let tagged = back_translate_with(oracle, "oracle", &mono, "xx", true, "bt").unwrap();
    for ((s, t), (s0, t0)) in tagged.pairs().iter().zip(plain.pairs()) {
        assert_eq!(s[0], BT_TAG);
        assert_eq!(&s[1..], &s0[..]);
        assert_eq!(t, t0);
    }
    assert_eq!(tagged.provenance(), Some(Provenance::BackTranslated));
    assert_eq!(tagged.origin_of(0).unwrap().generator.as_deref(), Some("oracle"));
}

#[test]
fn empty_mono_gives_empty_corpus() {
    let c = tiny(task().vocabulary().len(), 1);
    let out = back_translate(&c, &MonoCorpus::new("yy", vec![]), "xx", &BeamOptions::with_beam(2), true, "bt").unwrap();
    assert!(out.is_empty());
    assert_eq!(out.direction, Direction::new("xx", "yy"));
}

#[test]
fn distill_plan_grouping() {
    let p = DistillPlan::new(9, 3, 1).unwrap();
    assert_eq!(p.groups, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]);
    assert!(DistillPlan::new(8, 3, 1).is_err());
    assert!(DistillPlan::new(3, 0, 1).is_err());
}

#[test]
fn distillation_corpus_shape_and_provenance() {
    let t = task();
    let v = t.vocabulary().len();
    let (_, mono, _) = t.generate(10, 24, 0);
    let shards = split_disjoint(&mono, 2, 1).unwrap();
    let model = tiny(v, 1);
    let mut r2l = tiny(v, 2);
    r2l.config.target_order = crate::model::TargetOrder::R2l;
    let models = vec![model.clone(), model.clone(), model.clone()];
    let plan = DistillPlan::new(3, 1, 2).unwrap();
    let opts = BeamOptions::with_beam(2);
    let out = distill_generate(&plan, &models, std::slice::from_ref(&r2l), &shards, "yy", &opts).unwrap();
    assert_eq!(out.len(), 2);
    for (corpus, shard) in out.iter().zip(&shards) {
        let s = shard.len();
        assert_eq!(corpus.len(), 2 * s);
        let single = translate(&[&model], &shard.sentences, &opts).unwrap();
        let r2l_out = translate(&[&r2l], &shard.sentences, &opts).unwrap();
        for i in 0..s {
            assert_eq!(corpus.pairs()[i].0, shard.sentences[i]);
            assert_eq!(corpus.pairs()[i].1, single[i]);
            assert_eq!(corpus.pairs()[s + i].1, r2l_out[i]);
            assert_ne!(corpus.pairs()[i].0[0], BT_TAG);
        }
        assert_eq!(corpus.origin_of(0).unwrap().provenance, Provenance::DistilledEnsemble);
        assert_eq!(corpus.origin_of(s).unwrap().provenance, Provenance::DistilledR2l);
        assert_eq!(corpus.origin_of(s).unwrap().shard, shard.shard_id);
    }
    assert!(distill_generate(&plan, &models[..2], std::slice::from_ref(&r2l), &shards, "yy", &opts).is_err());
}

#[test]
fn students_reject_natural_data() {
    let t = task();
    let par = t.sample_parallel(20, "p");
    let cfg = tiny(t.vocabulary().len(), 1).config;
    assert!(matches!(distill_student(&cfg, &par, &quick(1), None), Err(Error::NaturalDataPresent(_))));
    let kd = par.relabel(Origin::synthetic(Provenance::DistilledEnsemble, "t", Some(0), "distill"));
    assert_eq!(distill_student(&cfg, &kd, &quick(1), None).unwrap().step, 1);
}

#[test]
fn joint_training_zero_iterations_returns_inputs() {
    let t = task();
    let v = t.vocabulary().len();
    let (natural, mono_src, mono_tgt) = t.generate(40, 10, 10);
    let data = JointData { natural, mono_src, mono_tgt, dev: t.sample_parallel(8, "dev"), prefix: [None, None] };
    let scorer = DevScorer::new(t.vocabulary().clone(), QuoteStyle::AsIs, Default::default());
    let (a, b) = (tiny(v, 1), tiny(v, 2));
    let plan = JointTrainPlan { max_iters: 0, beam: 2, train: quick(2), ..Default::default() };
    let rounds = joint_train(&a, &b, &data, &plan, &scorer, 1).unwrap();
    assert_eq!(rounds.len(), 1);
    assert_eq!(rounds[0].s2t, a);
    let plan = JointTrainPlan { max_iters: 1, ..plan };
    let rounds = joint_train(&a, &b, &data, &plan, &scorer, 1).unwrap();
    assert_eq!(rounds.len(), 2);
    let s2t_data = rounds[1].s2t_data.as_ref().unwrap();
    assert_eq!(s2t_data.len(), 50);
    assert!(s2t_data.pairs()[40..].iter().all(|(s, _)| s[0] == BT_TAG));
    assert_eq!(s2t_data.origin_of(45).unwrap().generator, Some(b.id()));
    assert_eq!(rounds[1].t2s_data.as_ref().unwrap().direction, Direction::new("yy", "xx"));
}

fn multi() -> (Vocabulary, Vec<SyntheticTask>) {
    let specs: Vec<SyntheticTaskSpec> = ["aa", "bb"].iter().enumerate().map(|(i, s)| {
        let mut spec = SyntheticTaskSpec::cipher(s, "en", 12, i as u64);
        spec.max_len = 5;
        spec
    }).collect();
    let refs: Vec<&SyntheticTaskSpec> = specs.iter().collect();
    let vocab = SyntheticTask::lexicon_vocabulary(&refs, &["en".into()]).unwrap();
    let tasks = specs.into_iter().map(|s| SyntheticTask::with_vocabulary(s, vocab.clone()).unwrap()).collect();
    (vocab, tasks)
}

#[test]
fn direction_tokens_and_finetune_metadata() {
    let (vocab, tasks) = multi();
    let corpora: Vec<ParallelCorpus> = tasks.iter().map(|t| t.sample_parallel(20, "p")).collect();
    let tagged = with_direction_token(&corpora[0], &vocab).unwrap();
    let id = vocab.special_id("<2en>").unwrap();
    assert!(tagged.pairs().iter().all(|(s, _)| s[0] == id));
    assert!(with_direction_token(&corpora[0].swapped(), &vocab).is_err());

    let mut cfg = tiny(vocab.len(), 1).config;
    assert!(mrasp_pretrain(&corpora, &vocab, &cfg, &quick(1)).is_err());
    cfg.num_specials = vocab.num_specials();
    let pre = mrasp_pretrain(&corpora, &vocab, &cfg, &quick(2)).unwrap();
    let mut ids = std::collections::BTreeSet::new();
    for sampling in [Sampling::None, Sampling::Upsample(2.0), Sampling::Bagging(1.0)] {
        let ft = mrasp_finetune(&pre, &corpora[1], sampling, &vocab, &quick(1)).unwrap();
        assert_eq!(ft.meta["pretrain_id"], pre.id());
        ids.insert((ft.meta["pretrain_id"].clone(), ft.meta["sampling"].clone()));
        let out = translate(&[&ft], &tagged.sources().cloned().collect::<Vec<_>>(), &BeamOptions::with_beam(2)).unwrap();
        assert!(out.iter().flatten().all(|&t| !vocab.is_special(t)));
    }
    assert_eq!(ids.len(), 3);
}

#[test]
fn sidecar_round_trip() {
    let t = task();
    let c = t.sample_parallel(5, "p").relabel(Origin::synthetic(Provenance::BackTranslated, "m1", Some(2), "bt"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bt.tsv");
    let side = Sidecar::describe(&c, "bt", true, 4);
    write_corpus(&path, &c, t.vocabulary(), &side).unwrap();
    let back: Sidecar = toml::from_str(&fs::read_to_string(path.with_extension("prov")).unwrap()).unwrap();
    assert_eq!(back, side);
    assert_eq!(back.spans[0].shard, Some(2));
    assert_eq!(crate::corpus::read_parallel_tsv(&path).unwrap().len(), 5);
    assert_eq!(read_corpus(&path).unwrap(), c);
    let mixed = ParallelCorpus::concat([&t.sample_parallel(3, "n"), &c]).unwrap();
    write_corpus(&path, &mixed, t.vocabulary(), &Sidecar::describe(&mixed, "bt", true, 4)).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), mixed);
}
