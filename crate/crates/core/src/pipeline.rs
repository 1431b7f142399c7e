//! End-to-end glue: dataset loading, prompt encoding, training runs,
//! protocol evaluation and prediction.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::config::{ConfigError, Protocol, RunConfig};
use crate::encoder::tokenizer::Tokenizer;
use crate::encoder::Tower;
use crate::evaluator::{
    compute_metrics, embed_all_candidates, per_query_tsv, rank_query, CandidateMatrix, Direction, EvalError, FilterMode, MetricsReport,
    RankingResult,
};
use crate::model::{Example, ModelError, TwoTowerModel};
use crate::tkg::{
    build_inductive_split, parse_quadruple_file, parse_timestamp, DescriptionStore, EntityId, InductiveSplit, InductiveSplitConfig,
    InverseRelations, Quadruple, RelationId, TemporalKg, TimestampId, TkgError, UnseenSelection, Vocabularies,
};
use crate::trainer::{apply_freeze_policy, fine_tune, save_checkpoint, train, EpochRecord, FreezePolicy, TrainError, TrainReport};
use crate::verbalizer::{retrieve_history, verbalize_candidate, verbalize_query, lexicalize_timestamp, VerbalizeError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tkg(#[from] TkgError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Verbalize(#[from] VerbalizeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::File { path: path.display().to_string(), source })
}

/// How the unseen entities of an out-of-graph split are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum UnseenSpec {
    Names(Vec<String>),
    Fraction(f64),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocabs: Vocabularies,
    pub descriptions: DescriptionStore,
    pub inverse: InverseRelations,
    /// Base-relation facts; inverses are added when indices are built.
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub inductive: Option<InductiveSplit>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        match s {
            "valid" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            _ => Err(PipelineError::Usage(format!("unknown split {s:?}, expected valid or test"))),
        }
    }
}

impl Dataset {
    /// Builds a dataset from file contents. Descriptions are optional.
    pub fn from_texts(
        train: &str,
        valid: &str,
        test: &str,
        entity_descriptions: Option<&str>,
        relation_descriptions: Option<&str>,
        unseen: Option<(UnseenSpec, usize, u64)>,
    ) -> Result<Self, PipelineError> {
        let mut vocabs = Vocabularies::new();
        let train = parse_quadruple_file(train.as_bytes(), &mut vocabs)?;
        let valid = parse_quadruple_file(valid.as_bytes(), &mut vocabs)?;
        let test = parse_quadruple_file(test.as_bytes(), &mut vocabs)?;
        let mut descriptions = DescriptionStore::from_vocab(&vocabs);
        let mut warnings = Vec::new();
        if let Some(text) = entity_descriptions {
            let unknown = descriptions.load_entity_descriptions(BufReader::new(text.as_bytes()), &vocabs)?;
            if unknown > 0 {
                warnings.push(format!("{unknown} description lines name unknown entities"));
            }
        }
        if let Some(text) = relation_descriptions {
            descriptions.load_relation_descriptions(BufReader::new(text.as_bytes()), &vocabs)?;
        }
        let inverse = InverseRelations::register(&mut vocabs, &mut descriptions)?;
        for p in 0..inverse.base_count as u32 {
            let text = format!("{}{}", crate::tkg::INVERSE_PREFIX, descriptions.relation_name(RelationId(p)));
            descriptions.set_relation(inverse.inverse(RelationId(p)), &text);
        }

        let inductive = match unseen {
            None => None,
            Some((spec, shots, seed)) => {
                let selection = match spec {
                    UnseenSpec::Fraction(f) => UnseenSelection::Fraction(f),
                    UnseenSpec::Names(names) => UnseenSelection::Explicit(
                        names
                            .iter()
                            .map(|n| vocabs.entity(n).ok_or_else(|| TkgError::UnknownEntity(n.clone())))
                            .collect::<Result<_, _>>()?,
                    ),
                };
                let all: Vec<Quadruple> = train.iter().chain(&valid).chain(&test).copied().collect();
                let cfg = InductiveSplitConfig { selection, shots, seed, ..Default::default() };
                Some(build_inductive_split(&all, vocabs.num_entities(), &vocabs.times, &cfg)?)
            }
        };
        Ok(Dataset { vocabs, descriptions, inverse, train, valid, test, inductive, warnings })
    }

    /// Loads the files named in `cfg`. A missing description file is a
    /// warning and entities fall back to their names.
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        for (key, path) in [("train", &cfg.train), ("valid", &cfg.valid), ("test", &cfg.test)] {
            if path.as_os_str().is_empty() {
                return Err(PipelineError::Usage(format!("config key {key} is not set")));
            }
        }
        let optional = |path: &Path, what: &str, warnings: &mut Vec<String>| -> Result<Option<String>, PipelineError> {
            if path.as_os_str().is_empty() {
                return Ok(None);
            }
            if !path.exists() {
                warnings.push(format!("{what} file {} not found, using names only", path.display()));
                return Ok(None);
            }
            read(path).map(Some)
        };
        let mut warnings = Vec::new();
        let ent = optional(&cfg.entity_descriptions, "entity description", &mut warnings)?;
        let rel = optional(&cfg.relation_descriptions, "relation description", &mut warnings)?;
        let unseen = if !cfg.unseen_entities.as_os_str().is_empty() {
            let names = read(&cfg.unseen_entities)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            Some((UnseenSpec::Names(names), cfg.shots, cfg.split_seed))
        } else if cfg.unseen_fraction > 0.0 {
            Some((UnseenSpec::Fraction(cfg.unseen_fraction), cfg.shots, cfg.split_seed))
        } else {
            None
        };
        let mut ds = Dataset::from_texts(
            &read(&cfg.train)?,
            &read(&cfg.valid)?,
            &read(&cfg.test)?,
            ent.as_deref(),
            rel.as_deref(),
            unseen,
        )?;
        warnings.append(&mut ds.warnings);
        ds.warnings = warnings;
        Ok(ds)
    }

    pub fn all_facts(&self) -> Vec<Quadruple> {
        self.train.iter().chain(&self.valid).chain(&self.test).copied().collect()
    }

    /// Index over `facts` and their inverses.
    pub fn kg(&self, facts: &[Quadruple]) -> TemporalKg {
        TemporalKg::new(crate::tkg::invert_facts(facts, &self.inverse), &self.vocabs.times)
    }

    /// Dataset statistics, one `name value` per line.
    pub fn stats(&self) -> String {
        let mut rows = vec![
            ("entities", self.vocabs.num_entities()),
            ("relations", self.inverse.base_count),
            ("timestamps", self.vocabs.times.len()),
            ("train", self.train.len()),
            ("valid", self.valid.len()),
            ("test", self.test.len()),
        ];
        if let Some(ind) = &self.inductive {
            rows.extend([
                ("unseen_entities", ind.unseen.len()),
                ("background", ind.background.len()),
                ("support", ind.support_facts().len()),
                ("query_train", ind.query_train.len()),
                ("query_valid", ind.query_valid.len()),
                ("query_test", ind.query_test.len()),
            ]);
        }
        rows.into_iter().map(|(k, v)| format!("{k} {v}\n")).collect()
    }
}

/// One evaluation query: the oriented fact, its direction and token ids.
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub fact: Quadruple,
    pub direction: Direction,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub results: Vec<RankingResult>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, rounded as in checkpoints.
    pub model: TwoTowerModel,
    pub report: TrainReport,
    pub best_epoch: usize,
    pub best_valid: Option<MetricsReport>,
    pub log: Vec<String>,
}

/// A dataset with its tokenizer, candidate inputs and run configuration.
pub struct Pipeline<'a> {
    pub ds: &'a Dataset,
    pub cfg: RunConfig,
    pub tokenizer: Tokenizer,
    pub candidates: Vec<Vec<u32>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(ds: &'a Dataset, cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let budgets = cfg.budgets();
        let mut texts = Vec::with_capacity(ds.vocabs.num_entities());
        for (e, _, _) in ds.descriptions.entities() {
            texts.push(verbalize_candidate(e, &ds.descriptions, budgets.description)?.text);
        }
        let mut tokenizer = Tokenizer::build(texts.iter().map(String::as_str));
        for p in 0..ds.vocabs.num_relations() as u32 {
            tokenizer.extend(ds.descriptions.relation_name(RelationId(p)));
        }
        for entry in ds.vocabs.times.entries() {
            tokenizer.extend(&lexicalize_timestamp(entry).0);
        }
        tokenizer.extend("| ,");
        let candidates = texts.iter().map(|t| tokenizer.encode(t, cfg.max_len)).collect();
        Ok(Pipeline { ds, cfg, tokenizer, candidates })
    }

    pub fn new_model(&self) -> Result<TwoTowerModel, PipelineError> {
        Ok(TwoTowerModel::new(self.cfg.encoder_config(self.tokenizer.len()), self.cfg.tau_init, self.cfg.seed)?)
    }

    fn query_text(&self, q: &Quadruple, kg: &TemporalKg, gold: Option<EntityId>) -> Result<String, PipelineError> {
        let hcfg = self.cfg.history_config();
        let history = retrieve_history(q.s, q.p, q.t, gold, kg, &self.ds.vocabs.times, &hcfg);
        Ok(verbalize_query(q.s, q.p, q.t, &history, &self.ds.descriptions, &self.ds.vocabs.times, self.cfg.budgets())?.text)
    }

    /// Token ids of the prompt for the oriented query `q` (gold `q.o`).
    pub fn query_tokens(&self, q: &Quadruple, kg: &TemporalKg) -> Result<Vec<u32>, PipelineError> {
        Ok(self.tokenizer.encode(&self.query_text(q, kg, Some(q.o))?, self.cfg.max_len))
    }

    fn oriented(&self, facts: &[Quadruple]) -> Vec<(Quadruple, Direction)> {
        let mut out = Vec::with_capacity(facts.len() * 2);
        for f in facts {
            out.push((*f, Direction::Tail));
            out.push((self.ds.inverse.invert(f), Direction::Head));
        }
        out
    }

    /// Training examples for both orientations of `facts`.
    pub fn examples(&self, facts: &[Quadruple], kg: &TemporalKg) -> Result<Vec<Example>, PipelineError> {
        self.oriented(facts)
            .into_iter()
            .map(|(q, _)| Ok(Example { query: self.query_tokens(&q, kg)?, gold: q.o, head: q.s }))
            .collect()
    }

    pub fn eval_queries(&self, facts: &[Quadruple], kg: &TemporalKg) -> Result<Vec<EvalQuery>, PipelineError> {
        self.oriented(facts)
            .into_iter()
            .map(|(fact, direction)| Ok(EvalQuery { fact, direction, tokens: self.query_tokens(&fact, kg)? }))
            .collect()
    }

    fn inductive(&self) -> Result<&InductiveSplit, PipelineError> {
        self.ds
            .inductive
            .as_ref()
            .ok_or_else(|| EvalError::ProtocolMismatch("inductive protocol needs an out-of-graph split".into()).into())
    }

    /// Facts the model trains on under the configured protocol.
    pub fn training_facts(&self) -> Result<Vec<Quadruple>, PipelineError> {
        Ok(match self.cfg.protocol_kind()? {
            Protocol::Transductive => self.ds.train.clone(),
            Protocol::InductiveZeroShot | Protocol::InductiveKShot => self.inductive()?.background.facts().to_vec(),
        })
    }

    fn checkpoint_config(&self) -> Vec<String> {
        self.cfg.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect()
    }

    /// Full training run. With `out`, writes the effective config, the
    /// vocabulary, the epoch log, per-epoch checkpoints and `best.ckpt`.
    pub fn train(&self, out: Option<&Path>) -> Result<TrainOutcome, PipelineError> {
        let protocol = self.cfg.protocol_kind()?;
        let facts = self.training_facts()?;
        let train_kg = self.ds.kg(&facts);
        let examples = self.examples(&facts, &train_kg)?;
        let valid_protocol = match protocol {
            Protocol::Transductive => Protocol::Transductive,
            _ => Protocol::InductiveZeroShot,
        };
        let valid_queries = self.protocol_queries(valid_protocol, EvalSplit::Valid)?;
        let filter_mode = self.cfg.filter_mode()?;
        let loss_cfg = self.cfg.loss_config();
        let mut train_cfg = self.cfg.train_config()?;
        let ckpt_cfg = self.checkpoint_config();

        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), self.cfg.to_text())?;
            let mut vocab = Vec::new();
            self.tokenizer.save(&mut vocab)?;
            fs::write(dir.join("vocab.txt"), vocab)?;
        }
        let mut log_file = match out {
            Some(dir) => Some(fs::File::create(dir.join("train.log"))?),
            None => None,
        };
        let mut log = Vec::new();
        let mut emit = |line: String, log: &mut Vec<String>| -> Result<(), TrainError> {
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{line}")?;
            }
            log.push(line);
            Ok(())
        };

        let mut model = self.new_model()?;
        let mut offset = 0;
        let mut pre_report = TrainReport::default();
        if self.cfg.pretrain_epochs > 0 {
            apply_freeze_policy(&mut model, FreezePolicy::Full);
            let pre_cfg = crate::trainer::TrainConfig {
                epochs: self.cfg.pretrain_epochs,
                learning_rate: self.cfg.pretrain_learning_rate,
                ..train_cfg.clone()
            };
            pre_report = train(&mut model, &examples, &self.candidates, &pre_cfg, &loss_cfg, |_, rec| {
                emit(rec.to_string(), &mut log)?;
                Ok(true)
            })?;
            offset = self.cfg.pretrain_epochs;
            train_cfg.seed = train_cfg.seed.wrapping_add(1);
        }

        apply_freeze_policy(&mut model, train_cfg.freeze_policy);
        let mut best: Option<(f64, usize, TwoTowerModel, Option<MetricsReport>)> = None;
        let mut report = train(&mut model, &examples, &self.candidates, &train_cfg, &loss_cfg, |m, rec| {
            let rec = EpochRecord { epoch: rec.epoch + offset, step: rec.step + pre_report.steps, ..rec.clone() };
            emit(rec.to_string(), &mut log)?;
            let snapshot = m.quantized();
            let valid = if valid_queries.is_empty() {
                None
            } else {
                let results = self.rank(&snapshot, &valid_queries, filter_mode).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
                Some(compute_metrics(&results).map_err(|e| TrainError::InvalidConfig(e.to_string()))?)
            };
            let score = valid.as_ref().map_or(f64::NEG_INFINITY, |r| r.filtered.mrr);
            if let Some(dir) = out {
                save_checkpoint(&dir.join(format!("epoch_{}.ckpt", rec.epoch)), &snapshot, rec.step, &ckpt_cfg)?;
            }
            if best.as_ref().map_or(true, |b| score > b.0 || (valid.is_none())) {
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best.ckpt"), &snapshot, rec.step, &ckpt_cfg)?;
                    if let Some(v) = &valid {
                        fs::write(dir.join("valid_metrics.tsv"), v.to_tsv())?;
                    }
                }
                best = Some((score, rec.epoch, snapshot, valid));
            }
            Ok(true)
        })?;
        let mut epochs = pre_report.epochs;
        for r in &mut report.epochs {
            r.epoch += offset;
            r.step += pre_report.steps;
        }
        epochs.append(&mut report.epochs);
        report.epochs = epochs;
        report.steps += pre_report.steps;
        let (_, best_epoch, model, best_valid) = match best {
            Some(b) => b,
            None => (f64::NEG_INFINITY, offset, model.quantized(), None),
        };
        Ok(TrainOutcome { model, report, best_epoch, best_valid, log })
    }

    /// The queries and history index a protocol evaluates on.
    pub fn protocol_queries(&self, protocol: Protocol, split: EvalSplit) -> Result<Vec<EvalQuery>, PipelineError> {
        match protocol {
            Protocol::Transductive => {
                let facts = match split {
                    EvalSplit::Valid => &self.ds.valid,
                    EvalSplit::Test => &self.ds.test,
                };
                let kg = self.ds.kg(&self.ds.all_facts());
                self.eval_queries(facts, &kg)
            }
            Protocol::InductiveZeroShot | Protocol::InductiveKShot => {
                let ind = self.inductive()?;
                let facts = match split {
                    EvalSplit::Valid => &ind.query_valid,
                    EvalSplit::Test => &ind.query_test,
                };
                let mut known = ind.background.facts().to_vec();
                if protocol == Protocol::InductiveKShot && self.cfg.few_shot_history {
                    known.extend(ind.support_facts());
                }
                self.eval_queries(facts, &self.ds.kg(&known))
            }
        }
    }

    /// Ranks `queries` against every entity.
    pub fn rank(&self, model: &TwoTowerModel, queries: &[EvalQuery], mode: FilterMode) -> Result<Vec<RankingResult>, PipelineError> {
        let matrix = embed_all_candidates(model, &self.candidates)?;
        self.rank_with(model, &matrix, queries, mode)
    }

    pub fn rank_with(
        &self,
        model: &TwoTowerModel,
        matrix: &CandidateMatrix,
        queries: &[EvalQuery],
        mode: FilterMode,
    ) -> Result<Vec<RankingResult>, PipelineError> {
        let filter_kg = self.ds.kg(&self.ds.all_facts());
        let seqs: Vec<&[u32]> = queries.iter().map(|q| q.tokens.as_slice()).collect();
        let emb = model.embed(Tower::Query, &seqs)?;
        let scores = matrix.scores(&emb);
        queries
            .iter()
            .enumerate()
            .map(|(i, q)| Ok(rank_query(q.fact, q.direction, scores.row_slice(i), &filter_kg, mode)?))
            .collect()
    }

    /// Evaluates `model` under `protocol`. The k-shot protocol first
    /// fine-tunes a copy of the prefixes on the support facts.
    pub fn evaluate(&self, model: &TwoTowerModel, protocol: Protocol, split: EvalSplit) -> Result<Evaluation, PipelineError> {
        let mode = self.cfg.filter_mode()?;
        let queries = self.protocol_queries(protocol, split)?;
        let results = if protocol == Protocol::InductiveKShot && self.cfg.few_shot_finetune && self.cfg.finetune_steps > 0 {
            let ind = self.inductive()?;
            let support = ind.support_facts();
            let mut known = ind.background.facts().to_vec();
            known.extend(&support);
            let examples = self.examples(&support, &self.ds.kg(&known))?;
            if examples.len() < 2 {
                self.rank(model, &queries, mode)?
            } else {
                let mut tuned = model.clone();
                fine_tune(&mut tuned, &examples, &self.candidates, self.cfg.finetune_steps, &self.cfg.train_config()?, &self.cfg.loss_config())?;
                self.rank(&tuned.quantized(), &queries, mode)?
            }
        } else {
            self.rank(model, &queries, mode)?
        };
        if let Some(ind) = self.ds.inductive.as_ref().filter(|_| protocol != Protocol::Transductive) {
            debug_assert!(results.iter().all(|r| ind.touches_unseen(&r.query)));
        }
        Ok(Evaluation { report: compute_metrics(&results)?, results })
    }

    pub fn per_query_tsv(&self, results: &[RankingResult]) -> String {
        per_query_tsv(results, &self.ds.vocabs, &self.ds.vocabs.times, self.ds.inverse.base_count)
    }

    /// Top `k` entities with cosine scores for the query `subject|relation|time`.
    /// An unknown subject needs `subject_desc`; it is then encoded from text.
    pub fn predict(&self, model: &TwoTowerModel, query: &str, k: usize, subject_desc: Option<&str>) -> Result<Vec<(String, f64)>, PipelineError> {
        let parts: Vec<&str> = query.split('|').map(str::trim).collect();
        let [s, p, t] = parts[..] else {
            return Err(PipelineError::Usage(format!("query {query:?} is not of the form subject|relation|time")));
        };
        let mut vocabs = self.ds.vocabs.clone();
        let mut store = self.ds.descriptions.clone();
        let subject = match (vocabs.entity(s), subject_desc) {
            (Some(e), Some(d)) => {
                store.set_description(e, d);
                e
            }
            (Some(e), None) => e,
            (None, Some(d)) => store.add_entity(&mut vocabs, s, d),
            (None, None) => return Err(PipelineError::Usage(format!("unknown subject {s:?}; pass --subject-desc to describe it"))),
        };
        let relation = vocabs.relation(p).ok_or_else(|| PipelineError::Usage(format!("unknown relation {p:?}")))?;
        let time = match vocabs.times.get(t) {
            Some(id) => id,
            None => {
                let value = parse_timestamp(t).ok_or_else(|| PipelineError::Usage(format!("bad timestamp {t:?}")))?;
                TimestampId(vocabs.times.intern(t, value))
            }
        };
        let known = match self.cfg.protocol_kind()? {
            Protocol::Transductive => self.ds.all_facts(),
            Protocol::InductiveZeroShot => self.inductive()?.background.facts().to_vec(),
            Protocol::InductiveKShot => {
                let ind = self.inductive()?;
                let mut f = ind.background.facts().to_vec();
                f.extend(ind.support_facts());
                f
            }
        };
        let kg = TemporalKg::new(crate::tkg::invert_facts(&known, &self.ds.inverse), &vocabs.times);
        let history = retrieve_history(subject, relation, time, None, &kg, &vocabs.times, &self.cfg.history_config());
        let text = verbalize_query(subject, relation, time, &history, &store, &vocabs.times, self.cfg.budgets())?.text;
        let tokens = self.tokenizer.encode(&text, self.cfg.max_len);
        let matrix = embed_all_candidates(model, &self.candidates)?;
        let q = model.embed(Tower::Query, &[tokens.as_slice()])?;
        let scores = matrix.scores(&q);
        let mut ranked: Vec<(usize, f64)> = scores.row_slice(0).iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked.into_iter().take(k).map(|(i, s)| (self.ds.vocabs.entity_name(EntityId(i as u32)).to_string(), s)).collect())
    }

    /// `query<TAB>candidate<TAB>label` lines: the gold candidate with label 1
    /// and the subject as a label-0 candidate.
    pub fn export_corpus(&self, split: EvalSplit) -> Result<String, PipelineError> {
        let (facts, kg_facts) = match split {
            EvalSplit::Valid => (&self.ds.valid, self.ds.all_facts()),
            EvalSplit::Test => (&self.ds.test, self.ds.all_facts()),
        };
        let kg = self.ds.kg(&kg_facts);
        let budget = self.cfg.budgets().description;
        let mut out = String::new();
        for (q, _) in self.oriented(facts) {
            let query = self.query_text(&q, &kg, Some(q.o))?;
            let gold = verbalize_candidate(q.o, &self.ds.descriptions, budget)?.text;
            out.push_str(&format!("{query}\t{gold}\t1\n"));
            if q.s != q.o {
                let neg = verbalize_candidate(q.s, &self.ds.descriptions, budget)?.text;
                out.push_str(&format!("{query}\t{neg}\t0\n"));
            }
        }
        Ok(out)
    }
}
