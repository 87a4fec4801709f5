//! Synthetic search-then-answer environment.
//!
//! A generated corpus maps entity tokens to fact tokens, each entity with two
//! decoy facts. Actions are parsed against the `<search>`/`<answer>` tag
//! protocol; searches return three documents wrapped in `<information>` tags,
//! malformed actions get a fixed four-token correction message, and answers
//! end the episode with an exact-match reward.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::trajectory::{Segment, SegmentKind, TerminalReason, Trajectory};
use crate::vocab::{Roles, TokenId, Vocab};

/// Number of documents returned per search.
pub const DOCS_PER_SEARCH: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    /// entity → fact; for hop-linked entities the fact is the next entity.
    pub entries: BTreeMap<TokenId, TokenId>,
    /// entity → bridge entity for two-hop chains.
    pub hop_links: BTreeMap<TokenId, TokenId>,
    pub distractors: BTreeMap<TokenId, [TokenId; 2]>,
}

impl Corpus {
    pub fn is_entity(&self, tok: TokenId) -> bool {
        self.entries.contains_key(&tok)
    }

    pub fn fact(&self, entity: TokenId) -> Option<TokenId> {
        self.entries.get(&entity).copied()
    }

    /// Checks the corpus invariants against `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidConfig(format!("corpus: {msg}")));
        for (&e, &f) in &self.entries {
            for tok in [e, f] {
                if !vocab.contains(tok) || vocab.is_reserved(tok) {
                    return bad(format!("token {tok} is reserved or outside the vocabulary"));
                }
            }
            match self.distractors.get(&e) {
                Some(ds) => {
                    if ds.iter().any(|&d| !vocab.contains(d) || vocab.is_reserved(d) || d == f) {
                        return bad(format!("bad distractors for entity {e}"));
                    }
                }
                None => return bad(format!("entity {e} lacks distractors")),
            }
        }
        for (&from, &to) in &self.hop_links {
            if self.entries.get(&from) != Some(&to) || !self.is_entity(to) {
                return bad(format!("hop link {from}->{to} is not backed by an entry"));
            }
            // chains are acyclic when every walk terminates
            let mut cur = to;
            let mut steps = 0;
            while let Some(&next) = self.hop_links.get(&cur) {
                cur = next;
                steps += 1;
                if steps > self.hop_links.len() {
                    return bad(format!("hop links form a cycle through {from}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub query_id: String,
    pub prompt: Vec<TokenId>,
    pub gold: TokenId,
    pub hops: u8,
    pub max_turns: usize,
    /// Entity a correct first search names.
    pub entity: TokenId,
    /// True when another task in the family shares this task's correct first
    /// search but has a different gold answer.
    #[serde(default)]
    pub shared_prefix: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    Search(Vec<TokenId>),
    /// Answer tokens and their inclusive span inside the action segment.
    Answer {
        tokens: Vec<TokenId>,
        span: (usize, usize),
    },
    Invalid,
}

/// Parses one action. The first well-formed tag pair wins; a pair is well
/// formed when the opening tag is followed by at least one non-tag token and
/// then its closing tag.
pub fn parse_action(seg: &Segment, roles: &Roles) -> ParsedAction {
    if seg.kind != SegmentKind::Action {
        return ParsedAction::Invalid;
    }
    let toks = &seg.tokens;
    for (i, &tok) in toks.iter().enumerate() {
        let close = if tok == roles.search_open {
            roles.search_close
        } else if tok == roles.answer_open {
            roles.answer_close
        } else {
            continue;
        };
        let Some(rel) = toks[i + 1..].iter().position(|&t| roles.is_tag(t)) else {
            continue;
        };
        let j = i + 1 + rel;
        if toks[j] != close || j == i + 1 {
            continue;
        }
        let inner = toks[i + 1..j].to_vec();
        return if tok == roles.search_open {
            ParsedAction::Search(inner)
        } else {
            ParsedAction::Answer { tokens: inner, span: (i + 1, j - 1) }
        };
    }
    ParsedAction::Invalid
}

/// Top-3 documents for a query: the first known entity's fact and its two
/// decoys, or three no-hit markers.
pub fn retrieve(corpus: &Corpus, query: &[TokenId], roles: &Roles) -> [TokenId; DOCS_PER_SEARCH] {
    match query.iter().find(|t| corpus.is_entity(**t)) {
        Some(e) => {
            let [d1, d2] = corpus.distractors[e];
            [corpus.entries[e], d1, d2]
        }
        None => [roles.no_hit; DOCS_PER_SEARCH],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Feedback(Segment),
    Terminal(TerminalReason),
}

pub fn information_segment(docs: &[TokenId], roles: &Roles) -> Segment {
    let mut toks = Vec::with_capacity(docs.len() + 2);
    toks.push(roles.info_open);
    toks.extend_from_slice(docs);
    toks.push(roles.info_close);
    Segment::feedback(toks)
}

/// Environment transition after the action taken at 0-based turn `turn`.
pub fn step(task: &Task, corpus: &Corpus, roles: &Roles, turn: usize, action: &ParsedAction) -> StepOutcome {
    let budget_left = turn + 1 < task.max_turns;
    match action {
        ParsedAction::Answer { .. } => StepOutcome::Terminal(TerminalReason::Answered),
        ParsedAction::Search(q) if budget_left => {
            StepOutcome::Feedback(information_segment(&retrieve(corpus, q, roles), roles))
        }
        ParsedAction::Search(_) => StepOutcome::Terminal(TerminalReason::MaxTurns),
        ParsedAction::Invalid if budget_left => {
            StepOutcome::Feedback(Segment::feedback(roles.invalid_message.to_vec()))
        }
        ParsedAction::Invalid => StepOutcome::Terminal(TerminalReason::Invalid),
    }
}

/// Exact match: 1 iff the episode ended with an answer whose span is `[gold]`.
pub fn reward(t: &Trajectory, task: &Task) -> f64 {
    if t.terminal_reason != TerminalReason::Answered {
        return 0.0;
    }
    let Some(last) = t.actions().last() else { return 0.0 };
    match last.answer_span {
        Some((lo, hi)) if lo == hi && last.tokens.get(lo) == Some(&task.gold) => 1.0,
        _ => 0.0,
    }
}

/// Runs one episode; `actor` receives the flat history and the turn index.
pub fn rollout<F>(task: &Task, corpus: &Corpus, roles: &Roles, mut actor: F) -> Result<Trajectory>
where
    F: FnMut(&[TokenId], usize) -> Result<Segment>,
{
    if task.max_turns == 0 {
        return Err(LabError::InvalidConfig(format!("task {} has max_turns 0", task.query_id)));
    }
    let mut segments = vec![Segment::prompt(task.prompt.clone())];
    let mut history = task.prompt.clone();
    for turn in 0..task.max_turns {
        let mut action = actor(&history, turn)?;
        action.kind = SegmentKind::Action;
        let parsed = parse_action(&action, roles);
        if let ParsedAction::Answer { span, .. } = parsed {
            action.answer_span = Some(span);
        }
        history.extend_from_slice(&action.tokens);
        segments.push(action);
        match step(task, corpus, roles, turn, &parsed) {
            StepOutcome::Terminal(reason) => {
                return Ok(Trajectory::new(task.query_id.clone(), segments, reason));
            }
            StepOutcome::Feedback(fb) => {
                history.extend_from_slice(&fb.tokens);
                segments.push(fb);
            }
        }
    }
    unreachable!("the final turn always terminates")
}

/// Action sequence of an agent that knows the task's solution.
pub fn scripted_actions(task: &Task, corpus: &Corpus, roles: &Roles) -> Vec<Vec<TokenId>> {
    let search = |e| vec![roles.search_open, e, roles.search_close];
    let mut actions = vec![search(task.entity)];
    if task.hops == 2 {
        if let Some(&bridge) = corpus.hop_links.get(&task.entity) {
            actions.push(search(bridge));
        }
    }
    actions.push(vec![roles.answer_open, task.gold, roles.answer_close]);
    actions
}

pub fn scripted_rollout(task: &Task, corpus: &Corpus, roles: &Roles) -> Result<Trajectory> {
    let actions = scripted_actions(task, corpus, roles);
    rollout(task, corpus, roles, |_, turn| {
        let toks = actions.get(turn).cloned().unwrap_or_else(|| actions[actions.len() - 1].clone());
        Ok(Segment::action(toks))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub entities: usize,
    /// Fraction of two-hop tasks.
    pub hops_mix: f64,
    /// Fraction of tasks whose correct first search is shared with another
    /// task that has a different gold answer.
    pub prefix_share: f64,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    /// Defaults to 2 without two-hop tasks and 3 with them.
    pub max_turns: Option<usize>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            vocab_size: 64,
            entities: 16,
            hops_mix: 0.0,
            prefix_share: 0.0,
            train_tasks: 64,
            eval_tasks: 32,
            max_turns: None,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn effective_max_turns(&self) -> usize {
        self.max_turns.unwrap_or(if self.hops_mix > 0.0 { 3 } else { 2 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.hops_mix) || !(0.0..=1.0).contains(&self.prefix_share) {
            return bad("hops_mix and prefix_share must lie in [0, 1]".into());
        }
        if self.entities < 4 {
            return bad(format!("need at least 4 entities, got {}", self.entities));
        }
        let mt = self.effective_max_turns();
        if !(2..=3).contains(&mt) {
            return bad(format!("max_turns must be 2 or 3, got {mt}"));
        }
        if self.hops_mix > 0.0 && mt < 3 {
            return bad("two-hop tasks need max_turns 3".into());
        }
        let needed = crate::vocab::RESERVED_COUNT + MARKERS + 2 * self.entities;
        if self.vocab_size < needed {
            return bad(format!("vocab_size {} too small; need {needed}", self.vocab_size));
        }
        Ok(())
    }
}

const MARKERS: usize = 3;

/// Question-type tokens placed before the entity in every prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    /// "what is the fact of e"
    pub fact: TokenId,
    /// "what is the first alternative listed for e"
    pub alt: TokenId,
    /// "what is the fact of the entity e points to"
    pub bridge: TokenId,
}

/// Generated world: vocabulary, corpus and train/held-out task splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub config: EnvConfig,
    pub vocab: Vocab,
    pub markers: Markers,
    pub corpus: Corpus,
    pub train: Vec<Task>,
    pub eval: Vec<Task>,
}

impl TaskSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ts: TaskSet = serde_json::from_slice(&std::fs::read(path)?)?;
        ts.corpus.validate(&ts.vocab)?;
        Ok(ts)
    }
}

/// Generates a deterministic corpus and task family from `cfg`.
///
/// Shared-prefix tasks come in pairs on one entity: one asks for the fact,
/// the other for the first decoy. Both are solved by the same first search
/// and see the same documents, so only the prompt tells them apart.
pub fn generate(cfg: &EnvConfig) -> Result<TaskSet> {
    cfg.validate()?;
    let vocab = Vocab::standard(cfg.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let content = vocab.content_tokens();
    let markers = Markers { fact: content[0], alt: content[1], bridge: content[2] };
    let n = cfg.entities;
    let entities: Vec<TokenId> = content[MARKERS..MARKERS + n].to_vec();
    let mut facts: Vec<TokenId> = content[MARKERS + n..MARKERS + 2 * n].to_vec();
    facts.shuffle(&mut rng);

    // hop sources link into the next block of entities
    let n_links = if cfg.hops_mix > 0.0 { (n / 4).max(1) } else { 0 };
    let mut corpus = Corpus { entries: BTreeMap::new(), hop_links: BTreeMap::new(), distractors: BTreeMap::new() };
    for (i, &e) in entities.iter().enumerate() {
        if i < n_links {
            let bridge = entities[n_links + i];
            corpus.entries.insert(e, bridge);
            corpus.hop_links.insert(e, bridge);
        } else {
            corpus.entries.insert(e, facts[i]);
        }
    }
    let answer_facts: Vec<TokenId> = facts[n_links..].to_vec();
    for &e in &entities {
        let own = corpus.entries[&e];
        let pool: Vec<TokenId> = answer_facts.iter().copied().filter(|&f| f != own).collect();
        let picks: Vec<TokenId> = pool.choose_multiple(&mut rng, 2).copied().collect();
        corpus.distractors.insert(e, [picks[0], picks[1]]);
    }
    corpus.validate(&vocab)?;

    let sources: Vec<TokenId> = entities[..n_links].to_vec();
    let single: Vec<TokenId> = entities[n_links..].to_vec();
    let max_turns = cfg.effective_max_turns();
    let make_family = |count: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<Task> {
        let mut tasks = Vec::with_capacity(count);
        let n_two_hop = if sources.is_empty() { 0 } else { (cfg.hops_mix * count as f64).round() as usize };
        let n_shared = {
            let s = (cfg.prefix_share * (count - n_two_hop) as f64).round() as usize;
            s - s % 2
        };
        for _ in 0..n_two_hop {
            let e = *sources.choose(rng).expect("non-empty");
            let bridge = corpus.hop_links[&e];
            tasks.push(Task {
                query_id: String::new(),
                prompt: vec![markers.bridge, e],
                gold: corpus.entries[&bridge],
                hops: 2,
                max_turns,
                entity: e,
                shared_prefix: false,
            });
        }
        for _ in 0..n_shared / 2 {
            let e = *single.choose(rng).expect("non-empty");
            tasks.push(Task {
                query_id: String::new(),
                prompt: vec![markers.fact, e],
                gold: corpus.entries[&e],
                hops: 1,
                max_turns,
                entity: e,
                shared_prefix: true,
            });
            tasks.push(Task {
                query_id: String::new(),
                prompt: vec![markers.alt, e],
                gold: corpus.distractors[&e][0],
                hops: 1,
                max_turns,
                entity: e,
                shared_prefix: true,
            });
        }
        while tasks.len() < count {
            let e = *single.choose(rng).expect("non-empty");
            tasks.push(Task {
                query_id: String::new(),
                prompt: vec![markers.fact, e],
                gold: corpus.entries[&e],
                hops: 1,
                max_turns,
                entity: e,
                shared_prefix: false,
            });
        }
        tasks.shuffle(rng);
        for (i, t) in tasks.iter_mut().enumerate() {
            t.query_id = format!("{prefix}-{i:04}");
        }
        tasks
    };
    let train = make_family(cfg.train_tasks, "train", &mut rng);
    let eval = make_family(cfg.eval_tasks, "eval", &mut rng);
    Ok(TaskSet { config: cfg.clone(), vocab, markers, corpus, train, eval })
}

/// Uniform draw used by callers that sample tasks.
pub fn pick<'a, R: Rng>(tasks: &'a [Task], rng: &mut R) -> &'a Task {
    &tasks[rng.gen_range(0..tasks.len())]
}
