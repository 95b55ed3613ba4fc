//! Uses of program scores: best-program selection, answer refusal with a
//! fallback model, test-guided re-prompting, and reward records for
//! reward-weighted fine-tuning.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatClient, Sampling};
use crate::perception::{ImageHandle, Perception, PerceptionError};
use crate::progclient::{request_programs, Correction, ProgClientError, ProgramPrompt};
use crate::scoring::{score_pool, select_best, ScoreConfig, ScoreError, ScoredProgram, UnitTest};
use crate::templates::Task;
use crate::text::normalize_answer;
use crate::transport::ServiceError;
use crate::vpdsl::{ExecutionOutcome, ProgramSource};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("record {0} has no gold answer")]
    MissingGold(String),
    #[error("{0} examples but {1} program lists")]
    Misaligned(usize, usize),
}

impl From<PerceptionError> for PolicyError {
    fn from(e: PerceptionError) -> Self {
        PolicyError::Score(ScoreError::Backend(e))
    }
}

/// Winner of a scored pool and its answer on the target image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub outcome: ExecutionOutcome,
    /// Position of the winner in `scored`.
    pub winner: usize,
    pub scored: Vec<ScoredProgram>,
}

impl Selection {
    pub fn best(&self) -> &ScoredProgram {
        &self.scored[self.winner]
    }

    pub fn best_score(&self) -> f64 {
        self.best().aggregate
    }
}

/// Picks the winner of an already scored pool and runs it on `image`. An
/// error outcome on the target image is a valid result.
pub fn select_scored(
    scored: Vec<ScoredProgram>,
    image: &ImageHandle,
    backend: &dyn Perception,
    cfg: &ScoreConfig,
) -> Result<Selection, PolicyError> {
    let winner = select_best(&scored)?;
    let outcome = scored[winner].execute(image, backend, cfg.budget_secs)?;
    Ok(Selection { outcome, winner, scored })
}

pub fn run_selection(
    image: &ImageHandle,
    pool: &[ProgramSource],
    suite: &[UnitTest],
    backend: &dyn Perception,
    cfg: &ScoreConfig,
) -> Result<Selection, PolicyError> {
    if pool.is_empty() {
        return Err(ScoreError::EmptyPool.into());
    }
    select_scored(score_pool(pool, suite, backend, cfg)?, image, backend, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Ask the query directly of the VQA capability on the whole image.
    VqaModel,
    /// Image-text similarity of the query's statement against a threshold.
    ItmThreshold,
}

impl Fallback {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Vqa => Fallback::VqaModel,
            Task::Itm => Fallback::ItmThreshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefusalConfig {
    pub threshold: f64,
    pub fallback: Fallback,
    /// Similarity at or above which the ITM fallback answers "yes".
    pub itm_threshold: f64,
}

impl Default for RefusalConfig {
    fn default() -> Self {
        RefusalConfig { threshold: 0.7, fallback: Fallback::VqaModel, itm_threshold: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefusalDecision {
    pub refused: bool,
    pub best_score: f64,
    pub threshold: f64,
    /// Answer of the selected program on the target image, kept even when
    /// it was not used.
    pub program_outcome: ExecutionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Fallback>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_answer: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefusalResult {
    pub outcome: ExecutionOutcome,
    pub decision: RefusalDecision,
    pub selection: Selection,
}

/// True when the best score falls strictly below the threshold.
pub fn should_refuse(best_score: f64, threshold: f64) -> bool {
    best_score < threshold
}

fn itm_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"text\s*=\s*"(.*)"\s*$"#).unwrap())
}

/// Statement of a `Verify image matches text="..."` query, or the query
/// itself when it has another shape.
pub fn itm_statement(query: &str) -> &str {
    itm_re().captures(query.trim()).and_then(|c| c.get(1)).map_or(query.trim(), |m| m.as_str())
}

pub fn fallback_answer(
    fallback: Fallback,
    query: &str,
    image: &ImageHandle,
    backend: &dyn Perception,
    itm_threshold: f64,
) -> Result<String, PerceptionError> {
    match fallback {
        Fallback::VqaModel => backend.simple_query(image, image.full_box(), query),
        Fallback::ItmThreshold => {
            let s = backend.itm_score(image, image.full_box(), itm_statement(query))?;
            Ok(if s >= itm_threshold { "yes" } else { "no" }.to_string())
        }
    }
}

/// Applies the refusal rule to an existing selection.
pub fn refuse_or_answer(
    selection: Selection,
    query: &str,
    image: &ImageHandle,
    backend: &dyn Perception,
    cfg: &RefusalConfig,
) -> Result<RefusalResult, PolicyError> {
    let best_score = selection.best_score();
    let refused = should_refuse(best_score, cfg.threshold);
    let mut decision = RefusalDecision {
        refused,
        best_score,
        threshold: cfg.threshold,
        program_outcome: selection.outcome.clone(),
        fallback: None,
        fallback_answer: None,
    };
    let outcome = if refused {
        let answer = fallback_answer(cfg.fallback, query, image, backend, cfg.itm_threshold)?;
        decision.fallback = Some(cfg.fallback);
        decision.fallback_answer = Some(answer.clone());
        ExecutionOutcome::answer(answer)
    } else {
        selection.outcome.clone()
    };
    Ok(RefusalResult { outcome, decision, selection })
}

pub fn run_refusal(
    query: &str,
    image: &ImageHandle,
    pool: &[ProgramSource],
    suite: &[UnitTest],
    backend: &dyn Perception,
    score_cfg: &ScoreConfig,
    cfg: &RefusalConfig,
) -> Result<RefusalResult, PolicyError> {
    let selection = run_selection(image, pool, suite, backend, score_cfg)?;
    refuse_or_answer(selection, query, image, backend, cfg)
}

/// F1 of refusals, counting a refusal of a program that would have failed
/// as a true positive. Returns 0 when there is no true positive (including
/// the undefined case with no positives at all).
pub fn refusal_f1(decisions: &[(bool, bool)]) -> f64 {
    let tp = decisions.iter().filter(|(r, f)| *r && *f).count();
    let fp = decisions.iter().filter(|(r, f)| *r && !*f).count();
    let fneg = decisions.iter().filter(|(r, f)| !*r && *f).count();
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// One executed test as shown to the model when re-prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFeedback {
    pub caption: String,
    pub expected: String,
    pub predicted: String,
}

pub fn feedback_for(program: &ScoredProgram) -> Vec<TestFeedback> {
    program
        .per_test
        .iter()
        .map(|t| TestFeedback {
            caption: t.caption.clone(),
            expected: t.expected.clone(),
            predicted: match &t.outcome.answer {
                Some(a) => a.clone(),
                None => format!("Error: {}", t.outcome.diagnostic.as_deref().unwrap_or("")),
            },
        })
        .collect()
}

fn test_label(i: usize) -> String {
    match u8::try_from(i).ok().filter(|&i| i < 26) {
        Some(i) => char::from(b'A' + i).to_string(),
        None => (i + 1).to_string(),
    }
}

/// `Test A / Image Content / Ground Truth Answer / Program Output` blocks.
pub fn render_feedback(feedback: &[TestFeedback]) -> String {
    let mut out = String::new();
    for (i, f) in feedback.iter().enumerate() {
        out.push_str(&format!(
            "Test {}\nImage Content: \"{}\"\nGround Truth Answer: \"{}\"\nProgram Output: \"{}\"\n",
            test_label(i),
            f.caption,
            f.expected,
            f.predicted
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepromptConfig {
    pub threshold: f64,
    pub max_iterations: usize,
    pub programs_per_round: usize,
}

impl Default for RepromptConfig {
    fn default() -> Self {
        RepromptConfig { threshold: 0.7, max_iterations: 3, programs_per_round: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepromptIteration {
    pub iteration: usize,
    pub generated: usize,
    /// Best score among this round's programs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_best: Option<f64>,
    pub best_so_far: f64,
    /// Generation index of the best program so far.
    pub best_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepromptResult {
    pub outcome: ExecutionOutcome,
    pub best: ScoredProgram,
    pub initial_best: f64,
    pub trace: Vec<RepromptIteration>,
}

pub struct RepromptInputs<'a> {
    pub task: Task,
    pub query: &'a str,
    pub image: &'a ImageHandle,
    pub suite: &'a [UnitTest],
    pub backend: &'a dyn Perception,
    pub llm: &'a dyn ChatClient,
    pub sampling: &'a Sampling,
    pub score: &'a ScoreConfig,
}

/// Re-prompts with the best program so far and its test feedback until a
/// program reaches the threshold or the iteration budget runs out. The best
/// program seen overall answers; a new program replaces it only when it
/// scores strictly higher.
pub fn run_reprompt_scored(
    initial: Vec<ScoredProgram>,
    inputs: &RepromptInputs<'_>,
    cfg: &RepromptConfig,
) -> Result<RepromptResult, PolicyError> {
    let winner = select_best(&initial)?;
    let mut next_index = initial.iter().map(|p| p.source.index + 1).max().unwrap_or(0);
    let mut best = initial.into_iter().nth(winner).expect("winner is in range");
    let initial_best = best.aggregate;
    let mut trace = Vec::new();
    for iteration in 1..=cfg.max_iterations {
        if best.aggregate >= cfg.threshold {
            break;
        }
        let mut prompt = ProgramPrompt::new(inputs.task, inputs.query);
        prompt.correction =
            Some(Correction { program: best.source.text.clone(), feedback: render_feedback(&feedback_for(&best)) });
        let programs =
            match request_programs(prompt.render(), cfg.programs_per_round, inputs.llm, inputs.sampling, next_index) {
                Ok(p) => p,
                Err(ProgClientError::EmptyGeneration(_)) => Vec::new(),
                Err(ProgClientError::Service(e)) => return Err(e.into()),
                Err(ProgClientError::ZeroPrograms) => return Err(ScoreError::EmptyPool.into()),
            };
        next_index += programs.len();
        let scored = score_pool(&programs, inputs.suite, inputs.backend, inputs.score)?;
        let round_best = select_best(&scored).ok();
        let round_score = round_best.map(|i| scored[i].aggregate);
        if let Some(i) = round_best {
            if scored[i].aggregate > best.aggregate {
                best = scored.into_iter().nth(i).expect("index in range");
            }
        }
        trace.push(RepromptIteration {
            iteration,
            generated: programs.len(),
            round_best: round_score,
            best_so_far: best.aggregate,
            best_index: best.source.index,
        });
    }
    let outcome = best.execute(inputs.image, inputs.backend, inputs.score.budget_secs)?;
    Ok(RepromptResult { outcome, best, initial_best, trace })
}

pub fn run_reprompt(
    initial_pool: &[ProgramSource],
    inputs: &RepromptInputs<'_>,
    cfg: &RepromptConfig,
) -> Result<RepromptResult, PolicyError> {
    if initial_pool.is_empty() {
        return Err(ScoreError::EmptyPool.into());
    }
    let scored = score_pool(initial_pool, inputs.suite, inputs.backend, inputs.score)?;
    run_reprompt_scored(scored, inputs, cfg)
}

/// 1 when the score reaches the threshold, the score itself otherwise.
pub fn unit_test_reward(score: f64, threshold: f64) -> f64 {
    if score >= threshold {
        1.0
    } else {
        score
    }
}

/// 1 for a normalized match with the gold answer; errors never match.
pub fn correctness_reward(outcome: &ExecutionOutcome, gold: &str) -> f64 {
    if outcome.is_answer() && normalize_answer(outcome.answer_text()) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn training_weight(raw: f64) -> f64 {
    raw.max(0.0)
}

/// True iff the last mean reward is strictly below the one before it.
pub fn stop_rule(mean_rewards: &[f64]) -> bool {
    matches!(mean_rewards, [.., prev, last] if last < prev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    UnitTest,
    Correctness,
}

impl std::str::FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unit_test" => Ok(RewardKind::UnitTest),
            "correctness" => Ok(RewardKind::Correctness),
            other => Err(format!("unknown reward kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub id: String,
    pub query: String,
    pub program: String,
    pub raw_reward: f64,
    pub training_weight: f64,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RewardExample {
    pub id: String,
    pub query: String,
    pub image: ImageHandle,
    pub gold: Option<String>,
}

pub struct RewardInputs<'a> {
    pub examples: &'a [RewardExample],
    /// Programs per example, aligned with `examples`.
    pub programs: &'a [Vec<ProgramSource>],
    /// Test suite per example; only read for [`RewardKind::UnitTest`].
    pub suites: Option<&'a [Vec<UnitTest>]>,
    pub backend: &'a dyn Perception,
    pub score: &'a ScoreConfig,
}

fn reward_for(
    inputs: &RewardInputs<'_>,
    i: usize,
    program: &ProgramSource,
    kind: RewardKind,
    threshold: f64,
) -> Result<f64, PolicyError> {
    let ex = &inputs.examples[i];
    match kind {
        RewardKind::UnitTest => {
            let suite = inputs.suites.and_then(|s| s.get(i)).ok_or(ScoreError::EmptySuite)?;
            let scored = crate::scoring::score_program(program, suite, inputs.backend, inputs.score)?;
            Ok(unit_test_reward(scored.aggregate, threshold))
        }
        RewardKind::Correctness => {
            let gold = ex.gold.as_deref().ok_or_else(|| PolicyError::MissingGold(ex.id.clone()))?;
            let outcome = match crate::vpdsl::parse_program(program) {
                Ok(ast) => crate::vpdsl::execute_checked(&ast, &ex.image, inputs.backend, inputs.score.budget_secs)?,
                Err(e) => ExecutionOutcome::compile_error(&e),
            };
            Ok(correctness_reward(&outcome, gold))
        }
    }
}

/// One record per (example, program). A failing record yields an error in
/// its slot without stopping the others.
pub fn emit_reward_dataset(
    inputs: &RewardInputs<'_>,
    kind: RewardKind,
    threshold: f64,
    iteration: usize,
) -> Result<Vec<Result<RewardRecord, PolicyError>>, PolicyError> {
    if inputs.examples.len() != inputs.programs.len() {
        return Err(PolicyError::Misaligned(inputs.examples.len(), inputs.programs.len()));
    }
    let mut out = Vec::new();
    for (i, (ex, programs)) in inputs.examples.iter().zip(inputs.programs).enumerate() {
        for p in programs {
            out.push(reward_for(inputs, i, p, kind, threshold).map(|raw| RewardRecord {
                id: ex.id.clone(),
                query: ex.query.clone(),
                program: p.text.clone(),
                raw_reward: raw,
                training_weight: training_weight(raw),
                iteration,
                gold: ex.gold.clone(),
            }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedChat;
    use crate::perception::{BBox, SceneGraph, SceneObject, ScriptedBackend};
    use crate::vpdsl::OutcomeKind;
    use proptest::prelude::*;

    fn scene(cats: usize, dogs: usize) -> ImageHandle {
        let mut s = SceneGraph::new(200, 200);
        for i in 0..cats as i64 {
            s = s.with_object(SceneObject::new("cat", BBox::new(i * 20, 0, i * 20 + 10, 10)));
        }
        for i in 0..dogs as i64 {
            s = s.with_object(SceneObject::new("dog", BBox::new(i * 20, 100, i * 20 + 10, 110)));
        }
        s.qa_facts.insert("Is there a cat?".into(), "yes".into());
        s.match_facts.insert("a cat".into(), true);
        ImageHandle::from_scene(s)
    }

    fn prog(i: usize, body: &str) -> ProgramSource {
        ProgramSource::fixture(format!("def execute_command(image):\n    {body}\n"), i)
    }

    const HAS_CAT: &str = "return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)";

    fn suite() -> Vec<UnitTest> {
        vec![
            UnitTest::new("a cat", "yes", scene(1, 0)),
            UnitTest::new("a dog", "no", scene(0, 1)),
            UnitTest::new("two cats", "yes", scene(2, 0)),
            UnitTest::new("a cat and a dog", "yes", scene(1, 1)),
            UnitTest::new("nothing", "no", scene(0, 0)),
        ]
    }

    #[test]
    fn selection_picks_logic_correct_program() {
        let pool = [
            prog(0, "return 'yes'"),
            prog(1, "return bool_to_yesno(len(ImagePatch(image).find('cat')) == 1)"),
            prog(2, HAS_CAT),
            prog(3, "return ImagePatch(image).find('cat')[0].category"),
        ];
        let b = ScriptedBackend::new();
        let sel = run_selection(&scene(3, 0), &pool, &suite(), &b, &ScoreConfig::default()).unwrap();
        assert_eq!(sel.winner, 2);
        assert_eq!(sel.outcome.answer_text(), "yes");
    }

    #[test]
    fn winner_error_surfaces() {
        let pool = [prog(0, "return bool_to_yesno(ImagePatch(image).find('cat')[0].width > 0)")];
        let b = ScriptedBackend::new();
        let sel = run_selection(&scene(0, 0), &pool, &suite(), &b, &ScoreConfig::default()).unwrap();
        assert_eq!(sel.outcome.kind, OutcomeKind::RuntimeError);
    }

    #[test]
    fn strict_refusal_rule() {
        assert!(should_refuse(0.6, 0.7));
        assert!(!should_refuse(0.7, 0.7));
        assert!(!should_refuse(-0.1, -1.0));
    }

    #[test]
    fn fallbacks() {
        let b = ScriptedBackend::new();
        let img = scene(1, 0);
        assert_eq!(fallback_answer(Fallback::VqaModel, "Is there a cat?", &img, &b, 0.8).unwrap(), "yes");
        let q = "Verify image matches text=\"a cat\"";
        assert_eq!(itm_statement(q), "a cat");
        assert_eq!(fallback_answer(Fallback::ItmThreshold, q, &img, &b, 0.8).unwrap(), "yes");
        // unlisted statement scores 0.5
        let q = "Verify image matches text=\"a horse\"";
        assert_eq!(fallback_answer(Fallback::ItmThreshold, q, &img, &b, 0.8).unwrap(), "no");
        assert_eq!(fallback_answer(Fallback::ItmThreshold, q, &img, &b, 0.5).unwrap(), "yes");
    }

    #[test]
    fn refusal_uses_fallback_below_threshold() {
        let b = ScriptedBackend::new();
        let pool = [prog(0, "return 'no'")];
        let cfg = RefusalConfig::default();
        let r = run_refusal("Is there a cat?", &scene(1, 0), &pool, &suite(), &b, &ScoreConfig::default(), &cfg).unwrap();
        assert!(r.decision.refused);
        assert_eq!(r.outcome.answer_text(), "yes");
        assert_eq!(r.decision.program_outcome.answer_text(), "no");
        let cfg = RefusalConfig { threshold: -1.0, ..cfg };
        let r = run_refusal("Is there a cat?", &scene(1, 0), &pool, &suite(), &b, &ScoreConfig::default(), &cfg).unwrap();
        assert!(!r.decision.refused);
        assert_eq!(r.outcome.answer_text(), "no");
    }

    #[test]
    fn f1_arithmetic() {
        let d = [(true, true), (true, true), (true, false), (false, true), (false, false)];
        assert!((refusal_f1(&d) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(refusal_f1(&[(true, true), (true, true)]), 1.0);
        assert_eq!(refusal_f1(&[(false, true), (false, false)]), 0.0);
        assert_eq!(refusal_f1(&[(false, false)]), 0.0);
    }

    #[test]
    fn feedback_block_format() {
        let f = [
            TestFeedback { caption: "a cat".into(), expected: "yes".into(), predicted: "no".into() },
            TestFeedback { caption: "a dog".into(), expected: "no".into(), predicted: "Error: boom".into() },
        ];
        assert_eq!(
            render_feedback(&f),
            "Test A\nImage Content: \"a cat\"\nGround Truth Answer: \"yes\"\nProgram Output: \"no\"\n\
             Test B\nImage Content: \"a dog\"\nGround Truth Answer: \"no\"\nProgram Output: \"Error: boom\"\n"
        );
    }

    fn fenced(body: &str) -> String {
        format!("```python\ndef execute_command(image):\n    {body}\n```")
    }

    #[test]
    fn reprompt_exits_after_fix() {
        let b = ScriptedBackend::new();
        let chat = ScriptedChat::queued(vec![vec![fenced(HAS_CAT)]]);
        let suite = suite();
        let img = scene(1, 0);
        let inputs = RepromptInputs {
            task: Task::Vqa,
            query: "Is there a cat?",
            image: &img,
            suite: &suite,
            backend: &b,
            llm: &chat,
            sampling: &Sampling::default(),
            score: &ScoreConfig::default(),
        };
        let cfg = RepromptConfig { threshold: 0.7, max_iterations: 3, programs_per_round: 1 };
        let r = run_reprompt(&[prog(0, "return 'yes'")], &inputs, &cfg).unwrap();
        assert_eq!(r.initial_best, 0.6);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.best.aggregate, 1.0);
        assert_eq!(r.best.source.index, 1);
        assert_eq!(chat.calls(), 1);
        let prompt = chat.requests()[0].prompt().to_string();
        assert!(prompt.contains("Incorrect Program:\ndef execute_command(image):\n    return 'yes'"));
        assert!(prompt.contains("Test B\nImage Content: \"a dog\"\nGround Truth Answer: \"no\"\nProgram Output: \"yes\""));
    }

    #[test]
    fn reprompt_skipped_when_threshold_met() {
        let b = ScriptedBackend::new();
        let chat = ScriptedChat::queued(vec![]);
        let suite = suite();
        let img = scene(1, 0);
        let inputs = RepromptInputs {
            task: Task::Vqa,
            query: "q",
            image: &img,
            suite: &suite,
            backend: &b,
            llm: &chat,
            sampling: &Sampling::default(),
            score: &ScoreConfig::default(),
        };
        let r = run_reprompt(&[prog(0, HAS_CAT)], &inputs, &RepromptConfig::default()).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(chat.calls(), 0);
    }

    #[test]
    fn rewards() {
        assert_eq!(unit_test_reward(0.9, 0.8), 1.0);
        assert_eq!(unit_test_reward(0.8, 0.8), 1.0);
        assert_eq!(unit_test_reward(0.5, 0.8), 0.5);
        assert_eq!(unit_test_reward(-0.1, 0.8), -0.1);
        assert_eq!(training_weight(-0.1), 0.0);
        assert_eq!(correctness_reward(&ExecutionOutcome::answer("yes"), "yes"), 1.0);
        assert_eq!(correctness_reward(&ExecutionOutcome::answer("no"), "yes"), 0.0);
        let err = ExecutionOutcome::failure(OutcomeKind::RuntimeError, "x");
        assert_eq!(correctness_reward(&err, "yes"), 0.0);
    }

    #[test]
    fn stop_rule_cases() {
        assert!(stop_rule(&[0.5, 0.6, 0.55]));
        assert!(!stop_rule(&[0.5, 0.6]));
        assert!(!stop_rule(&[0.5]));
        assert!(!stop_rule(&[0.5, 0.5]));
    }

    #[test]
    fn reward_dataset() {
        let b = ScriptedBackend::new();
        let examples: Vec<_> = (0..3)
            .map(|i| RewardExample {
                id: format!("r{i}"),
                query: "Is there a cat?".into(),
                image: scene(1, 0),
                gold: Some("yes".into()),
            })
            .collect();
        let programs = vec![vec![prog(0, HAS_CAT)], vec![prog(0, "return 'yes'")], vec![prog(0, "return [][0]")]];
        let suites = vec![suite(), suite(), suite()];
        let cfg = ScoreConfig::default();
        let inputs =
            RewardInputs { examples: &examples, programs: &programs, suites: Some(&suites), backend: &b, score: &cfg };
        let recs: Vec<_> =
            emit_reward_dataset(&inputs, RewardKind::UnitTest, 0.8, 1).unwrap().into_iter().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 3);
        let raw: Vec<f64> = recs.iter().map(|r| r.raw_reward).collect();
        assert_eq!(raw, [1.0, 0.6, -0.1]);
        let w: Vec<f64> = recs.iter().map(|r| r.training_weight).collect();
        assert_eq!(w, [1.0, 0.6, 0.0]);

        let with = emit_reward_dataset(&inputs, RewardKind::Correctness, 0.8, 1).unwrap();
        let without = RewardInputs { suites: None, ..inputs };
        let without = emit_reward_dataset(&without, RewardKind::Correctness, 0.8, 1).unwrap();
        let a: Vec<_> = with.into_iter().map(Result::unwrap).collect();
        let c: Vec<_> = without.into_iter().map(Result::unwrap).collect();
        assert_eq!(a, c);
        assert_eq!(a.iter().map(|r| r.raw_reward).collect::<Vec<_>>(), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn reward_errors_do_not_abort_stream() {
        let b = ScriptedBackend::new();
        let examples = vec![
            RewardExample { id: "a".into(), query: "q".into(), image: scene(1, 0), gold: None },
            RewardExample { id: "b".into(), query: "q".into(), image: scene(1, 0), gold: Some("yes".into()) },
        ];
        let programs = vec![vec![prog(0, HAS_CAT)], vec![prog(0, HAS_CAT)]];
        let cfg = ScoreConfig::default();
        let inputs = RewardInputs { examples: &examples, programs: &programs, suites: None, backend: &b, score: &cfg };
        let out = emit_reward_dataset(&inputs, RewardKind::Correctness, 0.8, 0).unwrap();
        assert!(matches!(out[0], Err(PolicyError::MissingGold(_))));
        assert!(out[1].is_ok());
    }

    proptest! {
        #[test]
        fn reward_ranges(s in -0.1f64..=1.0, theta in -0.1f64..=1.0) {
            let r = unit_test_reward(s, theta);
            prop_assert!((-0.1..=1.0).contains(&r));
            prop_assert!((0.0..=1.0).contains(&training_weight(r)));
        }

        #[test]
        fn refusal_monotone_in_threshold(scores in proptest::collection::vec(-0.1f64..=1.0, 1..20), a in -0.2f64..1.1, b in -0.2f64..1.1) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for s in scores {
                if should_refuse(s, lo) {
                    prop_assert!(should_refuse(s, hi));
                }
            }
        }
    }
}
